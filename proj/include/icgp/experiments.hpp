#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icgp/dataset.hpp"
#include "icgp/pretrain.hpp"

namespace icgp {

struct ExperimentConfig {
  bool centralized = false;
  std::optional<ContextAlg> context;  // unset: EXP3 / V-learning / VI-ULCB by mode and dims
  Dims dims{1, 1, 5, 5};
  int episodes = 3000;
  std::vector<int> n_pretrain{10, 20};
  int inference_games = 10;
  int train_seeds = 2;
  std::uint64_t seed = 1;
  double c = 1.0;
  std::optional<double> delta;
  int n_mwu = 0;
  std::optional<double> eta;
  TrainConfig train;
  bool round2 = false;
  double final_fraction = 0.1;  // window for first/last comparisons

  ContextAlg context_alg() const;
  ContextConfig context_config() const;
  EmbeddingRole role_for(Player p) const;
  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  // Canonical key=value text; parse(to_text()) round-trips.
  std::string to_text() const;
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
};

std::uint64_t fnv1a(const std::string& text);

// Seed namespaces: pretraining games, inference games, model init, play.
std::uint64_t pretrain_base_seed(const ExperimentConfig& cfg);
std::uint64_t inference_game_seed(const ExperimentConfig& cfg, int j);
std::uint64_t train_seed(const ExperimentConfig& cfg, int k);
std::uint64_t play_seed(const ExperimentConfig& cfg, int j, const std::string& series, int k);

enum class EvalRule {
  running_average,    // H = S = 1: matrix gap of the running-average policies
  per_episode,        // centralized: gap of the episode's marginals
  v_learning_output,  // decentralized H > 1: alpha-weighted mixture of visited policies
};

std::string to_string(EvalRule r);
EvalRule eval_rule(const ExperimentConfig& cfg);

// Per-episode NE gap (clamped at 0) of a play log.
std::vector<double> gap_curve(const MarkovGame& game, const PlayLog& log, EvalRule rule);

struct GapCurve {
  std::string label;
  std::vector<double> mean;
  std::vector<double> stderr_;
};

// Mean and standard error across games (one row per game).
GapCurve aggregate_curve(const std::string& label, const std::vector<std::vector<double>>& rows);

double window_mean(const std::vector<double>& curve, int first, int last);  // [first, last)
double head_mean(const std::vector<double>& curve, double fraction);
double tail_mean(const std::vector<double>& curve, double fraction);

std::string curves_csv(const std::vector<GapCurve>& curves);
std::string curves_svg(const std::vector<GapCurve>& curves, const std::string& title);

std::string context_series(const ExperimentConfig& cfg);
std::string transformer_series(int n);
std::string checkpoint_name(int n, int k, EmbeddingRole role);

// Staged pipeline over an output directory with a manifest. Each stage is
// skipped when the manifest records it as done for the same config and its
// files exist; a stage that reruns invalidates the later ones.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::string out_dir, int threads);

  void collect();
  void train();
  void infer();
  void eval();
  void run();

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& out_dir() const { return out_; }
  std::vector<GapCurve> load_curves() const;
  bool stage_done(const std::string& stage) const;

 private:
  std::string path(const std::string& name) const;
  void mark_done(const std::string& stage, const std::vector<std::string>& files);
  void invalidate_after(const std::string& stage);
  void write_manifest() const;
  void load_manifest();

  ExperimentConfig cfg_;
  std::string out_;
  int threads_;
  std::string fingerprint_;
  struct StageState {
    std::string name;
    bool done = false;
    std::string fingerprint;
    std::vector<std::string> files;
  };
  std::vector<StageState> stages_;
};

// Reads curves.csv back.
std::vector<GapCurve> read_curves_csv(const std::string& path);

}  // namespace icgp
