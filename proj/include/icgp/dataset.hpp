#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icgp/game.hpp"
#include "icgp/transformer.hpp"

namespace icgp {

enum class ContextAlg { exp3, v_learning, vi_ulcb };

std::string to_string(ContextAlg alg);
ContextAlg context_alg_from_string(const std::string& s);

struct ContextConfig {
  ContextAlg alg = ContextAlg::exp3;
  int episodes = 1;             // G
  double c = 1.0;               // bonus constant (V-learning, VI-ULCB)
  std::optional<double> delta;  // unset means 1 / T
  int n_mwu = 0;                // VI-ULCB MWU rounds; <= 0 means G
  std::optional<double> eta;    // EXP3 learning rate; unset means the default
};

// H = S = 1 uses the matrix sampler, anything else the cyclic family.
MarkovGame sample_game(const Dims& dims, std::uint64_t seed);

// One augmented action sample at global step t (0-based) and state s.
struct AugEntry {
  int t = 0;
  int s = 0;
  int a = 0;
  int b = 0;

  bool operator==(const AugEntry&) const = default;
};

struct TrajectoryRecord {
  std::uint64_t game_seed = 0;
  Dims dims;
  std::vector<EpisodeStep> steps;  // T = G H
  std::vector<AugEntry> aug;       // T S, ordered by (t, s)

  int episodes() const { return dims.H > 0 ? static_cast<int>(steps.size()) / dims.H : 0; }
  // Throws std::invalid_argument on size or index violations.
  void validate() const;

  bool operator==(const TrajectoryRecord&) const = default;
};

// Policies in force at every (t, s) of a run: the player's action
// distribution at step h = t mod H if the state were s.
struct PlayLog {
  Dims dims;
  int episodes = 0;
  std::vector<EpisodeStep> steps;
  std::vector<double> max_policy;  // (t, s, a)
  std::vector<double> min_policy;  // (t, s, b)

  PlayLog() = default;
  PlayLog(Dims d, int G);

  std::span<double> max_at(int t, int s) {
    return {max_policy.data() + (static_cast<std::size_t>(t) * dims.S + s) * dims.A,
            static_cast<std::size_t>(dims.A)};
  }
  std::span<const double> max_at(int t, int s) const {
    return {max_policy.data() + (static_cast<std::size_t>(t) * dims.S + s) * dims.A,
            static_cast<std::size_t>(dims.A)};
  }
  std::span<double> min_at(int t, int s) {
    return {min_policy.data() + (static_cast<std::size_t>(t) * dims.S + s) * dims.B,
            static_cast<std::size_t>(dims.B)};
  }
  std::span<const double> min_at(int t, int s) const {
    return {min_policy.data() + (static_cast<std::size_t>(t) * dims.S + s) * dims.B,
            static_cast<std::size_t>(dims.B)};
  }
};

struct ContextRun {
  TrajectoryRecord record;
  PlayLog log;
};

// Runs the context algorithm for G episodes on `game`. At every step and
// every state one extra action (pair) is drawn from the current policy
// without touching the environment. EXP3 requires H = S = 1.
ContextRun run_context(const MarkovGame& game, std::uint64_t game_seed, const ContextConfig& config,
                       std::uint64_t run_seed);

// N records; record i plays the game drawn with derive_seed(seed, i).
std::vector<TrajectoryRecord> collect_pretraining(const Dims& dims, const ContextConfig& config,
                                                  int n, std::uint64_t seed, int threads = 1);

enum class Player { max, min };
std::string to_string(Player p);

struct ViewStep {
  int g = 0;
  int h = 0;
  int s = 0;
  int a = 0;      // own action
  double r = 0;   // own reward (1 - r for the min-player)

  bool operator==(const ViewStep&) const = default;
};

struct ViewAug {
  int t = 0;
  int s = 0;
  int a = 0;  // own action

  bool operator==(const ViewAug&) const = default;
};

// One player's observation of a record. Has no opponent-action field.
struct DecentralizedView {
  Player player = Player::max;
  std::uint64_t game_seed = 0;
  Dims dims;
  std::vector<ViewStep> steps;
  std::vector<ViewAug> aug;
};

std::pair<DecentralizedView, DecentralizedView> split_decentralized(const TrajectoryRecord& record);

// Prompt steps for the transformer: the joint record or one player's view.
std::vector<PromptStep> prompt_steps(const TrajectoryRecord& record);
std::vector<PromptStep> prompt_steps(const DecentralizedView& view);

double round2(double x);

std::string record_to_json(const TrajectoryRecord& record, bool round_rewards = false);
TrajectoryRecord record_from_json(const std::string& line);
std::string view_to_json(const DecentralizedView& view, bool round_rewards = false);

// One record per line. Reading reports "<path>:<line>: <reason>" on malformed
// input.
void write_jsonl(const std::vector<TrajectoryRecord>& records, const std::string& path,
                 bool round_rewards = false);
std::vector<TrajectoryRecord> read_jsonl(const std::string& path);

}  // namespace icgp
