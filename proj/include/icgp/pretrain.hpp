#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icgp/dataset.hpp"
#include "icgp/transformer.hpp"

namespace icgp {

enum class Optimizer { sgd, adam };

std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;  // blocks per step
  double lr = 5e-4;
  Optimizer optimizer = Optimizer::adam;
  std::uint64_t seed = 0;
  HeadMode head = HeadMode::softmax;
  int layers = 2;
  int heads = 4;
  int scratch = 8;
  int hidden = 0;  // 0 means d
  Activation activation = Activation::relu;
  int window_tokens = 0;  // block length in tokens; 0 means the whole run
  double init_scale = 1.0;
  int threads = 1;
};

// One target: the action label of the query at a base column or side query.
struct Target {
  int column = 0;
  bool side = false;
  int label = 0;
};

// A block of the interaction with every (t, s) query of its steps.
struct TrainBlock {
  TokenMatrix base;
  std::vector<SideQuery> side;
  std::vector<Target> targets;
};

// Normalized spec for a learned model; block length from the config.
EmbeddingSpec model_spec(EmbeddingRole role, const Dims& dims, int episodes,
                         const TrainConfig& config);

TransformerParams init_params(const EmbeddingSpec& spec, const TrainConfig& config);

// Blocks of spec.block_tokens tokens over `steps`; labels holds the target
// action for every (t, s), ordered by (t, s).
std::vector<TrainBlock> make_blocks(const EmbeddingSpec& spec, std::span<const PromptStep> steps,
                                    std::span<const int> labels);

// All blocks of a dataset for one role (centralized uses joint labels a B + b).
std::vector<TrainBlock> training_blocks(const std::vector<TrajectoryRecord>& records,
                                        const EmbeddingSpec& spec);

// Sum of -log p(label) over the block's targets. If `grad` is given, adds
// weight * d(sum)/d(params) to it (softmax head only).
double block_nll(const TransformerParams& params, const TrainBlock& block, TransformerParams* grad,
                 double weight = 1.0);

int count_targets(std::span<const TrainBlock> blocks);

// Mean negative log-likelihood over all targets.
double mle_loss(const TransformerParams& params, std::span<const TrainBlock> blocks);

// Mean NLL over the chosen blocks and its gradient. Per-block gradients are
// reduced in index order, so the result does not depend on `threads`.
double mle_loss_and_grad(const TransformerParams& params, std::span<const TrainBlock> blocks,
                         std::span<const int> indices, TransformerParams& grad, int threads = 1);

struct LossReport {
  // [0] is the loss before training; [e] the running mean during epoch e.
  std::vector<double> epoch_nll;
  std::vector<double> epoch_seconds;  // cumulative wall time
  std::string to_csv() const;
};

struct TrainResult {
  TransformerParams params;
  LossReport report;
};

TrainResult train(const TrainConfig& config, const std::vector<TrainBlock>& blocks,
                  const EmbeddingSpec& spec);

// Frozen-parameter play. At every step all S states are queried on the
// player's own prompt; the visited state's policy is sampled. Blocks follow
// spec.block_tokens, as in training.
PlayLog infer_play_centralized(const TransformerParams& joint, const MarkovGame& game, int episodes,
                               Rng& rng);
PlayLog infer_play_decentralized(const TransformerParams& max_model,
                                 const TransformerParams& min_model, const MarkovGame& game,
                                 int episodes, Rng& rng);

}  // namespace icgp
