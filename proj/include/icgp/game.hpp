#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace icgp {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent per-record / per-game seeds.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

struct Dims {
  int H = 1;
  int S = 1;
  int A = 1;
  int B = 1;

  bool operator==(const Dims&) const = default;
};

// Finite-horizon two-player zero-sum Markov game with deterministic rewards.
// The max-player picks a in [0, A), the min-player b in [0, B).
// Steps h and states s are 0-indexed.
class MarkovGame {
 public:
  MarkovGame(Dims dims, std::vector<double> transition, std::vector<double> reward,
             int initial_state = 0);

  const Dims& dims() const { return dims_; }
  int horizon() const { return dims_.H; }
  int num_states() const { return dims_.S; }
  int num_actions_max() const { return dims_.A; }
  int num_actions_min() const { return dims_.B; }
  int initial_state() const { return initial_state_; }

  double reward(int h, int s, int a, int b) const { return reward_[sab(h, s, a, b)]; }
  std::span<const double> transition(int h, int s, int a, int b) const {
    return {transition_.data() + sab(h, s, a, b) * dims_.S,
            static_cast<std::size_t>(dims_.S)};
  }
  // Reward matrix R_h(s, ., .) in row-major A x B order.
  std::span<const double> reward_matrix(int h, int s) const {
    return {reward_.data() + sab(h, s, 0, 0),
            static_cast<std::size_t>(dims_.A * dims_.B)};
  }
  const std::vector<double>& rewards() const { return reward_; }
  const std::vector<double>& transitions() const { return transition_; }

 private:
  std::size_t sab(int h, int s, int a, int b) const {
    return ((static_cast<std::size_t>(h) * dims_.S + s) * dims_.A + a) * dims_.B + b;
  }

  Dims dims_;
  std::vector<double> transition_;  // (h, s, a, b, s')
  std::vector<double> reward_;      // (h, s, a, b)
  int initial_state_;
};

// Throws std::invalid_argument if row sums, reward bounds or the initial
// state are off.
void validate_game(const MarkovGame& game);

struct EpisodeStep {
  int g = 0;
  int h = 0;
  int s = 0;
  int a = 0;
  int b = 0;
  double r = 0.0;

  bool operator==(const EpisodeStep&) const = default;
};

// Standard normal rejection-sampled into [0, 1].
double truncated_normal01(Rng& rng);

// H = S = 1 matrix game with truncated-Gaussian payoffs.
MarkovGame sample_matrix_game(int A, int B, std::uint64_t seed);

// Cyclic-transition family: equal action indices move s -> (s + 1) mod S,
// anything else keeps the state. Rewards as in sample_matrix_game.
MarkovGame sample_markov_game(int A, int B, int S, int H, std::uint64_t seed);

// Draws an index from a probability vector.
int sample_discrete(std::span<const double> probs, Rng& rng);

using ActFn = std::function<std::pair<int, int>(int h, int s)>;

// Plays one episode of exactly H steps. The episode index is recorded in
// every step.
std::vector<EpisodeStep> run_episode(const MarkovGame& game, const ActFn& act, Rng& rng,
                                     int episode = 0);

}  // namespace icgp
