#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "icgp/equilibrium.hpp"
#include "icgp/game.hpp"

namespace icgp {

struct Schedules {
  double alpha;
  double beta;
  double gamma_eta;  // gamma_n and eta_n coincide
};

// Step size, bonus and exploration/learning-rate schedules for the n-th visit.
Schedules v_learning_schedules(int n, int H, int A, int S, int G, double c, double delta);

// alpha_{n,i} = alpha_i prod_{j=i+1}^{n} (1 - alpha_j), i = 1..n (returned 0-based).
std::vector<double> alpha_weights(int n, int H);

// Per-(h, s) log of (episode, policy played at that visit).
class PolicyHistory {
 public:
  struct Entry {
    int episode;
    std::vector<double> policy;
  };

  PolicyHistory() = default;
  PolicyHistory(int H, int S, int K);

  int horizon() const { return H_; }
  int num_states() const { return S_; }
  int num_actions() const { return K_; }

  void append(int h, int s, int episode, std::vector<double> policy);
  const std::vector<Entry>& entries(int h, int s) const {
    return log_[static_cast<std::size_t>(h) * S_ + s];
  }
  // Visits to (h, s) in episodes strictly before `episode`.
  int visits_before(int h, int s, int episode) const;

  // Marginal of the output executor at (h, s) when the episode counter still
  // points past `episode`: sum_i alpha_{n,i} pi_i over the first n visits with
  // episode index <= `episode`. Uniform when n = 0.
  std::vector<double> mixture(int h, int s, int episode) const;
  ProductPolicy mixture_policy(int episode) const;

 private:
  int H_ = 0, S_ = 0, K_ = 0;
  std::vector<std::vector<Entry>> log_;
};

struct VLearningConfig {
  double c = 1.0;
  std::optional<double> delta;  // unset means 1 / T
  int episodes = 1;             // G
};

// One player's V-learning state. The min-player runs the same learner on
// rewards 1 - r.
class VLearner {
 public:
  VLearner(int H, int S, int num_actions, VLearningConfig config);

  int horizon() const { return H_; }
  int num_states() const { return S_; }
  int num_actions() const { return A_; }
  double delta() const { return delta_; }
  Schedules schedules(int n) const;

  std::pair<int, std::vector<double>> act(int h, int s, Rng& rng) const;
  std::span<const double> policy(int h, int s) const {
    return {mu_.data() + idx(h, s) * A_, static_cast<std::size_t>(A_)};
  }
  ProductPolicy current_policy() const;

  // Processes the transition observed at (h, s). Appends the policy that
  // was played at this visit to `history` before updating it.
  void update(PolicyHistory& history, int episode, int h, int s, int a, double r, int s_next);

  double value(int h, int s) const { return h >= H_ ? 0.0 : v_[idx(h, s)]; }
  double value_tilde(int h, int s) const { return v_tilde_[idx(h, s)]; }
  int visits(int h, int s) const { return n_[idx(h, s)]; }
  std::span<const double> weighted_loss(int h, int s) const {
    return {loss_.data() + idx(h, s) * A_, static_cast<std::size_t>(A_)};
  }
  // Importance-weighted loss of the last update at (h, s).
  std::span<const double> last_loss(int h, int s) const {
    return {last_loss_.data() + idx(h, s) * A_, static_cast<std::size_t>(A_)};
  }

 private:
  std::size_t idx(int h, int s) const { return static_cast<std::size_t>(h) * S_ + s; }

  int H_, S_, A_, G_;
  double c_;
  double delta_;
  std::vector<double> v_, v_tilde_;
  std::vector<int> n_;
  std::vector<double> loss_;
  std::vector<double> last_loss_;
  std::vector<double> mu_;
};

// Output-policy executor for one player: replays the weighted history.
class OutputExecutor {
 public:
  OutputExecutor(const PolicyHistory& history, int episodes);

  // Draws the starting episode index uniformly from [0, G).
  void begin_episode(Rng& rng);
  int act(int h, int s, Rng& rng);
  int current_episode() const { return episode_; }
  void set_episode_for_testing(int g) { episode_ = g; }

 private:
  const PolicyHistory* history_;
  int episodes_;
  int episode_ = 0;
};

}  // namespace icgp
