#pragma once

#include <span>
#include <utility>
#include <vector>

#include "icgp/game.hpp"

namespace icgp {

// Max-subtracted softmax of `scale * x`.
std::vector<double> softmax(std::span<const double> x, double scale = 1.0);

struct MwuResult {
  std::vector<double> joint_policy;  // row-major A x B
  std::vector<std::vector<double>> mu_rounds;  // filled only on request
  std::vector<std::vector<double>> nu_rounds;
};

// N rounds of virtual MWU self-play on the confidence bounds of one (h, s).
// The max-player's loss is (H - Q_upper) / H, the min-player's is Q_lower / H.
// Both are in [0, 1] when the Q entries are in [0, H].
MwuResult mwu_cce(std::span<const double> q_upper, std::span<const double> q_lower, int A,
                  int B, double H, int rounds, bool keep_rounds = false);

// The two CCE deviation gaps of a joint policy:
//   max_a* E[Q_upper(a*, b)] - E[Q_upper(a, b)]  and
//   E[Q_lower(a, b)] - min_b* E[Q_lower(a, b*)].
std::pair<double, double> cce_gaps(std::span<const double> joint,
                                   std::span<const double> q_upper,
                                   std::span<const double> q_lower, int A, int B);

double cce_epsilon(int A, int B, double H, int rounds);

// EXP3 with importance-weighted losses and no explicit exploration mixing.
class Exp3Learner {
 public:
  Exp3Learner(int num_actions, double eta);

  // eta = sqrt(2 ln A / (A G)).
  static double default_eta(int num_actions, int episodes);

  std::vector<double> probabilities() const;
  std::pair<int, std::vector<double>> act(Rng& rng) const;
  void update(int action, double reward, double prob_of_action);

  int num_actions() const { return static_cast<int>(loss_.size()); }
  double eta() const { return eta_; }
  long rounds() const { return rounds_; }
  const std::vector<double>& cumulative_loss() const { return loss_; }

 private:
  double eta_;
  std::vector<double> loss_;
  long rounds_ = 0;
};

}  // namespace icgp
