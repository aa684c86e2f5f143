#pragma once

#include <optional>
#include <vector>

#include "icgp/equilibrium.hpp"
#include "icgp/game.hpp"

namespace icgp {

struct ViUlcbConfig {
  double c = 1.0;         // bonus constant
  std::optional<double> delta;  // confidence; unset means 1 / T
  int n_mwu = 0;          // MWU rounds; <= 0 means G
  int episodes = 1;       // G, needed for the log factor
};

// Centralized optimistic value iteration with upper/lower confidence Q values
// and an MWU-based CCE planner per (h, s).
class ViUlcb {
 public:
  ViUlcb(Dims dims, ViUlcbConfig config);

  const Dims& dims() const { return dims_; }
  double iota() const { return iota_; }
  double delta() const { return delta_; }
  int n_mwu() const { return n_mwu_; }
  double bonus(int visits) const;

  // Backward pass over h; refreshes Q/V bounds and the joint policy table,
  // then records the table in the episode history.
  const JointPolicy& plan();
  std::pair<int, int> act(int h, int s, Rng& rng) const;
  void update(int h, int s, int a, int b, double r, int s_next);

  // Marginals of two independently drawn stored tables.
  std::pair<ProductPolicy, ProductPolicy> output(Rng& rng) const;

  bool planned() const { return planned_; }
  const JointPolicy& policy() const { return policy_; }
  const std::vector<JointPolicy>& history() const { return history_; }

  double q_upper(int h, int s, int a, int b) const { return q_upper_[sab(h, s, a, b)]; }
  double q_lower(int h, int s, int a, int b) const { return q_lower_[sab(h, s, a, b)]; }
  // h ranges over 0..H; row H is the zero boundary.
  double v_upper(int h, int s) const { return v_upper_[static_cast<std::size_t>(h) * dims_.S + s]; }
  double v_lower(int h, int s) const { return v_lower_[static_cast<std::size_t>(h) * dims_.S + s]; }
  long visits(int h, int s, int a, int b) const { return count_[sab(h, s, a, b)]; }
  long next_visits(int h, int s, int a, int b, int sn) const {
    return next_count_[sab(h, s, a, b) * dims_.S + sn];
  }
  double empirical_reward(int h, int s, int a, int b) const;
  double empirical_transition(int h, int s, int a, int b, int sn) const;

  // Test hook: replaces the current table (and the history) with `pi`.
  void set_policy_for_testing(JointPolicy pi);

 private:
  std::size_t sab(int h, int s, int a, int b) const {
    return ((static_cast<std::size_t>(h) * dims_.S + s) * dims_.A + a) * dims_.B + b;
  }

  Dims dims_;
  double c_;
  double delta_;
  double iota_;
  int n_mwu_;
  std::vector<long> count_;
  std::vector<long> next_count_;
  std::vector<double> reward_sum_;
  std::vector<double> q_upper_, q_lower_;
  std::vector<double> v_upper_, v_lower_;
  JointPolicy policy_;
  std::vector<JointPolicy> history_;
  bool planned_ = false;
};

}  // namespace icgp
