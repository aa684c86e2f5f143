#include "icgp/no_regret.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace icgp {

std::vector<double> softmax(std::span<const double> x, double scale) {
  std::vector<double> out(x.size());
  double top = -std::numeric_limits<double>::infinity();
  for (double v : x) top = std::max(top, scale * v);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(scale * x[i] - top);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

MwuResult mwu_cce(std::span<const double> q_upper, std::span<const double> q_lower, int A,
                  int B, double H, int rounds, bool keep_rounds) {
  if (rounds < 1) throw std::invalid_argument("mwu_cce: rounds must be >= 1");
  if (A < 1 || B < 1) throw std::invalid_argument("mwu_cce: empty action set");
  const std::size_t n = static_cast<std::size_t>(A) * B;
  if (q_upper.size() != n || q_lower.size() != n)
    throw std::invalid_argument("mwu_cce: Q matrices must be A x B");

  std::vector<double> loss_max(n), loss_min(n);
  for (std::size_t i = 0; i < n; ++i) {
    loss_max[i] = (H - q_upper[i]) / H;
    loss_min[i] = q_lower[i] / H;
  }
  const double eta_a = std::sqrt(std::log(static_cast<double>(A)) / rounds);
  const double eta_b = std::sqrt(std::log(static_cast<double>(B)) / rounds);

  MwuResult result;
  result.joint_policy.assign(n, 0.0);
  std::vector<double> cum_max(A, 0.0), cum_min(B, 0.0);
  for (int round = 0; round < rounds; ++round) {
    std::vector<double> mu = softmax(cum_max, -eta_a);
    std::vector<double> nu = softmax(cum_min, -eta_b);
    for (int a = 0; a < A; ++a) {
      double o = 0.0;
      for (int b = 0; b < B; ++b) o += nu[b] * loss_max[a * B + b];
      cum_max[a] += o;
    }
    for (int b = 0; b < B; ++b) {
      double o = 0.0;
      for (int a = 0; a < A; ++a) o += mu[a] * loss_min[a * B + b];
      cum_min[b] += o;
    }
    for (int a = 0; a < A; ++a)
      for (int b = 0; b < B; ++b) result.joint_policy[a * B + b] += mu[a] * nu[b];
    if (keep_rounds) {
      result.mu_rounds.push_back(std::move(mu));
      result.nu_rounds.push_back(std::move(nu));
    }
  }
  for (auto& p : result.joint_policy) p /= rounds;
  return result;
}

std::pair<double, double> cce_gaps(std::span<const double> joint,
                                   std::span<const double> q_upper,
                                   std::span<const double> q_lower, int A, int B) {
  double on_upper = 0.0, on_lower = 0.0;
  for (int i = 0; i < A * B; ++i) {
    on_upper += joint[i] * q_upper[i];
    on_lower += joint[i] * q_lower[i];
  }
  std::vector<double> nu(B, 0.0), mu(A, 0.0);
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b) {
      mu[a] += joint[a * B + b];
      nu[b] += joint[a * B + b];
    }
  double best_dev_max = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < A; ++a) {
    double v = 0.0;
    for (int b = 0; b < B; ++b) v += nu[b] * q_upper[a * B + b];
    best_dev_max = std::max(best_dev_max, v);
  }
  double best_dev_min = std::numeric_limits<double>::infinity();
  for (int b = 0; b < B; ++b) {
    double v = 0.0;
    for (int a = 0; a < A; ++a) v += mu[a] * q_lower[a * B + b];
    best_dev_min = std::min(best_dev_min, v);
  }
  return {best_dev_max - on_upper, on_lower - best_dev_min};
}

double cce_epsilon(int A, int B, double H, int rounds) {
  return H * std::sqrt(std::log(static_cast<double>(A + B)) / rounds);
}

Exp3Learner::Exp3Learner(int num_actions, double eta) : eta_(eta), loss_(num_actions, 0.0) {
  if (num_actions < 1) throw std::invalid_argument("Exp3Learner: need at least one action");
  if (!(eta > 0.0)) throw std::invalid_argument("Exp3Learner: eta must be positive");
}

double Exp3Learner::default_eta(int num_actions, int episodes) {
  if (num_actions < 2) return 1.0;
  return std::sqrt(2.0 * std::log(static_cast<double>(num_actions)) /
                   (static_cast<double>(num_actions) * episodes));
}

std::vector<double> Exp3Learner::probabilities() const { return softmax(loss_, -eta_); }

std::pair<int, std::vector<double>> Exp3Learner::act(Rng& rng) const {
  auto p = probabilities();
  int a = sample_discrete(p, rng);
  return {a, std::move(p)};
}

void Exp3Learner::update(int action, double reward, double prob_of_action) {
  if (action < 0 || action >= num_actions())
    throw std::invalid_argument("Exp3Learner: action out of range");
  if (!(prob_of_action > 0.0))
    throw std::invalid_argument("Exp3Learner: probability of the played action must be > 0");
  loss_[action] += (1.0 - reward) / prob_of_action;
  ++rounds_;
}

}  // namespace icgp
