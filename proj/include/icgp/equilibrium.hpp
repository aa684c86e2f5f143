#pragma once

#include <span>
#include <vector>

#include "icgp/game.hpp"

namespace icgp {

// Per-(h, s) distribution over one player's K actions.
class ProductPolicy {
 public:
  ProductPolicy() = default;
  ProductPolicy(int H, int S, int K);  // uniform
  ProductPolicy(int H, int S, int K, std::vector<double> probs);

  int horizon() const { return H_; }
  int num_states() const { return S_; }
  int num_actions() const { return K_; }

  std::span<double> at(int h, int s) {
    return {probs_.data() + offset(h, s), static_cast<std::size_t>(K_)};
  }
  std::span<const double> at(int h, int s) const {
    return {probs_.data() + offset(h, s), static_cast<std::size_t>(K_)};
  }
  const std::vector<double>& data() const { return probs_; }

  // Throws if any row is negative or does not sum to 1 within tol.
  void validate(double tol = 1e-9) const;

 private:
  std::size_t offset(int h, int s) const {
    return (static_cast<std::size_t>(h) * S_ + s) * K_;
  }
  int H_ = 0, S_ = 0, K_ = 0;
  std::vector<double> probs_;
};

// Per-(h, s) distribution over action pairs, row-major A x B.
class JointPolicy {
 public:
  JointPolicy() = default;
  JointPolicy(Dims dims);  // uniform
  JointPolicy(Dims dims, std::vector<double> probs);

  const Dims& dims() const { return dims_; }
  std::span<double> at(int h, int s) {
    return {probs_.data() + offset(h, s), static_cast<std::size_t>(dims_.A * dims_.B)};
  }
  std::span<const double> at(int h, int s) const {
    return {probs_.data() + offset(h, s), static_cast<std::size_t>(dims_.A * dims_.B)};
  }
  const std::vector<double>& data() const { return probs_; }

  void validate(double tol = 1e-9) const;

  ProductPolicy max_marginal() const;  // sum over b
  ProductPolicy min_marginal() const;  // sum over a

 private:
  std::size_t offset(int h, int s) const {
    return (static_cast<std::size_t>(h) * dims_.S + s) * dims_.A * dims_.B;
  }
  Dims dims_;
  std::vector<double> probs_;
};

// V^{mu, dagger}(s^1): the min-player best-responds to mu.
double best_response_value_min_side(const MarkovGame& game, const ProductPolicy& mu);

// V^{dagger, nu}(s^1): the max-player best-responds to nu.
double best_response_value_max_side(const MarkovGame& game, const ProductPolicy& nu);

// V^{dagger, nu}(s^1) - V^{mu, dagger}(s^1), unclamped.
double ne_gap(const MarkovGame& game, const ProductPolicy& mu, const ProductPolicy& nu);

// max_a (R nu)_a - min_b (mu^T R)_b for a row-major A x B matrix R.
double matrix_ne_gap(std::span<const double> R, std::span<const double> mu_bar,
                     std::span<const double> nu_bar);

std::vector<double> running_average_policy(const std::vector<std::vector<double>>& history);

// Incremental running mean, one distribution at a time.
class RunningAverage {
 public:
  explicit RunningAverage(int k) : sum_(k, 0.0) {}
  void add(std::span<const double> p);
  std::vector<double> mean() const;
  long count() const { return count_; }

 private:
  std::vector<double> sum_;
  long count_ = 0;
};

}  // namespace icgp
