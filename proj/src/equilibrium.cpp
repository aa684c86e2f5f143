#include "icgp/equilibrium.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace icgp {

namespace {

void check_distribution(std::span<const double> p, double tol) {
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw std::invalid_argument("distribution has a negative entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > tol)
    throw std::invalid_argument("distribution does not sum to 1");
}

}  // namespace

ProductPolicy::ProductPolicy(int H, int S, int K)
    : H_(H), S_(S), K_(K), probs_(static_cast<std::size_t>(H) * S * K, 1.0 / K) {
  if (H < 1 || S < 1 || K < 1) throw std::invalid_argument("ProductPolicy: bad dimensions");
}

ProductPolicy::ProductPolicy(int H, int S, int K, std::vector<double> probs)
    : H_(H), S_(S), K_(K), probs_(std::move(probs)) {
  if (H < 1 || S < 1 || K < 1) throw std::invalid_argument("ProductPolicy: bad dimensions");
  if (probs_.size() != static_cast<std::size_t>(H) * S * K)
    throw std::invalid_argument("ProductPolicy: size mismatch");
}

void ProductPolicy::validate(double tol) const {
  for (int h = 0; h < H_; ++h)
    for (int s = 0; s < S_; ++s) check_distribution(at(h, s), tol);
}

JointPolicy::JointPolicy(Dims dims)
    : dims_(dims),
      probs_(static_cast<std::size_t>(dims.H) * dims.S * dims.A * dims.B,
             1.0 / (dims.A * dims.B)) {}

JointPolicy::JointPolicy(Dims dims, std::vector<double> probs)
    : dims_(dims), probs_(std::move(probs)) {
  if (probs_.size() != static_cast<std::size_t>(dims.H) * dims.S * dims.A * dims.B)
    throw std::invalid_argument("JointPolicy: size mismatch");
}

void JointPolicy::validate(double tol) const {
  for (int h = 0; h < dims_.H; ++h)
    for (int s = 0; s < dims_.S; ++s) check_distribution(at(h, s), tol);
}

ProductPolicy JointPolicy::max_marginal() const {
  ProductPolicy out(dims_.H, dims_.S, dims_.A);
  for (int h = 0; h < dims_.H; ++h)
    for (int s = 0; s < dims_.S; ++s) {
      auto pi = at(h, s);
      auto mu = out.at(h, s);
      for (int a = 0; a < dims_.A; ++a) {
        double acc = 0.0;
        for (int b = 0; b < dims_.B; ++b) acc += pi[a * dims_.B + b];
        mu[a] = acc;
      }
    }
  return out;
}

ProductPolicy JointPolicy::min_marginal() const {
  ProductPolicy out(dims_.H, dims_.S, dims_.B);
  for (int h = 0; h < dims_.H; ++h)
    for (int s = 0; s < dims_.S; ++s) {
      auto pi = at(h, s);
      auto nu = out.at(h, s);
      for (int b = 0; b < dims_.B; ++b) {
        double acc = 0.0;
        for (int a = 0; a < dims_.A; ++a) acc += pi[a * dims_.B + b];
        nu[b] = acc;
      }
    }
  return out;
}

namespace {

// Backward induction for the responder's MDP. `maximize` selects which side
// responds; the fixed side's policy is `fixed`.
double best_response(const MarkovGame& game, const ProductPolicy& fixed, bool maximize) {
  const Dims& d = game.dims();
  const int fixed_k = maximize ? d.B : d.A;
  if (fixed.horizon() != d.H || fixed.num_states() != d.S || fixed.num_actions() != fixed_k)
    throw std::invalid_argument("best response: policy dimensions do not match the game");

  std::vector<double> next(d.S, 0.0), cur(d.S, 0.0);
  for (int h = d.H - 1; h >= 0; --h) {
    for (int s = 0; s < d.S; ++s) {
      auto p = fixed.at(h, s);
      const int resp_k = maximize ? d.A : d.B;
      double best = maximize ? -std::numeric_limits<double>::infinity()
                             : std::numeric_limits<double>::infinity();
      for (int x = 0; x < resp_k; ++x) {
        double v = 0.0;
        for (int y = 0; y < fixed_k; ++y) {
          const int a = maximize ? x : y;
          const int b = maximize ? y : x;
          double q = game.reward(h, s, a, b);
          auto row = game.transition(h, s, a, b);
          for (int sn = 0; sn < d.S; ++sn) q += row[sn] * next[sn];
          v += p[y] * q;
        }
        // strict comparison keeps the lowest index on ties
        if (maximize ? v > best : v < best) best = v;
      }
      cur[s] = best;
    }
    std::swap(cur, next);
  }
  return next[game.initial_state()];
}

}  // namespace

double best_response_value_min_side(const MarkovGame& game, const ProductPolicy& mu) {
  return best_response(game, mu, /*maximize=*/false);
}

double best_response_value_max_side(const MarkovGame& game, const ProductPolicy& nu) {
  return best_response(game, nu, /*maximize=*/true);
}

double ne_gap(const MarkovGame& game, const ProductPolicy& mu, const ProductPolicy& nu) {
  return best_response_value_max_side(game, nu) - best_response_value_min_side(game, mu);
}

double matrix_ne_gap(std::span<const double> R, std::span<const double> mu_bar,
                     std::span<const double> nu_bar) {
  const std::size_t A = mu_bar.size(), B = nu_bar.size();
  if (R.size() != A * B) throw std::invalid_argument("matrix_ne_gap: shape mismatch");
  double best_row = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < A; ++a) {
    double v = 0.0;
    for (std::size_t b = 0; b < B; ++b) v += R[a * B + b] * nu_bar[b];
    best_row = std::max(best_row, v);
  }
  double best_col = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < B; ++b) {
    double v = 0.0;
    for (std::size_t a = 0; a < A; ++a) v += mu_bar[a] * R[a * B + b];
    best_col = std::min(best_col, v);
  }
  return best_row - best_col;
}

std::vector<double> running_average_policy(const std::vector<std::vector<double>>& history) {
  if (history.empty()) throw std::invalid_argument("running_average_policy: empty history");
  RunningAverage avg(static_cast<int>(history.front().size()));
  for (const auto& p : history) avg.add(p);
  return avg.mean();
}

void RunningAverage::add(std::span<const double> p) {
  if (p.size() != sum_.size()) throw std::invalid_argument("RunningAverage: size mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) sum_[i] += p[i];
  ++count_;
}

std::vector<double> RunningAverage::mean() const {
  std::vector<double> m(sum_);
  for (auto& x : m) x /= static_cast<double>(count_);
  return m;
}

}  // namespace icgp
