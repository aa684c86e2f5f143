#include "icgp/v_learning.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "icgp/no_regret.hpp"

namespace icgp {

Schedules v_learning_schedules(int n, int H, int A, int S, int G, double c, double delta) {
  if (n < 1) throw std::invalid_argument("schedules: visit count must be >= 1");
  const double Hd = H;
  Schedules out;
  out.alpha = (Hd + 1.0) / (Hd + n);
  const double log_term =
      std::log(Hd * S * A * static_cast<double>(G) / delta);
  out.beta = c * std::sqrt(Hd * Hd * Hd * A * log_term / n);
  out.gamma_eta = std::sqrt(Hd * std::log(static_cast<double>(A)) / (static_cast<double>(A) * n));
  return out;
}

std::vector<double> alpha_weights(int n, int H) {
  if (n < 1) throw std::invalid_argument("alpha_weights: n must be >= 1");
  std::vector<double> w(n);
  double tail = 1.0;  // prod_{j=i+1}^{n} (1 - alpha_j)
  for (int i = n; i >= 1; --i) {
    const double alpha_i = (H + 1.0) / (H + static_cast<double>(i));
    w[i - 1] = alpha_i * tail;
    tail *= 1.0 - alpha_i;
  }
  return w;
}

PolicyHistory::PolicyHistory(int H, int S, int K)
    : H_(H), S_(S), K_(K), log_(static_cast<std::size_t>(H) * S) {}

void PolicyHistory::append(int h, int s, int episode, std::vector<double> policy) {
  auto& list = log_[static_cast<std::size_t>(h) * S_ + s];
  if (!list.empty() && list.back().episode >= episode)
    throw std::logic_error("PolicyHistory: episode indices must increase");
  list.push_back({episode, std::move(policy)});
}

int PolicyHistory::visits_before(int h, int s, int episode) const {
  const auto& list = entries(h, s);
  auto it = std::lower_bound(list.begin(), list.end(), episode,
                             [](const Entry& e, int g) { return e.episode < g; });
  return static_cast<int>(it - list.begin());
}

std::vector<double> PolicyHistory::mixture(int h, int s, int episode) const {
  const int n = visits_before(h, s, episode + 1);
  std::vector<double> out(K_, 0.0);
  if (n == 0) {
    std::fill(out.begin(), out.end(), 1.0 / K_);
    return out;
  }
  const auto w = alpha_weights(n, H_);
  const auto& list = entries(h, s);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K_; ++k) out[k] += w[i] * list[i].policy[k];
  return out;
}

ProductPolicy PolicyHistory::mixture_policy(int episode) const {
  ProductPolicy out(H_, S_, K_);
  for (int h = 0; h < H_; ++h)
    for (int s = 0; s < S_; ++s) {
      auto m = mixture(h, s, episode);
      std::copy(m.begin(), m.end(), out.at(h, s).begin());
    }
  return out;
}

VLearner::VLearner(int H, int S, int num_actions, VLearningConfig config)
    : H_(H), S_(S), A_(num_actions), G_(config.episodes), c_(config.c) {
  if (H < 1 || S < 1 || num_actions < 1 || config.episodes < 1)
    throw std::invalid_argument("VLearner: dimensions must be positive");
  const double T = static_cast<double>(config.episodes) * H;
  if (config.delta) {
    delta_ = *config.delta;
    if (!(delta_ > 0.0 && delta_ < 1.0))
      throw std::invalid_argument("VLearner: delta must lie in (0, 1)");
  } else {
    delta_ = T > 1.0 ? 1.0 / T : 0.5;
  }
  const std::size_t hs = static_cast<std::size_t>(H) * S;
  v_.resize(hs);
  v_tilde_.resize(hs);
  for (int h = 0; h < H; ++h)
    for (int s = 0; s < S; ++s) {
      // 1-indexed step h+1 starts at H + 1 - (h + 1)
      v_[idx(h, s)] = H - h;
      v_tilde_[idx(h, s)] = H - h;
    }
  n_.assign(hs, 0);
  loss_.assign(hs * A_, 0.0);
  last_loss_.assign(hs * A_, 0.0);
  mu_.assign(hs * A_, 1.0 / A_);
}

Schedules VLearner::schedules(int n) const {
  return v_learning_schedules(n, H_, A_, S_, G_, c_, delta_);
}

std::pair<int, std::vector<double>> VLearner::act(int h, int s, Rng& rng) const {
  auto p = policy(h, s);
  std::vector<double> probs(p.begin(), p.end());
  int a = sample_discrete(probs, rng);
  return {a, std::move(probs)};
}

ProductPolicy VLearner::current_policy() const { return ProductPolicy(H_, S_, A_, mu_); }

void VLearner::update(PolicyHistory& history, int episode, int h, int s, int a, double r,
                      int s_next) {
  if (a < 0 || a >= A_) throw std::invalid_argument("VLearner: action out of range");
  const std::size_t i = idx(h, s);
  double* mu = mu_.data() + i * A_;
  history.append(h, s, episode, std::vector<double>(mu, mu + A_));

  const int n = ++n_[i];
  const Schedules sc = schedules(n);
  const double v_next = value(h + 1, s_next);
  v_tilde_[i] = (1.0 - sc.alpha) * v_tilde_[i] + sc.alpha * (r + v_next + sc.beta);
  v_[i] = std::min(static_cast<double>(H_ - h), v_tilde_[i]);

  double* last = last_loss_.data() + i * A_;
  std::fill(last, last + A_, 0.0);
  last[a] = (H_ - r - v_next) / H_ / (mu[a] + sc.gamma_eta);

  // L_n = l_n + alpha_{n-1} (1 - alpha_n) / alpha_n * L_{n-1}
  double* L = loss_.data() + i * A_;
  double carry = 0.0;
  if (n >= 2) {
    const double alpha_prev = schedules(n - 1).alpha;
    carry = alpha_prev * (1.0 - sc.alpha) / sc.alpha;
  }
  for (int k = 0; k < A_; ++k) L[k] = last[k] + carry * L[k];

  auto p = softmax(std::span<const double>(L, A_), -sc.gamma_eta);
  std::copy(p.begin(), p.end(), mu);
}

OutputExecutor::OutputExecutor(const PolicyHistory& history, int episodes)
    : history_(&history), episodes_(episodes) {
  if (episodes < 1) throw std::invalid_argument("OutputExecutor: episodes must be >= 1");
}

void OutputExecutor::begin_episode(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, episodes_ - 1);
  episode_ = pick(rng);
}

int OutputExecutor::act(int h, int s, Rng& rng) {
  const int n = history_->visits_before(h, s, episode_);
  const int K = history_->num_actions();
  if (n == 0) {
    std::vector<double> uniform(K, 1.0 / K);
    return sample_discrete(uniform, rng);
  }
  const auto w = alpha_weights(n, history_->horizon());
  const int i = sample_discrete(w, rng);
  const auto& entry = history_->entries(h, s)[i];
  episode_ = entry.episode;
  return sample_discrete(entry.policy, rng);
}

}  // namespace icgp
