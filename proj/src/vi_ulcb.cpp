#include "icgp/vi_ulcb.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "icgp/no_regret.hpp"

namespace icgp {

ViUlcb::ViUlcb(Dims dims, ViUlcbConfig config) : dims_(dims), c_(config.c), policy_(dims) {
  if (dims.H < 1 || dims.S < 1 || dims.A < 1 || dims.B < 1)
    throw std::invalid_argument("ViUlcb: dimensions must be positive");
  if (config.episodes < 1) throw std::invalid_argument("ViUlcb: episodes must be >= 1");
  const double T = static_cast<double>(config.episodes) * dims.H;
  if (config.delta) {
    delta_ = *config.delta;
    if (!(delta_ > 0.0 && delta_ < 1.0))
      throw std::invalid_argument("ViUlcb: delta must lie in (0, 1)");
  } else {
    // 1/T equals 1 when T = 1; keep it strictly inside (0, 1).
    delta_ = T > 1.0 ? 1.0 / T : 0.5;
  }
  iota_ = std::log(static_cast<double>(dims.S) * dims.A * dims.B * T / delta_);
  n_mwu_ = config.n_mwu > 0 ? config.n_mwu : config.episodes;

  const std::size_t n = static_cast<std::size_t>(dims.H) * dims.S * dims.A * dims.B;
  count_.assign(n, 0);
  next_count_.assign(n * dims.S, 0);
  reward_sum_.assign(n, 0.0);
  q_upper_.assign(n, static_cast<double>(dims.H));
  q_lower_.assign(n, 0.0);
  v_upper_.assign(static_cast<std::size_t>(dims.H + 1) * dims.S, 0.0);
  v_lower_.assign(static_cast<std::size_t>(dims.H + 1) * dims.S, 0.0);
}

double ViUlcb::bonus(int visits) const {
  const double H = dims_.H;
  return c_ * std::sqrt(H * H * dims_.S * iota_ / visits);
}

double ViUlcb::empirical_reward(int h, int s, int a, int b) const {
  auto i = sab(h, s, a, b);
  return count_[i] > 0 ? reward_sum_[i] / count_[i] : 0.0;
}

double ViUlcb::empirical_transition(int h, int s, int a, int b, int sn) const {
  auto i = sab(h, s, a, b);
  return count_[i] > 0 ? static_cast<double>(next_count_[i * dims_.S + sn]) / count_[i] : 0.0;
}

const JointPolicy& ViUlcb::plan() {
  const Dims& d = dims_;
  const double H = d.H;
  const int AB = d.A * d.B;
  for (int h = d.H - 1; h >= 0; --h) {
    const double* vu_next = v_upper_.data() + static_cast<std::size_t>(h + 1) * d.S;
    const double* vl_next = v_lower_.data() + static_cast<std::size_t>(h + 1) * d.S;
    for (int s = 0; s < d.S; ++s) {
      for (int a = 0; a < d.A; ++a)
        for (int b = 0; b < d.B; ++b) {
          auto i = sab(h, s, a, b);
          const long n = count_[i];
          if (n == 0) continue;  // keep (H, 0)
          double pu = 0.0, pl = 0.0;
          for (int sn = 0; sn < d.S; ++sn) {
            double p = static_cast<double>(next_count_[i * d.S + sn]) / n;
            pu += p * vu_next[sn];
            pl += p * vl_next[sn];
          }
          const double r = reward_sum_[i] / n;
          const double bon = bonus(static_cast<int>(n));
          q_upper_[i] = std::min(r + pu + bon, H);
          q_lower_[i] = std::max(r + pl - bon, 0.0);
        }
      std::span<const double> qu(q_upper_.data() + sab(h, s, 0, 0), AB);
      std::span<const double> ql(q_lower_.data() + sab(h, s, 0, 0), AB);
      MwuResult cce = mwu_cce(qu, ql, d.A, d.B, H, n_mwu_);
      auto pi = policy_.at(h, s);
      double vu = 0.0, vl = 0.0;
      for (int k = 0; k < AB; ++k) {
        pi[k] = cce.joint_policy[k];
        vu += pi[k] * qu[k];
        vl += pi[k] * ql[k];
      }
      v_upper_[static_cast<std::size_t>(h) * d.S + s] = vu;
      v_lower_[static_cast<std::size_t>(h) * d.S + s] = vl;
    }
  }
  history_.push_back(policy_);
  planned_ = true;
  return policy_;
}

std::pair<int, int> ViUlcb::act(int h, int s, Rng& rng) const {
  if (!planned_) throw std::logic_error("ViUlcb::act called before plan()");
  int k = sample_discrete(policy_.at(h, s), rng);
  return {k / dims_.B, k % dims_.B};
}

void ViUlcb::update(int h, int s, int a, int b, double r, int s_next) {
  auto i = sab(h, s, a, b);
  ++count_[i];
  ++next_count_[i * dims_.S + s_next];
  reward_sum_[i] += r;
}

std::pair<ProductPolicy, ProductPolicy> ViUlcb::output(Rng& rng) const {
  if (history_.empty()) throw std::logic_error("ViUlcb::output: no stored policies");
  std::uniform_int_distribution<std::size_t> pick(0, history_.size() - 1);
  const std::size_t g_max = pick(rng);
  const std::size_t g_min = pick(rng);
  return {history_[g_max].max_marginal(), history_[g_min].min_marginal()};
}

void ViUlcb::set_policy_for_testing(JointPolicy pi) {
  policy_ = std::move(pi);
  history_.assign(1, policy_);
  planned_ = true;
}

}  // namespace icgp
