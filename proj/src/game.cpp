#include "icgp/game.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace icgp {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(base ^ splitmix64(index + 1));
}

MarkovGame::MarkovGame(Dims dims, std::vector<double> transition,
                       std::vector<double> reward, int initial_state)
    : dims_(dims),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      initial_state_(initial_state) {
  if (dims_.H < 1 || dims_.S < 1 || dims_.A < 1 || dims_.B < 1)
    throw std::invalid_argument("MarkovGame: dimensions must be positive");
  const std::size_t n = static_cast<std::size_t>(dims_.H) * dims_.S * dims_.A * dims_.B;
  if (reward_.size() != n || transition_.size() != n * dims_.S)
    throw std::invalid_argument("MarkovGame: tensor sizes do not match dimensions");
}

void validate_game(const MarkovGame& game) {
  const Dims& d = game.dims();
  if (game.initial_state() < 0 || game.initial_state() >= d.S)
    throw std::invalid_argument("initial state out of range");
  for (int h = 0; h < d.H; ++h)
    for (int s = 0; s < d.S; ++s)
      for (int a = 0; a < d.A; ++a)
        for (int b = 0; b < d.B; ++b) {
          double r = game.reward(h, s, a, b);
          if (!(r >= 0.0 && r <= 1.0))
            throw std::invalid_argument("reward outside [0,1]");
          double sum = 0.0;
          for (double p : game.transition(h, s, a, b)) {
            if (p < 0.0) throw std::invalid_argument("negative transition probability");
            sum += p;
          }
          if (std::abs(sum - 1.0) > 1e-12)
            throw std::invalid_argument("transition row does not sum to 1");
        }
}

double truncated_normal01(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    double x = normal(rng);
    if (x >= 0.0 && x <= 1.0) return x;
  }
}

namespace {

std::vector<double> sample_rewards(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> r(n);
  for (auto& x : r) x = truncated_normal01(rng);
  return r;
}

void check_positive(int v, const char* what) {
  if (v < 1) throw std::invalid_argument(std::string(what) + " must be >= 1");
}

}  // namespace

MarkovGame sample_matrix_game(int A, int B, std::uint64_t seed) {
  check_positive(A, "A");
  check_positive(B, "B");
  Dims d{1, 1, A, B};
  std::vector<double> t(static_cast<std::size_t>(A) * B, 1.0);
  return MarkovGame(d, std::move(t), sample_rewards(static_cast<std::size_t>(A) * B, seed));
}

MarkovGame sample_markov_game(int A, int B, int S, int H, std::uint64_t seed) {
  check_positive(A, "A");
  check_positive(B, "B");
  check_positive(S, "S");
  check_positive(H, "H");
  Dims d{H, S, A, B};
  const std::size_t n = static_cast<std::size_t>(H) * S * A * B;
  std::vector<double> t(n * S, 0.0);
  for (int h = 0; h < H; ++h)
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b) {
          std::size_t row = ((static_cast<std::size_t>(h) * S + s) * A + a) * B + b;
          int next = (a == b) ? (s + 1) % S : s;
          t[row * S + next] = 1.0;
        }
  return MarkovGame(d, std::move(t), sample_rewards(n, seed));
}

int sample_discrete(std::span<const double> probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double u = unif(rng);
  double acc = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = static_cast<int>(i);
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding gap above the cumulative sum.
  return last_positive;
}

std::vector<EpisodeStep> run_episode(const MarkovGame& game, const ActFn& act, Rng& rng,
                                     int episode) {
  const Dims& d = game.dims();
  std::vector<EpisodeStep> steps;
  steps.reserve(d.H);
  int s = game.initial_state();
  for (int h = 0; h < d.H; ++h) {
    auto [a, b] = act(h, s);
    if (a < 0 || a >= d.A || b < 0 || b >= d.B)
      throw std::logic_error("run_episode: action index out of range");
    double r = game.reward(h, s, a, b);
    steps.push_back({episode, h, s, a, b, r});
    s = sample_discrete(game.transition(h, s, a, b), rng);
  }
  return steps;
}

}  // namespace icgp
