#include <doctest.h>

#include <stdexcept>

#include <algorithm>
#include <cmath>

#include "icgp/equilibrium.hpp"
#include "icgp/vi_ulcb.hpp"

using namespace icgp;

TEST_CASE("fresh state and plan") {
  Dims d{2, 4, 5, 5};
  ViUlcb alg(d, {1.0, 0.1, 0, 300});
  CHECK(alg.n_mwu() == 300);
  for (int h = 0; h < 2; ++h)
    for (int s = 0; s < 4; ++s)
      for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) {
          CHECK(alg.q_upper(h, s, a, b) == 2.0);
          CHECK(alg.q_lower(h, s, a, b) == 0.0);
        }
  Rng rng(1);
  CHECK_THROWS_AS(alg.act(0, 0, rng), std::logic_error);
  alg.plan();
  for (int s = 0; s < 4; ++s) {
    CHECK(alg.v_upper(2, s) == 0.0);
    CHECK(alg.v_lower(2, s) == 0.0);
    for (double p : alg.policy().at(0, s)) CHECK(p == doctest::Approx(1.0 / 25));
  }
  CHECK(alg.history().size() == 1);
}

TEST_CASE("delta validation and iota") {
  Dims d{2, 4, 5, 5};
  CHECK_THROWS_AS(ViUlcb(d, {1.0, 0.0, 0, 300}), std::invalid_argument);
  CHECK_THROWS_AS(ViUlcb(d, {1.0, 1.0, 0, 300}), std::invalid_argument);
  ViUlcb alg(d, {1.0, 0.1, 0, 300});
  CHECK(alg.iota() == doctest::Approx(std::log(600000.0)));
  // one visit: 4 sqrt(ln 600000) ~ 14.59, which clips Q_upper at H
  CHECK(alg.bonus(1) == doctest::Approx(14.59).epsilon(1e-3));
  alg.update(0, 0, 1, 1, 0.3, 0);
  alg.plan();
  CHECK(alg.q_upper(0, 0, 1, 1) == 2.0);
  CHECK(alg.q_lower(0, 0, 1, 1) == 0.0);
  ViUlcb dflt(d, {1.0, std::nullopt, 0, 300});
  CHECK(dflt.delta() == doctest::Approx(1.0 / 600));
}

TEST_CASE("empirical model") {
  Dims d{1, 3, 2, 2};
  ViUlcb alg(d, {1.0, 0.1, 0, 10});
  alg.update(0, 0, 1, 0, 0.4, 2);
  CHECK(alg.empirical_transition(0, 0, 1, 0, 2) == 1.0);
  alg.update(0, 0, 1, 0, 0.4, 2);
  CHECK(alg.empirical_transition(0, 0, 1, 0, 2) == 1.0);
  alg.update(0, 0, 1, 0, 0.4, 2);
  alg.update(0, 0, 1, 0, 0.4, 1);
  CHECK(alg.empirical_transition(0, 0, 1, 0, 2) == 0.75);
  CHECK(alg.empirical_transition(0, 0, 1, 0, 1) == 0.25);
  CHECK(alg.visits(0, 0, 1, 0) == 4);
  long sum = 0;
  for (int sn = 0; sn < 3; ++sn) sum += alg.next_visits(0, 0, 1, 0, sn);
  CHECK(sum == 4);
  CHECK(alg.empirical_reward(0, 0, 1, 0) == doctest::Approx(0.4));
}

TEST_CASE("acting samples the stored joint") {
  Dims d{1, 1, 2, 3};
  ViUlcb alg(d, {1.0, 0.1, 0, 5});
  alg.plan();
  Rng rng(3);
  const int n = 100000;
  std::vector<int> counts(6, 0);
  for (int i = 0; i < n; ++i) {
    auto [a, b] = alg.act(0, 0, rng);
    ++counts[a * 3 + b];
  }
  const double p = 1.0 / 6, sigma = std::sqrt(p * (1 - p) / n);
  for (int c : counts) CHECK(std::abs(c / double(n) - p) <= 4 * sigma);

  std::vector<double> point(6, 0.0);
  point[4] = 1.0;
  alg.set_policy_for_testing(JointPolicy(d, point));
  for (int i = 0; i < 50; ++i) CHECK(alg.act(0, 0, rng) == std::pair{1, 1});
  auto [mu, nu] = alg.output(rng);
  CHECK(mu.at(0, 0)[1] == 1.0);
  CHECK(nu.at(0, 0)[1] == 1.0);

  Rng r1(8), r2(8);
  ViUlcb x(d, {1.0, 0.1, 0, 5}), y(d, {1.0, 0.1, 0, 5});
  x.plan();
  y.plan();
  for (int i = 0; i < 100; ++i) CHECK(x.act(0, 0, r1) == y.act(0, 0, r2));
}

TEST_CASE("output marginals of a uniform history") {
  Dims d{2, 2, 3, 2};
  ViUlcb alg(d, {1.0, 0.1, 0, 5});
  alg.plan();
  Rng rng(1);
  auto [mu, nu] = alg.output(rng);
  for (double p : mu.at(1, 1)) CHECK(p == doctest::Approx(1.0 / 3));
  for (double p : nu.at(0, 0)) CHECK(p == doctest::Approx(0.5));
  ViUlcb empty(d, {1.0, 0.1, 0, 5});
  CHECK_THROWS_AS(empty.output(rng), std::logic_error);
}

TEST_CASE("bounds stay ordered while learning") {
  auto game = sample_markov_game(3, 3, 2, 2, 5);
  Dims d = game.dims();
  ViUlcb alg(d, {0.1, std::nullopt, 50, 60});
  Rng rng(2);
  for (int g = 0; g < 60; ++g) {
    alg.plan();
    for (int h = 0; h < d.H; ++h)
      for (int s = 0; s < d.S; ++s) {
        CHECK(alg.v_lower(h, s) <= alg.v_upper(h, s) + 1e-12);
        for (int a = 0; a < d.A; ++a)
          for (int b = 0; b < d.B; ++b) {
            CHECK(alg.q_lower(h, s, a, b) <= alg.q_upper(h, s, a, b));
            CHECK(alg.q_lower(h, s, a, b) >= 0.0);
            CHECK(alg.q_upper(h, s, a, b) <= d.H);
          }
      }
    auto ep = run_episode(game, [&](int h, int s) { return alg.act(h, s, rng); }, rng, g);
    for (const auto& st : ep) {
      const int sn = st.h + 1 < d.H ? ep[st.h + 1].s : st.s;
      alg.update(st.h, st.s, st.a, st.b, st.r, sn);
    }
  }
  for (const auto& pi : alg.history()) pi.validate();
}

TEST_CASE("confidence width shrinks on a matrix game") {
  // 1-state game: V_upper - V_lower at the root decreases as visits pile up
  std::vector<double> widths_early, widths_late;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto game = sample_matrix_game(2, 2, seed);
    ViUlcb alg(game.dims(), {0.05, std::nullopt, 200, 400});
    Rng rng(seed);
    for (int g = 0; g < 400; ++g) {
      alg.plan();
      if (g == 40) widths_early.push_back(alg.v_upper(0, 0) - alg.v_lower(0, 0));
      auto [a, b] = alg.act(0, 0, rng);
      alg.update(0, 0, a, b, game.reward(0, 0, a, b), 0);
    }
    widths_late.push_back(alg.v_upper(0, 0) - alg.v_lower(0, 0));
  }
  std::sort(widths_early.begin(), widths_early.end());
  std::sort(widths_late.begin(), widths_late.end());
  CHECK(widths_late[10] < widths_early[10]);
}
