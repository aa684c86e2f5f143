#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "icgp/experiments.hpp"
#include "icgp/v_learning.hpp"
#include "oracles.hpp"

using namespace icgp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("icgp_exp_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_config() {
  return ExperimentConfig::parse(
      "mode = decentralized\nA = 3\nB = 3\nG = 40\nn_pretrain = 2,3\n"
      "inference_games = 3\nepochs = 2\nwindow = 16\n");
}

// max_a (R nu)_a - min_b (mu^T R)_b written out directly
double matrix_gap(const std::vector<double>& R, int A, int B, const std::vector<double>& mu,
                  const std::vector<double>& nu) {
  double best_max = -1e300, best_min = 1e300;
  for (int a = 0; a < A; ++a) {
    double v = 0;
    for (int b = 0; b < B; ++b) v += R[a * B + b] * nu[b];
    best_max = std::max(best_max, v);
  }
  for (int b = 0; b < B; ++b) {
    double v = 0;
    for (int a = 0; a < A; ++a) v += R[a * B + b] * mu[a];
    best_min = std::min(best_min, v);
  }
  return best_max - best_min;
}

}  // namespace

TEST_CASE("experiments: config parsing") {
  const auto cfg = ExperimentConfig::parse("# comment\nmode = centralized\nH=2\nS = 4\nA = 5\n"
                                           "B = 5\nG = 300\nc = 0.02 # trailing\nn_mwu = 3000\n");
  CHECK(cfg.centralized);
  CHECK(cfg.dims == Dims{2, 4, 5, 5});
  CHECK(cfg.context_alg() == ContextAlg::vi_ulcb);
  CHECK(cfg.c == 0.02);
  CHECK(cfg.n_pretrain == std::vector<int>{10, 20});
  // canonical text round-trips
  const auto again = ExperimentConfig::parse(cfg.to_text());
  CHECK(again.to_text() == cfg.to_text());

  CHECK(ExperimentConfig::parse("A = 5\n").context_alg() == ContextAlg::exp3);
  CHECK(ExperimentConfig::parse("H = 2\nS = 3\n").context_alg() == ContextAlg::v_learning);

  CHECK_THROWS_AS(ExperimentConfig::parse("colour = red\n"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("A = 5\nA = 4\n"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("A = five\n"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("A\n"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("mode = centralized\ncontext = exp3\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("H = 2\ncontext = exp3\n"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::parse("n_pretrain = 20,10\n"), std::invalid_argument);
  try {
    ExperimentConfig::parse("A = 5\n\nbogus = 1\n");
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("experiments: seed namespaces are disjoint") {
  const auto cfg = tiny_config();
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) seen.insert(derive_seed(pretrain_base_seed(cfg), i));
  for (int j = 0; j < 1000; ++j) CHECK(seen.count(inference_game_seed(cfg, j)) == 0);
  CHECK(train_seed(cfg, 0) != train_seed(cfg, 1));
  CHECK(play_seed(cfg, 0, "a", 0) != play_seed(cfg, 0, "b", 0));
}

TEST_CASE("experiments: running-average rule matches a direct computation") {
  const MarkovGame game = sample_matrix_game(3, 4, 17);
  PlayLog log({1, 1, 3, 4}, 50);
  std::mt19937_64 rng(5);
  std::vector<double> sum_mu(3, 0.0), sum_nu(4, 0.0);
  std::vector<double> expect;
  const auto R = std::vector<double>(game.reward_matrix(0, 0).begin(), game.reward_matrix(0, 0).end());
  for (int g = 0; g < 50; ++g) {
    const auto mu = oracle::random_policy(1, 1, 3, rng).data();
    const auto nu = oracle::random_policy(1, 1, 4, rng).data();
    std::copy(mu.begin(), mu.end(), log.max_at(g, 0).begin());
    std::copy(nu.begin(), nu.end(), log.min_at(g, 0).begin());
    log.steps.push_back({g, 0, 0, 0, 0, 0.5});
    std::vector<double> m(3), n(4);
    for (int a = 0; a < 3; ++a) m[a] = (sum_mu[a] += mu[a]) / (g + 1);
    for (int b = 0; b < 4; ++b) n[b] = (sum_nu[b] += nu[b]) / (g + 1);
    expect.push_back(std::max(0.0, matrix_gap(R, 3, 4, m, n)));
  }
  const auto got = gap_curve(game, log, EvalRule::running_average);
  for (int g = 0; g < 50; ++g) CHECK(got[g] == doctest::Approx(expect[g]).epsilon(1e-12));
  CHECK_THROWS_AS(gap_curve(sample_game({2, 2, 3, 4}, 1), log, EvalRule::running_average),
                  std::invalid_argument);
}

TEST_CASE("experiments: per-episode and V-learning output rules") {
  std::mt19937_64 rng(9);
  const Dims d{2, 2, 2, 3};
  const MarkovGame game = oracle::random_dense_game(d, rng);
  PlayLog log(d, 4);
  std::vector<ProductPolicy> mus, nus;
  for (int g = 0; g < 4; ++g) {
    mus.push_back(oracle::random_policy(2, 2, 2, rng));
    nus.push_back(oracle::random_policy(2, 2, 3, rng));
    for (int h = 0; h < 2; ++h) {
      for (int s = 0; s < 2; ++s) {
        std::copy(mus[g].at(h, s).begin(), mus[g].at(h, s).end(), log.max_at(g * 2 + h, s).begin());
        std::copy(nus[g].at(h, s).begin(), nus[g].at(h, s).end(), log.min_at(g * 2 + h, s).begin());
      }
      log.steps.push_back({g, h, 0, 0, 0, 0.5});  // always in state 0
    }
  }
  const auto per = gap_curve(game, log, EvalRule::per_episode);
  for (int g = 0; g < 4; ++g) {
    const double gap = oracle::brute_max_response(game, nus[g]) - oracle::brute_min_response(game, mus[g]);
    CHECK(per[g] == doctest::Approx(std::max(0.0, gap)).epsilon(1e-12));
  }
  // state 1 is never visited: its output policy stays uniform
  const auto vo = gap_curve(game, log, EvalRule::v_learning_output);
  PolicyHistory hm(2, 2, 2), hn(2, 2, 3);
  for (int g = 0; g < 4; ++g) {
    for (int h = 0; h < 2; ++h) {
      hm.append(h, 0, g, {mus[g].at(h, 0).begin(), mus[g].at(h, 0).end()});
      hn.append(h, 0, g, {nus[g].at(h, 0).begin(), nus[g].at(h, 0).end()});
    }
    const auto m = hm.mixture_policy(g);
    const auto n = hn.mixture_policy(g);
    CHECK(m.at(1, 1)[0] == doctest::Approx(0.5));
    const double gap = oracle::brute_max_response(game, n) - oracle::brute_min_response(game, m);
    CHECK(vo[g] == doctest::Approx(std::max(0.0, gap)).epsilon(1e-12));
  }
}

TEST_CASE("experiments: aggregation and CSV schema") {
  const auto c = aggregate_curve("x", {{1.0, 2.0}, {3.0, 2.0}, {2.0, 2.0}});
  CHECK(c.mean[0] == doctest::Approx(2.0));
  CHECK(c.stderr_[0] == doctest::Approx(1.0 / std::sqrt(3.0)));
  CHECK(c.stderr_[1] == 0.0);
  CHECK(aggregate_curve("y", {{-1e-17}}).mean[0] == 0.0);
  CHECK_THROWS_AS(aggregate_curve("z", {{1.0}, {1.0, 2.0}}), std::invalid_argument);

  const std::string csv = curves_csv({c, aggregate_curve("y", {{0.5, 0.25}})});
  CHECK(csv.rfind("series,episode,mean_gap,stderr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find("x,1,2,") != std::string::npos);
  const auto path = fs::temp_directory_path() / "icgp_exp_curves.csv";
  std::ofstream(path) << csv;
  const auto back = read_curves_csv(path.string());
  REQUIRE(back.size() == 2);
  CHECK(back[1].label == "y");
  CHECK(back[1].mean == std::vector<double>{0.5, 0.25});
  fs::remove(path);

  CHECK(head_mean({4, 2, 1, 1, 0, 0, 0, 0, 0, 0}, 0.2) == 3.0);
  CHECK(tail_mean({4, 2, 1, 1, 0, 0, 0, 0, 1, 3}, 0.2) == 2.0);
  const std::string svg = curves_svg({c}, "t");
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("experiments: uniform checkpoint gives uniform-play curves") {
  // zero weights: every extraction logit is 0, so the softmax head is uniform
  TrainConfig tc;
  tc.init_scale = 0.0;
  tc.window_tokens = 16;
  const Dims d{1, 1, 2, 2};
  const auto pmax = init_params(model_spec(EmbeddingRole::decentralized_max, d, 30, tc), tc);
  const auto pmin = init_params(model_spec(EmbeddingRole::decentralized_min, d, 30, tc), tc);
  // symmetric coordination matrix: uniform play is an equilibrium
  const MarkovGame sym({1, 1, 2, 2}, {1, 1, 1, 1}, {1, 0, 0, 1});
  Rng rng(3);
  const auto log = infer_play_decentralized(pmax, pmin, sym, 30, rng);
  for (double g : gap_curve(sym, log, EvalRule::running_average)) CHECK(g == doctest::Approx(0.0));

  const MarkovGame game = sample_matrix_game(2, 2, 8);
  const auto R = std::vector<double>(game.reward_matrix(0, 0).begin(), game.reward_matrix(0, 0).end());
  const double uniform_gap = std::max(0.0, matrix_gap(R, 2, 2, {0.5, 0.5}, {0.5, 0.5}));
  const auto log2 = infer_play_decentralized(pmax, pmin, game, 30, rng);
  for (double g : gap_curve(game, log2, EvalRule::running_average))
    CHECK(g == doctest::Approx(uniform_gap).epsilon(1e-12));
}

TEST_CASE("experiments: pipeline is resumable, deterministic and reports missing inputs") {
  const auto cfg = tiny_config();
  const auto d1 = fresh_dir("p1"), d2 = fresh_dir("p2");
  {
    Pipeline p(cfg, d1.string(), 1);
    CHECK_THROWS_AS(p.train(), std::runtime_error);  // no dataset yet
    p.run();
    CHECK(p.stage_done("eval"));
    const auto curves = p.load_curves();
    REQUIRE(curves.size() == 3);
    CHECK(curves[0].label == "context-exp3");
    CHECK(curves[2].label == "transformer-N3");
    for (const auto& c : curves) {
      CHECK(c.mean.size() == 40);
      for (double v : c.mean) CHECK(v >= 0.0);
    }
  }
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(d1)) first[e.path().filename()] = slurp(e.path());
  {
    Pipeline p(cfg, d1.string(), 1);
    p.run();  // all stages recorded as done
  }
  for (const auto& e : fs::directory_iterator(d1))
    CHECK_MESSAGE(first[e.path().filename()] == slurp(e.path()), e.path());

  {
    Pipeline p(cfg, d2.string(), 3);
    p.run();
  }
  for (const auto& [name, text] : first)
    if (name != "timing.csv") CHECK_MESSAGE(text == slurp(d2 / name), name);

  // a changed seed reruns everything
  auto other = cfg;
  other.seed = 2;
  {
    Pipeline p(other, d2.string(), 1);
    CHECK_FALSE(p.stage_done("collect"));
  }

  fs::remove(d1 / checkpoint_name(3, 1, EmbeddingRole::decentralized_min));
  Pipeline p(cfg, d1.string(), 1);
  CHECK_FALSE(p.stage_done("infer"));
  try {
    p.eval();
    FAIL("expected a missing-checkpoint error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("missing checkpoint") != std::string::npos);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}
