#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "icgp/dataset.hpp"

using namespace icgp;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("icgp_test_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Chi-square homogeneity statistic of two count vectors.
double chi_square(const std::vector<int>& x, const std::vector<int>& y) {
  double nx = 0, ny = 0;
  for (int v : x) nx += v;
  for (int v : y) ny += v;
  double stat = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double col = x[k] + y[k];
    if (col == 0) continue;
    const double ex = col * nx / (nx + ny), ey = col * ny / (nx + ny);
    stat += (x[k] - ex) * (x[k] - ex) / ex + (y[k] - ey) * (y[k] - ey) / ey;
  }
  return stat;
}

}  // namespace

TEST_CASE("dataset: record sizes for both families") {
  ContextConfig exp3{ContextAlg::exp3, 3000};
  const auto mat = collect_pretraining({1, 1, 5, 5}, exp3, 10, 42);
  REQUIRE(mat.size() == 10);
  for (const auto& r : mat) {
    CHECK(r.steps.size() == 3000);
    CHECK(r.aug.size() == 3000);
    CHECK_NOTHROW(r.validate());
  }
  CHECK(mat[0].game_seed == derive_seed(42, 0));
  CHECK(mat[0].steps != mat[1].steps);

  ContextConfig vl{ContextAlg::v_learning, 300};
  const auto mk = collect_pretraining({2, 4, 5, 5}, vl, 20, 7);
  REQUIRE(mk.size() == 20);
  for (const auto& r : mk) {
    CHECK(r.steps.size() == 600);
    CHECK(r.aug.size() == 2400);
  }

  ContextConfig vi{ContextAlg::vi_ulcb, 20};
  vi.n_mwu = 20;
  const auto c = collect_pretraining({2, 4, 5, 5}, vi, 2, 7);
  CHECK(c[1].aug.size() == 160);
  CHECK_NOTHROW(c[1].validate());

  CHECK_THROWS_AS(collect_pretraining({2, 4, 5, 5}, exp3, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(context_alg_from_string("ucb"), std::invalid_argument);
  CHECK_THROWS_AS(collect_pretraining({1, 1, 5, 5}, exp3, 0, 1), std::invalid_argument);
}

TEST_CASE("dataset: collection is deterministic and thread-count independent") {
  ContextConfig vl{ContextAlg::v_learning, 30};
  const auto a = collect_pretraining({2, 3, 3, 3}, vl, 6, 99, 1);
  const auto b = collect_pretraining({2, 3, 3, 3}, vl, 6, 99, 3);
  CHECK(a == b);
  const std::string p1 = temp_path("det1.jsonl"), p2 = temp_path("det2.jsonl");
  write_jsonl(a, p1);
  write_jsonl(b, p2);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("dataset: run_context logs the policies in force") {
  ContextConfig vi{ContextAlg::vi_ulcb, 5};
  vi.n_mwu = 10;
  const MarkovGame game = sample_game({2, 2, 3, 3}, 3);
  const auto run = run_context(game, 3, vi, 11);
  // first episode: fresh VI-ULCB plans uniform tables
  for (int s = 0; s < 2; ++s)
    for (double p : run.log.max_at(0, s)) CHECK(p == doctest::Approx(1.0 / 3));
  for (int t = 0; t < 10; ++t)
    for (int s = 0; s < 2; ++s) {
      double sum = 0.0;
      for (double p : run.log.min_at(t, s)) sum += p;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  CHECK(run.log.steps == run.record.steps);
}

TEST_CASE("dataset: augmented action matches the base action distribution") {
  // 1-state game, compare the base action at t = 4 with its augmented twin.
  const MarkovGame game = sample_matrix_game(3, 3, 5);
  for (ContextAlg alg : {ContextAlg::exp3, ContextAlg::v_learning}) {
    ContextConfig cfg{alg, 5};
    cfg.eta = 1.0;
    std::vector<int> base_a(3, 0), aug_a(3, 0), base_b(3, 0), aug_b(3, 0);
    for (int rep = 0; rep < 10000; ++rep) {
      const auto run = run_context(game, 5, cfg, derive_seed(123, rep));
      ++base_a[run.record.steps[4].a];
      ++aug_a[run.record.aug[4].a];
      ++base_b[run.record.steps[4].b];
      ++aug_b[run.record.aug[4].b];
    }
    // df = 2 critical value at 1e-3
    CHECK(chi_square(base_a, aug_a) < 13.82);
    CHECK(chi_square(base_b, aug_b) < 13.82);
  }
}

TEST_CASE("dataset: decentralized views") {
  TrajectoryRecord rec;
  rec.game_seed = 1;
  rec.dims = {1, 1, 2, 2};
  rec.steps = {{0, 0, 0, 1, 1, 0.37}, {1, 0, 0, 0, 0, 1.0}};
  rec.aug = {{0, 0, 0, 0}, {1, 0, 1, 1}};
  REQUIRE_NOTHROW(rec.validate());
  const auto [mx, mn] = split_decentralized(rec);
  CHECK(mx.player == Player::max);
  CHECK(mn.player == Player::min);
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(mx.steps[t].a == mn.steps[t].a);
    CHECK(mx.steps[t].r + mn.steps[t].r == doctest::Approx(1.0));
    CHECK(mx.aug[t].a == mn.aug[t].a);
  }
  const auto j = nlohmann::json::parse(view_to_json(mn));
  CHECK(j["steps"][0]["r"].get<double>() == doctest::Approx(0.63).epsilon(1e-15));
  CHECK_FALSE(j["steps"][0].contains("b"));
  CHECK_FALSE(j["aug"][0].contains("b"));
  CHECK(nlohmann::json::parse(view_to_json(mn, true))["steps"][0]["r"].get<double>() == 0.63);

  // joining both views with the opponent actions gives the base steps back
  ContextConfig vl{ContextAlg::v_learning, 10};
  const auto recs = collect_pretraining({2, 3, 2, 3}, vl, 1, 4);
  const auto [vmax, vmin] = split_decentralized(recs[0]);
  for (std::size_t t = 0; t < recs[0].steps.size(); ++t) {
    const auto& e = recs[0].steps[t];
    const EpisodeStep joined{vmax.steps[t].g, vmax.steps[t].h, vmax.steps[t].s,
                             vmax.steps[t].a, vmin.steps[t].a, vmax.steps[t].r};
    CHECK(joined == e);
  }
  const auto ps = prompt_steps(vmax);
  CHECK(ps[3].b == -1);
}

TEST_CASE("dataset: jsonl round trip and errors") {
  const std::string path = temp_path("rt.jsonl");
  write_jsonl({}, path);
  CHECK(slurp(path).empty());
  CHECK(read_jsonl(path).empty());

  ContextConfig vl{ContextAlg::v_learning, 20};
  const auto recs = collect_pretraining({2, 2, 3, 2}, vl, 3, 8);
  write_jsonl(recs, path);
  CHECK(read_jsonl(path) == recs);

  // the schema keeps its field order
  const std::string text = slurp(path);
  CHECK(text.rfind("{\"game_seed\":", 0) == 0);
  CHECK(text.find("\"dims\":{\"H\":2,\"S\":2,\"A\":3,\"B\":2}") != std::string::npos);

  write_jsonl(recs, path, true);
  for (const auto& r : read_jsonl(path))
    for (const auto& e : r.steps) CHECK(e.r == round2(e.r));

  // truncate the last line
  write_jsonl(recs, path);
  const std::string full = slurp(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << full.substr(0, full.size() - 40);
  }
  try {
    read_jsonl(path);
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  CHECK_THROWS_AS(read_jsonl(temp_path("does_not_exist.jsonl")), std::runtime_error);
  std::remove(path.c_str());
}
