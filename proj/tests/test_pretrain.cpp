#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "icgp/pretrain.hpp"

using namespace icgp;

namespace {

// d = 8 model whose part c is rows 4..5 (two actions).
TransformerParams tiny_model(std::uint64_t seed, int heads = 2, int layers = 1) {
  TransformerParams p;
  p.spec.role = EmbeddingRole::decentralized_max;
  p.spec.dims = {1, 1, 2, 1};
  p.d = 8;
  p.head = HeadMode::softmax;
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int l = 0; l < layers; ++l) {
    Layer layer = zero_layer(8, heads, 8);
    for (auto& h : layer.heads)
      for (Mat* m : {&h.Q, &h.K, &h.V})
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
    for (Mat* m : {&layer.mlp.W1, &layer.mlp.W2})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

TrainBlock tiny_block(std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  TrainBlock b;
  b.base = Mat(8, 5);
  for (Eigen::Index i = 0; i < b.base.size(); ++i) b.base.data()[i] = n(rng);
  for (int c = 0; c < 5; ++c) b.targets.push_back({c, false, static_cast<int>(rng() % 2)});
  for (int q = 0; q < 2; ++q) {
    Vec tok(8);
    for (int i = 0; i < 8; ++i) tok[i] = n(rng);
    b.side.push_back({2 + 2 * q, tok});
    b.targets.push_back({q, true, q});
  }
  return b;
}

double max_rel_error(std::uint64_t seed, int probes) {
  TransformerParams p = tiny_model(seed);
  const TrainBlock block = tiny_block(seed + 100);
  TransformerParams grad = p.zeros_like();
  block_nll(p, block, &grad);
  std::vector<Mat*> mats;
  p.for_each_matrix([&](Mat& m) { mats.push_back(&m); });
  std::vector<const Mat*> gmats;
  grad.for_each_matrix([&](const Mat& m) { gmats.push_back(&m); });
  Rng rng(seed + 7);
  double worst = 0.0;
  const double eps = 1e-5;
  for (int k = 0; k < probes; ++k) {
    const std::size_t which = rng() % mats.size();
    Mat& m = *mats[which];
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % m.size());
    const double keep = m.data()[i];
    m.data()[i] = keep + eps;
    const double up = block_nll(p, block, nullptr);
    m.data()[i] = keep - eps;
    const double down = block_nll(p, block, nullptr);
    m.data()[i] = keep;
    const double fd = (up - down) / (2 * eps);
    const double g = gmats[which]->data()[i];
    worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
  }
  return worst;
}

TrajectoryRecord constant_record(std::uint64_t seed, int G) {
  const MarkovGame game = sample_matrix_game(3, 3, seed);
  TrajectoryRecord rec;
  rec.game_seed = seed;
  rec.dims = {1, 1, 3, 3};
  Rng rng(seed);
  for (int g = 0; g < G; ++g) {
    const int b = static_cast<int>(rng() % 3);
    rec.steps.push_back({g, 0, 0, 0, b, game.reward(0, 0, 0, b)});
    rec.aug.push_back({g, 0, 0, b});
  }
  return rec;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("pretrain: gradient matches central differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) CHECK(max_rel_error(seed, 200) <= 1e-4);
}

TEST_CASE("pretrain: gradient through a full embedded model with clipping") {
  TrainConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.scratch = 2;
  cfg.window_tokens = 8;
  cfg.seed = 3;
  cfg.init_scale = 2.0;
  ContextConfig vl{ContextAlg::v_learning, 3};
  const auto recs = collect_pretraining({2, 3, 2, 2}, vl, 1, 5);
  const EmbeddingSpec spec = model_spec(EmbeddingRole::centralized, {2, 3, 2, 2}, 3, cfg);
  const auto blocks = training_blocks(recs, spec);
  REQUIRE(blocks.size() == 2);  // 6 steps, 4 per block
  CHECK(blocks[0].side.size() == 8);
  TransformerParams p = init_params(spec, cfg);
  p.clip_radius = 2.5;
  TransformerParams grad;
  const std::vector<int> idx{0, 1};
  mle_loss_and_grad(p, blocks, idx, grad);
  std::vector<Mat*> mats;
  p.for_each_matrix([&](Mat& m) { mats.push_back(&m); });
  std::vector<const Mat*> gmats;
  grad.for_each_matrix([&](const Mat& m) { gmats.push_back(&m); });
  Rng rng(9);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t which = rng() % mats.size();
    Mat& m = *mats[which];
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % m.size());
    const double keep = m.data()[i];
    m.data()[i] = keep + 1e-5;
    const double up = mle_loss(p, blocks);
    m.data()[i] = keep - 1e-5;
    const double down = mle_loss(p, blocks);
    m.data()[i] = keep;
    const double fd = (up - down) / 2e-5;
    const double g = gmats[which]->data()[i];
    worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("pretrain: loss examples") {
  TrainConfig cfg;
  cfg.layers = 0;
  const auto recs = collect_pretraining({1, 1, 5, 5}, {ContextAlg::exp3, 20}, 1, 2);
  const EmbeddingSpec spec = model_spec(EmbeddingRole::decentralized_max, {1, 1, 5, 5}, 20, cfg);
  const auto blocks = training_blocks(recs, spec);
  TransformerParams p = init_params(spec, cfg);
  CHECK(mle_loss(p, blocks) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  p.head = HeadMode::zeta;
  p.zeta = 1.0;
  TrainConfig big;
  big.seed = 4;
  TransformerParams q = init_params(model_spec(EmbeddingRole::decentralized_max, {1, 1, 5, 5}, 20, big), big);
  q.head = HeadMode::zeta;
  q.zeta = 1.0;
  CHECK(mle_loss(p, blocks) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(mle_loss(q, training_blocks(recs, q.spec)) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  p.head = HeadMode::simplex;
  CHECK_THROWS_AS(mle_loss(p, blocks), std::invalid_argument);

  // synthetic p(target) = 1
  TransformerParams id = tiny_model(1, 0, 0);
  TrainBlock b;
  b.base = Mat::Zero(8, 1);
  b.base(4, 0) = 800.0;
  b.targets.push_back({0, false, 0});
  CHECK(block_nll(id, b, nullptr) == 0.0);

  // shift invariance of the softmax head
  TrainBlock shifted = tiny_block(3);
  const double before = block_nll(id, shifted, nullptr);
  shifted.base.row(4).array() += 3.0;
  shifted.base.row(5).array() += 3.0;
  for (auto& s : shifted.side) {
    s.token[4] += 3.0;
    s.token[5] += 3.0;
  }
  CHECK(block_nll(id, shifted, nullptr) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("pretrain: gradient structure") {
  TransformerParams p = tiny_model(2);
  for (auto& h : p.layers[0].heads) h.V.setZero();
  const TrainBlock block = tiny_block(5);
  TransformerParams g = p.zeros_like();
  block_nll(p, block, &g);
  for (const auto& h : g.layers[0].heads) {
    CHECK(h.Q.cwiseAbs().maxCoeff() == 0.0);
    CHECK(h.K.cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(g.layers[0].heads[0].V.cwiseAbs().maxCoeff() > 0.0);

  // linearity: two copies of a block give twice the summed gradient
  TransformerParams once = p.zeros_like(), twice = p.zeros_like();
  block_nll(p, block, &once);
  block_nll(p, block, &twice);
  block_nll(p, block, &twice);
  std::vector<const Mat*> a, b;
  once.for_each_matrix([&](const Mat& m) { a.push_back(&m); });
  twice.for_each_matrix([&](const Mat& m) { b.push_back(&m); });
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(((*b[k]) - 2.0 * (*a[k])).cwiseAbs().maxCoeff() < 1e-14);

  // the batch mean is unchanged by duplication
  const std::vector<TrainBlock> blocks{block};
  TransformerParams g1, g2;
  const std::vector<int> one{0}, dup{0, 0};
  const double l1 = mle_loss_and_grad(p, blocks, one, g1);
  const double l2 = mle_loss_and_grad(p, blocks, dup, g2);
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-14));

  TransformerParams bad = p;
  bad.head = HeadMode::zeta;
  bad.zeta = 0.5;
  TransformerParams gz = bad.zeros_like();
  CHECK_THROWS_AS(block_nll(bad, block, &gz), std::invalid_argument);
}

TEST_CASE("pretrain: gradient does not depend on the thread count") {
  TrainConfig cfg;
  cfg.window_tokens = 16;
  const auto recs = collect_pretraining({1, 1, 3, 3}, {ContextAlg::exp3, 40}, 2, 2);
  const EmbeddingSpec spec = model_spec(EmbeddingRole::decentralized_min, {1, 1, 3, 3}, 40, cfg);
  const auto blocks = training_blocks(recs, spec);
  const TransformerParams p = init_params(spec, cfg);
  std::vector<int> idx(blocks.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  TransformerParams g1, g3;
  const double l1 = mle_loss_and_grad(p, blocks, idx, g1, 1);
  const double l3 = mle_loss_and_grad(p, blocks, idx, g3, 3);
  CHECK(l1 == l3);
  std::vector<const Mat*> a, b;
  g1.for_each_matrix([&](const Mat& m) { a.push_back(&m); });
  g3.for_each_matrix([&](const Mat& m) { b.push_back(&m); });
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(*a[k] == *b[k]);
}

TEST_CASE("pretrain: learns a constant policy") {
  std::vector<TrajectoryRecord> recs;
  for (std::uint64_t s = 1; s <= 4; ++s) recs.push_back(constant_record(s, 50));
  TrainConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.window_tokens = 20;
  cfg.batch_size = 1;
  cfg.epochs = 100;
  const EmbeddingSpec spec = model_spec(EmbeddingRole::decentralized_max, {1, 1, 3, 3}, 50, cfg);
  const auto blocks = training_blocks(recs, spec);
  const auto res = train(cfg, blocks, spec);
  CHECK(res.report.epoch_nll.size() == 101);
  CHECK(res.report.epoch_nll.back() < 0.05);
  CHECK(mle_loss(res.params, blocks) < 0.05);
  CHECK(res.report.to_csv().rfind("epoch,mean_nll,wall_seconds\n", 0) == 0);
}

TEST_CASE("pretrain: training is deterministic") {
  const auto recs = collect_pretraining({1, 1, 3, 3}, {ContextAlg::exp3, 30}, 3, 8);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.window_tokens = 20;
  cfg.batch_size = 4;
  cfg.seed = 12;
  const EmbeddingSpec spec = model_spec(EmbeddingRole::decentralized_max, {1, 1, 3, 3}, 30, cfg);
  const auto blocks = training_blocks(recs, spec);
  const auto a = train(cfg, blocks, spec);
  cfg.threads = 3;
  const auto b = train(cfg, blocks, spec);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string pa = (dir / "icgp_det_a.bin").string(), pb = (dir / "icgp_det_b.bin").string();
  save_checkpoint(a.params, pa);
  save_checkpoint(b.params, pb);
  CHECK(slurp(pa) == slurp(pb));
  CHECK(a.report.epoch_nll == b.report.epoch_nll);
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);

  cfg.head = HeadMode::simplex;
  CHECK_THROWS_AS(train(cfg, blocks, spec), std::invalid_argument);
  CHECK_THROWS_AS(train(TrainConfig{}, {}, spec), std::invalid_argument);
}

TEST_CASE("pretrain: inference uses the training block layout") {
  const Dims dims{2, 3, 2, 3};
  const int G = 6;
  TrainConfig cfg;
  cfg.window_tokens = 6;  // 3 steps per block
  cfg.seed = 5;
  cfg.init_scale = 2.0;
  const auto smax = model_spec(EmbeddingRole::decentralized_max, dims, G, cfg);
  const auto smin = model_spec(EmbeddingRole::decentralized_min, dims, G, cfg);
  const TransformerParams pmax = init_params(smax, cfg);
  cfg.seed = 6;
  const TransformerParams pmin = init_params(smin, cfg);
  const MarkovGame game = sample_game(dims, 17);
  Rng rng(1);
  const PlayLog log = infer_play_decentralized(pmax, pmin, game, G, rng);
  REQUIRE(log.steps.size() == 12);

  TrajectoryRecord rec;
  rec.dims = dims;
  rec.steps = log.steps;
  for (int t = 0; t < 12; ++t)
    for (int s = 0; s < 3; ++s) rec.aug.push_back({t, s, 0, 0});
  const auto [vmax, vmin] = split_decentralized(rec);
  const auto smax_steps = prompt_steps(vmax), smin_steps = prompt_steps(vmin);
  for (int t = 0; t < 12; ++t) {
    const int t0 = t - t % 3;
    for (int s = 0; s < 3; ++s) {
      const std::span<const PromptStep> pre_max(smax_steps.data() + t0, t - t0);
      const std::span<const PromptStep> pre_min(smin_steps.data() + t0, t - t0);
      const auto want_max = induced_policy(pmax, embed(smax, pre_max, s, t0));
      const auto want_min = induced_policy(pmin, embed(smin, pre_min, s, t0));
      for (int a = 0; a < 2; ++a) CHECK(std::abs(log.max_at(t, s)[a] - want_max[a]) < 1e-10);
      for (int b = 0; b < 3; ++b) CHECK(std::abs(log.min_at(t, s)[b] - want_min[b]) < 1e-10);
    }
  }

  // centralized model on the same game
  const auto sj = model_spec(EmbeddingRole::centralized, dims, G, cfg);
  const TransformerParams pj = init_params(sj, cfg);
  Rng rng2(2);
  const PlayLog lj = infer_play_centralized(pj, game, G, rng2);
  const auto steps = prompt_steps(TrajectoryRecord{0, dims, lj.steps, {}});
  for (int t : {0, 4, 11}) {
    const int t0 = t - t % 3;
    const auto joint = induced_policy(pj, embed(sj, std::span(steps).subspan(t0, t - t0), 1, t0));
    for (int a = 0; a < 2; ++a) {
      double m = 0.0;
      for (int b = 0; b < 3; ++b) m += joint[a * 3 + b];
      CHECK(std::abs(lj.max_at(t, 1)[a] - m) < 1e-10);
    }
  }

  CHECK_THROWS_AS(infer_play_decentralized(pmin, pmax, game, G, rng), std::invalid_argument);
  CHECK_THROWS_AS(infer_play_centralized(pj, sample_game({2, 2, 2, 3}, 1), G, rng),
                  std::invalid_argument);
}

TEST_CASE("pretrain: one-episode matrix inference plays the empty-prefix prior") {
  TrainConfig cfg;
  cfg.seed = 2;
  const Dims dims{1, 1, 5, 5};
  const auto smax = model_spec(EmbeddingRole::decentralized_max, dims, 1, cfg);
  const auto smin = model_spec(EmbeddingRole::decentralized_min, dims, 1, cfg);
  const auto pmax = init_params(smax, cfg), pmin = init_params(smin, cfg);
  Rng rng(3);
  const PlayLog log = infer_play_decentralized(pmax, pmin, sample_game(dims, 4), 1, rng);
  CHECK(log.steps.size() == 1);
  const auto prior = induced_policy(pmax, embed(smax, {}, 0, 0));
  for (int a = 0; a < 5; ++a) CHECK(log.max_at(0, 0)[a] == doctest::Approx(prior[a]).epsilon(1e-12));
}

TEST_CASE("pretrain: inference runtime grows at most quadratically") {
  TrainConfig cfg;
  const Dims dims{1, 1, 5, 5};
  auto time_for = [&](int G) {
    const auto smax = model_spec(EmbeddingRole::decentralized_max, dims, G, cfg);
    const auto smin = model_spec(EmbeddingRole::decentralized_min, dims, G, cfg);
    const auto pmax = init_params(smax, cfg), pmin = init_params(smin, cfg);
    const MarkovGame game = sample_game(dims, 4);
    Rng rng(3);
    const auto start = std::chrono::steady_clock::now();
    infer_play_decentralized(pmax, pmin, game, G, rng);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  time_for(50);  // warm-up
  const double small = time_for(200), large = time_for(800);
  CHECK(large <= 16.0 * small * 2.0 + 0.05);
}
