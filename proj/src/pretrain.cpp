#include "icgp/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "icgp/no_regret.hpp"
#include "icgp/parallel.hpp"

namespace icgp {

std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam" || s == "adaptive") return Optimizer::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

EmbeddingSpec model_spec(EmbeddingRole role, const Dims& dims, int episodes,
                         const TrainConfig& cfg) {
  if (episodes < 1) throw std::invalid_argument("model_spec: episodes must be >= 1");
  const int full = 2 * episodes * dims.H;
  int block = cfg.window_tokens > 0 ? std::min(cfg.window_tokens, full) : full;
  block -= block % 2;
  if (block < 2) throw std::invalid_argument("model_spec: window must hold at least one step");
  return normalized_spec(role, dims, episodes, cfg.scratch, block);
}

TransformerParams init_params(const EmbeddingSpec& spec, const TrainConfig& cfg) {
  if (cfg.layers < 0 || cfg.heads < 0 || cfg.hidden < 0)
    throw std::invalid_argument("init_params: negative model size");
  TransformerParams p;
  p.d = spec.dim();
  p.spec = spec;
  p.head = cfg.head;
  const int d = p.d;
  const int hidden = cfg.hidden > 0 ? cfg.hidden : d;
  Rng rng(derive_seed(cfg.seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Mat& m, double sd) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = sd * cfg.init_scale * normal(rng);
  };
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg.layers; ++l) {
    Layer layer = zero_layer(d, cfg.heads, hidden, cfg.activation);
    for (auto& head : layer.heads) {
      fill(head.Q, inv_sqrt_d);
      fill(head.K, inv_sqrt_d);
      fill(head.V, 0.5 * inv_sqrt_d);
    }
    fill(layer.mlp.W1, std::sqrt(2.0) * inv_sqrt_d);
    fill(layer.mlp.W2, 0.5 / std::sqrt(static_cast<double>(hidden)));
    p.layers.push_back(std::move(layer));
  }
  p.validate();
  return p;
}

std::vector<TrainBlock> make_blocks(const EmbeddingSpec& spec, std::span<const PromptStep> steps,
                                    std::span<const int> labels) {
  const int S = spec.dims.S;
  const int T = static_cast<int>(steps.size());
  if (static_cast<int>(labels.size()) != T * S)
    throw std::invalid_argument("make_blocks: need one label per (t, s)");
  const int per_block = spec.block_tokens > 0 ? std::max(1, spec.block_tokens / 2) : T;
  std::vector<TrainBlock> out;
  for (int t0 = 0; t0 < T; t0 += per_block) {
    const int t1 = std::min(T, t0 + per_block);
    TrainBlock block;
    // The last action token carries no target; drop it.
    TokenMatrix full = embed(spec, steps.subspan(t0, t1 - t0 - 1), steps[t1 - 1].s, t0);
    block.base = std::move(full);
    for (int t = t0; t < t1; ++t) {
      const int col = 2 * (t - t0);
      const PromptStep& st = steps[t];
      for (int s = 0; s < S; ++s) {
        const int label = labels[static_cast<std::size_t>(t) * S + s];
        if (s == st.s) {
          block.targets.push_back({col, false, label});
        } else {
          const TokenPos pos{t / spec.dims.H, t % spec.dims.H, t + 1, col + 1};
          block.targets.push_back({static_cast<int>(block.side.size()), true, label});
          block.side.push_back({col + 1, state_token(spec, s, pos)});
        }
      }
    }
    out.push_back(std::move(block));
  }
  return out;
}

std::vector<TrainBlock> training_blocks(const std::vector<TrajectoryRecord>& records,
                                        const EmbeddingSpec& spec) {
  std::vector<TrainBlock> out;
  for (const auto& rec : records) {
    if (!(rec.dims == spec.dims)) throw std::invalid_argument("training_blocks: dims mismatch");
    std::vector<int> labels;
    labels.reserve(rec.aug.size());
    std::vector<PromptStep> steps;
    switch (spec.role) {
      case EmbeddingRole::centralized:
        steps = prompt_steps(rec);
        for (const auto& e : rec.aug) labels.push_back(e.a * rec.dims.B + e.b);
        break;
      case EmbeddingRole::decentralized_max:
      case EmbeddingRole::decentralized_min: {
        const auto views = split_decentralized(rec);
        const auto& view =
            spec.role == EmbeddingRole::decentralized_max ? views.first : views.second;
        steps = prompt_steps(view);
        for (const auto& e : view.aug) labels.push_back(e.a);
        break;
      }
    }
    auto blocks = make_blocks(spec, steps, labels);
    for (auto& b : blocks) out.push_back(std::move(b));
  }
  return out;
}

int count_targets(std::span<const TrainBlock> blocks) {
  int n = 0;
  for (const auto& b : blocks) n += static_cast<int>(b.targets.size());
  return n;
}

double block_nll(const TransformerParams& params, const TrainBlock& block, TransformerParams* grad,
                 double weight) {
  if (params.head == HeadMode::simplex)
    throw std::invalid_argument("mle loss: the simplex head has no likelihood; use softmax");
  if (grad && params.head != HeadMode::softmax)
    throw std::invalid_argument("mle gradient: training requires the softmax head");
  const BlockForward fwd(params, block.base, block.side);
  const Mat& out = fwd.base_output();
  const Mat& side_out = fwd.side_output();
  const int off = params.spec.c_offset();
  const int K = params.output_arity();
  Mat d_base, d_side;
  if (grad) {
    d_base = Mat::Zero(out.rows(), out.cols());
    d_side = Mat::Zero(side_out.rows(), side_out.cols());
  }
  double total = 0.0;
  std::vector<double> z(K);
  for (const Target& tg : block.targets) {
    const Mat& src = tg.side ? side_out : out;
    for (int k = 0; k < K; ++k) z[k] = src(off + k, tg.column);
    if (params.head == HeadMode::softmax) {
      const double zmax = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - zmax);
      total += -(z[tg.label] - zmax - std::log(sum));
      if (grad) {
        Mat& dst = tg.side ? d_side : d_base;
        for (int k = 0; k < K; ++k)
          dst(off + k, tg.column) += weight * (std::exp(z[k] - zmax) / sum - (k == tg.label));
      }
    } else {
      const auto p = apply_head(params, z);
      total += p[tg.label] > 0.0 ? -std::log(p[tg.label]) : std::numeric_limits<double>::infinity();
    }
  }
  if (grad) fwd.backward(d_base, d_side, *grad);
  return total;
}

double mle_loss(const TransformerParams& params, std::span<const TrainBlock> blocks) {
  const int n = count_targets(blocks);
  if (n == 0) throw std::invalid_argument("mle_loss: no targets");
  double total = 0.0;
  for (const auto& b : blocks) total += block_nll(params, b, nullptr);
  return total / n;
}

double mle_loss_and_grad(const TransformerParams& params, std::span<const TrainBlock> blocks,
                         std::span<const int> indices, TransformerParams& grad, int threads) {
  int n = 0;
  for (int i : indices) n += static_cast<int>(blocks[i].targets.size());
  if (n == 0) throw std::invalid_argument("mle_loss_and_grad: no targets");
  const double w = 1.0 / n;
  const int m = static_cast<int>(indices.size());
  std::vector<TransformerParams> parts(m);
  std::vector<double> losses(m, 0.0);
  parallel_for(m, threads, [&](int k) {
    parts[k] = params.zeros_like();
    losses[k] = block_nll(params, blocks[indices[k]], &parts[k], w);
  });
  grad = params.zeros_like();
  double total = 0.0;
  for (int k = 0; k < m; ++k) {
    grad.axpy(1.0, parts[k]);
    total += losses[k];
  }
  return total / n;
}

std::string LossReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,mean_nll,wall_seconds\n";
  for (std::size_t e = 0; e < epoch_nll.size(); ++e)
    out << e << ',' << epoch_nll[e] << ',' << (e < epoch_seconds.size() ? epoch_seconds[e] : 0.0)
        << '\n';
  return out.str();
}

namespace {

Vec flatten(const TransformerParams& p) {
  Vec out(static_cast<Eigen::Index>(p.num_parameters()));
  Eigen::Index k = 0;
  p.for_each_matrix([&](const Mat& m) {
    out.segment(k, m.size()) = Eigen::Map<const Vec>(m.data(), m.size());
    k += m.size();
  });
  return out;
}

void unflatten(TransformerParams& p, const Vec& v) {
  Eigen::Index k = 0;
  p.for_each_matrix([&](Mat& m) {
    Eigen::Map<Vec>(m.data(), m.size()) = v.segment(k, m.size());
    k += m.size();
  });
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<TrainBlock>& blocks,
                  const EmbeddingSpec& spec) {
  if (blocks.empty() || count_targets(blocks) == 0)
    throw std::invalid_argument("train: empty dataset");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr > 0.0))
    throw std::invalid_argument("train: hyperparameters must be positive");
  if (cfg.head != HeadMode::softmax)
    throw std::invalid_argument("train: training requires the softmax head");
  TrainResult res;
  res.params = init_params(spec, cfg);
  TransformerParams& params = res.params;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  // Initial loss on every block.
  {
    std::vector<double> part(blocks.size());
    parallel_for(static_cast<int>(blocks.size()), cfg.threads,
                 [&](int i) { part[i] = block_nll(params, blocks[i], nullptr); });
    res.report.epoch_nll.push_back(std::accumulate(part.begin(), part.end(), 0.0) /
                                   count_targets(blocks));
    res.report.epoch_seconds.push_back(elapsed());
  }

  Vec theta = flatten(params);
  Vec m1 = Vec::Zero(theta.size()), m2 = Vec::Zero(theta.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  Rng rng(derive_seed(cfg.seed, 0x5eed));
  std::vector<int> order(blocks.size());
  std::iota(order.begin(), order.end(), 0);
  TransformerParams grad;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll_sum = 0.0;
    long targets = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), at + cfg.batch_size);
      const std::span<const int> batch(order.data() + at, end - at);
      int n = 0;
      for (int i : batch) n += static_cast<int>(blocks[i].targets.size());
      if (n == 0) continue;
      const double loss = mle_loss_and_grad(params, blocks, batch, grad, cfg.threads);
      nll_sum += loss * n;
      targets += n;
      const Vec g = flatten(grad);
      ++step;
      if (cfg.optimizer == Optimizer::sgd) {
        theta -= cfg.lr * g;
      } else {
        m1 = b1 * m1 + (1.0 - b1) * g;
        m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        theta.array() -= cfg.lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
      }
      unflatten(params, theta);
    }
    res.report.epoch_nll.push_back(targets ? nll_sum / targets : 0.0);
    res.report.epoch_seconds.push_back(elapsed());
  }
  return res;
}

namespace {

int block_steps(const EmbeddingSpec& spec, int total_steps) {
  return spec.block_tokens > 0 ? std::max(1, spec.block_tokens / 2) : total_steps;
}

void check_model(const TransformerParams& p, const Dims& dims, EmbeddingRole role) {
  p.validate();
  if (p.spec.role != role) throw std::invalid_argument("infer_play: checkpoint has the wrong role");
  if (!(p.spec.dims == dims))
    throw std::invalid_argument("infer_play: checkpoint dimensions do not match the game");
}

std::vector<int> query_order(int S, int visited) {
  std::vector<int> order;
  for (int s = 0; s < S; ++s)
    if (s != visited) order.push_back(s);
  order.push_back(visited);
  return order;
}

}  // namespace

PlayLog infer_play_centralized(const TransformerParams& model, const MarkovGame& game, int G,
                               Rng& rng) {
  const Dims d = game.dims();
  check_model(model, d, EmbeddingRole::centralized);
  if (G < 1) throw std::invalid_argument("infer_play: episodes must be >= 1");
  const EmbeddingSpec& spec = model.spec;
  const int T = G * d.H;
  const int per_block = block_steps(spec, T);
  PlayLog log(d, G);
  IncrementalForward inc(model);
  int s = game.initial_state();
  for (int t = 0; t < T; ++t) {
    const int g = t / d.H, h = t % d.H;
    if (t % per_block == 0) inc.reset();
    const int index = 2 * (t % per_block) + 1;
    const TokenPos pos{g, h, t + 1, index};
    std::vector<double> joint_here;
    // Other states first: the visited state's token joins the prompt.
    for (int sp : query_order(d.S, s)) {
      const Vec tok = state_token(spec, sp, pos);
      const Vec out = sp == s ? inc.push(tok) : inc.query(tok);
      const auto joint = apply_head(model, extract(model, out));
      auto mu = log.max_at(t, sp);
      auto nu = log.min_at(t, sp);
      for (int a = 0; a < d.A; ++a)
        for (int b = 0; b < d.B; ++b) {
          mu[a] += joint[a * d.B + b];
          nu[b] += joint[a * d.B + b];
        }
      if (sp == s) joint_here = joint;
    }
    const int k = sample_discrete(joint_here, rng);
    const int a = k / d.B, b = k % d.B;
    const double r = game.reward(h, s, a, b);
    const int s_next = sample_discrete(game.transition(h, s, a, b), rng);
    log.steps.push_back({g, h, s, a, b, r});
    inc.push(action_token(spec, {g, h, s, a, b, r}, {g, h, t + 1, index + 1}));
    s = s_next;
  }
  return log;
}

PlayLog infer_play_decentralized(const TransformerParams& max_model,
                                 const TransformerParams& min_model, const MarkovGame& game, int G,
                                 Rng& rng) {
  const Dims d = game.dims();
  check_model(max_model, d, EmbeddingRole::decentralized_max);
  check_model(min_model, d, EmbeddingRole::decentralized_min);
  if (G < 1) throw std::invalid_argument("infer_play: episodes must be >= 1");
  if (max_model.spec.block_tokens != min_model.spec.block_tokens)
    throw std::invalid_argument("infer_play: the two models use different block lengths");
  const int T = G * d.H;
  const int per_block = block_steps(max_model.spec, T);
  PlayLog log(d, G);
  IncrementalForward inc_max(max_model), inc_min(min_model);
  int s = game.initial_state();
  for (int t = 0; t < T; ++t) {
    const int g = t / d.H, h = t % d.H;
    if (t % per_block == 0) {
      inc_max.reset();
      inc_min.reset();
    }
    const int index = 2 * (t % per_block) + 1;
    const TokenPos pos{g, h, t + 1, index};
    std::vector<double> p_here, q_here;
    for (int sp : query_order(d.S, s)) {
      const Vec tmax = state_token(max_model.spec, sp, pos);
      const Vec tmin = state_token(min_model.spec, sp, pos);
      const Vec omax = sp == s ? inc_max.push(tmax) : inc_max.query(tmax);
      const Vec omin = sp == s ? inc_min.push(tmin) : inc_min.query(tmin);
      const auto p = apply_head(max_model, extract(max_model, omax));
      const auto q = apply_head(min_model, extract(min_model, omin));
      std::copy(p.begin(), p.end(), log.max_at(t, sp).begin());
      std::copy(q.begin(), q.end(), log.min_at(t, sp).begin());
      if (sp == s) {
        p_here = p;
        q_here = q;
      }
    }
    const int a = sample_discrete(p_here, rng);
    const int b = sample_discrete(q_here, rng);
    const double r = game.reward(h, s, a, b);
    const int s_next = sample_discrete(game.transition(h, s, a, b), rng);
    log.steps.push_back({g, h, s, a, b, r});
    const TokenPos apos{g, h, t + 1, index + 1};
    inc_max.push(action_token(max_model.spec, {g, h, s, a, -1, r}, apos));
    inc_min.push(action_token(min_model.spec, {g, h, s, b, -1, 1.0 - r}, apos));
    s = s_next;
  }
  return log;
}

}  // namespace icgp
