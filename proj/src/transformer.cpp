#include "icgp/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "icgp/no_regret.hpp"

namespace icgp {

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::simplex: return "simplex";
    case HeadMode::softmax: return "softmax";
    case HeadMode::zeta: return "zeta";
  }
  return "?";
}

std::string to_string(EmbeddingRole r) {
  switch (r) {
    case EmbeddingRole::centralized: return "centralized";
    case EmbeddingRole::decentralized_max: return "decentralized_max";
    case EmbeddingRole::decentralized_min: return "decentralized_min";
  }
  return "?";
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "softmax"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "simplex") return HeadMode::simplex;
  if (s == "softmax") return HeadMode::softmax;
  if (s == "zeta") return HeadMode::zeta;
  throw std::invalid_argument("unknown head mode: " + s);
}

EmbeddingRole embedding_role_from_string(const std::string& s) {
  if (s == "centralized") return EmbeddingRole::centralized;
  if (s == "decentralized_max") return EmbeddingRole::decentralized_max;
  if (s == "decentralized_min") return EmbeddingRole::decentralized_min;
  throw std::invalid_argument("unknown embedding role: " + s);
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "softmax") return Activation::softmax;
  throw std::invalid_argument("unknown activation: " + s);
}

// ---------------------------------------------------------------------------
// Embeddings

int EmbeddingSpec::action_width() const {
  switch (role) {
    case EmbeddingRole::centralized: return dims.A + dims.B + 1;
    case EmbeddingRole::decentralized_max: return dims.A + 1;
    case EmbeddingRole::decentralized_min: return dims.B + 1;
  }
  return 0;
}

int EmbeddingSpec::output_arity() const {
  switch (role) {
    case EmbeddingRole::centralized: return dims.A * dims.B;
    case EmbeddingRole::decentralized_max: return dims.A;
    case EmbeddingRole::decentralized_min: return dims.B;
  }
  return 0;
}

EmbeddingSpec normalized_spec(EmbeddingRole role, Dims dims, int episodes, int scratch,
                              int block_tokens) {
  EmbeddingSpec spec;
  spec.role = role;
  spec.dims = dims;
  spec.scratch = scratch;
  spec.g_scale = 1.0 / episodes;
  spec.h_scale = 1.0 / dims.H;
  spec.t_scale = 1.0 / (static_cast<double>(episodes) * dims.H);
  spec.i_scale = 1.0 / block_tokens;
  spec.block_tokens = block_tokens;
  return spec;
}

namespace {

void write_pos(const EmbeddingSpec& spec, Vec& x, const TokenPos& pos, bool state_token) {
  x[spec.pos_g()] = (pos.g + 1) * spec.g_scale;
  x[spec.pos_h()] = (pos.h + 1) * spec.h_scale;
  x[spec.pos_t()] = pos.t * spec.t_scale;
  x[spec.pos_eh(pos.h)] = 1.0;
  x[spec.pos_v()] = state_token ? 1.0 : 0.0;
  const double i = pos.index * spec.i_scale;
  x[spec.pos_i()] = i;
  x[spec.pos_i2()] = i * i;
  x[spec.pos_one()] = 1.0;
}

}  // namespace

Vec state_token(const EmbeddingSpec& spec, int s, const TokenPos& pos) {
  if (s < 0 || s >= spec.dims.S) throw std::invalid_argument("state_token: state out of range");
  Vec x = Vec::Zero(spec.dim());
  x[spec.b_offset() + s] = 1.0;
  write_pos(spec, x, pos, true);
  return x;
}

Vec action_token(const EmbeddingSpec& spec, const PromptStep& step, const TokenPos& pos) {
  Vec x = Vec::Zero(spec.dim());
  const Dims& d = spec.dims;
  switch (spec.role) {
    case EmbeddingRole::centralized:
      if (step.a < 0 || step.a >= d.A || step.b < 0 || step.b >= d.B)
        throw std::invalid_argument("action_token: action out of range");
      x[step.a] = 1.0;
      x[d.A + step.b] = 1.0;
      x[d.A + d.B] = step.r;
      break;
    case EmbeddingRole::decentralized_max:
      if (step.a < 0 || step.a >= d.A) throw std::invalid_argument("action_token: bad action");
      x[step.a] = 1.0;
      x[d.A] = step.r;
      break;
    case EmbeddingRole::decentralized_min:
      if (step.a < 0 || step.a >= d.B) throw std::invalid_argument("action_token: bad action");
      x[step.a] = 1.0;
      x[d.B] = step.r;
      break;
  }
  write_pos(spec, x, pos, false);
  return x;
}

TokenMatrix embed(const EmbeddingSpec& spec, std::span<const PromptStep> steps, int query_state,
                  int first_step) {
  const int H = spec.dims.H;
  const int n = 2 * static_cast<int>(steps.size()) + 1;
  TokenMatrix out(spec.dim(), n);
  int index = 1;
  for (std::size_t k = 0; k <= steps.size(); ++k) {
    const int global = first_step + static_cast<int>(k);
    TokenPos pos{global / H, global % H, global + 1, index};
    if (k == steps.size()) {
      out.col(index - 1) = state_token(spec, query_state, pos);
      break;
    }
    out.col(index - 1) = state_token(spec, steps[k].s, pos);
    ++index;
    pos.index = index;
    out.col(index - 1) = action_token(spec, steps[k], pos);
    ++index;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

void TransformerParams::validate() const {
  if (d != spec.dim()) throw std::invalid_argument("TransformerParams: d does not match spec");
  for (const auto& layer : layers) {
    for (const auto& head : layer.heads)
      if (head.Q.rows() != d || head.Q.cols() != d || head.K.rows() != d ||
          head.K.cols() != d || head.V.rows() != d || head.V.cols() != d)
        throw std::invalid_argument("TransformerParams: attention head must be d x d");
    if (layer.mlp.W1.cols() != d || layer.mlp.W2.rows() != d ||
        layer.mlp.W2.cols() != layer.mlp.W1.rows())
      throw std::invalid_argument("TransformerParams: MLP shapes inconsistent");
  }
  if (head == HeadMode::zeta && !(zeta > 0.0 && zeta <= 1.0))
    throw std::invalid_argument("TransformerParams: zeta must be in (0, 1]");
}

TransformerParams TransformerParams::zeros_like() const {
  TransformerParams z = *this;
  z.for_each_matrix([](Mat& m) { m.setZero(); });
  return z;
}

void TransformerParams::axpy(double scale, const TransformerParams& other) {
  std::vector<const Mat*> src;
  other.for_each_matrix([&](const Mat& m) { src.push_back(&m); });
  std::size_t k = 0;
  for_each_matrix([&](Mat& m) {
    if (k >= src.size() || src[k]->rows() != m.rows() || src[k]->cols() != m.cols())
      throw std::invalid_argument("axpy: shape mismatch");
    m += scale * *src[k++];
  });
}

std::size_t TransformerParams::num_parameters() const {
  std::size_t n = 0;
  for_each_matrix([&](const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

Layer zero_layer(int d, int num_heads, int hidden, Activation act) {
  Layer layer;
  for (int m = 0; m < num_heads; ++m)
    layer.heads.push_back({Mat::Zero(d, d), Mat::Zero(d, d), Mat::Zero(d, d)});
  layer.mlp.W1 = Mat::Zero(hidden, d);
  layer.mlp.W2 = Mat::Zero(d, hidden);
  layer.mlp.activation = act;
  return layer;
}

// ---------------------------------------------------------------------------
// Forward primitives

void clip_columns(Mat& H, double R) {
  for (Eigen::Index i = 0; i < H.cols(); ++i) {
    const double norm = H.col(i).norm();
    if (norm > R) H.col(i) *= R / norm;
  }
}

namespace {

// Row-wise 1/i weights of the causal ReLU attention: W(i, j) = relu(s_ij)/i
// for j <= i (1-based), zero above the diagonal.
Mat causal_weights(const Mat& scores) {
  const Eigen::Index n = scores.rows();
  Mat W = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double inv = 1.0 / static_cast<double>(i + 1);
    for (Eigen::Index j = 0; j <= i; ++j) W(i, j) = std::max(scores(i, j), 0.0) * inv;
  }
  return W;
}

void softmax_columns(const Mat& pre, Mat& out) {
  out.resize(pre.rows(), pre.cols());
  for (Eigen::Index c = 0; c < pre.cols(); ++c) {
    const double top = pre.col(c).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index r = 0; r < pre.rows(); ++r) {
      out(r, c) = std::exp(pre(r, c) - top);
      sum += out(r, c);
    }
    out.col(c) /= sum;
  }
}

void mlp_apply(const MlpLayer& mlp, const Mat& mid, Mat& pre, Mat& act, Mat& out) {
  if (mlp.hidden() == 0 || mid.cols() == 0) {
    out = mid;
    pre.resize(0, mid.cols());
    act.resize(0, mid.cols());
    return;
  }
  pre = mlp.W1 * mid;
  if (mlp.activation == Activation::relu)
    act = pre.cwiseMax(0.0);
  else
    softmax_columns(pre, act);
  out = mid + mlp.W2 * act;
}

}  // namespace

TokenMatrix attn_forward(std::span<const AttnHead> heads, const TokenMatrix& H) {
  TokenMatrix out = H;
  for (const auto& head : heads) {
    if (head.Q.cols() != H.rows()) throw std::invalid_argument("attn_forward: shape mismatch");
    const Mat qh = head.Q * H, kh = head.K * H, vh = head.V * H;
    const Mat W = causal_weights(qh.transpose() * kh);
    out.noalias() += vh * W.transpose();
  }
  return out;
}

TokenMatrix mlp_forward(const MlpLayer& layer, const TokenMatrix& H) {
  if (layer.hidden() > 0 && layer.W1.cols() != H.rows())
    throw std::invalid_argument("mlp_forward: shape mismatch");
  Mat pre, act, out;
  mlp_apply(layer, H, pre, act, out);
  return out;
}

TokenMatrix tf_forward(const TransformerParams& params, const TokenMatrix& H) {
  TokenMatrix cur = H;
  if (params.clip_radius) clip_columns(cur, *params.clip_radius);
  for (const auto& layer : params.layers) {
    cur = mlp_forward(layer.mlp, attn_forward(layer.heads, cur));
    if (params.clip_radius) clip_columns(cur, *params.clip_radius);
  }
  return cur;
}

double operator_norm(const Mat& M) {
  if (M.size() == 0) return 0.0;
  const Mat G = M.transpose() * M;
  Vec v(G.cols());
  // fixed, non-degenerate start vector
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.1 * std::sin(1.0 + i);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    Vec w = G * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = std::sqrt(norm);
    v = w / norm;
    if (it > 0 && std::abs(next - lambda) <= 1e-10 * next) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return lambda;
}

double param_norm(const TransformerParams& params) {
  double best = 0.0;
  for (const auto& layer : params.layers) {
    double qk = 0.0, v = 0.0;
    for (const auto& head : layer.heads) {
      qk = std::max({qk, operator_norm(head.Q), operator_norm(head.K)});
      v += operator_norm(head.V);
    }
    best = std::max(best, qk + v + operator_norm(layer.mlp.W1) + operator_norm(layer.mlp.W2));
  }
  return best;
}

std::vector<double> project_to_simplex(std::span<const double> z) {
  const std::size_t n = z.size();
  if (n == 0) throw std::invalid_argument("project_to_simplex: empty vector");
  std::vector<double> u(z.begin(), z.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    cumsum += u[j];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::max(z[i] - theta, 0.0);
  return x;
}

std::vector<double> apply_head(const TransformerParams& params, std::span<const double> z) {
  for (double v : z)
    if (!std::isfinite(v)) throw std::domain_error("induced policy: non-finite logits");
  switch (params.head) {
    case HeadMode::simplex: return project_to_simplex(z);
    case HeadMode::softmax: return softmax(z);
    case HeadMode::zeta: {
      auto p = project_to_simplex(z);
      const double k = static_cast<double>(p.size());
      for (auto& x : p) x = (1.0 - params.zeta) * x + params.zeta / k;
      return p;
    }
  }
  return {};
}

std::vector<double> extract(const TransformerParams& params, const Vec& token) {
  const int off = params.spec.c_offset();
  const int k = params.output_arity();
  return std::vector<double>(token.data() + off, token.data() + off + k);
}

std::vector<double> induced_policy(const TransformerParams& params, const TokenMatrix& H) {
  const TokenMatrix out = tf_forward(params, H);
  const Vec last = out.col(out.cols() - 1);
  return apply_head(params, extract(params, last));
}

// ---------------------------------------------------------------------------
// Block forward with caches for reverse mode

BlockForward::BlockForward(const TransformerParams& params, const TokenMatrix& base,
                           const std::vector<SideQuery>& side)
    : params_(&params) {
  const int d = params.d;
  const Eigen::Index n = base.cols();
  const Eigen::Index m = static_cast<Eigen::Index>(side.size());
  if (base.rows() != d) throw std::invalid_argument("BlockForward: token width mismatch");
  input_raw_ = base;
  side_input_raw_.resize(d, m);
  for (Eigen::Index q = 0; q < m; ++q) {
    const int p = side[q].position;
    if (p < 1 || p > n) throw std::invalid_argument("BlockForward: side position out of range");
    side_pos_.push_back(p);
    side_input_raw_.col(q) = side[q].token;
  }

  Mat cur = input_raw_, side_cur = side_input_raw_;
  Mat cur_raw = cur, side_cur_raw = side_cur;
  if (params.clip_radius) {
    clip_columns(cur, *params.clip_radius);
    clip_columns(side_cur, *params.clip_radius);
  }
  layers_.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Layer& layer = params.layers[l];
    LayerCache& c = layers_[l];
    c.in_raw = cur_raw;
    c.in = cur;
    c.side_in_raw = side_cur_raw;
    c.side_in = side_cur;
    c.mid = c.in;
    c.side_mid = c.side_in;
    c.heads.resize(layer.heads.size());
    for (std::size_t k = 0; k < layer.heads.size(); ++k) {
      const AttnHead& head = layer.heads[k];
      HeadCache& hc = c.heads[k];
      hc.qh = head.Q * c.in;
      hc.kh = head.K * c.in;
      hc.vh = head.V * c.in;
      hc.scores = hc.qh.transpose() * hc.kh;
      c.mid.noalias() += hc.vh * causal_weights(hc.scores).transpose();
      if (m > 0) {
        hc.sq = head.Q * c.side_in;
        hc.sk = head.K * c.side_in;
        hc.sv = head.V * c.side_in;
        hc.side_scores = hc.sq.transpose() * hc.kh;
        hc.side_self = (hc.sq.array() * hc.sk.array()).colwise().sum().transpose();
        for (Eigen::Index q = 0; q < m; ++q) {
          const int p = side_pos_[q];
          const double inv = 1.0 / p;
          Vec acc = std::max(hc.side_self[q], 0.0) * hc.sv.col(q);
          for (int j = 0; j < p - 1; ++j) {
            const double w = hc.side_scores(q, j);
            if (w > 0.0) acc.noalias() += w * hc.vh.col(j);
          }
          c.side_mid.col(q) += inv * acc;
        }
      }
    }
    mlp_apply(layer.mlp, c.mid, c.pre, c.act, c.out_raw);
    mlp_apply(layer.mlp, c.side_mid, c.side_pre, c.side_act, c.side_out_raw);
    c.out = c.out_raw;
    c.side_out = c.side_out_raw;
    if (params.clip_radius) {
      clip_columns(c.out, *params.clip_radius);
      clip_columns(c.side_out, *params.clip_radius);
    }
    cur_raw = c.out_raw;
    cur = c.out;
    side_cur_raw = c.side_out_raw;
    side_cur = c.side_out;
  }
  if (layers_.empty()) {
    // Keep base_output()/side_output() meaningful for an empty stack.
    layers_.resize(1);
    layers_[0].out = cur;
    layers_[0].side_out = side_cur;
    layers_[0].in = cur;
    layers_[0].side_in = side_cur;
  }
}

namespace {

// d(clip(x))/dx applied to dy, column-wise.
Mat clip_backward(const Mat& x_raw, const Mat& dy, double R) {
  Mat dx = dy;
  for (Eigen::Index i = 0; i < x_raw.cols(); ++i) {
    const double norm = x_raw.col(i).norm();
    if (norm > R) {
      const Vec x = x_raw.col(i);
      const double proj = x.dot(dy.col(i)) / (norm * norm);
      dx.col(i) = (R / norm) * (dy.col(i) - proj * x);
    }
  }
  return dx;
}

// Backward through h + W2 sigma(W1 h); returns d(mid).
Mat mlp_backward(const MlpLayer& mlp, const Mat& mid, const Mat& pre, const Mat& act,
                 const Mat& d_out, MlpLayer& grad) {
  if (mlp.hidden() == 0 || mid.cols() == 0) return d_out;
  Mat d_act = mlp.W2.transpose() * d_out;
  grad.W2.noalias() += d_out * act.transpose();
  Mat d_pre(pre.rows(), pre.cols());
  if (mlp.activation == Activation::relu) {
    d_pre = d_act.array() * (pre.array() > 0.0).cast<double>();
  } else {
    for (Eigen::Index c = 0; c < pre.cols(); ++c) {
      const double dot = act.col(c).dot(d_act.col(c));
      d_pre.col(c) = act.col(c).array() * (d_act.col(c).array() - dot);
    }
  }
  grad.W1.noalias() += d_pre * mid.transpose();
  Mat d_mid = d_out;
  d_mid.noalias() += mlp.W1.transpose() * d_pre;
  return d_mid;
}

}  // namespace

void BlockForward::backward(const Mat& d_base_out, const Mat& d_side_out,
                            TransformerParams& grad) const {
  const TransformerParams& params = *params_;
  if (params.layers.empty()) return;
  const int d = params.d;
  const Eigen::Index n = input_raw_.cols();
  const Eigen::Index m = side_input_raw_.cols();

  Mat d_out = d_base_out.size() ? d_base_out : Mat::Zero(d, n);
  Mat d_side = d_side_out.size() ? d_side_out : Mat::Zero(d, m);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const Layer& layer = params.layers[li];
    const LayerCache& c = layers_[li];
    Layer& g = grad.layers[li];
    if (params.clip_radius) {
      d_out = clip_backward(c.out_raw, d_out, *params.clip_radius);
      d_side = clip_backward(c.side_out_raw, d_side, *params.clip_radius);
    }
    Mat d_mid = mlp_backward(layer.mlp, c.mid, c.pre, c.act, d_out, g.mlp);
    Mat d_side_mid = mlp_backward(layer.mlp, c.side_mid, c.side_pre, c.side_act, d_side, g.mlp);

    Mat d_in = d_mid;
    Mat d_side_in = d_side_mid;
    for (std::size_t k = 0; k < layer.heads.size(); ++k) {
      const AttnHead& head = layer.heads[k];
      const HeadCache& hc = c.heads[k];
      AttnHead& gh = g.heads[k];

      const Mat W = causal_weights(hc.scores);
      Mat d_vh = d_mid * W;
      Mat d_w = d_mid.transpose() * hc.vh;  // n x n
      Mat d_s = Mat::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double inv = 1.0 / static_cast<double>(i + 1);
        for (Eigen::Index j = 0; j <= i; ++j)
          if (hc.scores(i, j) > 0.0) d_s(i, j) = d_w(i, j) * inv;
      }
      Mat d_qh = hc.kh * d_s.transpose();
      Mat d_kh = hc.qh * d_s;

      if (m > 0) {
        Mat d_sq = Mat::Zero(d, m), d_sk = Mat::Zero(d, m), d_sv = Mat::Zero(d, m);
        for (Eigen::Index q = 0; q < m; ++q) {
          const int p = side_pos_[q];
          const double inv = 1.0 / p;
          const Vec gq = d_side_mid.col(q);
          for (int j = 0; j < p - 1; ++j) {
            const double s = hc.side_scores(q, j);
            if (s <= 0.0) continue;
            d_vh.col(j).noalias() += (s * inv) * gq;
            const double ds = gq.dot(hc.vh.col(j)) * inv;
            d_sq.col(q).noalias() += ds * hc.kh.col(j);
            d_kh.col(j).noalias() += ds * hc.sq.col(q);
          }
          const double self = hc.side_self[q];
          if (self > 0.0) {
            d_sv.col(q) = (self * inv) * gq;
            const double ds = gq.dot(hc.sv.col(q)) * inv;
            d_sq.col(q).noalias() += ds * hc.sk.col(q);
            d_sk.col(q).noalias() += ds * hc.sq.col(q);
          }
        }
        gh.Q.noalias() += d_sq * c.side_in.transpose();
        gh.K.noalias() += d_sk * c.side_in.transpose();
        gh.V.noalias() += d_sv * c.side_in.transpose();
        d_side_in.noalias() += head.Q.transpose() * d_sq;
        d_side_in.noalias() += head.K.transpose() * d_sk;
        d_side_in.noalias() += head.V.transpose() * d_sv;
      }

      gh.Q.noalias() += d_qh * c.in.transpose();
      gh.K.noalias() += d_kh * c.in.transpose();
      gh.V.noalias() += d_vh * c.in.transpose();
      d_in.noalias() += head.Q.transpose() * d_qh;
      d_in.noalias() += head.K.transpose() * d_kh;
      d_in.noalias() += head.V.transpose() * d_vh;
    }
    d_out = std::move(d_in);
    d_side = std::move(d_side_in);
  }
  // Gradients w.r.t. the embeddings are not needed: tokens are constants.
}

// ---------------------------------------------------------------------------
// Incremental forward

IncrementalForward::IncrementalForward(const TransformerParams& params) : params_(&params) {
  reset();
}

void IncrementalForward::reset() {
  n_ = 0;
  keys_.assign(params_->layers.size(), {});
  values_.assign(params_->layers.size(), {});
  for (std::size_t l = 0; l < params_->layers.size(); ++l) {
    keys_[l].assign(params_->layers[l].heads.size(), Mat(params_->d, 0));
    values_[l].assign(params_->layers[l].heads.size(), Mat(params_->d, 0));
  }
}

namespace {

// Columns [0, used) are live; capacity grows geometrically.
void append_column(Mat& M, int used, const Vec& v) {
  if (used >= M.cols()) M.conservativeResize(Eigen::NoChange, std::max<Eigen::Index>(8, 2 * M.cols()));
  M.col(used) = v;
}

}  // namespace

Vec IncrementalForward::run(const Vec& token, bool append) {
  const TransformerParams& params = *params_;
  const int p = n_ + 1;
  const double inv = 1.0 / p;
  Vec x = token;
  if (params.clip_radius) {
    const double norm = x.norm();
    if (norm > *params.clip_radius) x *= *params.clip_radius / norm;
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const Layer& layer = params.layers[l];
    Vec mid = x;
    for (std::size_t k = 0; k < layer.heads.size(); ++k) {
      const AttnHead& head = layer.heads[k];
      const Vec q = head.Q * x, key = head.K * x, val = head.V * x;
      const Mat& K = keys_[l][k];
      const Mat& V = values_[l][k];
      Vec acc = std::max(q.dot(key), 0.0) * val;
      if (n_ > 0) {
        const Vec s = K.leftCols(n_).transpose() * q;
        for (int j = 0; j < n_; ++j)
          if (s[j] > 0.0) acc.noalias() += s[j] * V.col(j);
      }
      mid += inv * acc;
      if (append) {
        append_column(keys_[l][k], n_, key);
        append_column(values_[l][k], n_, val);
      }
    }
    Mat pre, act, out;
    mlp_apply(layer.mlp, mid, pre, act, out);
    x = out.col(0);
    if (params.clip_radius) {
      const double norm = x.norm();
      if (norm > *params.clip_radius) x *= *params.clip_radius / norm;
    }
  }
  if (append) ++n_;
  return x;
}

Vec IncrementalForward::push(const Vec& token) { return run(token, true); }

Vec IncrementalForward::query(const Vec& token) const {
  return const_cast<IncrementalForward*>(this)->run(token, false);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'I', 'C', 'G', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json spec_to_json(const EmbeddingSpec& s) {
  return {{"role", to_string(s.role)},
          {"H", s.dims.H},
          {"S", s.dims.S},
          {"A", s.dims.A},
          {"B", s.dims.B},
          {"scratch", s.scratch},
          {"g_scale", s.g_scale},
          {"h_scale", s.h_scale},
          {"t_scale", s.t_scale},
          {"i_scale", s.i_scale},
          {"block_tokens", s.block_tokens}};
}

EmbeddingSpec spec_from_json(const nlohmann::json& j) {
  EmbeddingSpec s;
  s.role = embedding_role_from_string(j.at("role").get<std::string>());
  s.dims = {j.at("H").get<int>(), j.at("S").get<int>(), j.at("A").get<int>(),
            j.at("B").get<int>()};
  s.scratch = j.at("scratch").get<int>();
  s.g_scale = j.at("g_scale").get<double>();
  s.h_scale = j.at("h_scale").get<double>();
  s.t_scale = j.at("t_scale").get<double>();
  s.i_scale = j.at("i_scale").get<double>();
  s.block_tokens = j.value("block_tokens", 0);
  return s;
}

}  // namespace

void save_checkpoint(const TransformerParams& params, const std::string& path) {
  nlohmann::json header;
  header["version"] = kVersion;
  header["d"] = params.d;
  header["clip_radius"] = params.clip_radius ? nlohmann::json(*params.clip_radius) : nullptr;
  header["head"] = to_string(params.head);
  header["zeta"] = params.zeta;
  header["spec"] = spec_to_json(params.spec);
  header["layers"] = nlohmann::json::array();
  for (const auto& layer : params.layers)
    header["layers"].push_back({{"heads", layer.heads.size()},
                                {"hidden", layer.mlp.hidden()},
                                {"activation", to_string(layer.mlp.activation)}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  params.for_each_matrix([&](const Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  });
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

TransformerParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);

  TransformerParams params;
  params.d = header.at("d").get<int>();
  if (!header.at("clip_radius").is_null())
    params.clip_radius = header.at("clip_radius").get<double>();
  params.head = head_mode_from_string(header.at("head").get<std::string>());
  params.zeta = header.at("zeta").get<double>();
  params.spec = spec_from_json(header.at("spec"));
  for (const auto& lj : header.at("layers"))
    params.layers.push_back(zero_layer(params.d, lj.at("heads").get<int>(),
                                       lj.at("hidden").get<int>(),
                                       activation_from_string(lj.at("activation"))));
  params.for_each_matrix([&](Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double v = 0.0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        m(r, c) = v;
      }
  });
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  params.validate();
  return params;
}

}  // namespace icgp
