#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icgp/game.hpp"

namespace icgp {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Columns are tokens h_1..h_N.
using TokenMatrix = Mat;

struct AttnHead {
  Mat Q, K, V;  // d x d
};

enum class Activation { relu, softmax };

// h + W2 sigma(W1 h). A layer with zero hidden units is the identity.
struct MlpLayer {
  Mat W1;  // d' x d
  Mat W2;  // d x d'
  Activation activation = Activation::relu;

  int hidden() const { return static_cast<int>(W1.rows()); }
};

struct Layer {
  std::vector<AttnHead> heads;
  MlpLayer mlp;
};

enum class HeadMode { simplex, softmax, zeta };
enum class EmbeddingRole { centralized, decentralized_max, decentralized_min };

std::string to_string(HeadMode m);
std::string to_string(EmbeddingRole r);
std::string to_string(Activation a);
HeadMode head_mode_from_string(const std::string& s);
EmbeddingRole embedding_role_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

// Token layout: [a | b | c | scratch | pos] with
//   a: one-hot own action(s) and reward (even tokens)
//   b: one-hot state (odd tokens)
//   c: policy output slot (K = output arity)
//   pos: [g, h, t, e_h (H), v, i, i^2, 1]
struct EmbeddingSpec {
  EmbeddingRole role = EmbeddingRole::centralized;
  Dims dims;
  int scratch = 0;
  // Multipliers applied to the positional features; all 1 for raw storage.
  double g_scale = 1.0;
  double h_scale = 1.0;
  double t_scale = 1.0;
  double i_scale = 1.0;
  // Learned models see the interaction in blocks of this many tokens with
  // the index i restarting at 1; 0 means one unbounded block.
  int block_tokens = 0;

  int action_width() const;  // width of part a
  int output_arity() const;  // K
  int a_offset() const { return 0; }
  int b_offset() const { return action_width(); }
  int c_offset() const { return b_offset() + dims.S; }
  int scratch_offset() const { return c_offset() + output_arity(); }
  int pos_offset() const { return scratch_offset() + scratch; }
  int pos_width() const { return 3 + dims.H + 4; }
  int dim() const { return pos_offset() + pos_width(); }

  // Positional coordinates.
  int pos_g() const { return pos_offset(); }
  int pos_h() const { return pos_offset() + 1; }
  int pos_t() const { return pos_offset() + 2; }
  int pos_eh(int h) const { return pos_offset() + 3 + h; }
  int pos_v() const { return pos_offset() + 3 + dims.H; }
  int pos_i() const { return pos_v() + 1; }
  int pos_i2() const { return pos_v() + 2; }
  int pos_one() const { return pos_v() + 3; }

  bool operator==(const EmbeddingSpec&) const = default;
};

// Positional scales normalized by the horizon and a block length in tokens.
EmbeddingSpec normalized_spec(EmbeddingRole role, Dims dims, int episodes, int scratch,
                              int block_tokens);

// One step of a player's (or the joint) observation. For decentralized
// views `b` is unused and `a` is the player's own action; `r` is the
// player's own reward.
struct PromptStep {
  int g = 0;  // 0-based episode
  int h = 0;  // 0-based step
  int s = 0;
  int a = 0;
  int b = -1;
  double r = 0.0;
};

// Position of a token in the interaction: 0-based episode/step and the
// 1-based global step index t. `index` is the 1-based token index i.
struct TokenPos {
  int g = 0;
  int h = 0;
  int t = 1;
  int index = 1;
};

Vec state_token(const EmbeddingSpec& spec, int s, const TokenPos& pos);
Vec action_token(const EmbeddingSpec& spec, const PromptStep& step, const TokenPos& pos);

// Tokens for D^{t-1} u {s^t}: 2t-1 columns. `first_step` is the global
// 0-based step index of steps[0]; token indices restart at 1.
TokenMatrix embed(const EmbeddingSpec& spec, std::span<const PromptStep> steps, int query_state,
                  int first_step = 0);

struct TransformerParams {
  int d = 0;
  std::vector<Layer> layers;
  std::optional<double> clip_radius;
  HeadMode head = HeadMode::softmax;
  double zeta = 0.0;
  EmbeddingSpec spec;

  int output_arity() const { return spec.output_arity(); }
  // Throws on inconsistent shapes.
  void validate() const;

  // Same shapes, all zeros (gradient accumulator).
  TransformerParams zeros_like() const;
  // this += scale * other (shapes must match)
  void axpy(double scale, const TransformerParams& other);
  std::size_t num_parameters() const;
  // Visits every parameter matrix in a fixed order.
  template <typename F>
  void for_each_matrix(F&& f) {
    for (auto& layer : layers) {
      for (auto& head : layer.heads) {
        f(head.Q);
        f(head.K);
        f(head.V);
      }
      f(layer.mlp.W1);
      f(layer.mlp.W2);
    }
  }
  template <typename F>
  void for_each_matrix(F&& f) const {
    for (const auto& layer : layers) {
      for (const auto& head : layer.heads) {
        f(head.Q);
        f(head.K);
        f(head.V);
      }
      f(layer.mlp.W1);
      f(layer.mlp.W2);
    }
  }
};

// Fresh layer of width d with `num_heads` zero heads and a zero MLP of
// `hidden` units.
Layer zero_layer(int d, int num_heads, int hidden, Activation act = Activation::relu);

// Project each column onto the l2 ball of radius R.
void clip_columns(Mat& H, double R);

TokenMatrix attn_forward(std::span<const AttnHead> heads, const TokenMatrix& H);
TokenMatrix mlp_forward(const MlpLayer& layer, const TokenMatrix& H);
TokenMatrix tf_forward(const TransformerParams& params, const TokenMatrix& H);

// Spectral norm by power iteration on M^T M.
double operator_norm(const Mat& M);
double param_norm(const TransformerParams& params);

std::vector<double> project_to_simplex(std::span<const double> z);

// Output head applied to the extracted logits z.
std::vector<double> apply_head(const TransformerParams& params, std::span<const double> z);

// Extraction of part c of a token.
std::vector<double> extract(const TransformerParams& params, const Vec& token);

// Policy induced on the last token of H.
std::vector<double> induced_policy(const TransformerParams& params, const TokenMatrix& H);

// Forward pass over a block of base tokens plus "side" queries. A side
// query at 1-based position p stands in for base token p: at every layer it
// attends to base tokens 1..p-1 and to itself, and nothing attends to it.
struct SideQuery {
  int position = 1;
  Vec token;
};

class BlockForward {
 public:
  BlockForward(const TransformerParams& params, const TokenMatrix& base,
               const std::vector<SideQuery>& side);

  const Mat& base_output() const { return layers_.back().out; }
  const Mat& side_output() const { return layers_.back().side_out; }

  // Accumulates parameter gradients given gradients w.r.t. the final base
  // and side outputs (either may be empty/zero-sized).
  void backward(const Mat& d_base_out, const Mat& d_side_out, TransformerParams& grad) const;

 private:
  struct HeadCache {
    Mat qh, kh, vh;      // d x n
    Mat scores;          // n x n, (i, j) = <q_i, k_j>
    Mat sq, sk, sv;      // d x m for side queries
    Mat side_scores;     // m x n
    Vec side_self;       // m
  };
  struct LayerCache {
    Mat in;              // clipped input, d x n
    Mat in_raw;          // before clipping
    Mat mid;             // after attention
    Mat pre, act;        // d' x n
    Mat out_raw, out;    // before / after clipping
    Mat side_in, side_in_raw, side_mid, side_pre, side_act, side_out_raw, side_out;
    std::vector<HeadCache> heads;
  };

  const TransformerParams* params_;
  std::vector<int> side_pos_;
  Mat input_raw_, side_input_raw_;
  std::vector<LayerCache> layers_;
};

// Causal forward that reuses the hidden states of earlier tokens of the
// current block. Exactly equal to re-running the full forward pass.
class IncrementalForward {
 public:
  explicit IncrementalForward(const TransformerParams& params);

  void reset();
  int size() const { return n_; }
  // Appends a token and returns its final-layer output.
  Vec push(const Vec& token);
  // Final-layer output of `token` placed at position size()+1, without
  // appending it.
  Vec query(const Vec& token) const;

 private:
  Vec run(const Vec& token, bool append);

  const TransformerParams* params_;
  int n_ = 0;
  // per layer: stored k/v columns per head
  std::vector<std::vector<Mat>> keys_, values_;
};

// Checkpoint I/O: magic, version, JSON header (shapes, head mode, spec),
// then row-major little-endian doubles.
void save_checkpoint(const TransformerParams& params, const std::string& path);
TransformerParams load_checkpoint(const std::string& path);

}  // namespace icgp
