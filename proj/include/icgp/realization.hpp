#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icgp/game.hpp"
#include "icgp/transformer.hpp"

namespace icgp {

// Coordinate map for staged token matrices. The token is the centralized
// embedding [a | b | c | d | pos]; the named slots below live in part d.
// Odd tokens (state tokens) carry the staged quantities, even tokens stay
// zero outside their positional block.
struct StagedLayout {
  Dims dims;
  int episodes = 1;       // G
  bool tables = false;    // per-(h, s) policy / Q tables and V slots
  EmbeddingSpec spec;

  // MWU block for one (h, s)
  int loss_max = 0;   // AB, (H - Q_upper) / H
  int loss_min = 0;   // AB, Q_lower / H
  int cum_max = 0;    // A
  int cum_min = 0;    // B
  int mu = 0;         // A
  int nu = 0;         // B
  int mu_new = 0;     // A
  int nu_new = 0;     // B
  int joint_sum = 0;  // AB
  int o_max = 0;      // A, scratch
  int o_min = 0;      // B, scratch
  int prod = 0;       // AB, scratch
  // Tables (only when `tables`)
  int pi = 0;       // H S AB
  int q_upper = 0;  // H S AB
  int q_lower = 0;  // H S AB
  int v_upper = 0;  // H S
  int v_lower = 0;  // H S
  int slots_end = 0;

  int d() const { return spec.dim(); }
  int ab(int a, int b) const { return a * dims.B + b; }
  int table(int base, int h, int s) const { return base + (h * dims.S + s) * dims.A * dims.B; }
  int hs(int base, int h, int s) const { return base + h * dims.S + s; }
  // Largest number of interaction steps the positional gadgets support.
  int max_steps() const { return episodes * dims.H; }
};

StagedLayout make_layout(Dims dims, int episodes, bool tables);

// Zero token matrix of `num_tokens` columns with the positional block and
// the state one-hots of odd tokens filled in (states[k] for token 2k+1).
TokenMatrix staged_tokens(const StagedLayout& layout, int num_tokens,
                          const std::vector<int>& states);

// Writes the MWU inputs of one odd token: loss blocks from the confidence
// bounds; policies, cumulative losses and the running sum start at zero.
void stage_mwu(const StagedLayout& layout, TokenMatrix& tokens, int column,
               std::span<const double> q_upper, std::span<const double> q_lower);

// One MWU iteration as five layers: (A+B heads, relu MLP), (softmax MLP for
// mu), (softmax MLP for nu), (1 head, relu MLP), (AB heads, relu MLP).
// Repeating it G times from zero policies reproduces G-round mwu_cce.
TransformerParams build_mwu_iteration(const StagedLayout& layout);

// One attention-only layer with 2HS heads writing pi . Q into the V slots.
TransformerParams build_value_aggregation(const StagedLayout& layout);

// Two attention-only layers: HS heads copying pi^h(.,.|s) of the token's own
// (h, s) into part c (scaled by 1/i), then one head undoing the 1/i.
TransformerParams build_policy_lookup(const StagedLayout& layout);

// Applies `fragment` `rounds` times.
TokenMatrix run_repeated(const TransformerParams& fragment, TokenMatrix tokens, int rounds);

struct SubstepReport {
  std::string name;
  int trials = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  int layers = 0;
  int max_heads = 0;
  long head_budget = 0;  // 16 H S^2 A B
  double param_norm = 0.0;
};

struct RealizationReport {
  Dims dims;
  int episodes = 0;
  int trials = 0;
  std::uint64_t seed = 0;
  std::vector<SubstepReport> substeps;

  bool pass() const;
  std::string to_text() const;
  std::string to_json() const;
};

struct RealizeOptions {
  Dims dims{2, 2, 3, 3};
  int episodes = 50;
  int trials = 50;
  std::uint64_t seed = 1;
  int staged_steps = 3;  // odd tokens per staged sequence
  // "mwu", "value", "lookup" or "all": add 1 to one live weight entry.
  std::string perturb;
};

RealizationReport verify_realization(const RealizeOptions& options);

}  // namespace icgp
