#include "icgp/realization.hpp"

#include <cmath>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "icgp/no_regret.hpp"

namespace icgp {

namespace {

constexpr double kRealizationClip = 1e6;

// Each helper writes one coordinate of a query/key vector: row `r` of the
// matrix picks coefficient `w` of token coordinate `col`.
void put(Mat& M, int r, int col, double w) { M(r, col) += w; }

TransformerParams empty_fragment(const StagedLayout& L) {
  TransformerParams p;
  p.d = L.d();
  p.spec = L.spec;
  p.clip_radius = kRealizationClip;
  p.head = HeadMode::simplex;
  return p;
}

AttnHead zero_head(int d) { return {Mat::Zero(d, d), Mat::Zero(d, d), Mat::Zero(d, d)}; }

// relu(x) - relu(-x) = x: hidden units that move slot `from` into slot `to`
// (added with weight `scale`) and clear `from`.
void move_units(MlpLayer& mlp, int& unit, int from, int to, double scale, bool clear_from) {
  mlp.W1(unit, from) = 1.0;
  mlp.W1(unit + 1, from) = -1.0;
  mlp.W2(to, unit) += scale;
  mlp.W2(to, unit + 1) -= scale;
  if (clear_from) {
    mlp.W2(from, unit) -= 1.0;
    mlp.W2(from, unit + 1) += 1.0;
  }
  unit += 2;
}

}  // namespace

StagedLayout make_layout(Dims dims, int episodes, bool tables) {
  if (dims.H < 1 || dims.S < 1 || dims.A < 1 || dims.B < 1 || episodes < 1)
    throw std::invalid_argument("make_layout: dimensions must be positive");
  StagedLayout L;
  L.dims = dims;
  L.episodes = episodes;
  L.tables = tables;
  const int A = dims.A, B = dims.B, AB = A * B, HS = dims.H * dims.S;
  int off = 0;
  auto take = [&](int n) {
    const int at = off;
    off += n;
    return at;
  };
  L.loss_max = take(AB);
  L.loss_min = take(AB);
  L.cum_max = take(A);
  L.cum_min = take(B);
  L.mu = take(A);
  L.nu = take(B);
  L.mu_new = take(A);
  L.nu_new = take(B);
  L.joint_sum = take(AB);
  L.o_max = take(A);
  L.o_min = take(B);
  L.prod = take(AB);
  if (tables) {
    L.pi = take(HS * AB);
    L.q_upper = take(HS * AB);
    L.q_lower = take(HS * AB);
    L.v_upper = take(HS);
    L.v_lower = take(HS);
  }
  L.spec.role = EmbeddingRole::centralized;
  L.spec.dims = dims;
  L.spec.scratch = off;
  // shift slot offsets from part-d-relative to absolute coordinates
  const int base = L.spec.scratch_offset();
  for (int* slot : {&L.loss_max, &L.loss_min, &L.cum_max, &L.cum_min, &L.mu, &L.nu, &L.mu_new,
                    &L.nu_new, &L.joint_sum, &L.o_max, &L.o_min, &L.prod, &L.pi, &L.q_upper,
                    &L.q_lower, &L.v_upper, &L.v_lower})
    *slot += base;
  L.slots_end = base + off;
  if (L.slots_end > L.spec.pos_offset()) throw std::logic_error("make_layout: slot overflow");
  return L;
}

TokenMatrix staged_tokens(const StagedLayout& L, int num_tokens, const std::vector<int>& states) {
  const int H = L.dims.H;
  if (num_tokens < 1) throw std::invalid_argument("staged_tokens: need at least one token");
  if ((num_tokens + 1) / 2 > L.max_steps())
    throw std::invalid_argument("staged_tokens: sequence longer than the layout supports");
  TokenMatrix X = TokenMatrix::Zero(L.d(), num_tokens);
  for (int i = 1; i <= num_tokens; ++i) {
    const int t = (i + 1) / 2;
    const TokenPos pos{(t - 1) / H, (t - 1) % H, t, i};
    if (i % 2 == 1) {
      const std::size_t k = static_cast<std::size_t>(i / 2);
      const int s = k < states.size() ? states[k] : 0;
      X.col(i - 1) = state_token(L.spec, s, pos);
    } else {
      // blank even token: positional block only
      Vec x = Vec::Zero(L.d());
      const EmbeddingSpec& sp = L.spec;
      x[sp.pos_g()] = pos.g + 1;
      x[sp.pos_h()] = pos.h + 1;
      x[sp.pos_t()] = pos.t;
      x[sp.pos_eh(pos.h)] = 1.0;
      x[sp.pos_i()] = i;
      x[sp.pos_i2()] = static_cast<double>(i) * i;
      x[sp.pos_one()] = 1.0;
      X.col(i - 1) = x;
    }
  }
  return X;
}

void stage_mwu(const StagedLayout& L, TokenMatrix& X, int column, std::span<const double> qu,
               std::span<const double> ql) {
  const int AB = L.dims.A * L.dims.B;
  const double H = L.dims.H;
  if (static_cast<int>(qu.size()) != AB || static_cast<int>(ql.size()) != AB)
    throw std::invalid_argument("stage_mwu: Q blocks must have A*B entries");
  for (int k = 0; k < AB; ++k) {
    X(L.loss_max + k, column) = (H - qu[k]) / H;
    X(L.loss_min + k, column) = ql[k] / H;
  }
}

TransformerParams build_mwu_iteration(const StagedLayout& L) {
  const int d = L.d(), A = L.dims.A, B = L.dims.B, AB = A * B;
  const double H = L.dims.H;
  const double N = L.episodes;
  const EmbeddingSpec& sp = L.spec;
  TransformerParams p = empty_fragment(L);

  // Layer 1: o_{+,n}(a) = nu_n . Lbar(a, .) and o_{-,n}(b) = mu_n . Lunder(., b).
  // Score H(v_i - 1) + <x_i, y_j> - H t_i + H t_j is positive only for j = i
  // at odd queries; V reads i to undo the 1/i average.
  {
    Layer layer = zero_layer(d, 0, 4 * (A + B));
    auto add_head = [&](int target, int x_slot, int x_len, auto y_index) {
      AttnHead head = zero_head(d);
      put(head.Q, 0, sp.pos_v(), 1.0);
      put(head.Q, 0, sp.pos_one(), -1.0);
      put(head.K, 0, sp.pos_one(), H);
      for (int k = 0; k < x_len; ++k) {
        put(head.Q, 1 + k, x_slot + k, 1.0);
        put(head.K, 1 + k, y_index(k), 1.0);
      }
      put(head.Q, 1 + x_len, sp.pos_t(), 1.0);
      put(head.K, 1 + x_len, sp.pos_one(), -H);
      put(head.Q, 2 + x_len, sp.pos_one(), H);
      put(head.K, 2 + x_len, sp.pos_t(), 1.0);
      put(head.V, target, sp.pos_i(), 1.0);
      layer.heads.push_back(std::move(head));
    };
    for (int a = 0; a < A; ++a)
      add_head(L.o_max + a, L.nu, B, [&](int b) { return L.loss_max + L.ab(a, b); });
    for (int b = 0; b < B; ++b)
      add_head(L.o_min + b, L.mu, A, [&](int a) { return L.loss_min + L.ab(a, b); });
    // O += o, o -> 0
    layer.mlp.W1 = Mat::Zero(2 * (A + B), d);
    layer.mlp.W2 = Mat::Zero(d, 2 * (A + B));
    int unit = 0;
    for (int a = 0; a < A; ++a) move_units(layer.mlp, unit, L.o_max + a, L.cum_max + a, 1.0, true);
    for (int b = 0; b < B; ++b) move_units(layer.mlp, unit, L.o_min + b, L.cum_min + b, 1.0, true);
    p.layers.push_back(std::move(layer));
  }

  // Layers 2-3: softmax MLPs mu_new = softmax(-eta_A O_+), nu_new = softmax(-eta_B O_-).
  auto softmax_layer = [&](int from, int to, int K) {
    const double eta = std::sqrt(std::log(static_cast<double>(K)) / N);
    Layer layer = zero_layer(d, 0, K, Activation::softmax);
    for (int k = 0; k < K; ++k) {
      layer.mlp.W1(k, from + k) = -eta;
      layer.mlp.W2(to + k, k) = 1.0;
    }
    p.layers.push_back(std::move(layer));
  };
  softmax_layer(L.cum_max, L.mu_new, A);
  softmax_layer(L.cum_min, L.nu_new, B);

  // Layer 4: even tokens received uniform vectors from the softmax layers;
  // one head removes them. Score (1 - v_i) - t_i + t_j - v_j is positive
  // only for j = i at even queries.
  {
    Layer layer = zero_layer(d, 0, 4 * (A + B));
    AttnHead head = zero_head(d);
    put(head.Q, 0, sp.pos_one(), 1.0);
    put(head.Q, 0, sp.pos_v(), -1.0);
    put(head.K, 0, sp.pos_one(), 1.0);
    put(head.Q, 1, sp.pos_t(), 1.0);
    put(head.K, 1, sp.pos_one(), -1.0);
    put(head.Q, 2, sp.pos_one(), 1.0);
    put(head.K, 2, sp.pos_t(), 1.0);
    put(head.Q, 3, sp.pos_one(), 1.0);
    put(head.K, 3, sp.pos_v(), -1.0);
    for (int a = 0; a < A; ++a) put(head.V, L.mu_new + a, sp.pos_i(), -1.0 / A);
    for (int b = 0; b < B; ++b) put(head.V, L.nu_new + b, sp.pos_i(), -1.0 / B);
    layer.heads.push_back(std::move(head));
    // mu <- mu_new, mu_new -> 0 (same for nu)
    int unit = 0;
    auto swap_in = [&](int oldk, int newk) {
      move_units(layer.mlp, unit, newk, oldk, 1.0, true);
      move_units(layer.mlp, unit, oldk, oldk, -1.0, false);
    };
    for (int a = 0; a < A; ++a) swap_in(L.mu + a, L.mu_new + a);
    for (int b = 0; b < B; ++b) swap_in(L.nu + b, L.nu_new + b);
    p.layers.push_back(std::move(layer));
  }

  // Layer 5: AB heads with score mu_i(a) nu_j(b) - t_i + t_j, then
  // Sigma += prod / N.
  {
    Layer layer = zero_layer(d, 0, 2 * AB);
    for (int a = 0; a < A; ++a)
      for (int b = 0; b < B; ++b) {
        AttnHead head = zero_head(d);
        put(head.Q, 0, L.mu + a, 1.0);
        put(head.K, 0, L.nu + b, 1.0);
        put(head.Q, 1, sp.pos_t(), 1.0);
        put(head.K, 1, sp.pos_one(), -1.0);
        put(head.Q, 2, sp.pos_one(), 1.0);
        put(head.K, 2, sp.pos_t(), 1.0);
        put(head.V, L.prod + L.ab(a, b), sp.pos_i(), 1.0);
        layer.heads.push_back(std::move(head));
      }
    int unit = 0;
    for (int k = 0; k < AB; ++k)
      move_units(layer.mlp, unit, L.prod + k, L.joint_sum + k, 1.0 / N, true);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

TransformerParams build_value_aggregation(const StagedLayout& L) {
  if (!L.tables) throw std::invalid_argument("build_value_aggregation: layout has no tables");
  const int d = L.d(), AB = L.dims.A * L.dims.B;
  const double H = L.dims.H;
  const EmbeddingSpec& sp = L.spec;
  TransformerParams p = empty_fragment(L);
  Layer layer = zero_layer(d, 0, 0);
  for (int h = 0; h < L.dims.H; ++h)
    for (int s = 0; s < L.dims.S; ++s)
      for (int upper = 1; upper >= 0; --upper) {
        AttnHead head = zero_head(d);
        const int q_table = L.table(upper ? L.q_upper : L.q_lower, h, s);
        for (int k = 0; k < AB; ++k) {
          put(head.Q, k, L.table(L.pi, h, s) + k, 1.0);
          put(head.K, k, q_table + k, 1.0);
        }
        put(head.Q, AB, sp.pos_t(), 1.0);
        put(head.K, AB, sp.pos_one(), -H);
        put(head.Q, AB + 1, sp.pos_one(), H);
        put(head.K, AB + 1, sp.pos_t(), 1.0);
        put(head.V, L.hs(upper ? L.v_upper : L.v_lower, h, s), sp.pos_i(), 1.0);
        layer.heads.push_back(std::move(head));
      }
  p.layers.push_back(std::move(layer));
  return p;
}

TransformerParams build_policy_lookup(const StagedLayout& L) {
  if (!L.tables) throw std::invalid_argument("build_policy_lookup: layout has no tables");
  const int d = L.d(), S = L.dims.S, H = L.dims.H, AB = L.dims.A * L.dims.B;
  const EmbeddingSpec& sp = L.spec;
  TransformerParams p = empty_fragment(L);

  // Layer 1: score 1{s_i = s} + 1{h_i = h} - t_i + t_j - 1 equals 1 only for
  // j = i at an odd query sitting at (h, s); V copies the table into part c.
  Layer lookup = zero_layer(d, 0, 0);
  for (int h = 0; h < H; ++h)
    for (int s = 0; s < S; ++s) {
      AttnHead head = zero_head(d);
      for (int k = 0; k < S; ++k) put(head.Q, k, sp.b_offset() + k, 1.0);
      put(head.K, s, sp.pos_one(), 1.0);
      for (int k = 0; k < H; ++k) put(head.Q, S + k, sp.pos_eh(k), 1.0);
      put(head.K, S + h, sp.pos_one(), 1.0);
      put(head.Q, S + H, sp.pos_t(), 1.0);
      put(head.K, S + H, sp.pos_one(), -1.0);
      put(head.Q, S + H + 1, sp.pos_one(), 1.0);
      put(head.K, S + H + 1, sp.pos_t(), 1.0);
      put(head.Q, S + H + 2, sp.pos_one(), 1.0);
      put(head.K, S + H + 2, sp.pos_one(), -1.0);
      for (int k = 0; k < AB; ++k) put(head.V, sp.c_offset() + k, L.table(L.pi, h, s) + k, 1.0);
      lookup.heads.push_back(std::move(head));
    }
  p.layers.push_back(std::move(lookup));

  // Layer 2: part c holds pi / i. Score i^2 - i at j = i on odd queries adds
  // (i - 1) pi / i, so the residual sum is pi. M = 4 T^2 exceeds every i^2
  // and shuts off j < i and even queries.
  const double T = L.max_steps();
  const double M = 4.0 * T * T;
  Layer deavg = zero_layer(d, 0, 0);
  AttnHead head = zero_head(d);
  put(head.Q, 0, sp.pos_i2(), 1.0);
  put(head.K, 0, sp.pos_one(), 1.0);
  put(head.Q, 1, sp.pos_i(), 1.0);
  put(head.K, 1, sp.pos_one(), -1.0);
  put(head.Q, 2, sp.pos_t(), 1.0);
  put(head.K, 2, sp.pos_one(), -M);
  put(head.Q, 3, sp.pos_one(), 1.0);
  put(head.K, 3, sp.pos_t(), M);
  put(head.K, 3, sp.pos_one(), -M);
  put(head.Q, 4, sp.pos_v(), 1.0);
  put(head.K, 4, sp.pos_one(), M);
  for (int k = 0; k < AB; ++k) put(head.V, sp.c_offset() + k, sp.c_offset() + k, 1.0);
  deavg.heads.push_back(std::move(head));
  p.layers.push_back(std::move(deavg));
  return p;
}

TokenMatrix run_repeated(const TransformerParams& fragment, TokenMatrix tokens, int rounds) {
  for (int n = 0; n < rounds; ++n) tokens = tf_forward(fragment, tokens);
  return tokens;
}

// ---------------------------------------------------------------------------
// Verification

bool RealizationReport::pass() const {
  for (const auto& s : substeps)
    if (!s.pass) return false;
  return true;
}

std::string RealizationReport::to_text() const {
  std::ostringstream out;
  out << "realization check H=" << dims.H << " S=" << dims.S << " A=" << dims.A
      << " B=" << dims.B << " G=" << episodes << " trials=" << trials << " seed=" << seed << "\n";
  if (substeps.empty()) out << "  (no trials)\n";
  for (const auto& s : substeps) {
    out << "  " << s.name << ": max_dev=" << s.max_deviation << " tol=" << s.tolerance
        << " layers=" << s.layers << " max_heads=" << s.max_heads << "/" << s.head_budget
        << " norm=" << s.param_norm << " " << (s.pass ? "PASS" : "FAIL") << "\n";
  }
  out << (pass() ? "PASS" : "FAIL") << "\n";
  return out.str();
}

std::string RealizationReport::to_json() const {
  nlohmann::json j;
  j["dims"] = {{"H", dims.H}, {"S", dims.S}, {"A", dims.A}, {"B", dims.B}};
  j["episodes"] = episodes;
  j["trials"] = trials;
  j["seed"] = seed;
  j["pass"] = pass();
  j["substeps"] = nlohmann::json::array();
  for (const auto& s : substeps)
    j["substeps"].push_back({{"name", s.name},
                             {"trials", s.trials},
                             {"max_deviation", s.max_deviation},
                             {"tolerance", s.tolerance},
                             {"pass", s.pass},
                             {"layers", s.layers},
                             {"max_heads", s.max_heads},
                             {"head_budget", s.head_budget},
                             {"param_norm", s.param_norm}});
  return j.dump(2);
}

namespace {

std::vector<double> random_distribution(int K, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(K);
  double sum = 0.0;
  for (auto& x : p) sum += x = -std::log(1.0 - u(rng));
  for (auto& x : p) x /= sum;
  return p;
}

SubstepReport describe(const std::string& name, const TransformerParams& frag, double tol,
                       const Dims& d) {
  SubstepReport r;
  r.name = name;
  r.tolerance = tol;
  r.layers = static_cast<int>(frag.layers.size());
  for (const auto& l : frag.layers)
    r.max_heads = std::max(r.max_heads, static_cast<int>(l.heads.size()));
  r.head_budget = 16L * d.H * d.S * d.S * d.A * d.B;
  r.param_norm = param_norm(frag);
  return r;
}

void perturb_first_value(TransformerParams& p, int row, int col) {
  for (auto& layer : p.layers)
    if (!layer.heads.empty()) {
      layer.heads[0].V(row, col) += 1.0;
      return;
    }
}

double even_token_residue(const StagedLayout& L, const TokenMatrix& X) {
  double worst = 0.0;
  for (Eigen::Index i = 1; i < X.cols(); i += 2)
    worst = std::max(worst, X.col(i).segment(L.spec.c_offset(), L.slots_end - L.spec.c_offset())
                                .cwiseAbs()
                                .maxCoeff());
  return worst;
}

}  // namespace

RealizationReport verify_realization(const RealizeOptions& opt) {
  RealizationReport report;
  report.dims = opt.dims;
  report.episodes = opt.episodes;
  report.trials = opt.trials;
  report.seed = opt.seed;
  if (opt.trials < 0) throw std::invalid_argument("verify_realization: trials must be >= 0");
  if (opt.trials == 0) return report;

  const Dims& dims = opt.dims;
  const int A = dims.A, B = dims.B, AB = A * B, H = dims.H, S = dims.S;
  const int G = opt.episodes;
  const int steps = std::min(opt.staged_steps, G * H);
  const int n_tokens = 2 * steps - 1;
  auto wants = [&](const char* name) { return opt.perturb == name || opt.perturb == "all"; };

  // MWU iteration
  const StagedLayout mwu_layout = make_layout(dims, G, false);
  TransformerParams mwu = build_mwu_iteration(mwu_layout);
  if (wants("mwu")) perturb_first_value(mwu, mwu_layout.o_max, mwu_layout.spec.pos_i());
  SubstepReport mwu_rep = describe("mwu_iteration", mwu, 1e-9, dims);

  const StagedLayout tab = make_layout(dims, G, true);
  TransformerParams value = build_value_aggregation(tab);
  if (wants("value")) perturb_first_value(value, tab.v_upper, tab.spec.pos_i());
  SubstepReport value_rep = describe("value_aggregation", value, 1e-10, dims);

  TransformerParams lookup = build_policy_lookup(tab);
  if (wants("lookup")) perturb_first_value(lookup, tab.spec.c_offset(), tab.table(tab.pi, 0, 0));
  SubstepReport lookup_rep = describe("policy_lookup", lookup, 1e-8, dims);

  std::uniform_real_distribution<double> uq(0.0, static_cast<double>(H));
  std::uniform_int_distribution<int> us(0, S - 1);
  for (int trial = 0; trial < opt.trials; ++trial) {
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(trial)));
    std::vector<int> states(steps);
    for (auto& s : states) s = us(rng);

    // MWU: independent Q blocks on every odd token.
    {
      TokenMatrix X = staged_tokens(mwu_layout, n_tokens, states);
      std::vector<std::vector<double>> expected;
      for (int c = 0; c < n_tokens; c += 2) {
        std::vector<double> qu(AB), ql(AB);
        for (auto& x : qu) x = uq(rng);
        for (auto& x : ql) x = uq(rng);
        stage_mwu(mwu_layout, X, c, qu, ql);
        expected.push_back(mwu_cce(qu, ql, A, B, H, G).joint_policy);
      }
      const TokenMatrix Y = run_repeated(mwu, X, G);
      double dev = even_token_residue(mwu_layout, Y);
      for (int c = 0, k = 0; c < n_tokens; c += 2, ++k)
        for (int e = 0; e < AB; ++e)
          dev = std::max(dev, std::abs(Y(mwu_layout.joint_sum + e, c) - expected[k][e]));
      if (!std::isfinite(dev)) dev = INFINITY;
      mwu_rep.max_deviation = std::max(mwu_rep.max_deviation, dev);
    }

    // Tables shared by value aggregation and policy lookup.
    TokenMatrix X = staged_tokens(tab, n_tokens, states);
    for (int c = 0; c < n_tokens; c += 2)
      for (int h = 0; h < H; ++h)
        for (int s = 0; s < S; ++s) {
          auto pi = random_distribution(AB, rng);
          for (int e = 0; e < AB; ++e) {
            X(tab.table(tab.pi, h, s) + e, c) = pi[e];
            X(tab.table(tab.q_upper, h, s) + e, c) = uq(rng);
            X(tab.table(tab.q_lower, h, s) + e, c) = uq(rng);
          }
        }

    {
      const TokenMatrix Y = tf_forward(value, X);
      double dev = even_token_residue(tab, Y - X);
      for (int c = 0; c < n_tokens; c += 2)
        for (int h = 0; h < H; ++h)
          for (int s = 0; s < S; ++s) {
            double vu = 0.0, vl = 0.0;
            for (int e = 0; e < AB; ++e) {
              vu += X(tab.table(tab.pi, h, s) + e, c) * X(tab.table(tab.q_upper, h, s) + e, c);
              vl += X(tab.table(tab.pi, h, s) + e, c) * X(tab.table(tab.q_lower, h, s) + e, c);
            }
            dev = std::max(dev, std::abs(Y(tab.hs(tab.v_upper, h, s), c) - vu));
            dev = std::max(dev, std::abs(Y(tab.hs(tab.v_lower, h, s), c) - vl));
          }
      value_rep.max_deviation = std::max(value_rep.max_deviation, dev);
    }

    {
      const TokenMatrix Y = tf_forward(lookup, X);
      double dev = even_token_residue(tab, Y - X);
      for (int c = 0; c < n_tokens; c += 2) {
        const int t = c / 2 + 1;
        const int h = (t - 1) % H;
        const int s = states[c / 2];
        double sum = 0.0;
        for (int e = 0; e < AB; ++e) {
          const double got = Y(tab.spec.c_offset() + e, c);
          sum += got;
          dev = std::max(dev, std::abs(got - X(tab.table(tab.pi, h, s) + e, c)));
        }
        dev = std::max(dev, std::abs(sum - 1.0));
      }
      lookup_rep.max_deviation = std::max(lookup_rep.max_deviation, dev);
    }
  }

  for (SubstepReport* r : {&mwu_rep, &value_rep, &lookup_rep}) {
    r->trials = opt.trials;
    r->pass = r->max_deviation <= r->tolerance && r->max_heads <= r->head_budget;
    report.substeps.push_back(*r);
  }
  return report;
}

}  // namespace icgp
