#include "icgp/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "icgp/equilibrium.hpp"
#include "icgp/parallel.hpp"
#include "icgp/v_learning.hpp"

namespace icgp {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kNsPretrain = 0x70726574;
constexpr std::uint64_t kNsInference = 0x696e6665;
constexpr std::uint64_t kNsTrain = 0x74726169;
constexpr std::uint64_t kNsPlay = 0x706c6179;

const char* const kStages[] = {"collect", "train", "infer", "eval"};

std::string fmt(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string fmt_fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary so a failed stage never leaves a torn file.
void write_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

std::string role_tag(EmbeddingRole r) {
  switch (r) {
    case EmbeddingRole::centralized: return "joint";
    case EmbeddingRole::decentralized_max: return "max";
    case EmbeddingRole::decentralized_min: return "min";
  }
  return "?";
}

std::vector<EmbeddingRole> roles(const ExperimentConfig& cfg) {
  if (cfg.centralized) return {EmbeddingRole::centralized};
  return {EmbeddingRole::decentralized_max, EmbeddingRole::decentralized_min};
}

}  // namespace

// ---------------------------------------------------------------- config

ContextAlg ExperimentConfig::context_alg() const {
  if (context) return *context;
  if (centralized) return ContextAlg::vi_ulcb;
  return dims.H == 1 && dims.S == 1 ? ContextAlg::exp3 : ContextAlg::v_learning;
}

ContextConfig ExperimentConfig::context_config() const {
  ContextConfig cc;
  cc.alg = context_alg();
  cc.episodes = episodes;
  cc.c = c;
  cc.delta = delta;
  cc.n_mwu = n_mwu;
  cc.eta = eta;
  return cc;
}

EmbeddingRole ExperimentConfig::role_for(Player p) const {
  if (centralized) return EmbeddingRole::centralized;
  return p == Player::max ? EmbeddingRole::decentralized_max : EmbeddingRole::decentralized_min;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (dims.H < 1 || dims.S < 1 || dims.A < 1 || dims.B < 1) fail("H, S, A, B must be positive");
  if (episodes < 1) fail("G must be positive");
  if (n_pretrain.empty()) fail("n_pretrain must list at least one value");
  for (std::size_t i = 0; i < n_pretrain.size(); ++i) {
    if (n_pretrain[i] < 1) fail("n_pretrain values must be positive");
    if (i > 0 && n_pretrain[i] <= n_pretrain[i - 1]) fail("n_pretrain must be increasing");
  }
  if (inference_games < 1) fail("inference_games must be positive");
  if (train_seeds < 1) fail("train_seeds must be positive");
  if (!(c >= 0.0)) fail("c must be nonnegative");
  if (delta && !(*delta > 0.0 && *delta < 1.0)) fail("delta must lie in (0, 1)");
  if (eta && !(*eta > 0.0)) fail("eta must be positive");
  if (!(final_fraction > 0.0 && final_fraction <= 0.5)) fail("final_fraction must lie in (0, 0.5]");
  const ContextAlg alg = context_alg();
  if (centralized && alg != ContextAlg::vi_ulcb) fail("centralized mode uses vi_ulcb");
  if (!centralized && alg == ContextAlg::vi_ulcb) fail("vi_ulcb needs centralized mode");
  if (alg == ContextAlg::exp3 && (dims.H != 1 || dims.S != 1)) fail("exp3 needs H = S = 1");
  if (!centralized && dims.H * dims.S > 64) fail("decentralized mode supports H*S <= 64");
  if (train.epochs < 0 || train.batch_size < 1 || !(train.lr > 0.0)) fail("bad training settings");
  if (train.layers < 1 || train.heads < 1 || train.scratch < 0 || train.hidden < 0)
    fail("bad model size");
  if (train.window_tokens < 0) fail("window must be nonnegative");
  if (train.head != HeadMode::softmax) fail("training uses the softmax head");
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream o;
  o << "mode = " << (centralized ? "centralized" : "decentralized") << "\n";
  o << "context = " << (context ? to_string(*context) : std::string("auto")) << "\n";
  o << "H = " << dims.H << "\nS = " << dims.S << "\nA = " << dims.A << "\nB = " << dims.B << "\n";
  o << "G = " << episodes << "\n";
  o << "n_pretrain = ";
  for (std::size_t i = 0; i < n_pretrain.size(); ++i) o << (i ? "," : "") << n_pretrain[i];
  o << "\n";
  o << "inference_games = " << inference_games << "\n";
  o << "train_seeds = " << train_seeds << "\n";
  o << "seed = " << seed << "\n";
  o << "c = " << fmt(c) << "\n";
  o << "delta = " << (delta ? fmt(*delta) : std::string("auto")) << "\n";
  o << "n_mwu = " << n_mwu << "\n";
  o << "eta = " << (eta ? fmt(*eta) : std::string("auto")) << "\n";
  o << "epochs = " << train.epochs << "\n";
  o << "batch_size = " << train.batch_size << "\n";
  o << "lr = " << fmt(train.lr) << "\n";
  o << "optimizer = " << to_string(train.optimizer) << "\n";
  o << "layers = " << train.layers << "\n";
  o << "heads = " << train.heads << "\n";
  o << "scratch = " << train.scratch << "\n";
  o << "hidden = " << train.hidden << "\n";
  o << "activation = " << to_string(train.activation) << "\n";
  o << "window = " << train.window_tokens << "\n";
  o << "init_scale = " << fmt(train.init_scale) << "\n";
  o << "round2 = " << (round2 ? "true" : "false") << "\n";
  o << "final_fraction = " << fmt(final_fraction) << "\n";
  return o.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto where = [&] { return "config line " + std::to_string(lineno) + ": "; };
    if (eq == std::string::npos) throw std::invalid_argument(where() + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw std::invalid_argument(where() + "duplicate key '" + key + "'");
    try {
      if (key == "mode") {
        if (v == "centralized") cfg.centralized = true;
        else if (v == "decentralized") cfg.centralized = false;
        else throw std::invalid_argument("mode must be decentralized or centralized");
      } else if (key == "context") {
        if (v == "auto") cfg.context.reset();
        else cfg.context = context_alg_from_string(v);
      } else if (key == "H") cfg.dims.H = parse_number<int>(v);
      else if (key == "S") cfg.dims.S = parse_number<int>(v);
      else if (key == "A") cfg.dims.A = parse_number<int>(v);
      else if (key == "B") cfg.dims.B = parse_number<int>(v);
      else if (key == "G") cfg.episodes = parse_number<int>(v);
      else if (key == "n_pretrain") {
        cfg.n_pretrain.clear();
        std::istringstream parts(v);
        std::string item;
        while (std::getline(parts, item, ',')) cfg.n_pretrain.push_back(parse_number<int>(trim(item)));
      } else if (key == "inference_games") cfg.inference_games = parse_number<int>(v);
      else if (key == "train_seeds") cfg.train_seeds = parse_number<int>(v);
      else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(v);
      else if (key == "c") cfg.c = parse_number<double>(v);
      else if (key == "delta") {
        if (v == "auto") cfg.delta.reset();
        else cfg.delta = parse_number<double>(v);
      } else if (key == "n_mwu") cfg.n_mwu = parse_number<int>(v);
      else if (key == "eta") {
        if (v == "auto") cfg.eta.reset();
        else cfg.eta = parse_number<double>(v);
      } else if (key == "epochs") cfg.train.epochs = parse_number<int>(v);
      else if (key == "batch_size") cfg.train.batch_size = parse_number<int>(v);
      else if (key == "lr") cfg.train.lr = parse_number<double>(v);
      else if (key == "optimizer") cfg.train.optimizer = optimizer_from_string(v);
      else if (key == "layers") cfg.train.layers = parse_number<int>(v);
      else if (key == "heads") cfg.train.heads = parse_number<int>(v);
      else if (key == "scratch") cfg.train.scratch = parse_number<int>(v);
      else if (key == "hidden") cfg.train.hidden = parse_number<int>(v);
      else if (key == "activation") cfg.train.activation = activation_from_string(v);
      else if (key == "window") cfg.train.window_tokens = parse_number<int>(v);
      else if (key == "init_scale") cfg.train.init_scale = parse_number<double>(v);
      else if (key == "round2") cfg.round2 = parse_bool(v);
      else if (key == "final_fraction") cfg.final_fraction = parse_number<double>(v);
      else throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      if (msg.rfind("config line", 0) == 0) throw;
      throw std::invalid_argument(where() + msg);
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------- seeds

std::uint64_t pretrain_base_seed(const ExperimentConfig& cfg) {
  return derive_seed(cfg.seed, kNsPretrain);
}

std::uint64_t inference_game_seed(const ExperimentConfig& cfg, int j) {
  return derive_seed(derive_seed(cfg.seed, kNsInference), static_cast<std::uint64_t>(j));
}

std::uint64_t train_seed(const ExperimentConfig& cfg, int k) {
  return derive_seed(derive_seed(cfg.seed, kNsTrain), static_cast<std::uint64_t>(k));
}

std::uint64_t play_seed(const ExperimentConfig& cfg, int j, const std::string& series, int k) {
  const std::uint64_t base = derive_seed(derive_seed(cfg.seed, kNsPlay), fnv1a(series));
  return derive_seed(derive_seed(base, static_cast<std::uint64_t>(j)), static_cast<std::uint64_t>(k));
}

// ---------------------------------------------------------------- evaluation

std::string to_string(EvalRule r) {
  switch (r) {
    case EvalRule::running_average: return "running_average_matrix_gap";
    case EvalRule::per_episode: return "per_episode_marginal_gap";
    case EvalRule::v_learning_output: return "v_learning_output_mixture_gap";
  }
  return "?";
}

EvalRule eval_rule(const ExperimentConfig& cfg) {
  if (cfg.centralized) return EvalRule::per_episode;
  if (cfg.dims.H == 1 && cfg.dims.S == 1) return EvalRule::running_average;
  return EvalRule::v_learning_output;
}

std::vector<double> gap_curve(const MarkovGame& game, const PlayLog& log, EvalRule rule) {
  const Dims d = game.dims();
  if (!(log.dims == d)) throw std::invalid_argument("gap_curve: log and game dimensions differ");
  const int G = log.episodes;
  std::vector<double> out(G);
  switch (rule) {
    case EvalRule::running_average: {
      if (d.H != 1 || d.S != 1) throw std::invalid_argument("gap_curve: running average needs H = S = 1");
      RunningAverage mu(d.A), nu(d.B);
      for (int g = 0; g < G; ++g) {
        mu.add(log.max_at(g, 0));
        nu.add(log.min_at(g, 0));
        out[g] = matrix_ne_gap(game.reward_matrix(0, 0), mu.mean(), nu.mean());
      }
      break;
    }
    case EvalRule::per_episode: {
      for (int g = 0; g < G; ++g) {
        ProductPolicy mu(d.H, d.S, d.A), nu(d.H, d.S, d.B);
        for (int h = 0; h < d.H; ++h)
          for (int s = 0; s < d.S; ++s) {
            const int t = g * d.H + h;
            auto m = log.max_at(t, s);
            auto n = log.min_at(t, s);
            std::copy(m.begin(), m.end(), mu.at(h, s).begin());
            std::copy(n.begin(), n.end(), nu.at(h, s).begin());
          }
        out[g] = ne_gap(game, mu, nu);
      }
      break;
    }
    case EvalRule::v_learning_output: {
      if (log.steps.size() != static_cast<std::size_t>(G) * d.H)
        throw std::invalid_argument("gap_curve: log has no trajectory");
      PolicyHistory hmax(d.H, d.S, d.A), hmin(d.H, d.S, d.B);
      for (int g = 0; g < G; ++g) {
        for (int h = 0; h < d.H; ++h) {
          const int t = g * d.H + h;
          const int s = log.steps[t].s;
          auto m = log.max_at(t, s);
          auto n = log.min_at(t, s);
          hmax.append(h, s, g, {m.begin(), m.end()});
          hmin.append(h, s, g, {n.begin(), n.end()});
        }
        out[g] = ne_gap(game, hmax.mixture_policy(g), hmin.mixture_policy(g));
      }
      break;
    }
  }
  for (double& x : out) x = std::max(0.0, x);
  return out;
}

GapCurve aggregate_curve(const std::string& label, const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate_curve: no rows");
  const std::size_t G = rows[0].size();
  for (const auto& r : rows)
    if (r.size() != G) throw std::invalid_argument("aggregate_curve: ragged rows");
  GapCurve c;
  c.label = label;
  c.mean.assign(G, 0.0);
  c.stderr_.assign(G, 0.0);
  const double n = static_cast<double>(rows.size());
  for (std::size_t e = 0; e < G; ++e) {
    double sum = 0.0;
    for (const auto& r : rows) sum += r[e];
    const double m = sum / n;
    double ss = 0.0;
    for (const auto& r : rows) ss += (r[e] - m) * (r[e] - m);
    c.mean[e] = std::max(0.0, m);
    c.stderr_[e] = rows.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  }
  return c;
}

double window_mean(const std::vector<double>& curve, int first, int last) {
  first = std::max(first, 0);
  last = std::min<int>(last, static_cast<int>(curve.size()));
  if (last <= first) throw std::invalid_argument("window_mean: empty window");
  double s = 0.0;
  for (int i = first; i < last; ++i) s += curve[i];
  return s / (last - first);
}

namespace {
int window_len(std::size_t n, double fraction) {
  return std::max(1, static_cast<int>(std::lround(fraction * static_cast<double>(n))));
}
}  // namespace

double head_mean(const std::vector<double>& curve, double fraction) {
  return window_mean(curve, 0, window_len(curve.size(), fraction));
}

double tail_mean(const std::vector<double>& curve, double fraction) {
  const int n = static_cast<int>(curve.size());
  return window_mean(curve, n - window_len(curve.size(), fraction), n);
}

std::string curves_csv(const std::vector<GapCurve>& curves) {
  std::string out = "series,episode,mean_gap,stderr\n";
  for (const auto& c : curves)
    for (std::size_t e = 0; e < c.mean.size(); ++e)
      out += c.label + "," + std::to_string(e + 1) + "," + fmt_fixed(c.mean[e], 10) + "," +
             fmt_fixed(c.stderr_[e], 10) + "\n";
  return out;
}

std::vector<GapCurve> read_curves_csv(const std::string& path) {
  std::istringstream in(slurp(path));
  std::string line;
  if (!std::getline(in, line) || line != "series,episode,mean_gap,stderr")
    throw std::runtime_error(path + ": unexpected header");
  std::vector<GapCurve> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string label, ep, m, se;
    if (!std::getline(row, label, ',') || !std::getline(row, ep, ',') ||
        !std::getline(row, m, ',') || !std::getline(row, se))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed row");
    if (out.empty() || out.back().label != label) out.push_back({label, {}, {}});
    out.back().mean.push_back(std::stod(m));
    out.back().stderr_.push_back(std::stod(se));
  }
  return out;
}

std::string curves_svg(const std::vector<GapCurve>& curves, const std::string& title) {
  const double W = 800, Hh = 480, left = 70, right = 200, top = 40, bottom = 50;
  const double pw = W - left - right, ph = Hh - top - bottom;
  std::size_t G = 1;
  double ymax = 0.0;
  for (const auto& c : curves) {
    G = std::max(G, c.mean.size());
    for (double v : c.mean) ymax = std::max(ymax, v);
  }
  if (ymax <= 0.0) ymax = 1.0;
  ymax *= 1.05;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  auto px = [&](double e) { return left + (G > 1 ? (e - 1.0) / (G - 1.0) : 0.5) * pw; };
  auto py = [&](double v) { return top + ph - v / ymax * ph; };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << Hh
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    o << "<text x=\"" << left - 6 << "\" y=\"" << fmt_fixed(py(v) + 4, 6)
      << "\" text-anchor=\"end\">" << fmt_fixed(v, 3) << "</text>\n";
    const double e = 1.0 + (G - 1.0) * k / 4.0;
    o << "<text x=\"" << fmt_fixed(px(e), 6) << "\" y=\"" << top + ph + 18
      << "\" text-anchor=\"middle\">" << std::lround(e) << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << Hh - 12
    << "\" text-anchor=\"middle\">episode</text>\n";
  o << "<text x=\"18\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 18 " << top + ph / 2
    << ")\" text-anchor=\"middle\">NE gap</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* col = colors[i % 6];
    // at most ~800 points per line
    const std::size_t stride = std::max<std::size_t>(1, c.mean.size() / 800);
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t e = 0; e < c.mean.size(); e += stride)
      o << fmt_fixed(px(e + 1.0), 6) << "," << fmt_fixed(py(c.mean[e]), 6) << " ";
    if (!c.mean.empty())
      o << fmt_fixed(px(static_cast<double>(c.mean.size())), 6) << ","
        << fmt_fixed(py(c.mean.back()), 6);
    o << "\"/>\n";
    const double ly = top + 16 + 20.0 * i;
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 36
      << "\" y2=\"" << ly << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 4 << "\">" << c.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string context_series(const ExperimentConfig& cfg) {
  return "context-" + to_string(cfg.context_alg());
}

std::string transformer_series(int n) { return "transformer-N" + std::to_string(n); }

std::string checkpoint_name(int n, int k, EmbeddingRole role) {
  return "ckpt-N" + std::to_string(n) + "-s" + std::to_string(k) + "-" + role_tag(role) + ".bin";
}

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(ExperimentConfig cfg, std::string out_dir, int threads)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)), threads_(std::max(1, threads)) {
  cfg_.validate();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(cfg_.to_text())));
  fingerprint_ = buf;
  for (const char* name : kStages) stages_.push_back({name, false, "", {}});
  fs::create_directories(out_);
  load_manifest();
}

std::string Pipeline::path(const std::string& name) const { return (fs::path(out_) / name).string(); }

bool Pipeline::stage_done(const std::string& stage) const {
  // a stage counts as done only if every earlier stage still is
  for (const auto& st : stages_) {
    if (!st.done || st.fingerprint != fingerprint_) return false;
    for (const auto& f : st.files)
      if (!fs::exists(path(f))) return false;
    if (st.name == stage) return true;
  }
  throw std::invalid_argument("unknown stage '" + stage + "'");
}

void Pipeline::mark_done(const std::string& stage, const std::vector<std::string>& files) {
  for (auto& st : stages_)
    if (st.name == stage) {
      st.done = true;
      st.fingerprint = fingerprint_;
      st.files = files;
    }
  write_manifest();
}

void Pipeline::invalidate_after(const std::string& stage) {
  bool after = false;
  for (auto& st : stages_) {
    if (after) {
      st.done = false;
      st.fingerprint.clear();
      st.files.clear();
    }
    if (st.name == stage) after = true;
  }
}

void Pipeline::load_manifest() {
  const std::string p = path("manifest.json");
  if (!fs::exists(p)) return;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(slurp(p));
  } catch (const nlohmann::json::exception&) {
    return;  // unreadable manifest: every stage reruns
  }
  if (!j.contains("stages") || !j["stages"].is_array()) return;
  for (const auto& js : j["stages"]) {
    for (auto& st : stages_)
      if (js.value("name", "") == st.name) {
        st.done = js.value("done", false);
        st.fingerprint = js.value("config_fingerprint", "");
        st.files.clear();
        if (js.contains("files"))
          for (const auto& f : js["files"]) st.files.push_back(f.get<std::string>());
      }
  }
}

void Pipeline::write_manifest() const {
  nlohmann::ordered_json j;
  j["config_fingerprint"] = fingerprint_;
  nlohmann::ordered_json conf = nlohmann::ordered_json::object();
  std::istringstream in(cfg_.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    conf[line.substr(0, eq)] = line.substr(eq + 3);
  }
  j["config"] = conf;
  j["mode"] = cfg_.centralized ? "centralized" : "decentralized";
  j["context_algorithm"] = to_string(cfg_.context_alg());
  j["eval_rule"] = to_string(eval_rule(cfg_));
  const EmbeddingSpec spec = model_spec(roles(cfg_)[0], cfg_.dims, cfg_.episodes, cfg_.train);
  const int full = 2 * cfg_.episodes * cfg_.dims.H;
  j["window"] = {{"block_tokens", spec.block_tokens},
                 {"full_tokens", full},
                 {"truncated", spec.block_tokens < full}};
  std::vector<std::string> series{context_series(cfg_)};
  for (int n : cfg_.n_pretrain) series.push_back(transformer_series(n));
  j["series"] = series;
  nlohmann::ordered_json st = nlohmann::ordered_json::array();
  for (const auto& s : stages_) {
    nlohmann::ordered_json e;
    e["name"] = s.name;
    e["done"] = s.done;
    e["config_fingerprint"] = s.fingerprint;
    e["files"] = s.files;
    st.push_back(e);
  }
  j["stages"] = st;
  write_file(path("manifest.json"), j.dump(2) + "\n");
}

void Pipeline::collect() {
  if (stage_done("collect")) return;
  const int nmax = cfg_.n_pretrain.back();
  const ContextConfig cc = cfg_.context_config();
  std::cerr << "[collect] " << nmax << " games, " << to_string(cc.alg) << ", G=" << cfg_.episodes
            << "\n";
  const auto records =
      collect_pretraining(cfg_.dims, cc, nmax, pretrain_base_seed(cfg_), threads_);
  std::set<std::uint64_t> pre;
  for (const auto& r : records) pre.insert(r.game_seed);
  for (int j = 0; j < cfg_.inference_games; ++j)
    if (pre.count(inference_game_seed(cfg_, j)))
      throw std::runtime_error("collect: inference and pretraining game seeds collide");
  write_jsonl(records, path("dataset.jsonl"), cfg_.round2);
  invalidate_after("collect");
  mark_done("collect", {"dataset.jsonl"});
}

void Pipeline::train() {
  if (stage_done("train")) return;
  if (!fs::exists(path("dataset.jsonl")))
    throw std::runtime_error("train: " + path("dataset.jsonl") + " is missing; run collect first");
  const auto records = read_jsonl(path("dataset.jsonl"));
  if (static_cast<int>(records.size()) < cfg_.n_pretrain.back())
    throw std::runtime_error("train: dataset holds " + std::to_string(records.size()) +
                             " records, need " + std::to_string(cfg_.n_pretrain.back()));
  for (const auto& r : records)
    if (!(r.dims == cfg_.dims) || r.episodes() != cfg_.episodes)
      throw std::runtime_error("train: dataset does not match the config dimensions");

  const auto rs = roles(cfg_);
  // blocks per (N, role), shared by all seeds
  std::vector<std::vector<TrainBlock>> blocks(cfg_.n_pretrain.size() * rs.size());
  for (std::size_t ni = 0; ni < cfg_.n_pretrain.size(); ++ni) {
    const std::vector<TrajectoryRecord> prefix(records.begin(),
                                               records.begin() + cfg_.n_pretrain[ni]);
    for (std::size_t ri = 0; ri < rs.size(); ++ri) {
      const EmbeddingSpec spec = model_spec(rs[ri], cfg_.dims, cfg_.episodes, cfg_.train);
      blocks[ni * rs.size() + ri] = training_blocks(prefix, spec);
    }
  }

  struct Job {
    int ni, k, ri;
  };
  std::vector<Job> jobs;
  for (int ni = 0; ni < static_cast<int>(cfg_.n_pretrain.size()); ++ni)
    for (int k = 0; k < cfg_.train_seeds; ++k)
      for (int ri = 0; ri < static_cast<int>(rs.size()); ++ri) jobs.push_back({ni, k, ri});

  std::vector<LossReport> reports(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), threads_, [&](int i) {
    const Job& jb = jobs[i];
    TrainConfig tc = cfg_.train;
    tc.seed = train_seed(cfg_, jb.k);
    tc.threads = 1;
    const EmbeddingSpec spec = model_spec(rs[jb.ri], cfg_.dims, cfg_.episodes, tc);
    auto result = icgp::train(tc, blocks[jb.ni * rs.size() + jb.ri], spec);
    save_checkpoint(result.params, path(checkpoint_name(cfg_.n_pretrain[jb.ni], jb.k, rs[jb.ri])));
    std::cerr << "[train] N=" << cfg_.n_pretrain[jb.ni] << " seed=" << jb.k << " "
              << role_tag(rs[jb.ri]) << ": nll " << fmt_fixed(result.report.epoch_nll.front(), 5)
              << " -> " << fmt_fixed(result.report.epoch_nll.back(), 5) << " ("
              << fmt_fixed(result.report.epoch_seconds.empty() ? 0.0
                                                               : result.report.epoch_seconds.back(),
                           4)
              << " s)\n";
    reports[i] = std::move(result.report);
  });

  std::string log = "N,seed,role,epoch,mean_nll\n";
  std::string timing = "N,seed,role,epoch,wall_seconds\n";
  std::vector<std::string> files;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& jb = jobs[i];
    const std::string prefix = std::to_string(cfg_.n_pretrain[jb.ni]) + "," +
                               std::to_string(jb.k) + "," + role_tag(rs[jb.ri]) + ",";
    const auto& rep = reports[i];
    for (std::size_t e = 0; e < rep.epoch_nll.size(); ++e) {
      log += prefix + std::to_string(e) + "," + fmt(rep.epoch_nll[e]) + "\n";
      if (e < rep.epoch_seconds.size())
        timing += prefix + std::to_string(e) + "," + fmt_fixed(rep.epoch_seconds[e], 6) + "\n";
    }
    files.push_back(checkpoint_name(cfg_.n_pretrain[jb.ni], jb.k, rs[jb.ri]));
  }
  write_file(path("training-log.csv"), log);
  write_file(path("timing.csv"), timing);
  files.insert(files.begin(), "training-log.csv");
  invalidate_after("train");
  mark_done("train", files);
}

void Pipeline::infer() {
  if (stage_done("infer")) return;
  const auto rs = roles(cfg_);
  const int nn = static_cast<int>(cfg_.n_pretrain.size());
  // models[(ni * seeds + k) * roles + ri]
  std::vector<TransformerParams> models;
  for (int ni = 0; ni < nn; ++ni)
    for (int k = 0; k < cfg_.train_seeds; ++k)
      for (EmbeddingRole r : rs) {
        const std::string p = path(checkpoint_name(cfg_.n_pretrain[ni], k, r));
        if (!fs::exists(p))
          throw std::runtime_error("infer: missing checkpoint " + p + "; run train first");
        models.push_back(load_checkpoint(p));
      }
  const EvalRule rule = eval_rule(cfg_);
  const ContextConfig cc = cfg_.context_config();
  const std::string ctx = context_series(cfg_);
  const int G = cfg_.episodes;
  const int J = cfg_.inference_games;

  // curves[j][0] context, then (ni, k)
  std::vector<std::vector<std::vector<double>>> curves(J);
  struct Task {
    int j, slot;
  };
  std::vector<Task> tasks;
  const int slots = 1 + nn * cfg_.train_seeds;
  for (int j = 0; j < J; ++j) {
    curves[j].resize(slots);
    for (int s = 0; s < slots; ++s) tasks.push_back({j, s});
  }
  parallel_for(static_cast<int>(tasks.size()), threads_, [&](int i) {
    const Task tk = tasks[i];
    const std::uint64_t gseed = inference_game_seed(cfg_, tk.j);
    const MarkovGame game = sample_game(cfg_.dims, gseed);
    if (tk.slot == 0) {
      const auto run = run_context(game, gseed, cc, play_seed(cfg_, tk.j, ctx, 0));
      curves[tk.j][0] = gap_curve(game, run.log, rule);
      return;
    }
    const int ni = (tk.slot - 1) / cfg_.train_seeds, k = (tk.slot - 1) % cfg_.train_seeds;
    Rng rng(play_seed(cfg_, tk.j, transformer_series(cfg_.n_pretrain[ni]), k));
    const std::size_t base = static_cast<std::size_t>(ni * cfg_.train_seeds + k) * rs.size();
    const PlayLog log = cfg_.centralized
                            ? infer_play_centralized(models[base], game, G, rng)
                            : infer_play_decentralized(models[base], models[base + 1], game, G, rng);
    curves[tk.j][tk.slot] = gap_curve(game, log, rule);
  });

  std::string out = "series,seed,game,episode,gap\n";
  auto emit = [&](const std::string& label, int k, int j, const std::vector<double>& c) {
    for (int e = 0; e < G; ++e)
      out += label + "," + std::to_string(k) + "," + std::to_string(j) + "," +
             std::to_string(e + 1) + "," + fmt(c[e]) + "\n";
  };
  for (int j = 0; j < J; ++j) emit(ctx, 0, j, curves[j][0]);
  for (int ni = 0; ni < nn; ++ni)
    for (int k = 0; k < cfg_.train_seeds; ++k)
      for (int j = 0; j < J; ++j)
        emit(transformer_series(cfg_.n_pretrain[ni]), k, j, curves[j][1 + ni * cfg_.train_seeds + k]);
  write_file(path("gaps.csv"), out);
  std::cerr << "[infer] " << J << " games x " << slots << " players, rule "
            << to_string(rule) << "\n";
  invalidate_after("infer");
  mark_done("infer", {"gaps.csv"});
}

void Pipeline::eval() {
  if (stage_done("eval")) return;
  if (!stage_done("infer")) infer();
  std::istringstream in(slurp(path("gaps.csv")));
  std::string line;
  std::getline(in, line);
  // series -> game -> seed -> curve
  std::map<std::string, std::map<int, std::map<int, std::vector<double>>>> raw;
  std::vector<std::string> order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string label, k, j, e, gap;
    std::getline(row, label, ',');
    std::getline(row, k, ',');
    std::getline(row, j, ',');
    std::getline(row, e, ',');
    std::getline(row, gap);
    if (raw.find(label) == raw.end()) order.push_back(label);
    raw[label][std::stoi(j)][std::stoi(k)].push_back(std::stod(gap));
  }
  std::vector<GapCurve> curves;
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (const auto& label : order) {
    std::vector<std::vector<double>> rows;
    for (const auto& [j, seeds] : raw[label]) {
      std::vector<double> m(cfg_.episodes, 0.0);
      for (const auto& [k, c] : seeds) {
        if (static_cast<int>(c.size()) != cfg_.episodes)
          throw std::runtime_error("eval: gaps.csv has a truncated curve for " + label);
        for (int e = 0; e < cfg_.episodes; ++e) m[e] += c[e] / static_cast<double>(seeds.size());
      }
      rows.push_back(std::move(m));
    }
    curves.push_back(aggregate_curve(label, rows));
    const auto& c = curves.back();
    nlohmann::ordered_json s;
    s["series"] = label;
    s["games"] = rows.size();
    s["first_window_mean"] = head_mean(c.mean, cfg_.final_fraction);
    s["final_window_mean"] = tail_mean(c.mean, cfg_.final_fraction);
    summary.push_back(s);
  }
  write_file(path("curves.csv"), curves_csv(curves));
  const std::string title = std::string(cfg_.centralized ? "centralized" : "decentralized") +
                            ": NE gap (" + to_string(eval_rule(cfg_)) + ")";
  write_file(path("curves.svg"), curves_svg(curves, title));
  nlohmann::ordered_json sj;
  sj["eval_rule"] = to_string(eval_rule(cfg_));
  sj["window_fraction"] = cfg_.final_fraction;
  sj["series"] = summary;
  write_file(path("summary.json"), sj.dump(2) + "\n");
  mark_done("eval", {"curves.csv", "curves.svg", "summary.json"});
}

void Pipeline::run() {
  collect();
  train();
  infer();
  eval();
}

std::vector<GapCurve> Pipeline::load_curves() const { return read_curves_csv(path("curves.csv")); }

}  // namespace icgp
