#include "icgp/dataset.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "icgp/no_regret.hpp"
#include "icgp/parallel.hpp"
#include "icgp/v_learning.hpp"
#include "icgp/vi_ulcb.hpp"

namespace icgp {

std::string to_string(ContextAlg alg) {
  switch (alg) {
    case ContextAlg::exp3: return "exp3";
    case ContextAlg::v_learning: return "v_learning";
    case ContextAlg::vi_ulcb: return "vi_ulcb";
  }
  return "?";
}

ContextAlg context_alg_from_string(const std::string& s) {
  if (s == "exp3") return ContextAlg::exp3;
  if (s == "v_learning") return ContextAlg::v_learning;
  if (s == "vi_ulcb") return ContextAlg::vi_ulcb;
  throw std::invalid_argument("unknown context algorithm '" + s + "'");
}

std::string to_string(Player p) { return p == Player::max ? "max" : "min"; }

MarkovGame sample_game(const Dims& d, std::uint64_t seed) {
  if (d.H == 1 && d.S == 1) return sample_matrix_game(d.A, d.B, seed);
  return sample_markov_game(d.A, d.B, d.S, d.H, seed);
}

void TrajectoryRecord::validate() const {
  const Dims& d = dims;
  if (d.H < 1 || d.S < 1 || d.A < 1 || d.B < 1)
    throw std::invalid_argument("record: dimensions must be positive");
  if (steps.empty() || steps.size() % d.H != 0)
    throw std::invalid_argument("record: step count must be a positive multiple of H");
  if (aug.size() != steps.size() * d.S)
    throw std::invalid_argument("record: expected T*S augmented entries");
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const EpisodeStep& e = steps[t];
    if (e.g != static_cast<int>(t) / d.H || e.h != static_cast<int>(t) % d.H)
      throw std::invalid_argument("record: step indices out of order");
    if (e.s < 0 || e.s >= d.S || e.a < 0 || e.a >= d.A || e.b < 0 || e.b >= d.B)
      throw std::invalid_argument("record: step index out of range");
    if (!(e.r >= 0.0 && e.r <= 1.0)) throw std::invalid_argument("record: reward outside [0, 1]");
  }
  for (std::size_t k = 0; k < aug.size(); ++k) {
    const AugEntry& e = aug[k];
    if (e.t != static_cast<int>(k) / d.S || e.s != static_cast<int>(k) % d.S)
      throw std::invalid_argument("record: augmented entries out of order");
    if (e.a < 0 || e.a >= d.A || e.b < 0 || e.b >= d.B)
      throw std::invalid_argument("record: augmented action out of range");
  }
}

PlayLog::PlayLog(Dims d, int G) : dims(d), episodes(G) {
  const std::size_t ts = static_cast<std::size_t>(G) * d.H * d.S;
  max_policy.assign(ts * d.A, 0.0);
  min_policy.assign(ts * d.B, 0.0);
  steps.reserve(static_cast<std::size_t>(G) * d.H);
}

namespace {

// Shared episode loop. `Alg` supplies begin_episode(g), policies(h, s, mu, nu),
// sample(h, s, rng) for one (a, b) draw, and observe(g, h, s, a, b, r, s').
template <typename Alg>
ContextRun drive(const MarkovGame& game, std::uint64_t game_seed, int G, Alg& alg, Rng& rng) {
  const Dims d = game.dims();
  ContextRun run;
  run.record.game_seed = game_seed;
  run.record.dims = d;
  run.record.steps.reserve(static_cast<std::size_t>(G) * d.H);
  run.record.aug.reserve(static_cast<std::size_t>(G) * d.H * d.S);
  run.log = PlayLog(d, G);
  int t = 0;
  for (int g = 0; g < G; ++g) {
    alg.begin_episode(g);
    int s = game.initial_state();
    for (int h = 0; h < d.H; ++h, ++t) {
      for (int sp = 0; sp < d.S; ++sp) {
        alg.policies(h, sp, run.log.max_at(t, sp), run.log.min_at(t, sp));
        const auto [a, b] = alg.sample(h, sp, rng);
        run.record.aug.push_back({t, sp, a, b});
      }
      const auto [a, b] = alg.sample(h, s, rng);
      const double r = game.reward(h, s, a, b);
      const int s_next = sample_discrete(game.transition(h, s, a, b), rng);
      const EpisodeStep step{g, h, s, a, b, r};
      run.record.steps.push_back(step);
      alg.observe(g, h, s, a, b, r, s_next);
      s = s_next;
    }
  }
  run.log.steps = run.record.steps;
  return run;
}

struct Exp3Pair {
  Exp3Learner max, min;

  void begin_episode(int) {}
  void policies(int, int, std::span<double> mu, std::span<double> nu) const {
    const auto p = max.probabilities(), q = min.probabilities();
    std::copy(p.begin(), p.end(), mu.begin());
    std::copy(q.begin(), q.end(), nu.begin());
  }
  std::pair<int, int> sample(int, int, Rng& rng) const {
    const int a = max.act(rng).first;
    const int b = min.act(rng).first;
    return {a, b};
  }
  void observe(int, int, int, int a, int b, double r, int) {
    const auto p = max.probabilities(), q = min.probabilities();
    max.update(a, r, p[a]);
    min.update(b, 1.0 - r, q[b]);
  }
};

struct VLearningPair {
  VLearner max, min;
  PolicyHistory hist_max, hist_min;

  void begin_episode(int) {}
  void policies(int h, int s, std::span<double> mu, std::span<double> nu) const {
    const auto p = max.policy(h, s), q = min.policy(h, s);
    std::copy(p.begin(), p.end(), mu.begin());
    std::copy(q.begin(), q.end(), nu.begin());
  }
  std::pair<int, int> sample(int h, int s, Rng& rng) const {
    const int a = max.act(h, s, rng).first;
    const int b = min.act(h, s, rng).first;
    return {a, b};
  }
  void observe(int g, int h, int s, int a, int b, double r, int s_next) {
    max.update(hist_max, g, h, s, a, r, s_next);
    min.update(hist_min, g, h, s, b, 1.0 - r, s_next);
  }
};

struct ViUlcbRunner {
  ViUlcb alg;

  void begin_episode(int) { alg.plan(); }
  void policies(int h, int s, std::span<double> mu, std::span<double> nu) const {
    const Dims& d = alg.dims();
    const auto pi = alg.policy().at(h, s);
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(nu.begin(), nu.end(), 0.0);
    for (int a = 0; a < d.A; ++a)
      for (int b = 0; b < d.B; ++b) {
        mu[a] += pi[a * d.B + b];
        nu[b] += pi[a * d.B + b];
      }
  }
  std::pair<int, int> sample(int h, int s, Rng& rng) const { return alg.act(h, s, rng); }
  void observe(int, int h, int s, int a, int b, double r, int s_next) {
    alg.update(h, s, a, b, r, s_next);
  }
};

}  // namespace

ContextRun run_context(const MarkovGame& game, std::uint64_t game_seed, const ContextConfig& cfg,
                       std::uint64_t run_seed) {
  const Dims d = game.dims();
  const int G = cfg.episodes;
  if (G < 1) throw std::invalid_argument("run_context: episodes must be >= 1");
  Rng rng(run_seed);
  switch (cfg.alg) {
    case ContextAlg::exp3: {
      if (d.H != 1 || d.S != 1)
        throw std::invalid_argument("run_context: EXP3 needs a matrix game (H = S = 1)");
      Exp3Pair alg{Exp3Learner(d.A, cfg.eta.value_or(Exp3Learner::default_eta(d.A, G))),
                   Exp3Learner(d.B, cfg.eta.value_or(Exp3Learner::default_eta(d.B, G)))};
      return drive(game, game_seed, G, alg, rng);
    }
    case ContextAlg::v_learning: {
      const VLearningConfig vc{cfg.c, cfg.delta, G};
      VLearningPair alg{VLearner(d.H, d.S, d.A, vc), VLearner(d.H, d.S, d.B, vc),
                        PolicyHistory(d.H, d.S, d.A), PolicyHistory(d.H, d.S, d.B)};
      return drive(game, game_seed, G, alg, rng);
    }
    case ContextAlg::vi_ulcb: {
      ViUlcbRunner alg{ViUlcb(d, ViUlcbConfig{cfg.c, cfg.delta, cfg.n_mwu, G})};
      return drive(game, game_seed, G, alg, rng);
    }
  }
  throw std::invalid_argument("run_context: unknown algorithm");
}

std::vector<TrajectoryRecord> collect_pretraining(const Dims& dims, const ContextConfig& config,
                                                  int n, std::uint64_t seed, int threads) {
  if (n < 1) throw std::invalid_argument("collect_pretraining: N must be >= 1");
  std::vector<TrajectoryRecord> out(n);
  parallel_for(n, threads, [&](int i) {
    const std::uint64_t game_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    const MarkovGame game = sample_game(dims, game_seed);
    out[i] = run_context(game, game_seed, config, derive_seed(game_seed, 1)).record;
  });
  return out;
}

std::pair<DecentralizedView, DecentralizedView> split_decentralized(const TrajectoryRecord& rec) {
  DecentralizedView mx, mn;
  mx.player = Player::max;
  mn.player = Player::min;
  for (auto* v : {&mx, &mn}) {
    v->game_seed = rec.game_seed;
    v->dims = rec.dims;
    v->steps.reserve(rec.steps.size());
    v->aug.reserve(rec.aug.size());
  }
  for (const auto& e : rec.steps) {
    mx.steps.push_back({e.g, e.h, e.s, e.a, e.r});
    mn.steps.push_back({e.g, e.h, e.s, e.b, 1.0 - e.r});
  }
  for (const auto& e : rec.aug) {
    mx.aug.push_back({e.t, e.s, e.a});
    mn.aug.push_back({e.t, e.s, e.b});
  }
  return {std::move(mx), std::move(mn)};
}

std::vector<PromptStep> prompt_steps(const TrajectoryRecord& record) {
  std::vector<PromptStep> out;
  out.reserve(record.steps.size());
  for (const auto& e : record.steps) out.push_back({e.g, e.h, e.s, e.a, e.b, e.r});
  return out;
}

std::vector<PromptStep> prompt_steps(const DecentralizedView& view) {
  std::vector<PromptStep> out;
  out.reserve(view.steps.size());
  for (const auto& e : view.steps) out.push_back({e.g, e.h, e.s, e.a, -1, e.r});
  return out;
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

namespace {

using ojson = nlohmann::ordered_json;

ojson dims_json(const Dims& d) { return {{"H", d.H}, {"S", d.S}, {"A", d.A}, {"B", d.B}}; }

}  // namespace

std::string record_to_json(const TrajectoryRecord& rec, bool round_rewards) {
  ojson j;
  j["game_seed"] = rec.game_seed;
  j["dims"] = dims_json(rec.dims);
  ojson steps = ojson::array();
  for (const auto& e : rec.steps)
    steps.push_back({{"g", e.g},
                     {"h", e.h},
                     {"s", e.s},
                     {"a", e.a},
                     {"b", e.b},
                     {"r", round_rewards ? round2(e.r) : e.r}});
  j["steps"] = std::move(steps);
  ojson aug = ojson::array();
  for (const auto& e : rec.aug) aug.push_back({{"t", e.t}, {"s", e.s}, {"a", e.a}, {"b", e.b}});
  j["aug"] = std::move(aug);
  return j.dump();
}

TrajectoryRecord record_from_json(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  TrajectoryRecord rec;
  rec.game_seed = j.at("game_seed").get<std::uint64_t>();
  const auto& d = j.at("dims");
  rec.dims = {d.at("H").get<int>(), d.at("S").get<int>(), d.at("A").get<int>(),
              d.at("B").get<int>()};
  for (const auto& e : j.at("steps"))
    rec.steps.push_back({e.at("g").get<int>(), e.at("h").get<int>(), e.at("s").get<int>(),
                         e.at("a").get<int>(), e.at("b").get<int>(), e.at("r").get<double>()});
  for (const auto& e : j.at("aug"))
    rec.aug.push_back(
        {e.at("t").get<int>(), e.at("s").get<int>(), e.at("a").get<int>(), e.at("b").get<int>()});
  rec.validate();
  return rec;
}

std::string view_to_json(const DecentralizedView& view, bool round_rewards) {
  ojson j;
  j["player"] = to_string(view.player);
  j["game_seed"] = view.game_seed;
  j["dims"] = dims_json(view.dims);
  ojson steps = ojson::array();
  for (const auto& e : view.steps)
    steps.push_back({{"g", e.g},
                     {"h", e.h},
                     {"s", e.s},
                     {"a", e.a},
                     {"r", round_rewards ? round2(e.r) : e.r}});
  j["steps"] = std::move(steps);
  ojson aug = ojson::array();
  for (const auto& e : view.aug) aug.push_back({{"t", e.t}, {"s", e.s}, {"a", e.a}});
  j["aug"] = std::move(aug);
  return j.dump();
}

void write_jsonl(const std::vector<TrajectoryRecord>& records, const std::string& path,
                 bool round_rewards) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& rec : records) out << record_to_json(rec, round_rewards) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<TrajectoryRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<TrajectoryRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const std::exception& e) {
      std::ostringstream msg;
      msg << path << ":" << lineno << ": malformed record: " << e.what();
      throw std::runtime_error(msg.str());
    }
  }
  return out;
}

}  // namespace icgp
