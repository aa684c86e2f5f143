#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "icgp/experiments.hpp"
#include "icgp/parallel.hpp"
#include "icgp/realization.hpp"

namespace {

struct PipelineFlags {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool round2 = false;
};

void add_pipeline_flags(CLI::App* cmd, PipelineFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (key = value)")->required();
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_flag("--round2", f.round2, "round rewards to 2 decimals in dataset.jsonl");
}

icgp::Pipeline make_pipeline(const PipelineFlags& f) {
  auto cfg = icgp::ExperimentConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.round2) cfg.round2 = true;
  return icgp::Pipeline(cfg, f.out, icgp::worker_count());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context game playing: data collection, pretraining, inference and evaluation"};
  app.require_subcommand(1);

  PipelineFlags pf;
  CLI::App* run = app.add_subcommand("run", "collect, train, infer and evaluate");
  CLI::App* collect = app.add_subcommand("collect", "write dataset.jsonl");
  CLI::App* train = app.add_subcommand("train", "pretrain checkpoints from dataset.jsonl");
  CLI::App* infer = app.add_subcommand("infer", "play the inference games, write gaps.csv");
  CLI::App* eval = app.add_subcommand("eval", "aggregate curves from existing checkpoints");
  for (CLI::App* cmd : {run, collect, train, infer, eval}) add_pipeline_flags(cmd, pf);

  icgp::RealizeOptions ro;
  std::string realize_out = ".";
  std::string perturb;
  CLI::App* realize = app.add_subcommand("realize-check", "verify the constructed transformer fragments");
  realize->add_option("--out", realize_out, "directory for realize-report.json");
  realize->add_option("--seed", ro.seed, "seed for the staged inputs");
  realize->add_option("--trials", ro.trials, "random instances per sub-step");
  realize->add_option("--H", ro.dims.H, "horizon");
  realize->add_option("--S", ro.dims.S, "states");
  realize->add_option("--A", ro.dims.A, "max-player actions");
  realize->add_option("--B", ro.dims.B, "min-player actions");
  realize->add_option("--G", ro.episodes, "MWU rounds");
  auto* perturb_opt = realize->add_option("--perturb", perturb,
                                          "perturb a weight: mwu, value, lookup or all (default all)")
                          ->expected(0, 1);

  CLI11_PARSE(app, argc, argv);

  try {
    if (realize->parsed()) {
      if (perturb_opt->count() > 0) ro.perturb = perturb.empty() ? "all" : perturb;
      const auto report = icgp::verify_realization(ro);
      std::filesystem::create_directories(realize_out);
      const auto path = std::filesystem::path(realize_out) / "realize-report.json";
      std::ofstream(path, std::ios::binary) << report.to_json();
      std::cout << report.to_text();
      std::cout << (report.pass() ? "realize-check: PASS\n" : "realize-check: FAIL\n");
      return report.pass() ? 0 : 1;
    }
    auto pipeline = make_pipeline(pf);
    if (run->parsed()) pipeline.run();
    if (collect->parsed()) pipeline.collect();
    if (train->parsed()) pipeline.train();
    if (infer->parsed()) pipeline.infer();
    if (eval->parsed()) pipeline.eval();
    if (run->parsed() || eval->parsed())
      for (const auto& c : pipeline.load_curves())
        std::cout << c.label << ": first " << icgp::head_mean(c.mean, pipeline.config().final_fraction)
                  << "  final " << icgp::tail_mean(c.mean, pipeline.config().final_fraction) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
