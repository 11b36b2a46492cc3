// pflow: experiment runner.
//
//   pflow <estimate|attack|solver-compare|blackbox|train> --config FILE
//         [--output-dir DIR] [--seed N] [--workers N] [--smoke]
//
// Exit status: 0 success, 1 a checked invariant failed, 2 usage or config
// error, 3 runtime failure.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "pflow/harness/config.hpp"
#include "pflow/harness/experiments.hpp"

namespace h = pflow::harness;

int main(int argc, char** argv) {
  CLI::App app{"Probability-flow likelihood lab: estimators, attacks and probes"};
  app.require_subcommand(1);

  struct Flags {
    std::string config;
    std::string output_dir;
    std::uint64_t seed = 0;
    std::size_t workers = 0;
    bool smoke = false;
  } flags;

  const std::map<std::string, std::pair<h::ExperimentKind, std::string>> commands{
      {"estimate", {h::ExperimentKind::Estimate, "Forward/reverse likelihood estimates over a dataset"}},
      {"attack", {h::ExperimentKind::Attack, "Likelihood-maximization attack campaign"}},
      {"solver-compare", {h::ExperimentKind::SolverCompare, "Prior-only attack under competing fast solvers"}},
      {"blackbox", {h::ExperimentKind::BlackBox, "Optimization-free probe suites"}},
      {"train", {h::ExperimentKind::Train, "Train a score network with denoising score matching"}},
  };
  std::map<CLI::App*, h::ExperimentKind> kinds;
  for (const auto& [name, info] : commands) {
    CLI::App* sub = app.add_subcommand(name, info.second);
    sub->add_option("--config", flags.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--output-dir", flags.output_dir,
                    std::string("Output directory (overrides ") + h::kOutputDirEnv + " and the config)");
    sub->add_option("--seed", flags.seed, "Global seed (overrides the config)");
    sub->add_option("--workers", flags.workers, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_flag("--smoke", flags.smoke, "Reduced campaign sizes for quick runs");
    kinds[sub] = info.first;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const h::ExperimentConfig cfg = h::load_config(flags.config);
    if (cfg.kind != kinds.at(sub)) {
      std::cerr << "error: " << flags.config << " describes experiment '" << h::to_string(cfg.kind)
                << "', not '" << sub->get_name() << "'\n";
      return 2;
    }
    h::RunOptions opts;
    if (!flags.output_dir.empty()) opts.output_dir = flags.output_dir;
    if (sub->count("--seed")) opts.seed = flags.seed;
    if (sub->count("--workers")) opts.workers = flags.workers;
    opts.smoke = flags.smoke;
    opts.log = &std::cerr;
    const h::RunOutcome out = h::run_experiment(cfg, opts);
    for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << out.summary_json;
    std::cerr << "outputs written to " << out.output_dir.string() << "\n";
    return out.exit_code;
  } catch (const h::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
