#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pflow/harness/config.hpp"

namespace pflow::harness {

// Environment variable that overrides the configured output directory (a
// --output-dir flag still wins).
inline constexpr const char* kOutputDirEnv = "PFLOW_OUTPUT_DIR";

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  bool smoke = false;
  std::ostream* log = nullptr;
};

struct RunOutcome {
  int exit_code = 0;
  std::filesystem::path output_dir;
  std::string summary_json;  // also written to summary.json
  std::vector<std::string> warnings;
};

// One row of records.csv.
struct RunRecord {
  std::string group;  // attack name, "benign", or "blackbox_<suite>"
  std::size_t sample_id = 0;
  double lambda = 0.0;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  double logp_fast = 0.0;
  double logp = 0.0;  // accurate, = integral + prior
  double integral = 0.0;
  double prior = 0.0;
  double per_dim = 0.0;
  std::optional<double> complexity;
  std::optional<double> hf_energy;
  std::size_t steps = 0;
  bool converged = false;
  bool aborted = false;
  double wall_time = 0.0;  // seconds; written to timings.json, not the CSV
};

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& opts);

// Seed for job `stream` under `seed`.
std::uint64_t job_seed(std::uint64_t seed, std::uint64_t stream);

struct TrainOutcome {
  std::unique_ptr<TinyScoreNet> net;
  std::vector<double> loss;
  std::vector<double> lr;  // per step
  bool diverged = false;
  std::string message;
};

// Deterministic DSM training. `mixture` is required for Mixture data.
TrainOutcome train_score_net(const TrainSpec& spec, const GaussianMixture* mixture, std::ostream* log);

std::unique_ptr<ScoreModel> build_model(const ModelSpec& spec, std::ostream* log);

// Throws ConfigError("dataset: no samples") when n == 0, or when the data
// type does not fit the model.
std::vector<Sample> build_dataset(const DataSpec& spec, const ScoreModel& model, const ModelSpec& model_spec);

// Runs `cfg.kind`. Writes CSV/SVG/PNG/JSON outputs into the resolved output
// directory. Throws ConfigError for configs that cannot run.
RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

}  // namespace pflow::harness
