#pragma once

// Experiment configuration: one JSON file (schema version 1) fully
// determines a run together with its seed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pflow/attacks.hpp"
#include "pflow/pf_ode.hpp"
#include "pflow/score_models.hpp"

namespace pflow::harness {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { Estimate, Attack, SolverCompare, BlackBox, Train };

const char* to_string(ExperimentKind k);

struct DataSpec {
  enum class Type { Uniform, Mixture, ToyImages };
  Type type = Type::Uniform;
  std::size_t n = 20;
  std::size_t height = 8;  // ToyImages
  std::size_t width = 8;
  std::uint64_t seed = 0;
};

struct TrainSpec {
  DataSpec data{DataSpec::Type::ToyImages, 512};
  std::vector<std::size_t> hidden{64, 64};
  std::size_t steps = 4000;
  std::size_t batch = 32;
  double lr = 1e-2;
  // lr is multiplied by lr_decay after every decay_every steps.
  double lr_decay = 0.7;
  std::size_t decay_every = 1000;
  std::uint64_t seed = 0;
};

struct ModelSpec {
  enum class Type { Mixture, ScoreNet };
  Type type = Type::Mixture;
  GaussianMixture mixture;
  std::filesystem::path checkpoint;  // ScoreNet, resolved against the config file
  std::optional<TrainSpec> train;    // ScoreNet trained in process when no checkpoint is given
};

struct AttackSpec {
  AttackKind kind = AttackKind::Unrestricted;
  double epsilon = 0.16;
  // One campaign entry per lambda; a single 0 for kinds without a regularizer.
  std::vector<double> lambdas{0.0};
  double lr = 0.003;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> samples;
};

struct RegimeSpec {
  std::string name;
  SolverConfig solver;
};

struct BlackBoxSpec {
  std::size_t levels = 8;
  std::size_t kernel_size = 8;
  // Suites are regenerated at this shape for the complexity band columns.
  std::optional<ImageShape> reference_shape;
};

struct ExperimentConfig {
  int version = kSchemaVersion;
  ExperimentKind kind = ExperimentKind::Estimate;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::size_t workers = 1;

  ModelSpec model;
  SolverConfig fast = SolverConfig::fast();
  std::optional<SolverConfig> accurate;  // SolverConfig::accurate(dim) when unset
  DataSpec dataset;

  std::vector<AttackSpec> attacks;
  std::size_t samples_per_attack = 20;
  std::size_t steps = 500;
  std::size_t smoke_samples = 5;
  std::size_t smoke_steps = 100;

  std::vector<RegimeSpec> regimes;
  std::size_t compare_seeds = 5;

  std::optional<BlackBoxSpec> blackbox;  // also pooled into attack campaigns when set
  TrainSpec train;                       // Train experiments

  std::filesystem::path base_dir;  // directory of the config file
};

// Throws ConfigError. Syntax errors carry line and column; semantic errors
// name the offending field, e.g. "attacks[1].kind".
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& file);

}  // namespace pflow::harness
