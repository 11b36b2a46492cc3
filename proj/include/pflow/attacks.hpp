#pragma once

// Gradient-based likelihood-maximization attacks against the probability-flow
// estimator, and the optimization-free black-box probe suites.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pflow/pf_ode.hpp"
#include "pflow/sample.hpp"
#include "pflow/score_models.hpp"

namespace pflow {

enum class AttackKind { Unrestricted, RandomRegion, NearSample, HighComplexity, PriorOnly, ReverseIntegration };

const char* to_string(AttackKind k);
std::optional<AttackKind> parse_attack_kind(std::string_view name);
// Kinds whose search space is an epsilon box around a center.
bool is_bounded(AttackKind k);
// NearSample, HighComplexity and ReverseIntegration start from a benign sample.
bool needs_benign(AttackKind k);

struct AttackConfig {
  AttackKind kind = AttackKind::Unrestricted;
  double epsilon = 0.16;
  // HighComplexity maximizes log p / D + lambda * hf_energy; the objective
  // trajectory reports it multiplied by D.
  double lambda = 0.0;
  double lr = 0.003;
  std::size_t max_steps = 500;
  std::uint64_t seed = 0;
  // Differentiable solver for the objective. Its seed is replaced by one
  // derived from `seed`, so each run draws its own fixed z.
  SolverConfig solver = SolverConfig::fast();
  // Scorer for the final sample; SolverConfig::accurate(dim) when unset.
  std::optional<SolverConfig> eval_solver;
  double center_std = 0.2;  // RandomRegion / PriorOnly centers
  std::size_t convergence_window = 50;
  double convergence_tol = 1e-4;  // nats per dimension

  // Defaults for `kind`, including its epsilon.
  static AttackConfig defaults(AttackKind kind, std::uint64_t seed = 0);
  // Throws std::invalid_argument on negative epsilon/lambda or a bad lr.
  void validate() const;
};

struct AttackStep {
  std::size_t step = 0;  // iterate index after the update, 1..max_steps
  double objective = 0.0;  // objective at the previous iterate
  std::span<const double> x;      // current iterate (latent for ReverseIntegration)
  std::span<const double> delta;  // x - center
};

struct AttackResult {
  AttackKind kind = AttackKind::Unrestricted;
  std::vector<double> x;       // final sample, decoded for ReverseIntegration
  std::vector<double> center;  // box center (latent for ReverseIntegration)
  std::vector<double> delta;   // final perturbation in the constrained space
  std::vector<double> latent;  // ReverseIntegration only: center + delta

  // Objective, integral term and prior term at iterates 0..steps.
  std::vector<double> objective;
  std::vector<double> integral_trace;
  std::vector<double> prior_trace;
  std::size_t steps = 0;

  LikelihoodEstimate fast;      // at the final iterate, with the run's z
  LikelihoodEstimate accurate;  // forward estimate of `x`
  std::optional<double> complexity;  // image models only
  std::optional<double> hf_energy;   // image models only
  bool converged = false;
  bool aborted = false;
  std::string abort_reason;
};

using AttackObserver = std::function<void(const AttackStep&)>;

// Dispatches on cfg.kind. `benign` is required by needs_benign() kinds and
// ignored otherwise. Throws std::invalid_argument on a bad config or shape.
// A non-finite objective or solver failure stops the run: the result keeps
// the partial trajectory, the last good iterate and aborted = true.
AttackResult run_attack(const ScoreModel& model, const AttackConfig& cfg,
                        std::span<const double> benign = {}, const AttackObserver& on_step = {});

AttackResult attack_unrestricted(const ScoreModel& model, const AttackConfig& cfg);
AttackResult attack_random_region(const ScoreModel& model, const AttackConfig& cfg);
AttackResult attack_near_sample(const ScoreModel& model, const AttackConfig& cfg,
                                std::span<const double> x_benign);
AttackResult attack_high_complexity(const ScoreModel& model, const AttackConfig& cfg,
                                    std::span<const double> x_benign);
AttackResult attack_prior_only(const ScoreModel& model, const AttackConfig& cfg);
AttackResult attack_reverse_integration(const ScoreModel& model, const AttackConfig& cfg,
                                        std::span<const double> x_benign);

// Box center drawn for RandomRegion / PriorOnly: N(0, center_std^2) per
// coordinate, clamped to [-1, 1].
std::vector<double> random_center(std::size_t dim, double center_std, std::uint64_t seed);

// --- black-box probes --------------------------------------------------------

enum class BlackBoxKind { Monochrome, FilteredNoise, UniformNoise };

const char* to_string(BlackBoxKind k);
std::optional<BlackBoxKind> parse_blackbox_kind(std::string_view name);

struct BlackBoxParams {
  ImageShape shape{1, 8, 8};
  std::size_t levels = 8;
  std::size_t kernel_size = 8;  // FilteredNoise smoothing
};

// Monochrome: constant images at `levels` values evenly spaced over [-1, 1].
// FilteredNoise: the all -1 image plus U(0, 2a) noise, a = k / levels for
// k = 1..levels, blurred and clamped to [-1, 1].
// UniformNoise: zero-centered uniform noise with standard deviation
// a / sqrt(3), a = k / levels, clamped; the last level spans [-1, 1].
// Both noise suites scale one noise pattern per seed, so levels differ only
// in magnitude. Samples are ordered by increasing level.
std::vector<Sample> blackbox_suite(BlackBoxKind kind, const BlackBoxParams& params, std::uint64_t seed);

}  // namespace pflow
