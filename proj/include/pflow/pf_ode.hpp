#pragma once

// Probability-flow ODE  dx/dt = f(x, t) - 1/2 g(t)^2 s(x, t)  and the
// log-likelihood estimators built on it. The state is augmented with the
// running integral of the divergence of the vector field.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pflow/autodiff.hpp"
#include "pflow/score_models.hpp"

namespace pflow {

enum class SolverMethod { RK4, Euler };
enum class DivergenceMode { Exact, Hutchinson };
// FixedSingle reuses one Rademacher vector everywhere; FreshPerStep draws a
// new one per grid step, shared by that step's RK4 stages.
enum class ZPolicy { FixedSingle, FreshPerStep };
enum class Direction { Forward, Reverse };

const char* to_string(SolverMethod m);
const char* to_string(Direction d);

struct SolverConfig {
  SolverMethod method = SolverMethod::RK4;
  double step_size = 0.05;
  double t0 = kDefaultT0;
  DivergenceMode divergence = DivergenceMode::Hutchinson;
  ZPolicy z_policy = ZPolicy::FixedSingle;
  std::uint64_t seed = 0;
  Direction direction = Direction::Forward;
  std::size_t exact_max_dim = 64;

  // 21-point RK4 grid with one fixed z.
  static SolverConfig fast(std::uint64_t seed = 0);
  // 1001-point RK4 grid; exact divergence when dim <= exact_max_dim,
  // otherwise a fresh z per step.
  static SolverConfig accurate(std::size_t dim, std::uint64_t seed = 0);

  // Number of grid intervals on [t0, 1]. Throws std::invalid_argument when
  // (1 - t0) / step_size is not (within 2% of a step) an integer.
  std::size_t intervals() const;
  // Function evaluations per solve.
  std::size_t evaluations() const;
  void validate(std::size_t dim) const;
};

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Rademacher vector keyed by (seed, key); identical inputs give identical
// vectors.
std::vector<double> rademacher(std::uint64_t seed, std::uint64_t key, std::size_t dim);

// f~(x, t), recorded on x's tape.
ad::Var drift_tilde(const ad::Var& x, double t, ScoreBinding& score, const SubVpSde& sde);
std::vector<double> drift_tilde(std::span<const double> x, double t, const ScoreModel& model);

// div f~ at (x, t): D reverse sweeps against basis covectors. Throws
// std::invalid_argument when the dimension exceeds `max_dim`.
double divergence_exact(std::span<const double> x, double t, const ScoreModel& model,
                        std::size_t max_dim = 64);
// z^T (d f~ / dx) z from one reverse sweep. z entries must be +-1.
double divergence_hutchinson(std::span<const double> x, double t, const ScoreModel& model,
                             std::span<const double> z);

// Both divergences on the tape, differentiable with respect to x.
ad::Var divergence_exact(const ad::Var& x, const ad::Var& drift);
ad::Var divergence_hutchinson(const ad::Var& x, const ad::Var& drift, std::span<const double> z);

// dy/dt = rhs(t, y), written into dy.
using OdeRhs = std::function<void(double t, std::span<const double> y, std::span<double> dy)>;

// One classical four-stage RK4 (or forward Euler) step from t to t + dt, in
// place. The numeric solver is built on this kernel.
void ode_step(SolverMethod method, const OdeRhs& rhs, double t, double dt, std::span<double> y);

struct AugmentedState {
  std::vector<double> x;
  double logdet = 0.0;  // Signed integral of div f~ along the direction of travel.
};

struct TapedState {
  ad::Var x;
  ad::Var logdet;
};

// Integrates from t0 to 1 (Forward) or 1 to t0 (Reverse).
AugmentedState solve(std::span<const double> x_init, const SolverConfig& cfg, const ScoreModel& model);
// Same, with the whole trajectory recorded on x_init's tape.
TapedState solve(const ad::Var& x_init, const SolverConfig& cfg, const ScoreModel& model);

struct LikelihoodEstimate {
  double integral = 0.0;  // I
  double prior = 0.0;     // P
  double total = 0.0;     // I + P
  double per_dim = 0.0;
  Direction direction = Direction::Forward;
};

struct TapedEstimate {
  ad::Var integral;
  ad::Var prior;
  ad::Var total;
  ad::Var endpoint;  // x1 (forward) or decoded x0 (reverse).
};

ad::Var prior_logp(const ad::Var& x1);

LikelihoodEstimate log_likelihood_forward(std::span<const double> x0, const SolverConfig& cfg,
                                          const ScoreModel& model);
TapedEstimate log_likelihood_forward(const ad::Var& x0, const SolverConfig& cfg,
                                     const ScoreModel& model);

struct ReverseEstimate {
  LikelihoodEstimate estimate;
  std::vector<double> decoded;  // x0
};

ReverseEstimate log_likelihood_reverse(std::span<const double> x1, const SolverConfig& cfg,
                                       const ScoreModel& model);
TapedEstimate log_likelihood_reverse(const ad::Var& x1, const SolverConfig& cfg,
                                     const ScoreModel& model);

}  // namespace pflow
