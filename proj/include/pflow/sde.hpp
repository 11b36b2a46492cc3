#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pflow {

// Start of the integration interval. Densities reported "at t = 0" are
// evaluated here.
inline constexpr double kDefaultT0 = 1e-5;

// Affine noise rate beta(t) = (1 - t) beta0 + t beta1 on [0, 1].
class NoiseSchedule {
 public:
  // Throws std::invalid_argument unless 0 < beta0 < beta1.
  NoiseSchedule(double beta0 = 0.1, double beta1 = 20.0);

  // beta == 0 everywhere. Only useful for exercising degenerate flows.
  static NoiseSchedule zero();

  double beta0() const { return beta0_; }
  double beta1() const { return beta1_; }

 private:
  struct Unchecked {};
  NoiseSchedule(Unchecked, double beta0, double beta1) : beta0_(beta0), beta1_(beta1) {}

  double beta0_;
  double beta1_;
};

struct KernelMoments {
  double mean_scale;  // m(t)
  double std;         // sigma(t)
};

// Sub-variance-preserving SDE
//   dx = -1/2 beta(t) x dt + sqrt(beta(t) (1 - exp(-2 B(t)))) dw,
// with B(t) the integral of beta over [0, t]. Every time argument must lie
// in [0, 1]; anything else throws std::domain_error.
class SubVpSde {
 public:
  explicit SubVpSde(NoiseSchedule schedule = {}) : schedule_(schedule) {}

  const NoiseSchedule& schedule() const { return schedule_; }

  double beta(double t) const;
  // Closed form B(t) = beta0 t + (beta1 - beta0) t^2 / 2.
  double beta_integral(double t) const;
  // g(t)^2.
  double diffusion_g2(double t) const;
  KernelMoments kernel_moments(double t) const;
  std::vector<double> drift(std::span<const double> x, double t) const;

 private:
  NoiseSchedule schedule_;
};

// log N(x1; 0, I).
double prior_logp(std::span<const double> x1);

}  // namespace pflow
