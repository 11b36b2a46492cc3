#include "pflow/sde.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace pflow {

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error("time " + std::to_string(t) + " outside [0, 1]");
  }
}

}  // namespace

NoiseSchedule::NoiseSchedule(double beta0, double beta1) : beta0_(beta0), beta1_(beta1) {
  if (!(beta0 > 0.0) || !(beta1 > beta0)) {
    throw std::invalid_argument("noise schedule requires 0 < beta0 < beta1");
  }
}

NoiseSchedule NoiseSchedule::zero() { return NoiseSchedule(Unchecked{}, 0.0, 0.0); }

double SubVpSde::beta(double t) const {
  check_time(t);
  return (1.0 - t) * schedule_.beta0() + t * schedule_.beta1();
}

double SubVpSde::beta_integral(double t) const {
  check_time(t);
  return schedule_.beta0() * t + 0.5 * (schedule_.beta1() - schedule_.beta0()) * t * t;
}

double SubVpSde::diffusion_g2(double t) const {
  // -expm1 keeps g2 accurate near t = 0 where B(t) is tiny.
  return beta(t) * -std::expm1(-2.0 * beta_integral(t));
}

KernelMoments SubVpSde::kernel_moments(double t) const {
  const double b = beta_integral(t);
  return {std::exp(-0.5 * b), -std::expm1(-b)};
}

std::vector<double> SubVpSde::drift(std::span<const double> x, double t) const {
  const double c = -0.5 * beta(t);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
  return out;
}

double prior_logp(std::span<const double> x1) {
  double sq = 0.0;
  for (double v : x1) sq += v * v;
  const double d = static_cast<double>(x1.size());
  return -0.5 * sq - 0.5 * d * std::log(2.0 * std::numbers::pi);
}

}  // namespace pflow
