#include "pflow/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace pflow {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamOptions& opts) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient size mismatch");
  if (state.step == 0 && state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam: state size mismatch");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * grads[i];
    state.v[i] = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= opts.lr * mhat / (std::sqrt(vhat) + opts.eps);
  }
}

}  // namespace pflow
