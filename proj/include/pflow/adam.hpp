#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pflow {

struct AdamOptions {
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates. A default-constructed state is sized on
// the first step.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

// One bias-corrected Adam descent step. Callers maximising an objective
// pass the negated gradient.
// Throws std::invalid_argument on size mismatch.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamOptions& opts = {});

}  // namespace pflow
