#pragma once

#include <cstdint>

#include "hstgcn/autograd.hpp"

namespace hstgcn {

/// Adam with a per-epoch exponential learning-rate decay.
struct AdamState {
  std::int64_t step_count = 0;
  NamedTensors first_moment;
  NamedTensors second_moment;
  double base_lr = 1e-3;
  double decay_rate = 0.98;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;

  double effective_lr(int epoch) const;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Throws std::runtime_error if any gradient value is non-finite; params are
/// left untouched in that case.
void adam_step(AdamState& state, ParameterStore& params, const NamedTensors& grads, int epoch);

}  // namespace hstgcn
