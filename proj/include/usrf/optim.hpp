#pragma once

#include <cstdint>
#include <vector>

#include "usrf/tensor.hpp"

namespace usrf {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clipping; <= 0 disables it.
  double clip_norm = 0.0;
};

/// Moment accumulators, one pair per parameter in store order.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

AdamState make_adam_state(const std::vector<Parameter*>& params, const AdamConfig& config = {});

/// One bias-corrected Adam update from each Parameter::grad. Throws
/// NumericalError on a non-finite gradient before touching any value.
void adam_step(const std::vector<Parameter*>& params, AdamState& state);

double global_grad_norm(const std::vector<Parameter*>& params);

}  // namespace usrf
