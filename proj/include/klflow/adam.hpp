#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "klflow/tensor.hpp"

namespace klflow {

/// Moment estimates for Adam. Constants are the conventional defaults.
struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step_count = 0;
  double beta_m = 0.9;
  double beta_v = 0.999;
  double eps = 1e-8;

  /// Zero moments shaped like `params`.
  static AdamState for_parameters(std::span<Tensor* const> params);
};

/// One bias-corrected Adam update in place. A non-finite gradient aborts the
/// step (parameters and state untouched) with a DomainError.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               double lr);

/// Joint L2 norm over a list of gradient tensors.
double global_norm(std::span<const Tensor> grads);

}  // namespace klflow
