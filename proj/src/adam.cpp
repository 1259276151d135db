#include "klflow/adam.hpp"

#include <cmath>
#include <string>

#include "klflow/error.hpp"

namespace klflow {

AdamState AdamState::for_parameters(std::span<Tensor* const> params) {
  AdamState s;
  s.first_moment.reserve(params.size());
  s.second_moment.reserve(params.size());
  for (const Tensor* p : params) {
    s.first_moment.emplace_back(p->rows(), p->cols(), 0.0);
    s.second_moment.emplace_back(p->rows(), p->cols(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               double lr) {
  KLFLOW_REQUIRE(lr > 0.0, "adam_step: learning rate must be positive");
  KLFLOW_REQUIRE(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  KLFLOW_REQUIRE(state.first_moment.size() == params.size(),
                 "adam_step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    KLFLOW_REQUIRE(params[i]->shape() == grads[i].shape() &&
                       state.first_moment[i].shape() == grads[i].shape(),
                   "adam_step: shape mismatch for parameter " + std::to_string(i));
    const std::size_t bad = grads[i].first_non_finite();
    if (bad != grads[i].size()) {
      throw DomainError("adam_step: non-finite gradient in parameter " + std::to_string(i) +
                        " at flat index " + std::to_string(bad) + "; step aborted");
    }
  }

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bias_m = 1.0 - std::pow(state.beta_m, t);
  const double bias_v = 1.0 - std::pow(state.beta_v, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = state.first_moment[i].matrix().array();
    auto v = state.second_moment[i].matrix().array();
    auto g = grads[i].matrix().array();
    m = state.beta_m * m + (1.0 - state.beta_m) * g;
    v = state.beta_v * v + (1.0 - state.beta_v) * g.square();
    params[i]->matrix().array() -= lr * (m / bias_m) / ((v / bias_v).sqrt() + state.eps);
  }
}

double global_norm(std::span<const Tensor> grads) {
  double s = 0.0;
  for (const Tensor& g : grads) s += g.matrix().squaredNorm();
  return std::sqrt(s);
}

}  // namespace klflow
