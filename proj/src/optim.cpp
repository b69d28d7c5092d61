#include "ferl/optim.hpp"

#include <cmath>
#include <string>

#include "ferl/errors.hpp"

namespace ferl {

OptimizerState OptimizerState::create(OptimizerKind kind, double learning_rate,
                                      std::span<Parameter* const> params) {
  if (!(learning_rate > 0.0)) throw ValidationError("optimizer: learning rate must be positive");
  OptimizerState s;
  s.kind = kind;
  s.learning_rate = learning_rate;
  for (const Parameter* p : params) {
    s.first_moment.emplace_back(p->value.shape());
    s.second_moment.emplace_back(p->value.shape());
  }
  return s;
}

void optimizer_step(OptimizerState& state, std::span<Parameter* const> params,
                    std::span<const RealArray> grads) {
  if (params.size() != grads.size()) {
    throw ValidationError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                          std::to_string(grads.size()) + " gradients");
  }
  const bool adam = state.kind == OptimizerKind::kAdam;
  if (adam && state.first_moment.size() != params.size()) {
    throw ValidationError("optimizer: moment accumulators do not match the parameter set");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k]->value.shape()) {
      throw ValidationError("optimizer: gradient for '" + params[k]->name + "' has shape " +
                            shape_string(grads[k].shape()) + ", parameter has " +
                            shape_string(params[k]->value.shape()));
    }
    if (!grads[k].all_finite()) {
      throw ValidationError("optimizer: non-finite gradient for parameter '" + params[k]->name + "'");
    }
    if (adam && state.first_moment[k].shape() != params[k]->value.shape()) {
      throw ValidationError("optimizer: moment shape mismatch for '" + params[k]->name + "'");
    }
  }

  ++state.step;
  const double lr = state.learning_rate;
  if (!adam) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k]->value.values();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * grads[k][i];
    }
    return;
  }
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->value.values();
    auto m = state.first_moment[k].values();
    auto v = state.second_moment[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[k][i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
  }
}

}  // namespace ferl
