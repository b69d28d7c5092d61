#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ferl/tensor.hpp"

namespace ferl {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<RealArray> first_moment;
  std::vector<RealArray> second_moment;
  std::uint64_t step = 0;

  /// Fresh state with zeroed moments shaped like `params`.
  static OptimizerState create(OptimizerKind kind, double learning_rate,
                               std::span<Parameter* const> params);
};

/// One descent step. Throws ValidationError naming the parameter when a
/// gradient is non-finite or shapes disagree; parameters are left untouched
/// in that case.
void optimizer_step(OptimizerState& state, std::span<Parameter* const> params,
                    std::span<const RealArray> grads);

}  // namespace ferl
