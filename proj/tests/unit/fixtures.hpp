#pragma once

#include "ferl/concepts.hpp"
#include "ferl/perception.hpp"

namespace fixtures {

/// Four concepts on a radius-2 circle, sensitive concept 0.
inline const ferl::ConceptDataset& toy_data() {
  static const ferl::ConceptDataset data = ferl::generate_mixture(4, 1000, 2, 2.0, 1);
  return data;
}

inline const ferl::PerceptionModels& toy_perception() {
  static const ferl::PerceptionModels models = ferl::train_perception(toy_data(), 0, {}, 1);
  return models;
}

inline ferl::RealArray at_mean(ferl::ConceptId k) { return toy_data().means[static_cast<std::size_t>(k)]; }

}  // namespace fixtures
