#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ferl {

using Rng = std::mt19937_64;

/// Deterministically mixes a base seed with a path of integers (epoch,
/// batch, purpose tag, ...). Every random stream in a run is derived this
/// way, so no generator state has to survive a checkpoint.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

/// Uniform draw in [0, 1) that depends only on its arguments.
double uniform_draw(std::uint64_t base, std::initializer_list<std::uint64_t> path);

// Purpose tags for derive_seed paths.
enum SeedTag : std::uint64_t {
  kTagRoute = 1,
  kTagPrompt = 2,
  kTagGroup = 3,
  kTagRetain = 4,
  kTagInit = 5,
  kTagTrain = 6,
  kTagEval = 7,
  kTagData = 8,
  kTagEsd = 9,
};

}  // namespace ferl
