#include "ferl/random.hpp"

#include <array>
#include <vector>

namespace ferl {

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * path.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xFFFFFFFFu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(base);
  for (std::uint64_t p : path) push(p);
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

double uniform_draw(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  Rng rng(derive_seed(base, path));
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace ferl
