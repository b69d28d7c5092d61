#pragma once

#include <cstddef>
#include <iosfwd>
#include <string_view>

#include "ferl/concepts.hpp"
#include "ferl/perception.hpp"
#include "ferl/tensor.hpp"

namespace ferl {

enum class RewardPath { kCE, kNS };

std::string_view path_name(RewardPath path);

struct RewardConfig {
  double alpha = 1.0;
  double beta = -2.0;
  double gamma = 1.0;
  double lambda = 0.5;
  ConceptSet erase_set;
  /// On: detector term plus alignment. Off (objects, styles): alignment only.
  bool sensitive_mode = false;
};

struct RewardSample {
  std::size_t trajectory = 0;
  RewardPath path = RewardPath::kCE;
  double reward = 0.0;
  double r_nd = 0.0;
  double r_sa = 0.0;    // CE: CLIP(x0, c-top); NS: CLIP(x0, c)
  double anchor = 0.0;  // NS: lambda * (1 - cos(x0, x_r))
};

/// The scalar implied by a sample's components under `cfg`.
double recombine(const RewardSample& s, const RewardConfig& cfg);

double reward_nd(const DetectorScores& scores, const RewardConfig& cfg);
double reward_sa(const RealArray& x0, ConceptPrompt c_top, const Embedder& e, const RewardConfig& cfg);
RewardSample reward_ce(const RealArray& x0, const PromptPair& pair, const Detector& d, const Embedder& e,
                       const RewardConfig& cfg);
RewardSample reward_ns(const RealArray& x0, ConceptPrompt c, const RealArray& x_r, const Embedder& e,
                       const RewardConfig& cfg);

inline constexpr std::string_view kRewardLogHeader = "epoch,batch,path,reward,r_nd,r_sa,anchor";
void write_reward_log_row(std::ostream& os, std::size_t epoch, std::size_t batch, const RewardSample& s);

}  // namespace ferl
