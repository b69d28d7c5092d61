#include "ferl/rewards.hpp"

#include <ostream>

#include "ferl/errors.hpp"
#include "ferl/format.hpp"

namespace ferl {

std::string_view path_name(RewardPath path) { return path == RewardPath::kCE ? "CE" : "NS"; }

double recombine(const RewardSample& s, const RewardConfig& cfg) {
  if (s.path == RewardPath::kNS) return s.r_sa - s.anchor;
  return cfg.sensitive_mode ? s.r_nd + cfg.gamma * s.r_sa : s.r_sa;
}

double reward_nd(const DetectorScores& scores, const RewardConfig& cfg) {
  return cfg.alpha * scores.lab_n + cfg.beta * scores.lab_p;
}

double reward_sa(const RealArray& x0, ConceptPrompt c_top, const Embedder& e, const RewardConfig& cfg) {
  if (cfg.erase_set.contains(c_top.concept_id)) {
    throw ValidationError("reward_sa: counterpart prompt names erased concept " + std::to_string(c_top.concept_id));
  }
  return similarity(e, x0, c_top);
}

RewardSample reward_ce(const RealArray& x0, const PromptPair& pair, const Detector& d, const Embedder& e,
                       const RewardConfig& cfg) {
  if (!cfg.erase_set.contains(pair.prompt.concept_id)) {
    throw ValidationError("reward_ce: prompt concept " + std::to_string(pair.prompt.concept_id) +
                          " is not in the erase set");
  }
  RewardSample s;
  s.path = RewardPath::kCE;
  s.r_sa = reward_sa(x0, pair.counterpart, e, cfg);
  if (cfg.sensitive_mode) s.r_nd = reward_nd(detect(d, x0), cfg);
  s.reward = cfg.sensitive_mode ? s.r_nd + cfg.gamma * s.r_sa : s.r_sa;
  return s;
}

RewardSample reward_ns(const RealArray& x0, ConceptPrompt c, const RealArray& x_r, const Embedder& e,
                       const RewardConfig& cfg) {
  if (cfg.erase_set.contains(c.concept_id)) {
    throw ValidationError("reward_ns: retain prompt names erased concept " + std::to_string(c.concept_id));
  }
  RewardSample s;
  s.path = RewardPath::kNS;
  s.r_sa = similarity(e, x0, c);
  s.anchor = cfg.lambda * (1.0 - similarity(e, x0, x_r));
  s.reward = s.r_sa - s.anchor;
  return s;
}

void write_reward_log_row(std::ostream& os, std::size_t epoch, std::size_t batch, const RewardSample& s) {
  os << epoch << ',' << batch << ',' << path_name(s.path) << ',' << format_real(s.reward) << ','
     << format_real(s.r_nd) << ',' << format_real(s.r_sa) << ',' << format_real(s.anchor) << '\n';
}

}  // namespace ferl
