#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ferl/autodiff.hpp"
#include "ferl/concepts.hpp"
#include "ferl/flow.hpp"
#include "ferl/optim.hpp"
#include "ferl/rewards.hpp"

namespace ferl {

/// G trajectories for one prompt. For CE groups `pair` holds (c, c-top);
/// for NS groups `retain` holds the retain-set record.
struct GroupBatch {
  RewardPath path = RewardPath::kCE;
  ConceptPrompt prompt;
  PromptPair pair;
  RetainRecord retain;
  std::vector<Trajectory> trajectories;
  std::vector<RewardSample> samples;
  std::vector<double> rewards;
  std::vector<double> advantages;

  std::size_t size() const { return trajectories.size(); }
};

struct UpdateConfig {
  std::size_t group_size = 8;
  double clip_epsilon = 0.2;
  /// KL coefficient.
  double kappa = 0.01;
  std::size_t epochs_per_rollout = 1;
  /// Noise level every trajectory must have been sampled with.
  double sigma = 0.3;
};

void validate(const UpdateConfig& cfg);

/// Seeds seed+0 .. seed+G-1.
GroupBatch sample_group(const VelocityField& field, ConceptPrompt prompt, std::size_t group_size,
                        const SamplerConfig& sampler, std::uint64_t seed);

inline constexpr double kAdvantageEpsilon = 1e-8;

/// (r - mean) / (population std + 1e-8).
std::vector<double> compute_advantages(std::span<const double> rewards);

/// Fills rewards from samples and recomputes the advantages.
void set_rewards(GroupBatch& batch, std::vector<RewardSample> samples);

/// Per-row min(rho A, clip(rho, 1-eps, 1+eps) A) built from relu only, so
/// the gradient through rho vanishes wherever the clipped branch wins.
/// `ratio` and `advantages` are [rows, 1].
NodeId clipped_objective(Graph& g, NodeId ratio, const RealArray& advantages, double clip_epsilon);

struct SurrogateNodes {
  NodeId loss = 0;       // surrogate + kappa * KL
  NodeId surrogate = 0;
  NodeId kl = 0;
  std::size_t terms = 0;
  std::size_t clipped = 0;  // terms with rho outside [1-eps, 1+eps]
};

/// Appends the summed loss of every batch to `g`. The old log-densities are
/// the ones stored in each trajectory at rollout time.
SurrogateNodes build_surrogate(Graph& g, VelocityField& field, const VelocityField& ref,
                               std::span<const GroupBatch> batches, const UpdateConfig& cfg);

double surrogate_loss(const VelocityField& field, const VelocityField& ref, const GroupBatch& batch,
                      const UpdateConfig& cfg);

/// Mean over recorded steps of ||v - v_ref||^2 dt / (2 sigma^2).
double kl_estimate(const VelocityField& field, const VelocityField& ref, std::span<const GroupBatch> batches,
                   const UpdateConfig& cfg);

/// Per-step ratios exp(new - old) for one trajectory.
std::vector<double> step_ratios(const VelocityField& field, const Trajectory& traj);

struct StepMetrics {
  double mean_reward = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double loss = 0.0;
};

/// cfg.epochs_per_rollout optimizer steps on the summed loss. Metrics
/// describe the first step. Throws DivergenceError on a non-finite loss.
StepMetrics policy_step(VelocityField& field, const VelocityField& ref, std::span<const GroupBatch> batches,
                        const UpdateConfig& cfg, OptimizerState& opt);

}  // namespace ferl
