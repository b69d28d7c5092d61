#include "ferl/grpo.hpp"

#include <cmath>

#include "ferl/errors.hpp"

namespace ferl {

void validate(const UpdateConfig& cfg) {
  if (cfg.group_size < 2) throw ValidationError("grpo: group size must be >= 2");
  if (!(cfg.clip_epsilon > 0.0 && cfg.clip_epsilon < 1.0)) throw ValidationError("grpo: clip epsilon must lie in (0,1)");
  if (!(cfg.kappa >= 0.0)) throw ValidationError("grpo: kappa must be >= 0");
  if (cfg.epochs_per_rollout == 0) throw ValidationError("grpo: epochs per rollout must be >= 1");
  if (!(cfg.sigma > 0.0)) throw ValidationError("grpo: sigma must be > 0");
}

GroupBatch sample_group(const VelocityField& field, ConceptPrompt prompt, std::size_t group_size,
                        const SamplerConfig& sampler, std::uint64_t seed) {
  if (group_size < 2) throw ValidationError("sample_group: G must be >= 2 (got " + std::to_string(group_size) + ")");
  std::vector<ConceptPrompt> prompts(group_size, prompt);
  std::vector<std::uint64_t> seeds(group_size);
  for (std::size_t i = 0; i < group_size; ++i) seeds[i] = seed + i;
  GroupBatch batch;
  batch.prompt = prompt;
  batch.trajectories = sample_sde_batch(field, prompts, sampler, seeds);
  return batch;
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ValidationError("compute_advantages: need at least 2 rewards");
  double mean = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (!std::isfinite(rewards[i])) {
      throw ValidationError("compute_advantages: reward " + std::to_string(i) + " is not finite");
    }
    mean += rewards[i];
  }
  const double n = static_cast<double>(rewards.size());
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + kAdvantageEpsilon;
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

void set_rewards(GroupBatch& batch, std::vector<RewardSample> samples) {
  if (samples.size() != batch.size()) throw ValidationError("set_rewards: one reward per trajectory required");
  batch.rewards.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].trajectory = i;
    batch.rewards[i] = samples[i].reward;
  }
  batch.samples = std::move(samples);
  batch.advantages = compute_advantages(batch.rewards);
}

NodeId clipped_objective(Graph& g, NodeId ratio, const RealArray& advantages, double clip_epsilon) {
  const NodeId adv = g.constant(advantages);
  const NodeId hi = g.constant(RealArray::scalar(1.0 + clip_epsilon));
  const NodeId lo = g.constant(RealArray::scalar(1.0 - clip_epsilon));
  const NodeId unclipped = g.mul(ratio, adv);
  // clip(r) = r - relu(r - hi) + relu(lo - r)
  const NodeId clip = g.add(g.sub(ratio, g.relu(g.sub(ratio, hi))), g.relu(g.sub(lo, ratio)));
  const NodeId clipped = g.mul(clip, adv);
  // min(a, b) = a - relu(a - b)
  return g.sub(unclipped, g.relu(g.sub(unclipped, clipped)));
}

namespace {

struct StepRows {
  RealArray x, x_next, dt;
  std::vector<ConceptId> concepts;
  std::vector<double> times;
  RealArray log_norm, half_inv_var, old_logp, advantage, weight, kl_scale, kl_weight;
  std::size_t batches = 0;
};

StepRows gather_rows(std::span<const GroupBatch> batches, std::size_t dim, const UpdateConfig& cfg,
                     bool need_advantages) {
  std::size_t rows = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const GroupBatch& batch = batches[b];
    if (batch.size() < 2) throw ValidationError("grpo: batch " + std::to_string(b) + " has fewer than 2 trajectories");
    if (need_advantages && batch.advantages.size() != batch.size()) {
      throw ValidationError("grpo: batch " + std::to_string(b) + " has no advantages");
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Trajectory& t = batch.trajectories[i];
      if (t.step_log_densities.empty() || t.step_log_densities.size() + 1 != t.states.size()) {
        throw ValidationError("grpo: trajectory " + std::to_string(i) + " of batch " + std::to_string(b) +
                              " is missing its old log-densities");
      }
      if (t.sigma != cfg.sigma) {
        throw ValidationError("grpo: trajectory sigma " + std::to_string(t.sigma) +
                              " does not match the policy sigma " + std::to_string(cfg.sigma));
      }
      rows += t.step_log_densities.size();
    }
  }
  StepRows s;
  s.batches = batches.size();
  s.x = RealArray({rows, dim});
  s.x_next = RealArray({rows, dim});
  s.dt = RealArray({rows, dim});
  for (RealArray* a : {&s.log_norm, &s.half_inv_var, &s.old_logp, &s.advantage, &s.weight, &s.kl_scale, &s.kl_weight}) {
    *a = RealArray({rows, 1});
  }
  s.concepts.reserve(rows);
  s.times.reserve(rows);
  std::size_t r = 0;
  for (const GroupBatch& batch : batches) {
    std::size_t batch_rows = 0;
    for (const auto& t : batch.trajectories) batch_rows += t.step_log_densities.size();
    const double g = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Trajectory& t = batch.trajectories[i];
      const std::size_t steps = t.step_log_densities.size();
      for (std::size_t k = 0; k < steps; ++k, ++r) {
        const double dt = t.grid[k + 1] - t.grid[k];
        const double var = t.sigma * t.sigma * dt;
        for (std::size_t d = 0; d < dim; ++d) {
          s.x.at(r, d) = t.states[k][d];
          s.x_next.at(r, d) = t.states[k + 1][d];
          s.dt.at(r, d) = dt;
        }
        s.concepts.push_back(t.condition.concept_id);
        s.times.push_back(t.grid[k]);
        s.log_norm[r] = gaussian_log_normaliser(dim, var);
        s.half_inv_var[r] = 0.5 / var;
        s.old_logp[r] = t.step_log_densities[k];
        s.advantage[r] = need_advantages ? batch.advantages[i] : 0.0;
        s.weight[r] = 1.0 / (g * static_cast<double>(steps));
        s.kl_scale[r] = dt / (2.0 * t.sigma * t.sigma);
        s.kl_weight[r] = 1.0 / static_cast<double>(batch_rows);
      }
    }
  }
  return s;
}

NodeId row_sums(Graph& g, NodeId x, std::size_t dim) {
  return g.affine(x, g.constant(RealArray::filled({1, dim}, 1.0)));
}

NodeId build_kl(Graph& g, NodeId v, const VelocityField& ref, const StepRows& s, std::size_t dim) {
  const RealArray v_ref = ref.predict(s.x, s.concepts, s.times);
  const NodeId sq = row_sums(g, g.square(g.sub(v, g.constant(v_ref))), dim);
  return g.sum(g.mul(g.mul(sq, g.constant(s.kl_scale)), g.constant(s.kl_weight)));
}

}  // namespace

SurrogateNodes build_surrogate(Graph& g, VelocityField& field, const VelocityField& ref,
                               std::span<const GroupBatch> batches, const UpdateConfig& cfg) {
  validate(cfg);
  const std::size_t dim = field.shape().data_dim;
  const StepRows s = gather_rows(batches, dim, cfg, true);
  const NodeId x = g.constant(s.x);
  const NodeId v = field.build(g, x, s.concepts, s.times);
  // Same arithmetic as the sampler, so an unchanged policy gives ratios of exactly 1.
  const NodeId mean = g.add(x, g.mul(v, g.constant(s.dt)));
  const NodeId sq = row_sums(g, g.square(g.sub(g.constant(s.x_next), mean)), dim);
  const NodeId logp = g.sub(g.constant(s.log_norm), g.mul(sq, g.constant(s.half_inv_var)));
  const NodeId ratio = g.exp(g.sub(logp, g.constant(s.old_logp)));
  const NodeId objective = clipped_objective(g, ratio, s.advantage, cfg.clip_epsilon);

  SurrogateNodes out;
  out.surrogate = g.scale(g.sum(g.mul(objective, g.constant(s.weight))), -1.0);
  out.kl = build_kl(g, v, ref, s, dim);
  out.loss = g.add(out.surrogate, g.scale(out.kl, cfg.kappa));
  const RealArray& rv = g.value(ratio);
  out.terms = rv.size();
  for (double r : rv.values()) {
    out.clipped += r < 1.0 - cfg.clip_epsilon || r > 1.0 + cfg.clip_epsilon;
  }
  return out;
}

double surrogate_loss(const VelocityField& field, const VelocityField& ref, const GroupBatch& batch,
                      const UpdateConfig& cfg) {
  Graph g;
  const auto nodes = build_surrogate(g, const_cast<VelocityField&>(field), ref, std::span(&batch, 1), cfg);
  return g.value(nodes.loss).item();
}

double kl_estimate(const VelocityField& field, const VelocityField& ref, std::span<const GroupBatch> batches,
                   const UpdateConfig& cfg) {
  validate(cfg);
  if (batches.empty()) return 0.0;
  const std::size_t dim = field.shape().data_dim;
  const StepRows s = gather_rows(batches, dim, cfg, false);
  Graph g;
  const NodeId v = g.constant(field.predict(s.x, s.concepts, s.times));
  return g.value(build_kl(g, v, ref, s, dim)).item() / static_cast<double>(batches.size());
}

std::vector<double> step_ratios(const VelocityField& field, const Trajectory& traj) {
  const auto fresh = recompute_logprob(field, traj);
  std::vector<double> out(fresh.size());
  for (std::size_t k = 0; k < fresh.size(); ++k) out[k] = std::exp(fresh[k] - traj.step_log_densities[k]);
  return out;
}

StepMetrics policy_step(VelocityField& field, const VelocityField& ref, std::span<const GroupBatch> batches,
                        const UpdateConfig& cfg, OptimizerState& opt) {
  if (batches.empty()) throw ValidationError("policy_step: no batches");
  auto params = field.parameters();
  StepMetrics metrics;
  std::size_t n = 0;
  for (const auto& b : batches) {
    for (double r : b.rewards) metrics.mean_reward += r;
    n += b.rewards.size();
  }
  if (n) metrics.mean_reward /= static_cast<double>(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_rollout; ++epoch) {
    Graph g;
    const SurrogateNodes nodes = build_surrogate(g, field, ref, batches, cfg);
    const double loss = g.value(nodes.loss).item();
    if (!std::isfinite(loss)) throw DivergenceError("policy_step: non-finite loss");
    if (epoch == 0) {
      metrics.loss = loss;
      metrics.kl = g.value(nodes.kl).item() / static_cast<double>(batches.size());
      metrics.clip_fraction = static_cast<double>(nodes.clipped) / static_cast<double>(nodes.terms);
    }
    optimizer_step(opt, params, g.parameter_gradients(g.backward(nodes.loss), params));
  }
  return metrics;
}

}  // namespace ferl
