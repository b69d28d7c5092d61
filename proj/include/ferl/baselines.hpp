#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ferl/concepts.hpp"
#include "ferl/flow.hpp"

namespace ferl {

struct EsdConfig {
  double eta = 1.0;
  std::size_t steps = 1000;
  std::size_t batch = 64;
  double learning_rate = 1e-3;
};

/// Negatively guided target v*(x,null,t) - eta (v*(x,c,t) - v*(x,null,t)).
RealArray esd_target(const VelocityField& frozen, const RealArray& x_t, ConceptId c, double t, double eta);

/// ||v(x_t, c, t) - esd_target||^2 for one sample.
double esd_loss(const VelocityField& field, const VelocityField& frozen, const RealArray& x_t, ConceptId c,
                double t, double eta);

/// Batch-mean ESD loss appended to `g`.
NodeId esd_loss_node(Graph& g, VelocityField& field, const VelocityField& frozen, const RealArray& x_t,
                     std::span<const ConceptId> concepts, std::span<const double> times, double eta);

/// Fine-tunes `field` on the erase set. States x_t come from ODE rollouts
/// of the current model at a random grid time. Returns the loss curve.
std::vector<double> train_esd(VelocityField& field, const VelocityField& frozen, const ConceptSet& erase_set,
                              const EsdConfig& cfg, const SamplerConfig& sampler, std::uint64_t seed);

struct DveConfig {
  ConceptSet erase_set;
  ConceptId anchor = kNullConcept;
  double gamma = 2.0;
  double tau = -0.1;
  double t_early = 0.5;
};

void validate(const DveConfig& cfg);

inline constexpr double kDveMinNorm = 1e-12;

/// v(x, t, anchor) - v(x, t, erase) for a [rows, D] batch.
RealArray dve_delta_v(const VelocityField& field, const RealArray& x_t, double t, ConceptId erase,
                      ConceptId anchor);

/// s = <v, u>, u = dv / |dv|; if s < tau returns v + gamma (tau - s) u,
/// otherwise v unchanged. |dv| <= 1e-12 passes v through with a warning.
RealArray dve_correct(const RealArray& v_user, const RealArray& delta_v, double gamma, double tau);

/// Correction hook for sample_ode_batch: active for t < t_early, one
/// correction per erased concept in ascending id order.
VelocityHook dve_hook(const VelocityField& field, const DveConfig& cfg);

Trajectory dve_sample(const VelocityField& field, ConceptPrompt prompt, const DveConfig& cfg,
                      const SamplerConfig& sampler, std::uint64_t seed);

}  // namespace ferl
