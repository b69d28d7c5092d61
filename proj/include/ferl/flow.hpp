#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ferl/autodiff.hpp"
#include "ferl/checkpoint.hpp"
#include "ferl/concepts.hpp"
#include "ferl/random.hpp"
#include "ferl/tensor.hpp"

namespace ferl {

enum class Activation { kTanh, kRelu };

/// Time features: t, sin(pi t), cos(pi t).
inline constexpr std::size_t kTimeFeatures = 3;

struct FieldShape {
  std::size_t data_dim = 2;
  std::size_t num_concepts = 4;
  std::size_t cond_dim = 8;
  std::size_t hidden = 64;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::kTanh;

  friend bool operator==(const FieldShape&, const FieldShape&) = default;
};

void time_features(double t, std::span<double> out);

/// Conditional MLP velocity v(x_t, c, t).
///
/// The first layer acts on concat(x_t, e_c, time features); it is stored as
/// three weight blocks so the concatenation never has to be materialised.
/// The condition embedding e_c is a learned table with one row per concept
/// plus a trailing null-concept row.
class VelocityField {
 public:
  VelocityField() = default;
  VelocityField(FieldShape shape, std::uint64_t seed);

  const FieldShape& shape() const { return shape_; }
  std::size_t input_dim() const { return shape_.data_dim + shape_.cond_dim + kTimeFeatures; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& parameter(const std::string& name);

  /// Table row for a concept; the null concept maps to the last row.
  std::size_t condition_row(ConceptId concept_id) const;

  /// Appends the velocity for a batch to `g`. `x` must be [rows, data_dim];
  /// `concepts` and `times` hold one entry per row.
  NodeId build(Graph& g, NodeId x, std::span<const ConceptId> concepts,
               std::span<const double> times);

  /// Gradient-free evaluation for a [rows, data_dim] batch.
  RealArray predict(const RealArray& x, std::span<const ConceptId> concepts,
                    std::span<const double> times) const;

  /// Single-point convenience.
  RealArray velocity(const RealArray& x, ConceptId concept_id, double t) const;

  TensorList to_tensors(const std::string& prefix = "flow.") const;
  static VelocityField from_tensors(const TensorList& tensors, const std::string& prefix = "flow.");

 private:
  void add_param(std::string name, Shape shape, double scale, Rng* rng);

  FieldShape shape_;
  std::vector<Parameter> params_;
};

/// (1 - t) x0 + t x1.
RealArray interpolate(const RealArray& x0, const RealArray& x1, double t);

/// ||v(x_t, c, t) - (x1 - x0)||^2 for one triple. Without a condition the
/// null-concept row is used.
double cfm_loss(const VelocityField& field, const RealArray& x0, const RealArray& x1, double t,
                std::optional<ConceptPrompt> c = std::nullopt);

/// Batch-mean conditional flow-matching loss appended to `g`. Rows of
/// `x0` and `x1` are paired; `concepts` may contain kNullConcept.
NodeId cfm_loss_node(Graph& g, VelocityField& field, const RealArray& x0, const RealArray& x1,
                     std::span<const double> times, std::span<const ConceptId> concepts);

struct SamplerConfig {
  std::size_t steps = 12;
  double sigma = 0.3;
};

/// One generation path. `step_log_densities` is empty for ODE trajectories.
struct Trajectory {
  ConceptPrompt condition;
  std::uint64_t seed = 0;
  double sigma = 0.0;
  std::vector<RealArray> states;
  std::vector<double> step_log_densities;
  std::vector<double> grid;

  const RealArray& final_state() const { return states.back(); }
  double log_density() const;
};

std::vector<double> uniform_grid(std::size_t steps);

/// Optional velocity rewrite applied during ODE sampling: called with the
/// batch state [rows, dim], the current time and the predicted velocity.
using VelocityHook = std::function<void(const RealArray& x, double t, RealArray& v)>;

Trajectory sample_ode(const VelocityField& field, ConceptPrompt c, const SamplerConfig& cfg,
                      std::uint64_t seed);
/// Batched Euler integration; trajectory i uses prompts[i] and seeds[i].
std::vector<Trajectory> sample_ode_batch(const VelocityField& field,
                                         std::span<const ConceptPrompt> prompts,
                                         const SamplerConfig& cfg, std::span<const std::uint64_t> seeds,
                                         const VelocityHook& hook = {});

/// Euler-Maruyama: x_{k+1} ~ Normal(x_k + v dt, sigma^2 dt I) with the
/// Gaussian log-density of every transition recorded.
Trajectory sample_sde_with_logprob(const VelocityField& field, ConceptPrompt c,
                                   const SamplerConfig& cfg, std::uint64_t seed);
std::vector<Trajectory> sample_sde_batch(const VelocityField& field,
                                         std::span<const ConceptPrompt> prompts,
                                         const SamplerConfig& cfg,
                                         std::span<const std::uint64_t> seeds);

/// Per-step log-densities of the recorded states under `field`.
std::vector<double> recompute_logprob(const VelocityField& field, const Trajectory& traj);

/// -dim/2 * log(2 pi variance).
double gaussian_log_normaliser(std::size_t dim, double variance);
/// log Normal(x_next; mean, variance I).
double gaussian_log_density(std::span<const double> x_next, std::span<const double> mean,
                            double variance);

/// Line-delimited debug dump: "step<TAB>t<TAB>v1,...,vD<TAB>logdensity", where
/// the density is that of the transition into the state ("-" for step 0).
void write_trajectory_dump(std::ostream& os, const Trajectory& traj);

struct FlowTrainConfig {
  std::size_t steps = 20000;
  std::size_t batch = 128;
  double learning_rate = 2e-3;
  /// Fraction of rows trained with the null concept (unconditional velocity).
  double null_prob = 0.1;
};

/// Adam on the batch-mean conditional flow-matching loss. Returns the loss
/// curve, one value per step.
std::vector<double> train_flow(VelocityField& field, const ConceptDataset& data,
                               const FlowTrainConfig& cfg, std::uint64_t seed);

/// Batch-mean CFM loss on `n` fresh held-out triples (no gradient).
double evaluate_cfm(const VelocityField& field, const ConceptDataset& data, std::size_t n,
                    std::uint64_t seed);

}  // namespace ferl
