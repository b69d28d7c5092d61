#include "ferl/baselines.hpp"

#include <cmath>

#include "ferl/errors.hpp"
#include "ferl/log.hpp"
#include "ferl/optim.hpp"
#include "ferl/random.hpp"

namespace ferl {

namespace {

RealArray as_batch(const RealArray& x) {
  if (x.rank() == 2) return x;
  return RealArray({1, x.size()}, std::vector<double>(x.values().begin(), x.values().end()));
}

RealArray esd_target_batch(const VelocityField& frozen, const RealArray& x, std::span<const ConceptId> concepts,
                           std::span<const double> times, double eta) {
  const std::vector<ConceptId> null_rows(concepts.size(), kNullConcept);
  const RealArray v_null = frozen.predict(x, null_rows, times);
  const RealArray v_c = frozen.predict(x, concepts, times);
  RealArray out(v_null.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_null[i] - eta * (v_c[i] - v_null[i]);
  return out;
}

}  // namespace

RealArray esd_target(const VelocityField& frozen, const RealArray& x_t, ConceptId c, double t, double eta) {
  if (c == kNullConcept) throw ValidationError("esd: the erased concept cannot be the null concept");
  const ConceptId cs[] = {c};
  const double ts[] = {t};
  RealArray out = esd_target_batch(frozen, as_batch(x_t), cs, ts, eta);
  return RealArray::vector(std::vector<double>(out.values().begin(), out.values().end()));
}

double esd_loss(const VelocityField& field, const VelocityField& frozen, const RealArray& x_t, ConceptId c,
                double t, double eta) {
  const RealArray target = esd_target(frozen, x_t, c, t, eta);
  const RealArray v = field.velocity(x_t, c, t);
  double loss = 0.0;
  for (std::size_t d = 0; d < v.size(); ++d) loss += (v[d] - target[d]) * (v[d] - target[d]);
  return loss;
}

NodeId esd_loss_node(Graph& g, VelocityField& field, const VelocityField& frozen, const RealArray& x_t,
                     std::span<const ConceptId> concepts, std::span<const double> times, double eta) {
  for (ConceptId c : concepts) {
    if (c == kNullConcept) throw ValidationError("esd: the erased concept cannot be the null concept");
  }
  const RealArray target = esd_target_batch(frozen, x_t, concepts, times, eta);
  const NodeId v = field.build(g, g.constant(x_t), concepts, times);
  const NodeId err = g.sum(g.square(g.sub(v, g.constant(target))));
  return g.scale(err, 1.0 / static_cast<double>(concepts.size()));
}

std::vector<double> train_esd(VelocityField& field, const VelocityField& frozen, const ConceptSet& erase_set,
                              const EsdConfig& cfg, const SamplerConfig& sampler, std::uint64_t seed) {
  if (erase_set.empty()) throw ValidationError("esd: empty erase set");
  if (cfg.batch == 0) throw ValidationError("esd: batch must be positive");
  if (frozen.shape() != field.shape()) throw ValidationError("esd: frozen copy has a different architecture");
  const std::vector<ConceptId> erase(erase_set.begin(), erase_set.end());
  const std::size_t dim = field.shape().data_dim;
  auto params = field.parameters();
  auto opt = OptimizerState::create(OptimizerKind::kAdam, cfg.learning_rate, params);
  std::vector<double> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(seed, {kTagEsd, step}));
    std::vector<ConceptPrompt> prompts(cfg.batch);
    std::vector<std::uint64_t> seeds(cfg.batch);
    std::uniform_int_distribution<std::size_t> pick(0, erase.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_step(0, sampler.steps - 1);
    for (std::size_t r = 0; r < cfg.batch; ++r) {
      prompts[r] = {erase[pick(rng)], 0};
      seeds[r] = rng();
    }
    const auto trajs = sample_ode_batch(field, prompts, sampler, seeds);
    RealArray x({cfg.batch, dim});
    std::vector<ConceptId> concepts(cfg.batch);
    std::vector<double> times(cfg.batch);
    for (std::size_t r = 0; r < cfg.batch; ++r) {
      const std::size_t k = pick_step(rng);
      for (std::size_t d = 0; d < dim; ++d) x.at(r, d) = trajs[r].states[k][d];
      concepts[r] = prompts[r].concept_id;
      times[r] = trajs[r].grid[k];
    }
    Graph g;
    const NodeId loss = esd_loss_node(g, field, frozen, x, concepts, times, cfg.eta);
    const double value = g.value(loss).item();
    if (!std::isfinite(value)) throw DivergenceError("esd: non-finite loss at step " + std::to_string(step));
    curve.push_back(value);
    optimizer_step(opt, params, g.parameter_gradients(g.backward(loss), params));
  }
  return curve;
}

void validate(const DveConfig& cfg) {
  if (cfg.erase_set.empty()) throw ValidationError("dve: empty erase set");
  if (!(cfg.gamma > 0.0)) throw ValidationError("dve: gamma must be > 0");
  if (!(cfg.tau <= 0.0)) throw ValidationError("dve: tau must be <= 0");
  if (cfg.erase_set.contains(cfg.anchor)) throw ValidationError("dve: the anchor concept is in the erase set");
}

RealArray dve_delta_v(const VelocityField& field, const RealArray& x_t, double t, ConceptId erase,
                      ConceptId anchor) {
  if (erase == anchor) throw ValidationError("dve: erase and anchor concepts must differ");
  const RealArray x = as_batch(x_t);
  const std::vector<double> times(x.rows(), t);
  const RealArray v_anchor = field.predict(x, std::vector<ConceptId>(x.rows(), anchor), times);
  const RealArray v_erase = field.predict(x, std::vector<ConceptId>(x.rows(), erase), times);
  RealArray out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_anchor[i] - v_erase[i];
  return out;
}

RealArray dve_correct(const RealArray& v_user, const RealArray& delta_v, double gamma, double tau) {
  if (v_user.size() != delta_v.size()) throw ValidationError("dve: velocity and differential disagree in size");
  const double norm = std::sqrt(squared_norm(delta_v.values()));
  if (norm <= kDveMinNorm) {
    log_warning("dve: differential velocity is degenerate; correction skipped");
    return v_user;
  }
  const double s = dot(v_user.values(), delta_v.values()) / norm;
  if (!(s < tau)) return v_user;
  RealArray out = v_user;
  const double step = gamma * (tau - s) / norm;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step * delta_v[i];
  return out;
}

VelocityHook dve_hook(const VelocityField& field, const DveConfig& cfg) {
  validate(cfg);
  return [&field, cfg](const RealArray& x, double t, RealArray& v) {
    if (!(t < cfg.t_early)) return;
    const std::size_t dim = x.cols();
    for (ConceptId erase : cfg.erase_set) {
      const RealArray dv = dve_delta_v(field, x, t, erase, cfg.anchor);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const RealArray vr({dim}, std::vector<double>(v.row(r).begin(), v.row(r).end()));
        const RealArray dr({dim}, std::vector<double>(dv.row(r).begin(), dv.row(r).end()));
        const RealArray corrected = dve_correct(vr, dr, cfg.gamma, cfg.tau);
        std::copy(corrected.values().begin(), corrected.values().end(), v.row(r).begin());
      }
    }
  };
}

Trajectory dve_sample(const VelocityField& field, ConceptPrompt prompt, const DveConfig& cfg,
                      const SamplerConfig& sampler, std::uint64_t seed) {
  const ConceptPrompt prompts[] = {prompt};
  const std::uint64_t seeds[] = {seed};
  return std::move(sample_ode_batch(field, prompts, sampler, seeds, dve_hook(field, cfg))[0]);
}

}  // namespace ferl
