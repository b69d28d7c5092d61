#include "ferl/flow.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <ostream>

#include "ferl/errors.hpp"
#include "ferl/optim.hpp"

namespace ferl {

void time_features(double t, std::span<double> out) {
  out[0] = t;
  out[1] = std::sin(std::numbers::pi * t);
  out[2] = std::cos(std::numbers::pi * t);
}

VelocityField::VelocityField(FieldShape shape, std::uint64_t seed) : shape_(shape) {
  if (shape_.data_dim == 0 || shape_.num_concepts == 0 || shape_.cond_dim == 0 || shape_.hidden == 0) {
    throw ValidationError("VelocityField: all dimensions must be positive");
  }
  Rng rng(derive_seed(seed, {kTagInit}));
  const std::size_t h = shape_.hidden;
  const std::size_t first_fan_in = input_dim();
  add_param("emb.table", {shape_.cond_dim, shape_.num_concepts + 1}, 1.0, &rng);
  add_param("in.wx", {h, shape_.data_dim}, std::sqrt(3.0 / static_cast<double>(first_fan_in)), &rng);
  add_param("in.wc", {h, shape_.cond_dim}, std::sqrt(3.0 / static_cast<double>(first_fan_in)), &rng);
  add_param("in.wt", {h, kTimeFeatures}, std::sqrt(3.0 / static_cast<double>(first_fan_in)), &rng);
  add_param("in.b", {h}, 0.0, nullptr);
  for (std::size_t l = 0; l < shape_.hidden_layers; ++l) {
    add_param("h" + std::to_string(l) + ".w", {h, h}, std::sqrt(3.0 / static_cast<double>(h)), &rng);
    add_param("h" + std::to_string(l) + ".b", {h}, 0.0, nullptr);
  }
  add_param("out.w", {shape_.data_dim, h}, std::sqrt(3.0 / static_cast<double>(h)), &rng);
  add_param("out.b", {shape_.data_dim}, 0.0, nullptr);
}

void VelocityField::add_param(std::string name, Shape shape, double scale, Rng* rng) {
  RealArray value(std::move(shape));
  if (rng) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (double& v : value.values()) v = u(*rng);
  }
  params_.push_back({std::move(name), std::move(value)});
}

std::vector<Parameter*> VelocityField::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> VelocityField::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

Parameter& VelocityField::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ValidationError("VelocityField: no parameter '" + name + "'");
}

std::size_t VelocityField::condition_row(ConceptId concept_id) const {
  if (concept_id == kNullConcept) return shape_.num_concepts;
  if (concept_id < 0 || static_cast<std::size_t>(concept_id) >= shape_.num_concepts) {
    throw ValidationError("VelocityField: concept " + std::to_string(concept_id) + " out of range");
  }
  return static_cast<std::size_t>(concept_id);
}

NodeId VelocityField::build(Graph& g, NodeId x, std::span<const ConceptId> concepts,
                            std::span<const double> times) {
  const Shape& xs = g.shape(x);
  const std::size_t rows = concepts.size();
  if (xs != Shape{rows, shape_.data_dim} || times.size() != rows) {
    throw ValidationError("VelocityField: expected state [" + std::to_string(rows) + "," +
                          std::to_string(shape_.data_dim) + "] with matching times, got " +
                          shape_string(xs) + " and " + std::to_string(times.size()) + " times");
  }
  RealArray onehot({rows, shape_.num_concepts + 1});
  RealArray tf({rows, kTimeFeatures});
  for (std::size_t r = 0; r < rows; ++r) {
    onehot.at(r, condition_row(concepts[r])) = 1.0;
    time_features(times[r], tf.row(r));
  }
  const NodeId emb = g.affine(g.constant(std::move(onehot)), g.parameter(parameter("emb.table")));
  NodeId h = g.affine(x, g.parameter(parameter("in.wx")), g.parameter(parameter("in.b")));
  h = g.add(h, g.affine(emb, g.parameter(parameter("in.wc"))));
  h = g.add(h, g.affine(g.constant(std::move(tf)), g.parameter(parameter("in.wt"))));
  auto act = [&](NodeId n) {
    return shape_.activation == Activation::kTanh ? g.tanh(n) : g.relu(n);
  };
  h = act(h);
  for (std::size_t l = 0; l < shape_.hidden_layers; ++l) {
    const std::string prefix = "h" + std::to_string(l);
    h = act(g.affine(h, g.parameter(parameter(prefix + ".w")), g.parameter(parameter(prefix + ".b"))));
  }
  return g.affine(h, g.parameter(parameter("out.w")), g.parameter(parameter("out.b")));
}

RealArray VelocityField::predict(const RealArray& x, std::span<const ConceptId> concepts,
                                 std::span<const double> times) const {
  // The tape only reads parameter values; sharing one code path with
  // training keeps sampled and recomputed log-densities bit-identical.
  auto& self = const_cast<VelocityField&>(*this);
  Graph g;
  const NodeId out = self.build(g, g.constant(x), concepts, times);
  return g.value(out);
}

RealArray VelocityField::velocity(const RealArray& x, ConceptId concept_id, double t) const {
  RealArray batch({1, shape_.data_dim}, std::vector<double>(x.values().begin(), x.values().end()));
  const ConceptId c[] = {concept_id};
  const double ts[] = {t};
  RealArray v = predict(batch, c, ts);
  return RealArray::vector(std::vector<double>(v.values().begin(), v.values().end()));
}

TensorList VelocityField::to_tensors(const std::string& prefix) const {
  TensorList out;
  out.push_back({prefix + "shape",
                 RealArray::vector({static_cast<double>(shape_.data_dim),
                                    static_cast<double>(shape_.num_concepts),
                                    static_cast<double>(shape_.cond_dim),
                                    static_cast<double>(shape_.hidden),
                                    static_cast<double>(shape_.hidden_layers),
                                    shape_.activation == Activation::kTanh ? 0.0 : 1.0})});
  for (const auto& p : params_) out.push_back({prefix + p.name, p.value});
  return out;
}

VelocityField VelocityField::from_tensors(const TensorList& tensors, const std::string& prefix) {
  const RealArray& s = find_tensor(tensors, prefix + "shape");
  if (s.size() != 6) throw ValidationError("VelocityField: malformed '" + prefix + "shape' tensor");
  FieldShape shape;
  shape.data_dim = static_cast<std::size_t>(s[0]);
  shape.num_concepts = static_cast<std::size_t>(s[1]);
  shape.cond_dim = static_cast<std::size_t>(s[2]);
  shape.hidden = static_cast<std::size_t>(s[3]);
  shape.hidden_layers = static_cast<std::size_t>(s[4]);
  shape.activation = s[5] == 0.0 ? Activation::kTanh : Activation::kRelu;
  VelocityField field(shape, 0);
  for (auto& p : field.params_) {
    const RealArray& v = find_tensor(tensors, prefix + p.name);
    if (v.shape() != p.value.shape()) {
      throw ValidationError("VelocityField: tensor '" + prefix + p.name + "' has shape " +
                            shape_string(v.shape()) + ", expected " + shape_string(p.value.shape()));
    }
    p.value = v;
  }
  return field;
}

RealArray interpolate(const RealArray& x0, const RealArray& x1, double t) {
  if (x0.shape() != x1.shape()) {
    throw ValidationError("interpolate: shape mismatch " + shape_string(x0.shape()) + " vs " +
                          shape_string(x1.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("interpolate: t must lie in [0,1]");
  RealArray out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

double cfm_loss(const VelocityField& field, const RealArray& x0, const RealArray& x1, double t,
                std::optional<ConceptPrompt> c) {
  if (x0.size() != field.shape().data_dim || x1.size() != field.shape().data_dim) {
    throw ValidationError("cfm_loss: samples must have dimension " +
                          std::to_string(field.shape().data_dim));
  }
  const RealArray xt = interpolate(x0, x1, t);
  const RealArray v = field.velocity(xt, c ? c->concept_id : kNullConcept, t);
  double loss = 0.0;
  for (std::size_t d = 0; d < v.size(); ++d) {
    const double r = v[d] - (x1[d] - x0[d]);
    loss += r * r;
  }
  return loss;
}

NodeId cfm_loss_node(Graph& g, VelocityField& field, const RealArray& x0, const RealArray& x1,
                     std::span<const double> times, std::span<const ConceptId> concepts) {
  const std::size_t rows = concepts.size();
  const std::size_t dim = field.shape().data_dim;
  if (x0.shape() != Shape{rows, dim} || x1.shape() != x0.shape() || times.size() != rows) {
    throw ValidationError("cfm_loss: expected x0/x1 of shape [" + std::to_string(rows) + "," +
                          std::to_string(dim) + "]");
  }
  RealArray xt(x0.shape());
  RealArray target(x0.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < dim; ++d) {
      xt.at(r, d) = (1.0 - times[r]) * x0.at(r, d) + times[r] * x1.at(r, d);
      target.at(r, d) = x1.at(r, d) - x0.at(r, d);
    }
  }
  const NodeId v = field.build(g, g.constant(std::move(xt)), concepts, times);
  const NodeId err = g.square(g.sub(v, g.constant(std::move(target))));
  return g.scale(g.sum(err), 1.0 / static_cast<double>(rows));
}

double Trajectory::log_density() const {
  double s = 0.0;
  for (double v : step_log_densities) s += v;
  return s;
}

std::vector<double> uniform_grid(std::size_t steps) {
  std::vector<double> grid(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) grid[k] = static_cast<double>(k) / static_cast<double>(steps);
  return grid;
}

double gaussian_log_normaliser(std::size_t dim, double variance) {
  return -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi * variance);
}

double gaussian_log_density(std::span<const double> x_next, std::span<const double> mean,
                            double variance) {
  double sq = 0.0;
  for (std::size_t d = 0; d < x_next.size(); ++d) {
    const double r = x_next[d] - mean[d];
    sq += r * r;
  }
  return gaussian_log_normaliser(x_next.size(), variance) - sq * (0.5 / variance);
}

namespace {

void check_sampler(const SamplerConfig& cfg, std::size_t prompts, std::size_t seeds) {
  if (cfg.steps == 0) throw ValidationError("sampler: number of steps must be >= 1");
  if (cfg.sigma < 0.0) throw ValidationError("sampler: sigma must be >= 0");
  if (prompts != seeds) throw ValidationError("sampler: need one seed per prompt");
}

// Initial noise draw; the same generator continues into the SDE increments.
std::vector<Rng> start_batch(std::span<const ConceptPrompt> prompts,
                             std::span<const std::uint64_t> seeds, std::size_t dim,
                             std::vector<Trajectory>& trajs, RealArray& x, const SamplerConfig& cfg,
                             double sigma) {
  const std::size_t rows = prompts.size();
  std::vector<Rng> rngs;
  rngs.reserve(rows);
  trajs.resize(rows);
  x = RealArray({rows, dim});
  const auto grid = uniform_grid(cfg.steps);
  for (std::size_t r = 0; r < rows; ++r) {
    rngs.emplace_back(seeds[r]);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t d = 0; d < dim; ++d) x.at(r, d) = normal(rngs.back());
    Trajectory& t = trajs[r];
    t.condition = prompts[r];
    t.seed = seeds[r];
    t.sigma = sigma;
    t.grid = grid;
    t.states.reserve(cfg.steps + 1);
    t.states.push_back(RealArray::vector(std::vector<double>(x.row(r).begin(), x.row(r).end())));
  }
  return rngs;
}

}  // namespace

std::vector<Trajectory> sample_ode_batch(const VelocityField& field,
                                         std::span<const ConceptPrompt> prompts,
                                         const SamplerConfig& cfg, std::span<const std::uint64_t> seeds,
                                         const VelocityHook& hook) {
  check_sampler(cfg, prompts.size(), seeds.size());
  const std::size_t dim = field.shape().data_dim;
  const std::size_t rows = prompts.size();
  std::vector<Trajectory> trajs;
  RealArray x;
  start_batch(prompts, seeds, dim, trajs, x, cfg, 0.0);
  std::vector<ConceptId> concepts(rows);
  for (std::size_t r = 0; r < rows; ++r) concepts[r] = prompts[r].concept_id;
  const auto grid = uniform_grid(cfg.steps);
  std::vector<double> times(rows);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double dt = grid[k + 1] - grid[k];
    std::fill(times.begin(), times.end(), grid[k]);
    RealArray v = field.predict(x, concepts, times);
    if (hook) hook(x, grid[k], v);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += v[i] * dt;
    for (std::size_t r = 0; r < rows; ++r) {
      trajs[r].states.push_back(RealArray::vector(std::vector<double>(x.row(r).begin(), x.row(r).end())));
    }
  }
  return trajs;
}

Trajectory sample_ode(const VelocityField& field, ConceptPrompt c, const SamplerConfig& cfg,
                      std::uint64_t seed) {
  const ConceptPrompt prompts[] = {c};
  const std::uint64_t seeds[] = {seed};
  return std::move(sample_ode_batch(field, prompts, cfg, seeds)[0]);
}

std::vector<Trajectory> sample_sde_batch(const VelocityField& field,
                                         std::span<const ConceptPrompt> prompts,
                                         const SamplerConfig& cfg,
                                         std::span<const std::uint64_t> seeds) {
  check_sampler(cfg, prompts.size(), seeds.size());
  if (cfg.sigma == 0.0) {
    throw ValidationError("sample_sde_with_logprob: sigma is 0; use sample_ode for deterministic sampling");
  }
  const std::size_t dim = field.shape().data_dim;
  const std::size_t rows = prompts.size();
  std::vector<Trajectory> trajs;
  RealArray x;
  auto rngs = start_batch(prompts, seeds, dim, trajs, x, cfg, cfg.sigma);
  std::vector<ConceptId> concepts(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    concepts[r] = prompts[r].concept_id;
    trajs[r].step_log_densities.reserve(cfg.steps);
  }
  const auto grid = uniform_grid(cfg.steps);
  std::vector<double> times(rows);
  std::vector<double> mean(dim);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double dt = grid[k + 1] - grid[k];
    const double var = cfg.sigma * cfg.sigma * dt;
    const double sd = std::sqrt(var);
    std::fill(times.begin(), times.end(), grid[k]);
    const RealArray v = field.predict(x, concepts, times);
    for (std::size_t r = 0; r < rows; ++r) {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t d = 0; d < dim; ++d) {
        mean[d] = x.at(r, d) + v.at(r, d) * dt;
        x.at(r, d) = mean[d] + sd * normal(rngs[r]);
      }
      trajs[r].step_log_densities.push_back(gaussian_log_density(x.row(r), mean, var));
      trajs[r].states.push_back(RealArray::vector(std::vector<double>(x.row(r).begin(), x.row(r).end())));
    }
  }
  return trajs;
}

Trajectory sample_sde_with_logprob(const VelocityField& field, ConceptPrompt c,
                                   const SamplerConfig& cfg, std::uint64_t seed) {
  const ConceptPrompt prompts[] = {c};
  const std::uint64_t seeds[] = {seed};
  return std::move(sample_sde_batch(field, prompts, cfg, seeds)[0]);
}

std::vector<double> recompute_logprob(const VelocityField& field, const Trajectory& traj) {
  if (traj.sigma <= 0.0 || traj.step_log_densities.empty()) {
    throw ValidationError("recompute_logprob: trajectory has no stochastic steps (ODE sample)");
  }
  if (traj.states.size() != traj.grid.size() || traj.states.size() < 2) {
    throw ValidationError("recompute_logprob: states and timestep grid disagree");
  }
  const std::size_t steps = traj.states.size() - 1;
  const std::size_t dim = field.shape().data_dim;
  RealArray x({steps, dim});
  std::vector<ConceptId> concepts(steps, traj.condition.concept_id);
  std::vector<double> times(traj.grid.begin(), traj.grid.end() - 1);
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t d = 0; d < dim; ++d) x.at(k, d) = traj.states[k][d];
  }
  const RealArray v = field.predict(x, concepts, times);
  std::vector<double> out(steps);
  std::vector<double> mean(dim);
  for (std::size_t k = 0; k < steps; ++k) {
    const double dt = traj.grid[k + 1] - traj.grid[k];
    const double var = traj.sigma * traj.sigma * dt;
    for (std::size_t d = 0; d < dim; ++d) mean[d] = traj.states[k][d] + v.at(k, d) * dt;
    out[k] = gaussian_log_density(traj.states[k + 1].values(), mean, var);
  }
  return out;
}

void write_trajectory_dump(std::ostream& os, const Trajectory& traj) {
  char buf[32];
  auto num = [&](double v) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    os.write(buf, res.ptr - buf);
  };
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    os << k << '\t';
    num(traj.grid[k]);
    os << '\t';
    for (std::size_t d = 0; d < traj.states[k].size(); ++d) {
      if (d) os << ',';
      num(traj.states[k][d]);
    }
    os << '\t';
    if (k == 0 || traj.step_log_densities.empty()) {
      os << '-';
    } else {
      num(traj.step_log_densities[k - 1]);
    }
    os << '\n';
  }
}

namespace {

struct CfmBatch {
  RealArray x0;
  RealArray x1;
  std::vector<double> times;
  std::vector<ConceptId> concepts;
};

CfmBatch draw_cfm_batch(const ConceptDataset& data, std::size_t n, double null_prob, Rng& rng) {
  CfmBatch b{RealArray({n, data.dim}), RealArray({n, data.dim}), std::vector<double>(n),
             std::vector<ConceptId>(n)};
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, data.records.size() - 1);
  for (std::size_t r = 0; r < n; ++r) {
    const ConceptRecord& rec = data.records[pick(rng)];
    for (std::size_t d = 0; d < data.dim; ++d) {
      b.x0.at(r, d) = normal(rng);
      b.x1.at(r, d) = rec.sample[d];
    }
    b.times[r] = unif(rng);
    b.concepts[r] = unif(rng) < null_prob ? kNullConcept : rec.concept_id;
  }
  return b;
}

}  // namespace

std::vector<double> train_flow(VelocityField& field, const ConceptDataset& data,
                               const FlowTrainConfig& cfg, std::uint64_t seed) {
  if (data.records.empty()) throw ValidationError("train_flow: empty dataset");
  if (data.dim != field.shape().data_dim) throw ValidationError("train_flow: dataset dimension mismatch");
  auto params = field.parameters();
  auto opt = OptimizerState::create(OptimizerKind::kAdam, cfg.learning_rate, params);
  Rng rng(derive_seed(seed, {kTagTrain}));
  std::vector<double> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    CfmBatch b = draw_cfm_batch(data, cfg.batch, cfg.null_prob, rng);
    Graph g;
    const NodeId loss = cfm_loss_node(g, field, b.x0, b.x1, b.times, b.concepts);
    const double value = g.value(loss).item();
    if (!std::isfinite(value)) throw DivergenceError("train_flow: non-finite loss at step " + std::to_string(step));
    curve.push_back(value);
    // Cosine decay to 10% of the base rate over the run.
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
    opt.learning_rate = cfg.learning_rate * (0.55 + 0.45 * std::cos(std::numbers::pi * progress));
    const auto grads = g.parameter_gradients(g.backward(loss), params);
    optimizer_step(opt, params, grads);
  }
  return curve;
}

double evaluate_cfm(const VelocityField& field, const ConceptDataset& data, std::size_t n,
                    std::uint64_t seed) {
  Rng rng(seed);
  CfmBatch b = draw_cfm_batch(data, n, 0.0, rng);
  Graph g;
  const NodeId loss = cfm_loss_node(g, const_cast<VelocityField&>(field), b.x0, b.x1, b.times, b.concepts);
  return g.value(loss).item();
}

}  // namespace ferl
