#pragma once

// Finite-difference oracle shared by the unit and acceptance suites.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "ferl/autodiff.hpp"
#include "ferl/flow.hpp"
#include "ferl/grpo.hpp"

namespace gradcheck {

using ferl::Graph;
using ferl::NodeId;
using ferl::Parameter;
using ferl::RealArray;

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all entries of
/// all parameters, with central differences of step h.
inline double relative_error(const std::function<double()>& loss, const std::vector<Parameter*>& params,
                             const std::vector<RealArray>& analytic, double h = 1e-5) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->value.size(); ++i) {
      double& v = params[p]->value[i];
      const double keep = v;
      v = keep + h;
      const double up = loss();
      v = keep - h;
      const double down = loss();
      v = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / scale;
}

struct RandomGraph {
  std::unique_ptr<Graph> graph = std::make_unique<Graph>();
  std::deque<Parameter> storage;
  std::vector<Parameter*> params;
  NodeId root = 0;
};

inline RealArray random_array(ferl::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  RealArray a(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : a.values()) v = n(rng);
  return a;
}

/// Random composition of the supported ops ending in a scalar.
inline RandomGraph random_graph(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
  RandomGraph rg;
  Graph& g = *rg.graph;
  auto param = [&](ferl::Shape shape, double scale = 1.0) {
    rg.storage.push_back({"p" + std::to_string(rg.storage.size()), random_array(std::move(shape), rng, scale)});
    rg.params.push_back(&rg.storage.back());
    return g.parameter(rg.storage.back());
  };
  const std::size_t rows = 1 + pick(3);
  const std::size_t in = 2 + pick(3);
  const std::size_t out = 2 + pick(3);
  const NodeId x = pick(2) ? param({rows, in}) : g.constant(random_array({rows, in}, rng));
  NodeId h = g.affine(x, param({out, in}, 0.7), param({out}, 0.3));
  const int depth = 1 + pick(4);
  for (int d = 0; d < depth; ++d) {
    switch (pick(8)) {
      case 0: h = g.tanh(h); break;
      case 1: h = g.relu(g.add(h, g.constant(RealArray::scalar(0.05)))); break;
      case 2: h = g.exp(g.scale(g.tanh(h), 0.5)); break;
      case 3: h = g.square(h); break;
      case 4: h = g.log(g.add(g.square(h), g.constant(RealArray::scalar(1.0)))); break;
      case 5: h = g.add(h, param({rows, out}, 0.5)); break;
      case 6: h = g.sub(h, param({}, 0.5)); break;
      default: h = g.mul(h, param({rows, out}, 0.8)); break;
    }
    if (pick(3) == 0) h = g.tanh(g.affine(h, param({out, out}, 0.5), param({out}, 0.2)));
  }
  switch (pick(5)) {
    case 0: rg.root = g.sum(h); break;
    case 1: rg.root = g.mean(g.square(h)); break;
    case 2: rg.root = g.dot(h, param({rows, out})); break;
    case 3: {
      std::vector<std::size_t> labels(rows);
      for (auto& l : labels) l = static_cast<std::size_t>(pick(static_cast<int>(out)));
      rg.root = g.softmax_cross_entropy(h, labels);
      break;
    }
    default: {
      // Offset keeps rows away from zero norm after a relu.
      const NodeId shifted = g.add(h, g.constant(random_array({rows, out}, rng)));
      rg.root = g.sum(g.cosine_similarity(shifted, param({rows, out})));
      break;
    }
  }
  return rg;
}

/// Gradient check of a freshly built random graph.
inline double random_graph_error(std::uint64_t seed) {
  RandomGraph rg = random_graph(seed);
  Graph& g = *rg.graph;
  const auto analytic = g.parameter_gradients(g.backward(rg.root), rg.params);
  auto loss = [&] {
    g.forward({});
    return g.value(rg.root).item();
  };
  return relative_error(loss, rg.params, analytic);
}

inline ferl::FieldShape tiny_shape() {
  ferl::FieldShape s;
  s.data_dim = 2;
  s.num_concepts = 3;
  s.cond_dim = 3;
  s.hidden = 5;
  s.hidden_layers = 1;
  return s;
}

/// Composed CFM loss of a small velocity field.
inline double cfm_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ferl::FieldShape shape = tiny_shape();
  shape.activation = seed % 2 ? ferl::Activation::kTanh : ferl::Activation::kRelu;
  ferl::VelocityField field(shape, seed);
  const std::size_t rows = 4;
  const RealArray x0 = random_array({rows, 2}, rng);
  const RealArray x1 = random_array({rows, 2}, rng, 2.0);
  std::vector<double> t(rows);
  std::vector<ferl::ConceptId> c(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    t[r] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    c[r] = static_cast<ferl::ConceptId>(r % 4) - 1;
  }
  auto params = field.parameters();
  auto loss = [&] {
    Graph g;
    return g.value(ferl::cfm_loss_node(g, field, x0, x1, t, c)).item();
  };
  Graph g;
  const NodeId root = ferl::cfm_loss_node(g, field, x0, x1, t, c);
  const auto analytic = g.parameter_gradients(g.backward(root), params);
  return relative_error(loss, params, analytic);
}

/// Clipped surrogate plus KL of a small policy, old log-densities taken
/// from a perturbed copy so that ratios differ from 1.
inline double surrogate_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ferl::FieldShape shape = tiny_shape();
  ferl::VelocityField ref(shape, seed);
  ferl::VelocityField old_policy = ref;
  for (auto* p : old_policy.parameters()) {
    for (double& v : p->value.values()) v += std::normal_distribution<double>(0.0, 0.05)(rng);
  }
  ferl::VelocityField field = old_policy;
  for (auto* p : field.parameters()) {
    for (double& v : p->value.values()) v += std::normal_distribution<double>(0.0, 0.02)(rng);
  }
  ferl::SamplerConfig sampler{4, 0.3};
  ferl::UpdateConfig cfg;
  cfg.kappa = 0.5;
  std::vector<ferl::GroupBatch> batches;
  for (int b = 0; b < 2; ++b) {
    auto batch = ferl::sample_group(old_policy, {b, 0}, 3, sampler, seed * 10 + b);
    std::vector<double> rewards(3);
    for (double& r : rewards) r = std::normal_distribution<double>(0.0, 1.0)(rng);
    batch.rewards = rewards;
    batch.advantages = ferl::compute_advantages(rewards);
    batches.push_back(std::move(batch));
  }
  auto params = field.parameters();
  auto loss = [&] {
    Graph g;
    return g.value(ferl::build_surrogate(g, field, ref, batches, cfg).loss).item();
  };
  Graph g;
  const auto nodes = ferl::build_surrogate(g, field, ref, batches, cfg);
  const auto analytic = g.parameter_gradients(g.backward(nodes.loss), params);
  return relative_error(loss, params, analytic);
}

}  // namespace gradcheck
