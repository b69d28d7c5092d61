#include "doctest.h"

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "ferl/errors.hpp"
#include "ferl/grpo.hpp"

using namespace ferl;

namespace {

FieldShape toy_shape() { return gradcheck::tiny_shape(); }

void jitter(VelocityField& f, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto* p : f.parameters()) {
    for (double& v : p->value.values()) v += n(rng);
  }
}

std::vector<GroupBatch> rollout(const VelocityField& f, std::size_t batches, std::uint64_t seed,
                                const SamplerConfig& sampler = {4, 0.3}) {
  std::vector<GroupBatch> out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t b = 0; b < batches; ++b) {
    GroupBatch batch = sample_group(f, {static_cast<ConceptId>(b % 3), 0}, 4, sampler, seed * 100 + b * 10);
    for (std::size_t i = 0; i < batch.size(); ++i) batch.rewards.push_back(n(rng));
    batch.advantages = compute_advantages(batch.rewards);
    out.push_back(std::move(batch));
  }
  return out;
}

double param_distance(VelocityField& a, VelocityField& b) {
  double s = 0.0;
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i]->value.size(); ++j) {
      const double d = pa[i]->value[j] - pb[i]->value[j];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("sample_group: size, seeds, determinism, degenerate group") {
  VelocityField f(toy_shape(), 1);
  SamplerConfig sampler{12, 0.3};
  const GroupBatch a = sample_group(f, {1, 0}, 8, sampler, 500);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.trajectories[i].seed == 500 + i);
    CHECK(a.trajectories[i].step_log_densities.size() == 12);
  }
  const GroupBatch b = sample_group(f, {1, 0}, 8, sampler, 500);
  for (std::size_t i = 0; i < 8; ++i) CHECK(a.trajectories[i].states == b.trajectories[i].states);
  CHECK_THROWS_AS(sample_group(f, {1, 0}, 1, sampler, 500), ValidationError);
  CHECK_THROWS_AS(sample_group(f, {1, 0}, 4, SamplerConfig{12, 0.0}, 500), ValidationError);
}

TEST_CASE("compute_advantages: worked example and zero variance") {
  const std::vector<double> r{1, 2, 3, 4};
  const auto a = compute_advantages(r);
  const double sd = std::sqrt(1.25);
  const std::vector<double> expect{-1.5 / sd, -0.5 / sd, 0.5 / sd, 1.5 / sd};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(a[i] - expect[i]) < 1e-7);
  }
  CHECK(a[0] == doctest::Approx(-1.3416).epsilon(1e-3));
  CHECK(a[1] == doctest::Approx(-0.4472).epsilon(1e-3));
  const std::vector<double> flat{5, 5, 5, 5};
  CHECK(compute_advantages(flat) == std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(compute_advantages(std::vector<double>{1.0}), ValidationError);
  CHECK_THROWS_AS(compute_advantages(std::vector<double>{1.0, std::nan("")}), ValidationError);
}

TEST_CASE("property: advantages have zero mean and unit std") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> r(2 + trial % 15);
    for (double& v : r) v = n(rng) + 10.0;
    const auto a = compute_advantages(r);
    CHECK(std::abs(mean(a)) < 1e-9);
    CHECK(std::abs(population_std(a) - 1.0) < 1e-6);
  }
}

TEST_CASE("property: advantages are invariant to reward shifts and positive scaling") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> u(-64, 64);
  for (int trial = 0; trial < 200; ++trial) {
    // Dyadic rewards, so shifted arithmetic is exact.
    std::vector<double> r(8), shifted(8), scaled(8);
    for (std::size_t i = 0; i < 8; ++i) {
      r[i] = u(rng) / 8.0;
      shifted[i] = r[i] + 3.0;
      scaled[i] = r[i] * 2.5;
    }
    const auto a = compute_advantages(r);
    CHECK(compute_advantages(shifted) == a);
    const auto b = compute_advantages(scaled);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(b[i] - a[i]) < 1e-6);
  }
}

TEST_CASE("set_rewards fills rewards and advantages") {
  VelocityField f(toy_shape(), 1);
  GroupBatch b = sample_group(f, {1, 0}, 3, SamplerConfig{4, 0.3}, 1);
  std::vector<RewardSample> s(3);
  for (int i = 0; i < 3; ++i) s[i].reward = i;
  set_rewards(b, s);
  CHECK(b.rewards == std::vector<double>{0, 1, 2});
  CHECK(b.advantages == compute_advantages(b.rewards));
  CHECK(b.samples[2].trajectory == 2);
  CHECK_THROWS_AS(set_rewards(b, std::vector<RewardSample>(2)), ValidationError);
}

TEST_CASE("identical policy: ratios 1, KL 0, loss 0, clip fraction 0") {
  VelocityField f(toy_shape(), 2);
  const auto batches = rollout(f, 3, 7, SamplerConfig{12, 0.3});
  UpdateConfig cfg;
  cfg.kappa = 0.0;
  for (const auto& b : batches) {
    for (const auto& t : b.trajectories) {
      for (double r : step_ratios(f, t)) CHECK(r == 1.0);
    }
    CHECK(std::abs(surrogate_loss(f, f, b, cfg)) < 1e-9);
  }
  CHECK(kl_estimate(f, f, batches, cfg) <= 1e-12);
  Graph g;
  const auto nodes = build_surrogate(g, f, f, batches, cfg);
  CHECK(nodes.clipped == 0);
  CHECK(nodes.terms == 3 * 4 * 12);
  CHECK(std::abs(g.value(nodes.loss).item()) < 1e-9);
}

TEST_CASE("clipped objective: value and saturated gradient") {
  const double eps = 0.2;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ur(0.3, 1.8);
  std::normal_distribution<double> na(0.0, 1.0);
  const std::size_t rows = 200;
  Parameter ratio{"ratio", RealArray({rows, 1})};
  RealArray adv({rows, 1});
  for (std::size_t i = 0; i < rows; ++i) {
    ratio.value[i] = ur(rng);
    adv[i] = na(rng);
  }
  Graph g;
  const NodeId obj = clipped_objective(g, g.parameter(ratio), adv, eps);
  for (std::size_t i = 0; i < rows; ++i) {
    const double r = ratio.value[i], a = adv[i];
    const double expect = std::min(r * a, std::clamp(r, 1.0 - eps, 1.0 + eps) * a);
    CHECK(g.value(obj)[i] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(g.value(obj)[i] <= r * a + 1e-15);
  }

  // rho = 1 + 2 eps with a positive advantage sits on the clipped branch.
  Parameter rigged{"ratio", RealArray::matrix(2, 1, {1.0 + 2.0 * eps, 1.05})};
  Graph h;
  const NodeId o = clipped_objective(h, h.parameter(rigged), RealArray::matrix(2, 1, {0.7, 0.7}), eps);
  std::vector<Parameter*> ps{&rigged};
  const auto grad = h.parameter_gradients(h.backward(h.sum(o)), ps)[0];
  CHECK(grad[0] == 0.0);
  CHECK(grad[1] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("surrogate gradient matches finite differences on a two-parameter policy") {
  // Only the output bias moves: v = b, so the policy has two parameters.
  VelocityField ref(toy_shape(), 3);
  VelocityField f = ref;
  jitter(f, 0.05, 1);
  const auto batches = rollout(ref, 2, 9);
  UpdateConfig cfg;
  cfg.kappa = 0.3;
  Parameter& b = f.parameter("out.b");
  b.value[0] += 0.04;
  b.value[1] -= 0.03;
  std::vector<Parameter*> ps{&b};
  Graph g;
  const auto nodes = build_surrogate(g, f, ref, batches, cfg);
  const auto analytic = g.parameter_gradients(g.backward(nodes.loss), ps);
  CHECK(nodes.clipped > 0);
  const double err = gradcheck::relative_error(
      [&] {
        Graph h;
        return h.value(build_surrogate(h, f, ref, batches, cfg).loss).item();
      },
      ps, analytic);
  CHECK(err < 1e-4);
  for (std::uint64_t seed = 10; seed < 14; ++seed) CHECK(gradcheck::surrogate_error(seed) < 1e-4);
}

TEST_CASE("surrogate: guards for missing densities, advantages and sigma") {
  VelocityField f(toy_shape(), 4);
  auto batches = rollout(f, 1, 3);
  UpdateConfig cfg;
  GroupBatch missing = batches[0];
  missing.trajectories[1].step_log_densities.clear();
  CHECK_THROWS_AS(surrogate_loss(f, f, missing, cfg), ValidationError);
  GroupBatch no_adv = batches[0];
  no_adv.advantages.clear();
  CHECK_THROWS_AS(surrogate_loss(f, f, no_adv, cfg), ValidationError);
  cfg.sigma = 0.5;
  CHECK_THROWS_AS(surrogate_loss(f, f, batches[0], cfg), ValidationError);
  CHECK_THROWS_AS(kl_estimate(f, f, batches, cfg), ValidationError);
}

TEST_CASE("kl_estimate: closed form for a constant offset") {
  FieldShape s = toy_shape();
  s.data_dim = 1;
  VelocityField ref(s, 1);
  for (auto* p : ref.parameters()) std::fill(p->value.values().begin(), p->value.values().end(), 0.0);
  VelocityField f = ref;
  const double delta = 0.37;
  f.parameter("out.b").value[0] = delta;
  UpdateConfig cfg;
  cfg.sigma = 0.5;
  const SamplerConfig one{1, 0.5};
  std::vector<GroupBatch> batches{sample_group(ref, {0, 0}, 2, one, 1)};
  const double dt = 1.0;
  CHECK(std::abs(kl_estimate(f, ref, batches, cfg) - delta * delta * dt / (2.0 * 0.25)) < 1e-12);
  CHECK(kl_estimate(ref, ref, batches, cfg) == 0.0);
}

TEST_CASE("property: KL is non-negative") {
  VelocityField ref(toy_shape(), 6);
  const auto batches = rollout(ref, 1, 4);
  UpdateConfig cfg;
  for (std::uint64_t c = 0; c < 1000; ++c) {
    VelocityField f = ref;
    jitter(f, 0.1, c);
    CHECK(kl_estimate(f, ref, batches, cfg) >= 0.0);
  }
}

TEST_CASE("policy_step: bandit with a single-step flow improves mean reward") {
  FieldShape s = toy_shape();
  s.num_concepts = 1;
  VelocityField f(s, 11);
  const VelocityField ref = f;
  auto params = f.parameters();
  auto opt = OptimizerState::create(OptimizerKind::kAdam, 1e-2, params);
  UpdateConfig cfg;
  cfg.group_size = 8;
  const SamplerConfig one{1, 0.3};
  const std::vector<double> target{1.5, -1.0};
  std::vector<double> curve;
  for (std::uint64_t it = 0; it < 200; ++it) {
    std::vector<GroupBatch> batches;
    for (std::uint64_t p = 0; p < 4; ++p) {
      GroupBatch b = sample_group(f, {0, 0}, cfg.group_size, one, derive_seed(1, {it, p}));
      std::vector<RewardSample> rs(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) {
        const RealArray& x = b.trajectories[i].final_state();
        rs[i].reward = -((x[0] - target[0]) * (x[0] - target[0]) + (x[1] - target[1]) * (x[1] - target[1]));
      }
      set_rewards(b, rs);
      batches.push_back(std::move(b));
    }
    const StepMetrics m = policy_step(f, ref, batches, cfg, opt);
    CHECK(m.clip_fraction >= 0.0);
    CHECK(m.clip_fraction <= 1.0);
    CHECK(m.kl >= 0.0);
    curve.push_back(m.mean_reward);
  }
  const double first = mean(std::vector<double>(curve.begin(), curve.begin() + 20));
  const double last = mean(std::vector<double>(curve.end() - 20, curve.end()));
  MESSAGE("bandit mean reward " << first << " -> " << last);
  CHECK(last > first);
}

TEST_CASE("policy_step: parameter change shrinks as kappa grows") {
  VelocityField ref(toy_shape(), 12);
  const auto batches = rollout(ref, 2, 5);
  std::vector<double> moved;
  for (double kappa : {0.01, 1.0, 100.0}) {
    VelocityField f = ref;
    auto params = f.parameters();
    auto opt = OptimizerState::create(OptimizerKind::kAdam, 1e-2, params);
    UpdateConfig cfg;
    cfg.kappa = kappa;
    cfg.epochs_per_rollout = 30;
    policy_step(f, ref, batches, cfg, opt);
    moved.push_back(param_distance(f, ref));
  }
  MESSAGE("parameter change " << moved[0] << " " << moved[1] << " " << moved[2]);
  CHECK(moved[0] > moved[1]);
  CHECK(moved[1] > moved[2]);
}

TEST_CASE("policy_step: zero advantages move parameters only through KL") {
  VelocityField ref(toy_shape(), 13);
  VelocityField start = ref;
  jitter(start, 0.1, 4);
  auto batches = rollout(start, 2, 6);
  for (auto& b : batches) std::fill(b.advantages.begin(), b.advantages.end(), 0.0);
  {
    VelocityField f = start;
    auto params = f.parameters();
    auto opt = OptimizerState::create(OptimizerKind::kAdam, 1e-2, params);
    UpdateConfig cfg;
    cfg.kappa = 0.0;
    policy_step(f, ref, batches, cfg, opt);
    CHECK(param_distance(f, start) == 0.0);
  }
  {
    VelocityField f = start;
    auto params = f.parameters();
    auto opt = OptimizerState::create(OptimizerKind::kAdam, 1e-2, params);
    UpdateConfig cfg;
    cfg.kappa = 1.0;
    policy_step(f, ref, batches, cfg, opt);
    CHECK(param_distance(f, start) > 0.0);
    CHECK(param_distance(f, ref) < param_distance(start, ref));
  }
}

TEST_CASE("policy_step: non-finite loss is a divergence") {
  VelocityField f(toy_shape(), 14);
  const VelocityField ref = f;
  const auto batches = rollout(f, 1, 2);
  f.parameter("out.b").value[0] = 1e300;
  auto params = f.parameters();
  auto opt = OptimizerState::create(OptimizerKind::kAdam, 1e-2, params);
  CHECK_THROWS_AS(policy_step(f, ref, batches, UpdateConfig{}, opt), DivergenceError);
}

TEST_CASE("update config validation") {
  UpdateConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  cfg.clip_epsilon = 1.0;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
  cfg = {};
  cfg.kappa = -1.0;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
  cfg = {};
  cfg.group_size = 1;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
}
