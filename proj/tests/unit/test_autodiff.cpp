#include "doctest.h"

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "ferl/autodiff.hpp"
#include "ferl/errors.hpp"
#include "ferl/optim.hpp"

using namespace ferl;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("forward: identity graph") {
  Graph g;
  const NodeId x = g.input({2});
  const std::vector<RealArray> in{RealArray::vector({1.0, 2.0})};
  CHECK(g.forward(in) == RealArray::vector({1.0, 2.0}));
  CHECK(g.value(x) == RealArray::vector({1.0, 2.0}));
}

TEST_CASE("forward: affine graph") {
  Graph g;
  const NodeId x = g.input({2});
  g.affine(x, g.constant(RealArray::matrix(2, 2, {2, 0, 0, 2})), g.constant(RealArray::vector({1, 1})));
  const std::vector<RealArray> in{RealArray::vector({1.0, 1.0})};
  CHECK(g.forward(in) == RealArray::vector({3.0, 3.0}));
}

TEST_CASE("forward: zero-weight MLP returns the last bias") {
  Graph g;
  const NodeId x = g.input({3});
  const NodeId h = g.tanh(g.affine(x, g.constant(RealArray({4, 3})), g.constant(RealArray({4}))));
  g.affine(h, g.constant(RealArray({2, 4})), g.constant(RealArray::vector({0.5, -1.5})));
  const std::vector<RealArray> in{RealArray::vector({0.3, -7.0, 2.0})};
  CHECK(g.forward(in) == RealArray::vector({0.5, -1.5}));
}

TEST_CASE("forward: shape mismatch names node and shapes") {
  Graph g;
  g.input({2});
  const std::vector<RealArray> in{RealArray::vector({1.0, 2.0, 3.0})};
  const std::string msg = error_of([&] { g.forward(in); });
  CHECK(msg.find("node 0") != std::string::npos);
  CHECK(msg.find("[2]") != std::string::npos);
  CHECK(msg.find("[3]") != std::string::npos);
}

TEST_CASE("forward: incompatible operand shapes are rejected") {
  Graph g;
  const NodeId a = g.constant(RealArray::vector({1, 2}));
  const NodeId b = g.constant(RealArray::vector({1, 2, 3}));
  CHECK_THROWS_AS(g.add(a, b), ValidationError);
}

TEST_CASE("backward: gradient of sum") {
  Parameter x{"x", RealArray::vector({0.5, -1.0, 2.0})};
  Graph g;
  const NodeId root = g.sum(g.parameter(x));
  std::vector<Parameter*> ps{&x};
  const auto grads = g.parameter_gradients(g.backward(root), ps);
  CHECK(grads[0] == RealArray::vector({1.0, 1.0, 1.0}));
}

TEST_CASE("backward: gradient of dot(x, x)") {
  Parameter x{"x", RealArray::vector({1.0, 2.0})};
  Graph g;
  const NodeId px = g.parameter(x);
  const NodeId root = g.dot(px, px);
  std::vector<Parameter*> ps{&x};
  const auto grads = g.parameter_gradients(g.backward(root), ps);
  CHECK(grads[0] == RealArray::vector({2.0, 4.0}));
}

TEST_CASE("backward: non-scalar root and backward before forward fail") {
  Parameter x{"x", RealArray::vector({1.0, 2.0})};
  Graph g;
  const NodeId v = g.square(g.parameter(x));
  CHECK_THROWS_AS(g.backward(v), ValidationError);

  Graph lazy;
  const NodeId in = lazy.input({2});
  const NodeId root = lazy.sum(in);
  CHECK_THROWS_AS(lazy.backward(root), ValidationError);
}

TEST_CASE("backward: random two-layer MLP matches finite differences") {
  std::mt19937_64 rng(11);
  Parameter w0{"w0", gradcheck::random_array({6, 3}, rng)};
  Parameter b0{"b0", gradcheck::random_array({6}, rng)};
  Parameter w1{"w1", gradcheck::random_array({2, 6}, rng)};
  Parameter b1{"b1", gradcheck::random_array({2}, rng)};
  const RealArray x = gradcheck::random_array({5, 3}, rng);
  const RealArray y = gradcheck::random_array({5, 2}, rng);
  std::vector<Parameter*> ps{&w0, &b0, &w1, &b1};
  auto build = [&](Graph& g) {
    const NodeId h = g.tanh(g.affine(g.constant(x), g.parameter(w0), g.parameter(b0)));
    return g.mean(g.square(g.sub(g.affine(h, g.parameter(w1), g.parameter(b1)), g.constant(y))));
  };
  Graph g;
  const NodeId root = build(g);
  const auto analytic = g.parameter_gradients(g.backward(root), ps);
  const double err = gradcheck::relative_error(
      [&] {
        Graph f;
        return f.value(build(f)).item();
      },
      ps, analytic);
  CHECK(err < 1e-4);
}

TEST_CASE("property: random graphs agree with finite differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 150; ++seed) {
    const double err = gradcheck::random_graph_error(seed);
    INFO("seed " << seed);
    CHECK(err < 1e-4);
    worst = std::max(worst, err);
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("property: every op kind appears in the random graph family") {
  std::set<OpKind> seen;
  for (std::uint64_t seed = 1; seed <= 150; ++seed) {
    auto rg = gradcheck::random_graph(seed);
    for (NodeId i = 0; i < rg.graph->size(); ++i) seen.insert(rg.graph->kind(i));
  }
  for (OpKind k : {OpKind::kAffine, OpKind::kTanh, OpKind::kRelu, OpKind::kAdd, OpKind::kSub, OpKind::kMul,
                   OpKind::kDot, OpKind::kSum, OpKind::kMean, OpKind::kSquare, OpKind::kLog, OpKind::kExp,
                   OpKind::kSoftmaxCrossEntropy, OpKind::kCosineSimilarity}) {
    CHECK(seen.count(k) == 1);
  }
}

TEST_CASE("property: identical graphs give bit-identical values and gradients") {
  for (std::uint64_t seed : {3u, 17u, 99u}) {
    auto a = gradcheck::random_graph(seed);
    auto b = gradcheck::random_graph(seed);
    CHECK(a.graph->value(a.root) == b.graph->value(b.root));
    const auto ga = a.graph->parameter_gradients(a.graph->backward(a.root), a.params);
    const auto gb = b.graph->parameter_gradients(b.graph->backward(b.root), b.params);
    CHECK(ga == gb);
  }
}

TEST_CASE("property: backward is linear in the root") {
  std::mt19937_64 rng(5);
  Parameter w{"w", gradcheck::random_array({3, 4}, rng)};
  const RealArray x = gradcheck::random_array({2, 4}, rng);
  std::vector<Parameter*> ps{&w};
  Graph g;
  const NodeId h = g.affine(g.constant(x), g.parameter(w));
  const NodeId r1 = g.sum(g.tanh(h));
  const NodeId r2 = g.mean(g.square(h));
  const NodeId both = g.add(r1, r2);
  const auto g1 = g.parameter_gradients(g.backward(r1), ps)[0];
  const auto g2 = g.parameter_gradients(g.backward(r2), ps)[0];
  const auto g12 = g.parameter_gradients(g.backward(both), ps)[0];
  for (std::size_t i = 0; i < g12.size(); ++i) CHECK(g12[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-14));
}

TEST_CASE("forward replay picks up parameter changes") {
  Parameter w{"w", RealArray::scalar(2.0)};
  Graph g;
  const NodeId root = g.square(g.parameter(w));
  CHECK(g.value(root).item() == 4.0);
  w.value[0] = 3.0;
  g.forward({});
  CHECK(g.value(root).item() == 9.0);
}

TEST_CASE("softmax cross-entropy and cosine similarity values") {
  Graph g;
  const NodeId logits = g.constant(RealArray::matrix(1, 2, {0.0, 0.0}));
  CHECK(g.value(g.softmax_cross_entropy(logits, {1})).item() == doctest::Approx(std::log(2.0)));
  const NodeId a = g.constant(RealArray::matrix(2, 2, {1, 0, 1, 1}));
  const NodeId b = g.constant(RealArray::matrix(2, 2, {2, 0, -1, -1}));
  const RealArray& cs = g.value(g.cosine_similarity(a, b));
  CHECK(cs[0] == doctest::Approx(1.0));
  CHECK(cs[1] == doctest::Approx(-1.0));
}

TEST_CASE("composed CFM loss matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    INFO("seed " << seed);
    CHECK(gradcheck::cfm_error(seed) < 1e-4);
  }
}

TEST_CASE("composed GRPO surrogate matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    INFO("seed " << seed);
    CHECK(gradcheck::surrogate_error(seed) < 1e-4);
  }
}

TEST_CASE("optimizer: SGD step") {
  Parameter p{"p", RealArray::scalar(1.0)};
  std::vector<Parameter*> ps{&p};
  auto st = OptimizerState::create(OptimizerKind::kSgd, 0.1, ps);
  const std::vector<RealArray> grads{RealArray::scalar(1.0)};
  optimizer_step(st, ps, grads);
  CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(st.step == 1);
}

TEST_CASE("optimizer: zero gradient leaves the parameter unchanged") {
  for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
    Parameter p{"p", RealArray::vector({1.5, -2.0})};
    std::vector<Parameter*> ps{&p};
    auto st = OptimizerState::create(kind, 0.1, ps);
    const std::vector<RealArray> grads{RealArray({2})};
    optimizer_step(st, ps, grads);
    CHECK(p.value == RealArray::vector({1.5, -2.0}));
  }
}

TEST_CASE("optimizer: SGD converges geometrically on (w-3)^2") {
  Parameter w{"w", RealArray::scalar(0.0)};
  std::vector<Parameter*> ps{&w};
  auto st = OptimizerState::create(OptimizerKind::kSgd, 0.1, ps);
  for (int i = 0; i < 100; ++i) {
    const std::vector<RealArray> grads{RealArray::scalar(2.0 * (w.value[0] - 3.0))};
    optimizer_step(st, ps, grads);
  }
  // Closed form: w_k = 3 (1 - 0.8^k).
  CHECK(std::abs(w.value[0] - 3.0) < 1e-3);
  CHECK(w.value[0] == doctest::Approx(3.0 * (1.0 - std::pow(0.8, 100))).epsilon(1e-12));
}

TEST_CASE("optimizer: Adam descends and keeps moment shapes") {
  Parameter w{"w", RealArray::vector({0.0, 0.0})};
  std::vector<Parameter*> ps{&w};
  auto st = OptimizerState::create(OptimizerKind::kAdam, 0.05, ps);
  for (int i = 0; i < 500; ++i) {
    const std::vector<RealArray> grads{RealArray::vector({2.0 * (w.value[0] - 3.0), 2.0 * (w.value[1] + 1.0)})};
    optimizer_step(st, ps, grads);
  }
  CHECK(w.value[0] == doctest::Approx(3.0).epsilon(1e-2));
  CHECK(w.value[1] == doctest::Approx(-1.0).epsilon(1e-2));
  CHECK(st.first_moment[0].shape() == w.value.shape());
  CHECK(st.second_moment[0].shape() == w.value.shape());
  CHECK(st.step == 500);
}

TEST_CASE("optimizer: non-finite gradient names the parameter and leaves params untouched") {
  Parameter a{"alpha", RealArray::scalar(1.0)};
  Parameter b{"bravo", RealArray::scalar(1.0)};
  std::vector<Parameter*> ps{&a, &b};
  auto st = OptimizerState::create(OptimizerKind::kAdam, 0.1, ps);
  const std::vector<RealArray> grads{RealArray::scalar(1.0), RealArray::scalar(std::nan(""))};
  const std::string msg = error_of([&] { optimizer_step(st, ps, grads); });
  CHECK(msg.find("bravo") != std::string::npos);
  CHECK(a.value[0] == 1.0);
  CHECK(st.step == 0);
}
