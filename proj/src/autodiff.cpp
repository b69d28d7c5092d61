#include "ferl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ferl/errors.hpp"

namespace ferl {

namespace {

std::string node_label(NodeId id, OpKind kind) {
  return "node " + std::to_string(id) + " (" + op_name(kind) + ")";
}

bool broadcast_ok(const Shape& a, const Shape& b, Shape& out) {
  if (a == b) {
    out = a;
    return true;
  }
  if (shape_size(b) == 1) {
    out = a;
    return true;
  }
  if (shape_size(a) == 1) {
    out = b;
    return true;
  }
  return false;
}

// Index into an operand that may be broadcast from size 1.
inline double bval(const RealArray& x, std::size_t i) { return x.size() == 1 ? x[0] : x[i]; }

void accumulate(RealArray& slot, std::size_t i, double g) {
  if (slot.size() == 1) {
    slot[0] += g;
  } else {
    slot[i] += g;
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAffine: return "affine";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDot: return "dot";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquare: return "square";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kCosineSimilarity: return "cosine_similarity";
  }
  return "unknown";
}

void Graph::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw ValidationError("graph: node id " + std::to_string(id) + " does not exist (graph has " +
                          std::to_string(nodes_.size()) + " nodes)");
  }
}

NodeId Graph::append(Node node) {
  const NodeId id = nodes_.size();
  bool ready = true;
  for (NodeId in : node.inputs) {
    check_id(in);
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    ready = ready && nodes_[in].evaluated;
  }
  node.shape = infer_shape(node, id);
  nodes_.push_back(std::move(node));
  if (ready && nodes_.back().kind != OpKind::kInput) evaluate(id);
  return id;
}

NodeId Graph::input(Shape shape) {
  Node n{OpKind::kInput, {}, {}, {}};
  n.value = RealArray(shape);
  n.aux = RealArray(std::move(shape));  // declared shape
  const NodeId id = append(std::move(n));
  input_ids_.push_back(id);
  return id;
}

NodeId Graph::constant(RealArray value) {
  Node n{OpKind::kConstant, {}, {}, {}};
  n.value = std::move(value);
  n.evaluated = true;
  return append(std::move(n));
}

NodeId Graph::parameter(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
  Node n{OpKind::kParameter, {}, {}, {}};
  n.param = &p;
  n.value = p.value;
  n.evaluated = true;
  n.requires_grad = true;
  const NodeId id = append(std::move(n));
  param_nodes_.emplace(&p, id);
  return id;
}

NodeId Graph::affine(NodeId x, NodeId w, std::optional<NodeId> b) {
  Node n{OpKind::kAffine, {x, w}, {}, {}};
  if (b) n.inputs.push_back(*b);
  return append(std::move(n));
}

NodeId Graph::tanh(NodeId x) { return append(Node{OpKind::kTanh, {x}, {}, {}}); }
NodeId Graph::relu(NodeId x) { return append(Node{OpKind::kRelu, {x}, {}, {}}); }
NodeId Graph::add(NodeId a, NodeId b) { return append(Node{OpKind::kAdd, {a, b}, {}, {}}); }
NodeId Graph::sub(NodeId a, NodeId b) { return append(Node{OpKind::kSub, {a, b}, {}, {}}); }
NodeId Graph::mul(NodeId a, NodeId b) { return append(Node{OpKind::kMul, {a, b}, {}, {}}); }
NodeId Graph::dot(NodeId a, NodeId b) { return append(Node{OpKind::kDot, {a, b}, {}, {}}); }
NodeId Graph::sum(NodeId x) { return append(Node{OpKind::kSum, {x}, {}, {}}); }
NodeId Graph::mean(NodeId x) { return append(Node{OpKind::kMean, {x}, {}, {}}); }
NodeId Graph::square(NodeId x) { return append(Node{OpKind::kSquare, {x}, {}, {}}); }
NodeId Graph::log(NodeId x) { return append(Node{OpKind::kLog, {x}, {}, {}}); }
NodeId Graph::exp(NodeId x) { return append(Node{OpKind::kExp, {x}, {}, {}}); }

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  Node n{OpKind::kSoftmaxCrossEntropy, {logits}, {}, {}};
  n.labels = std::move(labels);
  return append(std::move(n));
}

NodeId Graph::cosine_similarity(NodeId a, NodeId b) {
  return append(Node{OpKind::kCosineSimilarity, {a, b}, {}, {}});
}

NodeId Graph::scale(NodeId x, double factor) { return mul(x, constant(RealArray::scalar(factor))); }

Shape Graph::infer_shape(const Node& node, NodeId id) const {
  auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[node.inputs[k]].shape; };
  auto fail = [&](const std::string& what) -> Shape {
    throw ValidationError(node_label(id, node.kind) + ": " + what);
  };
  switch (node.kind) {
    case OpKind::kInput:
      return node.aux.shape();
    case OpKind::kConstant:
    case OpKind::kParameter:
      return node.value.shape();
    case OpKind::kAffine: {
      const Shape& xs = in_shape(0);
      const Shape& ws = in_shape(1);
      if (ws.size() != 2) return fail("weight must be rank 2, got " + shape_string(ws));
      if (xs.empty() || xs.size() > 2 || xs.back() != ws[1]) {
        return fail("expected input [" + std::to_string(ws[1]) + "] or [batch," +
                    std::to_string(ws[1]) + "], got " + shape_string(xs));
      }
      if (node.inputs.size() == 3) {
        const Shape& bs = in_shape(2);
        if (bs != Shape{ws[0]}) {
          return fail("expected bias [" + std::to_string(ws[0]) + "], got " + shape_string(bs));
        }
      }
      return xs.size() == 1 ? Shape{ws[0]} : Shape{xs[0], ws[0]};
    }
    case OpKind::kTanh:
    case OpKind::kRelu:
    case OpKind::kSquare:
    case OpKind::kLog:
    case OpKind::kExp:
      return in_shape(0);
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      Shape out;
      if (!broadcast_ok(in_shape(0), in_shape(1), out)) {
        return fail("shape mismatch: expected " + shape_string(in_shape(0)) + ", got " +
                    shape_string(in_shape(1)));
      }
      return out;
    }
    case OpKind::kDot:
      if (shape_size(in_shape(0)) != shape_size(in_shape(1))) {
        return fail("shape mismatch: expected " + shape_string(in_shape(0)) + ", got " +
                    shape_string(in_shape(1)));
      }
      return {};
    case OpKind::kSum:
    case OpKind::kMean:
      return {};
    case OpKind::kSoftmaxCrossEntropy: {
      const Shape& ls = in_shape(0);
      const std::size_t rows = ls.size() == 2 ? ls[0] : 1;
      if (ls.empty() || ls.size() > 2) return fail("logits must be [K] or [batch,K]");
      if (node.labels.size() != rows) {
        return fail("expected " + std::to_string(rows) + " labels, got " +
                    std::to_string(node.labels.size()));
      }
      for (std::size_t lab : node.labels) {
        if (lab >= ls.back()) return fail("label " + std::to_string(lab) + " out of range");
      }
      return {};
    }
    case OpKind::kCosineSimilarity: {
      const Shape& as = in_shape(0);
      if (as != in_shape(1)) {
        return fail("shape mismatch: expected " + shape_string(as) + ", got " +
                    shape_string(in_shape(1)));
      }
      if (as.size() == 2) return Shape{as[0]};
      if (as.size() == 1) return {};
      return fail("operands must be [n] or [batch,n]");
    }
  }
  return {};
}

void Graph::evaluate(NodeId id) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const RealArray& { return nodes_[n.inputs[k]].value; };
  RealArray out(n.shape);
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
      n.evaluated = true;
      return;
    case OpKind::kParameter:
      n.value = n.param->value;
      if (n.value.shape() != n.shape) {
        throw ValidationError(node_label(id, n.kind) + ": parameter '" + n.param->name +
                              "' changed shape to " + shape_string(n.value.shape()));
      }
      n.evaluated = true;
      return;
    case OpKind::kAffine: {
      const RealArray& x = in(0);
      const RealArray& w = in(1);
      const std::size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
      const std::size_t nin = w.shape()[1];
      const std::size_t nout = w.shape()[0];
      const double* wv = w.values().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + r * nin;
        double* yr = out.values().data() + r * nout;
        for (std::size_t o = 0; o < nout; ++o) {
          const double* wo = wv + o * nin;
          double s = n.inputs.size() == 3 ? in(2)[o] : 0.0;
          for (std::size_t i = 0; i < nin; ++i) s += wo[i] * xr[i];
          yr[o] = s;
        }
      }
      break;
    }
    case OpKind::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in(0)[i]);
      break;
    case OpKind::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] > 0.0 ? in(0)[i] : 0.0;
      break;
    case OpKind::kAdd:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = bval(in(0), i) + bval(in(1), i);
      break;
    case OpKind::kSub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = bval(in(0), i) - bval(in(1), i);
      break;
    case OpKind::kMul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = bval(in(0), i) * bval(in(1), i);
      break;
    case OpKind::kDot:
      out[0] = ferl::dot(in(0).values(), in(1).values());
      break;
    case OpKind::kSum:
    case OpKind::kMean: {
      double s = 0.0;
      for (double v : in(0).values()) s += v;
      out[0] = n.kind == OpKind::kMean ? s / static_cast<double>(in(0).size()) : s;
      break;
    }
    case OpKind::kSquare:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * in(0)[i];
      break;
    case OpKind::kLog:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(in(0)[i] > 0.0)) {
          throw DivergenceError(node_label(id, n.kind) + ": log of non-positive value " +
                                std::to_string(in(0)[i]));
        }
        out[i] = std::log(in(0)[i]);
      }
      break;
    case OpKind::kExp:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(in(0)[i]);
      break;
    case OpKind::kSoftmaxCrossEntropy: {
      const RealArray& logits = in(0);
      const std::size_t rows = n.labels.size();
      const std::size_t k = logits.cols();
      n.aux = RealArray(logits.shape());
      double loss = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* lr = logits.values().data() + r * k;
        double* pr = n.aux.values().data() + r * k;
        const double mx = *std::max_element(lr, lr + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(lr[j] - mx);
        for (std::size_t j = 0; j < k; ++j) pr[j] = std::exp(lr[j] - mx) / z;
        loss += -(lr[n.labels[r]] - mx - std::log(z));
      }
      out[0] = loss / static_cast<double>(rows);
      break;
    }
    case OpKind::kCosineSimilarity: {
      const RealArray& a = in(0);
      const RealArray& b = in(1);
      const std::size_t rows = a.rank() == 2 ? a.shape()[0] : 1;
      for (std::size_t r = 0; r < rows; ++r) {
        const auto ar = a.rank() == 2 ? a.row(r) : a.values();
        const auto br = b.rank() == 2 ? b.row(r) : b.values();
        const double na = std::sqrt(squared_norm(ar));
        const double nb = std::sqrt(squared_norm(br));
        if (na == 0.0 || nb == 0.0) {
          throw ValidationError(node_label(id, n.kind) + ": zero-norm operand");
        }
        out[r] = ferl::dot(ar, br) / (na * nb);
      }
      break;
    }
  }
  if (!out.all_finite()) {
    throw DivergenceError(node_label(id, n.kind) + ": produced a non-finite value");
  }
  n.value = std::move(out);
  n.evaluated = true;
}

const RealArray& Graph::forward(std::span<const RealArray> inputs) {
  if (inputs.size() != input_ids_.size()) {
    throw ValidationError("graph: expected " + std::to_string(input_ids_.size()) +
                          " inputs, got " + std::to_string(inputs.size()));
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Node& n = nodes_[input_ids_[k]];
    if (inputs[k].shape() != n.shape) {
      throw ValidationError(node_label(input_ids_[k], n.kind) + ": expected shape " +
                            shape_string(n.shape) + ", got " + shape_string(inputs[k].shape()));
    }
    n.value = inputs[k];
    n.evaluated = true;
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) evaluate(id);
  if (nodes_.empty()) throw ValidationError("graph: forward on an empty graph");
  return nodes_.back().value;
}

const RealArray& Graph::value(NodeId id) const {
  check_id(id);
  if (!nodes_[id].evaluated) {
    throw ValidationError("graph: " + node_label(id, nodes_[id].kind) + " has not been evaluated");
  }
  return nodes_[id].value;
}

GradientMap Graph::backward(NodeId root) const {
  check_id(root);
  if (!nodes_[root].evaluated) {
    throw ValidationError("graph: backward before forward (root " +
                          node_label(root, nodes_[root].kind) + " is unevaluated)");
  }
  if (nodes_[root].value.size() != 1) {
    throw ValidationError("graph: backward root " + node_label(root, nodes_[root].kind) +
                          " must be scalar, has shape " + shape_string(nodes_[root].shape));
  }
  std::vector<std::optional<RealArray>> grads(root + 1);
  grads[root] = RealArray::filled(nodes_[root].shape, 1.0);

  auto slot = [&](NodeId id) -> RealArray* {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!grads[id]) grads[id] = RealArray(nodes_[id].shape);
    return &*grads[id];
  };

  for (NodeId id = root + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const Node& n = nodes_[id];
    const RealArray& g = *grads[id];
    auto in = [&](std::size_t k) -> const RealArray& { return nodes_[n.inputs[k]].value; };
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kConstant:
      case OpKind::kParameter:
        break;
      case OpKind::kAffine: {
        const RealArray& x = in(0);
        const RealArray& w = in(1);
        const std::size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
        const std::size_t nin = w.shape()[1];
        const std::size_t nout = w.shape()[0];
        RealArray* gx = slot(n.inputs[0]);
        RealArray* gw = slot(n.inputs[1]);
        RealArray* gb = n.inputs.size() == 3 ? slot(n.inputs[2]) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.values().data() + r * nout;
          const double* xr = x.values().data() + r * nin;
          for (std::size_t o = 0; o < nout; ++o) {
            const double go = gr[o];
            if (go == 0.0) continue;
            const double* wo = w.values().data() + o * nin;
            if (gx) {
              double* gxr = gx->values().data() + r * nin;
              for (std::size_t i = 0; i < nin; ++i) gxr[i] += go * wo[i];
            }
            if (gw) {
              double* gwo = gw->values().data() + o * nin;
              for (std::size_t i = 0; i < nin; ++i) gwo[i] += go * xr[i];
            }
            if (gb) (*gb)[o] += go;
          }
        }
        break;
      }
      case OpKind::kTanh:
        if (RealArray* gx = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        }
        break;
      case OpKind::kRelu:
        if (RealArray* gx = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (in(0)[i] > 0.0) (*gx)[i] += g[i];
          }
        }
        break;
      case OpKind::kAdd:
      case OpKind::kSub: {
        const double sign = n.kind == OpKind::kSub ? -1.0 : 1.0;
        if (RealArray* ga = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(*ga, i, g[i]);
        }
        if (RealArray* gb = slot(n.inputs[1])) {
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(*gb, i, sign * g[i]);
        }
        break;
      }
      case OpKind::kMul: {
        const RealArray& a = in(0);
        const RealArray& b = in(1);
        if (RealArray* ga = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(*ga, i, g[i] * bval(b, i));
        }
        if (RealArray* gb = slot(n.inputs[1])) {
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(*gb, i, g[i] * bval(a, i));
        }
        break;
      }
      case OpKind::kDot: {
        const double g0 = g[0];
        if (RealArray* ga = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g0 * in(1)[i];
        }
        if (RealArray* gb = slot(n.inputs[1])) {
          for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g0 * in(0)[i];
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean:
        if (RealArray* gx = slot(n.inputs[0])) {
          const double g0 =
              n.kind == OpKind::kMean ? g[0] / static_cast<double>(gx->size()) : g[0];
          for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g0;
        }
        break;
      case OpKind::kSquare:
        if (RealArray* gx = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0 * in(0)[i] * g[i];
        }
        break;
      case OpKind::kLog:
        if (RealArray* gx = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / in(0)[i];
        }
        break;
      case OpKind::kExp:
        if (RealArray* gx = slot(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * n.value[i];
        }
        break;
      case OpKind::kSoftmaxCrossEntropy:
        if (RealArray* gx = slot(n.inputs[0])) {
          const std::size_t rows = n.labels.size();
          const std::size_t k = n.aux.cols();
          const double scale = g[0] / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
              const double target = j == n.labels[r] ? 1.0 : 0.0;
              (*gx)[r * k + j] += scale * (n.aux[r * k + j] - target);
            }
          }
        }
        break;
      case OpKind::kCosineSimilarity: {
        const RealArray& a = in(0);
        const RealArray& b = in(1);
        RealArray* ga = slot(n.inputs[0]);
        RealArray* gb = slot(n.inputs[1]);
        const std::size_t rows = a.rank() == 2 ? a.shape()[0] : 1;
        const std::size_t cols = a.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* ar = a.values().data() + r * cols;
          const double* br = b.values().data() + r * cols;
          const double na2 = squared_norm({ar, cols});
          const double nb2 = squared_norm({br, cols});
          const double inv = 1.0 / std::sqrt(na2 * nb2);
          const double c = n.value[r];
          const double gr = g[r];
          for (std::size_t i = 0; i < cols; ++i) {
            if (ga) (*ga)[r * cols + i] += gr * (br[i] * inv - c * ar[i] / na2);
            if (gb) (*gb)[r * cols + i] += gr * (ar[i] * inv - c * br[i] / nb2);
          }
        }
        break;
      }
    }
  }

  GradientMap out;
  for (const auto& [param, id] : param_nodes_) {
    if (id <= root && grads[id]) {
      out.emplace(id, *grads[id]);
    } else {
      out.emplace(id, RealArray(nodes_[id].shape));
    }
  }
  return out;
}

std::vector<RealArray> Graph::parameter_gradients(const GradientMap& grads,
                                                  std::span<Parameter* const> params) const {
  std::vector<RealArray> out;
  out.reserve(params.size());
  for (Parameter* p : params) {
    auto it = param_nodes_.find(p);
    if (it == param_nodes_.end()) {
      out.emplace_back(p->value.shape());
      continue;
    }
    auto g = grads.find(it->second);
    out.push_back(g == grads.end() ? RealArray(p->value.shape()) : g->second);
  }
  return out;
}

}  // namespace ferl
