#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "ferl/tensor.hpp"

namespace ferl {

using NodeId = std::size_t;

enum class OpKind {
  kInput,
  kConstant,
  kParameter,
  kAffine,
  kTanh,
  kRelu,
  kAdd,
  kSub,
  kMul,
  kDot,
  kSum,
  kMean,
  kSquare,
  kLog,
  kExp,
  kSoftmaxCrossEntropy,
  kCosineSimilarity,
};

const char* op_name(OpKind kind);

/// Gradients of a scalar root, keyed by parameter node id.
using GradientMap = std::map<NodeId, RealArray>;

/// Append-only reverse-mode tape over RealArray values.
///
/// Nodes are evaluated eagerly as they are appended whenever all of their
/// inputs already hold values. Graphs that start from `input()` placeholders
/// stay unevaluated until `forward()` supplies the inputs; `forward()` can be
/// called again to replay the whole tape with new inputs or updated
/// parameter values.
///
/// Elementwise binary ops accept equal shapes or a size-1 operand on either
/// side. `affine` takes x as [in] or [batch, in], W as [out, in] and an
/// optional bias [out]. `cosine_similarity` on two [batch, n] operands yields
/// one value per row, shape [batch].
class Graph {
 public:
  NodeId input(Shape shape);
  NodeId constant(RealArray value);
  /// Repeated calls with the same parameter return the same node.
  NodeId parameter(Parameter& p);

  NodeId affine(NodeId x, NodeId w, std::optional<NodeId> b = std::nullopt);
  NodeId tanh(NodeId x);
  NodeId relu(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId dot(NodeId a, NodeId b);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId square(NodeId x);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);
  /// Mean cross-entropy of softmax(logits) against integer labels, one per row.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);
  NodeId cosine_similarity(NodeId a, NodeId b);

  /// Convenience: multiply by a constant scalar.
  NodeId scale(NodeId x, double factor);

  /// Feeds `inputs` to the placeholders in creation order and re-evaluates
  /// every node. Returns the output of the last node appended.
  const RealArray& forward(std::span<const RealArray> inputs);

  /// Reverse sweep from a scalar root. Every parameter node appears in the
  /// result (zeros when the root does not depend on it).
  GradientMap backward(NodeId root) const;

  /// Gradients reordered to match `params`; zeros for parameters absent
  /// from this graph.
  std::vector<RealArray> parameter_gradients(const GradientMap& grads,
                                             std::span<Parameter* const> params) const;

  const RealArray& value(NodeId id) const;
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  bool evaluated(NodeId id) const { return nodes_.at(id).evaluated; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Shape shape;
    RealArray value;
    bool evaluated = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<std::size_t> labels;
    RealArray aux;  // softmax probabilities for the fused cross-entropy
  };

  NodeId append(Node node);
  void evaluate(NodeId id);
  Shape infer_shape(const Node& node, NodeId id) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> input_ids_;
  std::unordered_map<const Parameter*, NodeId> param_nodes_;
};

}  // namespace ferl
