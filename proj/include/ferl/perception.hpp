#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ferl/autodiff.hpp"
#include "ferl/checkpoint.hpp"
#include "ferl/concepts.hpp"
#include "ferl/tensor.hpp"

namespace ferl {

struct DetectorScores {
  double lab_n = 1.0;  // neutral
  double lab_p = 0.0;  // sensitive
};

/// Shared tanh trunk with a K-way concept head and a binary
/// {neutral, sensitive} head. Frozen once trained.
class Detector {
 public:
  static constexpr std::size_t kTrunk = 32;

  Detector() = default;
  Detector(std::size_t data_dim, std::size_t num_concepts, ConceptId sensitive, std::uint64_t seed);

  std::size_t data_dim() const { return data_dim_; }
  std::size_t num_concepts() const { return num_concepts_; }
  ConceptId sensitive_concept() const { return sensitive_; }

  struct Heads {
    NodeId concept_logits;    // [rows, K]
    NodeId sensitive_logits;  // [rows, 2]
  };
  Heads build(Graph& g, NodeId x);

  /// [rows, K] logits for a [rows, D] batch.
  RealArray concept_logits(const RealArray& x) const;
  /// [rows, 2] softmax over {neutral, sensitive}.
  RealArray sensitive_probs(const RealArray& x) const;

  std::vector<Parameter*> parameters();
  TensorList to_tensors() const;
  static Detector from_tensors(const TensorList& tensors);

 private:
  std::size_t data_dim_ = 0;
  std::size_t num_concepts_ = 0;
  ConceptId sensitive_ = 0;
  std::vector<Parameter> params_;
};

/// Encoder D -> 32 (tanh) -> 8 (linear) plus per-concept unit prototypes. The linear
/// classification head is only used while training.
class Embedder {
 public:
  static constexpr std::size_t kHidden = 32;
  static constexpr std::size_t kEmbedding = 8;

  Embedder() = default;
  Embedder(std::size_t data_dim, std::size_t num_concepts, std::uint64_t seed);

  std::size_t data_dim() const { return data_dim_; }
  std::size_t num_concepts() const { return num_concepts_; }

  NodeId build_embedding(Graph& g, NodeId x);
  NodeId build_logits(Graph& g, NodeId embedding);

  /// [rows, 8] embeddings for a [rows, D] batch.
  RealArray embed(const RealArray& x) const;
  const RealArray& prototypes() const { return prototypes_; }
  std::span<const double> prototype(ConceptId concept_id) const;

  /// Prototype k = normalised mean embedding of the concept-k records.
  void compute_prototypes(const std::vector<ConceptRecord>& records);

  std::vector<Parameter*> parameters();
  TensorList to_tensors() const;
  static Embedder from_tensors(const TensorList& tensors);

 private:
  std::size_t data_dim_ = 0;
  std::size_t num_concepts_ = 0;
  std::vector<Parameter> params_;
  RealArray prototypes_;  // [K, 8]
};

struct PerceptionConfig {
  std::size_t epochs = 60;
  std::size_t batch = 64;
  double learning_rate = 1e-2;
  double min_accuracy = 0.95;
};

struct PerceptionModels {
  Detector detector;
  Embedder embedder;
  double heldout_accuracy = 0.0;
};

/// Trains both models on the canonicalised records; every fifth record is
/// held out. Throws GateFailure when held-out concept accuracy is below
/// cfg.min_accuracy.
PerceptionModels train_perception(const ConceptDataset& data, ConceptId sensitive_concept,
                                  const PerceptionConfig& cfg, std::uint64_t seed);

/// Held-out concept accuracy of `d` on records selected the same way as in training.
double heldout_accuracy(const Detector& d, const ConceptDataset& data);

DetectorScores detect(const Detector& d, const RealArray& x);
std::vector<DetectorScores> detect_batch(const Detector& d, const RealArray& x);

/// Argmax with ties resolved towards the lowest id.
ConceptId classify_from_logits(std::span<const double> logits);
ConceptId classify_top1(const Detector& d, const RealArray& x);
std::vector<ConceptId> classify_batch(const Detector& d, const RealArray& x);

/// Cosine similarity in embedding space, to a concept prototype or to
/// another sample.
double similarity(const Embedder& e, const RealArray& x, ConceptPrompt ref);
double similarity(const Embedder& e, const RealArray& x, const RealArray& ref);
/// Row-wise similarity of a [rows, D] batch against per-row prompts.
std::vector<double> similarity_batch(const Embedder& e, const RealArray& x,
                                     std::span<const ConceptPrompt> refs);

void write_perception(const std::filesystem::path& path, const PerceptionModels& models);
PerceptionModels read_perception(const std::filesystem::path& path);

}  // namespace ferl
