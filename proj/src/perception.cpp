#include "ferl/perception.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ferl/errors.hpp"
#include "ferl/optim.hpp"
#include "ferl/random.hpp"

namespace ferl {

namespace {

Parameter make_param(std::string name, Shape shape, std::size_t fan_in, Rng* rng) {
  RealArray value(std::move(shape));
  if (rng) {
    const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-a, a);
    for (double& v : value.values()) v = u(*rng);
  }
  return {std::move(name), std::move(value)};
}

Parameter& find_param(std::vector<Parameter>& params, const std::string& name) {
  for (auto& p : params) {
    if (p.name == name) return p;
  }
  throw ValidationError("perception: no parameter '" + name + "'");
}

void check_batch(const RealArray& x, std::size_t dim, const char* who) {
  if (x.rank() != 2 || x.cols() != dim) {
    throw ValidationError(std::string(who) + ": expected [rows, " + std::to_string(dim) + "] input, got " +
                          shape_string(x.shape()));
  }
}

RealArray as_row(const RealArray& x, std::size_t dim, const char* who) {
  if (x.size() != dim || x.rank() > 2 || (x.rank() == 2 && x.rows() != 1)) {
    throw ValidationError(std::string(who) + ": expected a sample of dimension " + std::to_string(dim) +
                          ", got shape " + shape_string(x.shape()));
  }
  return RealArray({1, dim}, std::vector<double>(x.values().begin(), x.values().end()));
}

void load_params(std::vector<Parameter>& params, const TensorList& tensors, const std::string& prefix) {
  for (auto& p : params) {
    const RealArray& v = find_tensor(tensors, prefix + p.name);
    if (v.shape() != p.value.shape()) {
      throw ValidationError("perception: tensor '" + prefix + p.name + "' has shape " +
                            shape_string(v.shape()) + ", expected " + shape_string(p.value.shape()));
    }
    p.value = v;
  }
}

std::vector<ConceptRecord> heldout_split(const ConceptDataset& data, bool heldout) {
  auto ordered = canonical_order(data.records);
  std::vector<ConceptRecord> out;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if ((i % 5 == 4) == heldout) out.push_back(std::move(ordered[i]));
  }
  return out;
}

RealArray stack(const std::vector<ConceptRecord>& recs, std::span<const std::size_t> idx, std::size_t dim) {
  RealArray x({idx.size(), dim});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t d = 0; d < dim; ++d) x.at(r, d) = recs[idx[r]].sample[d];
  }
  return x;
}

}  // namespace

Detector::Detector(std::size_t data_dim, std::size_t num_concepts, ConceptId sensitive, std::uint64_t seed)
    : data_dim_(data_dim), num_concepts_(num_concepts), sensitive_(sensitive) {
  if (num_concepts < 2) throw ValidationError("Detector: need at least 2 concepts");
  Rng rng(derive_seed(seed, {kTagInit, 1}));
  params_.push_back(make_param("t0.w", {kTrunk, data_dim}, data_dim, &rng));
  params_.push_back(make_param("t0.b", {kTrunk}, 1, nullptr));
  params_.push_back(make_param("t1.w", {kTrunk, kTrunk}, kTrunk, &rng));
  params_.push_back(make_param("t1.b", {kTrunk}, 1, nullptr));
  params_.push_back(make_param("concept.w", {num_concepts, kTrunk}, kTrunk, &rng));
  params_.push_back(make_param("concept.b", {num_concepts}, 1, nullptr));
  params_.push_back(make_param("sensitive.w", {2, kTrunk}, kTrunk, &rng));
  params_.push_back(make_param("sensitive.b", {2}, 1, nullptr));
}

Detector::Heads Detector::build(Graph& g, NodeId x) {
  auto p = [&](const char* name) { return g.parameter(find_param(params_, name)); };
  NodeId h = g.tanh(g.affine(x, p("t0.w"), p("t0.b")));
  h = g.tanh(g.affine(h, p("t1.w"), p("t1.b")));
  return {g.affine(h, p("concept.w"), p("concept.b")), g.affine(h, p("sensitive.w"), p("sensitive.b"))};
}

RealArray Detector::concept_logits(const RealArray& x) const {
  check_batch(x, data_dim_, "detector");
  Graph g;
  const Heads heads = const_cast<Detector&>(*this).build(g, g.constant(x));
  return g.value(heads.concept_logits);
}

RealArray Detector::sensitive_probs(const RealArray& x) const {
  check_batch(x, data_dim_, "detector");
  Graph g;
  const Heads heads = const_cast<Detector&>(*this).build(g, g.constant(x));
  RealArray out = g.value(heads.sensitive_logits);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double m = std::max(out.at(r, 0), out.at(r, 1));
    const double e0 = std::exp(out.at(r, 0) - m);
    const double e1 = std::exp(out.at(r, 1) - m);
    out.at(r, 0) = e0 / (e0 + e1);
    out.at(r, 1) = 1.0 - out.at(r, 0);
  }
  return out;
}

std::vector<Parameter*> Detector::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

TensorList Detector::to_tensors() const {
  TensorList out;
  out.push_back({"det.meta", RealArray::vector({static_cast<double>(data_dim_),
                                                static_cast<double>(num_concepts_),
                                                static_cast<double>(sensitive_)})});
  for (const auto& p : params_) out.push_back({"det." + p.name, p.value});
  return out;
}

Detector Detector::from_tensors(const TensorList& tensors) {
  const RealArray& meta = find_tensor(tensors, "det.meta");
  if (meta.size() != 3) throw ValidationError("perception: malformed 'det.meta' tensor");
  Detector d(static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]),
             static_cast<ConceptId>(meta[2]), 0);
  load_params(d.params_, tensors, "det.");
  return d;
}

Embedder::Embedder(std::size_t data_dim, std::size_t num_concepts, std::uint64_t seed)
    : data_dim_(data_dim), num_concepts_(num_concepts), prototypes_({num_concepts, kEmbedding}) {
  if (num_concepts < 2) throw ValidationError("Embedder: need at least 2 concepts");
  Rng rng(derive_seed(seed, {kTagInit, 2}));
  params_.push_back(make_param("e0.w", {kHidden, data_dim}, data_dim, &rng));
  params_.push_back(make_param("e0.b", {kHidden}, 1, nullptr));
  params_.push_back(make_param("e1.w", {kEmbedding, kHidden}, kHidden, &rng));
  params_.push_back(make_param("e1.b", {kEmbedding}, 1, nullptr));
  params_.push_back(make_param("head.w", {num_concepts, kEmbedding}, kEmbedding, &rng));
  params_.push_back(make_param("head.b", {num_concepts}, 1, nullptr));
}

NodeId Embedder::build_embedding(Graph& g, NodeId x) {
  auto p = [&](const char* name) { return g.parameter(find_param(params_, name)); };
  const NodeId h = g.tanh(g.affine(x, p("e0.w"), p("e0.b")));
  return g.affine(h, p("e1.w"), p("e1.b"));
}

NodeId Embedder::build_logits(Graph& g, NodeId embedding) {
  return g.affine(embedding, g.parameter(find_param(params_, "head.w")),
                  g.parameter(find_param(params_, "head.b")));
}

RealArray Embedder::embed(const RealArray& x) const {
  check_batch(x, data_dim_, "embedder");
  Graph g;
  return g.value(const_cast<Embedder&>(*this).build_embedding(g, g.constant(x)));
}

std::span<const double> Embedder::prototype(ConceptId concept_id) const {
  if (concept_id < 0 || static_cast<std::size_t>(concept_id) >= num_concepts_) {
    throw ValidationError("embedder: no prototype for concept " + std::to_string(concept_id));
  }
  return prototypes_.row(static_cast<std::size_t>(concept_id));
}

void Embedder::compute_prototypes(const std::vector<ConceptRecord>& records) {
  prototypes_ = RealArray({num_concepts_, kEmbedding});
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  const RealArray emb = embed(stack(records, idx, data_dim_));
  for (std::size_t r = 0; r < records.size(); ++r) {
    auto row = prototypes_.row(static_cast<std::size_t>(records[r].concept_id));
    for (std::size_t j = 0; j < kEmbedding; ++j) row[j] += emb.at(r, j);
  }
  for (std::size_t k = 0; k < num_concepts_; ++k) {
    auto row = prototypes_.row(k);
    const double n = std::sqrt(squared_norm(row));
    if (n == 0.0) throw ValidationError("embedder: concept " + std::to_string(k) + " has a zero prototype");
    for (double& v : row) v /= n;
  }
}

std::vector<Parameter*> Embedder::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

TensorList Embedder::to_tensors() const {
  TensorList out;
  out.push_back({"emb.meta", RealArray::vector({static_cast<double>(data_dim_), static_cast<double>(num_concepts_)})});
  for (const auto& p : params_) out.push_back({"emb." + p.name, p.value});
  out.push_back({"emb.prototypes", prototypes_});
  return out;
}

Embedder Embedder::from_tensors(const TensorList& tensors) {
  const RealArray& meta = find_tensor(tensors, "emb.meta");
  if (meta.size() != 2) throw ValidationError("perception: malformed 'emb.meta' tensor");
  Embedder e(static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]), 0);
  load_params(e.params_, tensors, "emb.");
  const RealArray& protos = find_tensor(tensors, "emb.prototypes");
  if (protos.shape() != e.prototypes_.shape()) throw ValidationError("perception: malformed 'emb.prototypes'");
  e.prototypes_ = protos;
  return e;
}

double heldout_accuracy(const Detector& d, const ConceptDataset& data) {
  const auto test = heldout_split(data, true);
  if (test.empty()) return 0.0;
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto pred = classify_batch(d, stack(test, idx, data.dim));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) hits += pred[i] == test[i].concept_id;
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

PerceptionModels train_perception(const ConceptDataset& data, ConceptId sensitive_concept,
                                  const PerceptionConfig& cfg, std::uint64_t seed) {
  if (data.num_concepts < 2) throw ValidationError("train_perception: need at least 2 concepts");
  if (sensitive_concept < 0 || static_cast<std::size_t>(sensitive_concept) >= data.num_concepts) {
    throw ValidationError("train_perception: sensitive concept out of range");
  }
  if (cfg.batch == 0) throw ValidationError("train_perception: batch must be positive");
  const auto train = heldout_split(data, false);
  if (train.empty()) throw ValidationError("train_perception: no training records");

  PerceptionModels out{Detector(data.dim, data.num_concepts, sensitive_concept, seed),
                       Embedder(data.dim, data.num_concepts, seed), 0.0};
  auto det_params = out.detector.parameters();
  auto emb_params = out.embedder.parameters();
  auto det_opt = OptimizerState::create(OptimizerKind::kAdam, cfg.learning_rate, det_params);
  auto emb_opt = OptimizerState::create(OptimizerKind::kAdam, cfg.learning_rate, emb_params);

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {kTagTrain, 100, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      const RealArray x = stack(train, idx, data.dim);
      std::vector<std::size_t> concept_labels(n);
      std::vector<std::size_t> sensitive_labels(n);
      for (std::size_t r = 0; r < n; ++r) {
        concept_labels[r] = static_cast<std::size_t>(train[idx[r]].concept_id);
        sensitive_labels[r] = train[idx[r]].concept_id == sensitive_concept ? 1 : 0;
      }
      {
        Graph g;
        const auto heads = out.detector.build(g, g.constant(x));
        const NodeId loss = g.add(g.softmax_cross_entropy(heads.concept_logits, concept_labels),
                                  g.softmax_cross_entropy(heads.sensitive_logits, sensitive_labels));
        optimizer_step(det_opt, det_params, g.parameter_gradients(g.backward(loss), det_params));
      }
      {
        Graph g;
        const NodeId emb = out.embedder.build_embedding(g, g.constant(x));
        const NodeId loss = g.softmax_cross_entropy(out.embedder.build_logits(g, emb), concept_labels);
        optimizer_step(emb_opt, emb_params, g.parameter_gradients(g.backward(loss), emb_params));
      }
    }
  }
  out.embedder.compute_prototypes(train);
  out.heldout_accuracy = heldout_accuracy(out.detector, data);
  if (out.heldout_accuracy < cfg.min_accuracy) {
    throw GateFailure("perception: held-out concept accuracy " + std::to_string(out.heldout_accuracy) +
                      " is below " + std::to_string(cfg.min_accuracy) +
                      "; increase the dataset separation or the number of perception epochs");
  }
  return out;
}

DetectorScores detect(const Detector& d, const RealArray& x) {
  return detect_batch(d, as_row(x, d.data_dim(), "detect"))[0];
}

std::vector<DetectorScores> detect_batch(const Detector& d, const RealArray& x) {
  const RealArray p = d.sensitive_probs(x);
  std::vector<DetectorScores> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) out[r] = {p.at(r, 0), p.at(r, 1)};
  return out;
}

ConceptId classify_from_logits(std::span<const double> logits) {
  if (logits.empty()) throw ValidationError("classify: empty logits");
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return static_cast<ConceptId>(best);
}

ConceptId classify_top1(const Detector& d, const RealArray& x) {
  return classify_batch(d, as_row(x, d.data_dim(), "classify_top1"))[0];
}

std::vector<ConceptId> classify_batch(const Detector& d, const RealArray& x) {
  const RealArray logits = d.concept_logits(x);
  std::vector<ConceptId> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out[r] = classify_from_logits(logits.row(r));
  return out;
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(squared_norm(a));
  const double nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) throw ValidationError("similarity: zero-norm embedding");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace

double similarity(const Embedder& e, const RealArray& x, ConceptPrompt ref) {
  const RealArray emb = e.embed(as_row(x, e.data_dim(), "similarity"));
  return cosine(emb.row(0), e.prototype(ref.concept_id));
}

double similarity(const Embedder& e, const RealArray& x, const RealArray& ref) {
  RealArray both({2, e.data_dim()});
  const RealArray a = as_row(x, e.data_dim(), "similarity");
  const RealArray b = as_row(ref, e.data_dim(), "similarity");
  std::copy(a.values().begin(), a.values().end(), both.row(0).begin());
  std::copy(b.values().begin(), b.values().end(), both.row(1).begin());
  const RealArray emb = e.embed(both);
  return cosine(emb.row(0), emb.row(1));
}

std::vector<double> similarity_batch(const Embedder& e, const RealArray& x,
                                     std::span<const ConceptPrompt> refs) {
  const RealArray emb = e.embed(x);
  if (refs.size() != emb.rows()) throw ValidationError("similarity_batch: one prompt per row required");
  std::vector<double> out(refs.size());
  for (std::size_t r = 0; r < refs.size(); ++r) out[r] = cosine(emb.row(r), e.prototype(refs[r].concept_id));
  return out;
}

void write_perception(const std::filesystem::path& path, const PerceptionModels& models) {
  TensorList t = models.detector.to_tensors();
  for (auto& nt : models.embedder.to_tensors()) t.push_back(std::move(nt));
  t.push_back({"det.heldout_accuracy", RealArray::scalar(models.heldout_accuracy)});
  write_checkpoint(path, t);
}

PerceptionModels read_perception(const std::filesystem::path& path) {
  const TensorList t = read_checkpoint(path);
  PerceptionModels m{Detector::from_tensors(t), Embedder::from_tensors(t), 0.0};
  if (has_tensor(t, "det.heldout_accuracy")) m.heldout_accuracy = find_tensor(t, "det.heldout_accuracy").item();
  return m;
}

}  // namespace ferl
