#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ferl/concepts.hpp"
#include "ferl/flow.hpp"
#include "ferl/perception.hpp"

namespace ferl {

/// Produces `n` final samples [n, D] for a prompted concept.
using ModelSampler = std::function<RealArray(ConceptId concept_id, std::size_t n, std::uint64_t seed)>;

/// Euler ODE sampler over `field`, optionally with a velocity hook.
/// Sample i of concept k uses seed derive_seed(seed, {eval, k}) + i.
ModelSampler ode_sampler(const VelocityField& field, SamplerConfig cfg, VelocityHook hook = {});

/// Percentage of samples whose top-1 class is the prompted concept, per concept.
std::map<ConceptId, double> asr(const ModelSampler& sampler, const Detector& d,
                                const std::vector<ConceptId>& concepts, std::size_t n, std::uint64_t seed);

/// Percentage of `labels` equal to `prompted`.
double hit_rate(const std::vector<ConceptId>& labels, ConceptId prompted);

struct GaussianStats {
  std::vector<double> mean;
  std::vector<double> cov;  // row-major dim x dim
  std::size_t dim = 0;
};

inline constexpr double kCovarianceRidge = 1e-6;

/// Sample mean and unbiased covariance plus 1e-6 I of a [n, dim] set
/// (n >= dim + 1).
GaussianStats gaussian_stats(const RealArray& feats);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 sqrt(S_a S_b)).
double frechet_distance(const GaussianStats& a, const GaussianStats& b);
double frechet_distance(const RealArray& feats_a, const RealArray& feats_b);

/// Mean similarity(x0, prompt) over `n` samples per prompt, times 100.
double alignment_score(const ModelSampler& sampler, const Embedder& e, const std::vector<ConceptPrompt>& prompts,
                       std::size_t n, std::uint64_t seed);

struct ConceptRow {
  ConceptId concept_id = 0;
  bool erased = false;
  double hit_rate = 0.0;
  double alignment = 0.0;
};

struct ErasureReport {
  std::optional<double> asr_e;  // undefined for an empty erase set
  double asr_k = 0.0;
  double frechet = 0.0;
  double alignment = 0.0;
  std::vector<ConceptRow> concepts;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct EvalSettings {
  std::size_t n = 500;
  std::uint64_t seed = 0;
  std::string config_digest;
};

/// ASR over every concept, alignment over retained prompts, and the
/// Frechet distance between retained-concept sample embeddings and the
/// embeddings of `reference` ([m, D] data samples of the retained concepts).
ErasureReport evaluate_model(const ModelSampler& sampler, const Detector& d, const Embedder& e,
                             const ConceptSet& erase_set, const RealArray& reference, const EvalSettings& settings);

/// "key: value" lines.
void write_report_text(const std::filesystem::path& path, const ErasureReport& r);
inline constexpr const char* kReportCsvHeader = "asr_e,asr_k,frechet,alignment,n,seed,config_digest";
/// Appends one row; the header is written only when the file is new or empty.
void append_report_csv(const std::filesystem::path& path, const ErasureReport& r);

}  // namespace ferl
