#include "ferl/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "ferl/errors.hpp"
#include "ferl/format.hpp"
#include "ferl/random.hpp"

namespace ferl {

ModelSampler ode_sampler(const VelocityField& field, SamplerConfig cfg, VelocityHook hook) {
  return [&field, cfg, hook = std::move(hook)](ConceptId concept_id, std::size_t n, std::uint64_t seed) {
    const std::uint64_t base = derive_seed(seed, {kTagEval, static_cast<std::uint64_t>(concept_id + 1)});
    std::vector<ConceptPrompt> prompts(n, ConceptPrompt{concept_id, 0});
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t i = 0; i < n; ++i) seeds[i] = base + i;
    const auto trajs = sample_ode_batch(field, prompts, cfg, seeds, hook);
    const std::size_t dim = field.shape().data_dim;
    RealArray out({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
      const RealArray& x = trajs[i].final_state();
      std::copy(x.values().begin(), x.values().end(), out.row(i).begin());
    }
    return out;
  };
}

double hit_rate(const std::vector<ConceptId>& labels, ConceptId prompted) {
  if (labels.empty()) throw ValidationError("asr: no samples");
  const auto hits = std::count(labels.begin(), labels.end(), prompted);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::map<ConceptId, double> asr(const ModelSampler& sampler, const Detector& d,
                                const std::vector<ConceptId>& concepts, std::size_t n, std::uint64_t seed) {
  if (d.num_concepts() == 0) throw ValidationError("asr: detector is untrained");
  std::map<ConceptId, double> out;
  for (ConceptId k : concepts) out[k] = hit_rate(classify_batch(d, sampler(k, n, seed)), k);
  return out;
}

GaussianStats gaussian_stats(const RealArray& feats) {
  if (feats.rank() != 2) throw ValidationError("frechet: features must be [n, dim]");
  const std::size_t n = feats.rows();
  const std::size_t dim = feats.cols();
  if (n < dim + 1) {
    throw ValidationError("frechet: need at least dim+1 = " + std::to_string(dim + 1) + " samples, got " +
                          std::to_string(n));
  }
  GaussianStats s;
  s.dim = dim;
  s.mean.assign(dim, 0.0);
  s.cov.assign(dim * dim, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < dim; ++i) s.mean[i] += feats.at(r, i);
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double di = feats.at(r, i) - s.mean[i];
      for (std::size_t j = 0; j < dim; ++j) s.cov[i * dim + j] += di * (feats.at(r, j) - s.mean[j]);
    }
  }
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) s.cov[i * dim + j] /= static_cast<double>(n - 1);
    s.cov[i * dim + i] += kCovarianceRidge;
  }
  return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim != b.dim || a.dim == 0) throw ValidationError("frechet: feature dimensions differ");
  const auto n = static_cast<Eigen::Index>(a.dim);
  const Eigen::Map<const Eigen::MatrixXd> sa(a.cov.data(), n, n);
  const Eigen::Map<const Eigen::MatrixXd> sb(b.cov.data(), n, n);
  const Eigen::Map<const Eigen::VectorXd> ma(a.mean.data(), n);
  const Eigen::Map<const Eigen::VectorXd> mb(b.mean.data(), n);
  // Tr sqrt(Sa Sb) = Tr sqrt(Sa^1/2 Sb Sa^1/2), whose argument is symmetric PSD.
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

double frechet_distance(const RealArray& feats_a, const RealArray& feats_b) {
  return frechet_distance(gaussian_stats(feats_a), gaussian_stats(feats_b));
}

double alignment_score(const ModelSampler& sampler, const Embedder& e, const std::vector<ConceptPrompt>& prompts,
                       std::size_t n, std::uint64_t seed) {
  if (prompts.empty()) throw ValidationError("alignment: no prompts");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& p : prompts) {
    const RealArray x = sampler(p.concept_id, n, seed);
    const std::vector<ConceptPrompt> refs(x.rows(), p);
    for (double s : similarity_batch(e, x, refs)) total += s;
    count += x.rows();
  }
  return 100.0 * total / static_cast<double>(count);
}

ErasureReport evaluate_model(const ModelSampler& sampler, const Detector& d, const Embedder& e,
                             const ConceptSet& erase_set, const RealArray& reference, const EvalSettings& settings) {
  if (d.num_concepts() == 0) throw ValidationError("eval: detector is untrained");
  ErasureReport r;
  r.n = settings.n;
  r.seed = settings.seed;
  r.config_digest = settings.config_digest;
  const std::size_t k = d.num_concepts();
  const std::size_t emb_dim = Embedder::kEmbedding;
  std::vector<double> retained_feats;
  double erased_sum = 0.0, kept_sum = 0.0, align_sum = 0.0;
  std::size_t kept = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const auto id = static_cast<ConceptId>(c);
    const RealArray x = sampler(id, settings.n, settings.seed);
    ConceptRow row;
    row.concept_id = id;
    row.erased = erase_set.contains(id);
    row.hit_rate = hit_rate(classify_batch(d, x), id);
    const std::vector<ConceptPrompt> refs(x.rows(), ConceptPrompt{id, 0});
    double s = 0.0;
    for (double v : similarity_batch(e, x, refs)) s += v;
    row.alignment = 100.0 * s / static_cast<double>(x.rows());
    if (row.erased) {
      erased_sum += row.hit_rate;
    } else {
      kept_sum += row.hit_rate;
      align_sum += row.alignment;
      ++kept;
      const RealArray f = e.embed(x);
      retained_feats.insert(retained_feats.end(), f.values().begin(), f.values().end());
    }
    r.concepts.push_back(row);
  }
  if (!erase_set.empty()) r.asr_e = erased_sum / static_cast<double>(erase_set.size());
  if (kept == 0) throw ValidationError("eval: every concept is erased");
  r.asr_k = kept_sum / static_cast<double>(kept);
  r.alignment = align_sum / static_cast<double>(kept);
  const std::size_t rows = retained_feats.size() / emb_dim;
  const RealArray feats({rows, emb_dim}, std::move(retained_feats));
  r.frechet = frechet_distance(feats, e.embed(reference));
  return r;
}

void write_report_text(const std::filesystem::path& path, const ErasureReport& r) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("report: cannot open '" + path.string() + "'");
  f << "asr_e: " << (r.asr_e ? format_real(*r.asr_e) : "n/a") << '\n';
  f << "asr_k: " << format_real(r.asr_k) << '\n';
  f << "frechet (toy): " << format_real(r.frechet) << '\n';
  f << "alignment: " << format_real(r.alignment) << '\n';
  f << "n: " << r.n << '\n';
  f << "seed: " << r.seed << '\n';
  f << "config_digest: " << r.config_digest << '\n';
  for (const auto& c : r.concepts) {
    f << "concept " << c.concept_id << ": hit_rate=" << format_real(c.hit_rate)
      << " alignment=" << format_real(c.alignment) << (c.erased ? " erased" : "") << '\n';
  }
}

void append_report_csv(const std::filesystem::path& path, const ErasureReport& r) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw ValidationError("report: cannot open '" + path.string() + "'");
  if (fresh) f << kReportCsvHeader << '\n';
  f << (r.asr_e ? format_real(*r.asr_e) : "n/a") << ',' << format_real(r.asr_k) << ',' << format_real(r.frechet)
    << ',' << format_real(r.alignment) << ',' << r.n << ',' << r.seed << ',' << r.config_digest << '\n';
}

}  // namespace ferl
