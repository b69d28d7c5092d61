#include "ferl/concepts.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "ferl/errors.hpp"
#include "ferl/random.hpp"

namespace ferl {

std::vector<const ConceptRecord*> ConceptDataset::records_of(ConceptId concept_id) const {
  std::vector<const ConceptRecord*> out;
  for (const auto& r : records) {
    if (r.concept_id == concept_id) out.push_back(&r);
  }
  return out;
}

ConceptDataset generate_mixture(std::size_t num_concepts, std::size_t per_concept,
                                std::size_t dim, double separation, std::uint64_t seed) {
  if (num_concepts < 2) throw ValidationError("generate_mixture: need at least 2 concepts");
  if (dim < 2) throw ValidationError("generate_mixture: dim must be >= 2, got " + std::to_string(dim));
  if (!(separation > 0.0)) throw ValidationError("generate_mixture: separation must be > 0");

  ConceptDataset data;
  data.num_concepts = num_concepts;
  data.dim = dim;
  data.seed = seed;
  data.separation = separation;
  for (std::size_t k = 0; k < num_concepts; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_concepts);
    RealArray mu({dim});
    mu[0] = separation * std::cos(angle);
    mu[1] = separation * std::sin(angle);
    data.means.push_back(std::move(mu));
  }

  Rng rng(derive_seed(seed, {kTagData}));
  std::normal_distribution<double> normal(0.0, 1.0);
  data.records.reserve(num_concepts * per_concept);
  for (std::size_t k = 0; k < num_concepts; ++k) {
    for (std::size_t i = 0; i < per_concept; ++i) {
      RealArray x({dim});
      for (std::size_t d = 0; d < dim; ++d) x[d] = data.means[k][d] + data.noise * normal(rng);
      data.records.push_back({static_cast<ConceptId>(k), std::move(x)});
    }
  }
  return data;
}

PromptPair make_prompt_pair(ConceptId target, std::size_t num_concepts, std::uint64_t seed,
                            const ConceptSet& excluded) {
  if (num_concepts < 2) throw ValidationError("make_prompt_pair: need at least 2 concepts");
  if (target < 0 || static_cast<std::size_t>(target) >= num_concepts) {
    throw ValidationError("make_prompt_pair: target concept " + std::to_string(target) + " out of range");
  }
  std::vector<ConceptId> candidates;
  for (std::size_t k = 0; k < num_concepts; ++k) {
    const auto id = static_cast<ConceptId>(k);
    if (id != target && !excluded.contains(id)) candidates.push_back(id);
  }
  if (candidates.empty()) throw ValidationError("make_prompt_pair: no concept left for the counterpart prompt");
  Rng rng(seed);
  const int tmpl = std::uniform_int_distribution<int>(0, kNumTemplates - 1)(rng);
  const auto pick = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
  return {{target, tmpl}, {candidates[pick], tmpl}};
}

RetainSet build_retain_set(const ConceptDataset& data, const ConceptSet& erase_set,
                           std::size_t size, std::uint64_t seed) {
  std::vector<std::vector<const ConceptRecord*>> by_concept;
  std::vector<ConceptId> kept;
  for (std::size_t k = 0; k < data.num_concepts; ++k) {
    const auto id = static_cast<ConceptId>(k);
    if (erase_set.contains(id)) continue;
    auto recs = data.records_of(id);
    if (recs.empty()) continue;
    kept.push_back(id);
    by_concept.push_back(std::move(recs));
  }
  if (kept.empty()) throw ValidationError("build_retain_set: the erase set covers every concept");

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_concept(0, kept.size() - 1);
  std::uniform_int_distribution<int> pick_template(0, kNumTemplates - 1);
  RetainSet out;
  out.records.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t c = pick_concept(rng);
    const auto& recs = by_concept[c];
    const std::size_t r = std::uniform_int_distribution<std::size_t>(0, recs.size() - 1)(rng);
    out.records.push_back({{kept[c], pick_template(rng)}, recs[r]->sample});
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const ConceptDataset& data) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("write_dataset: cannot open '" + path.string() + "'");
  f << "FERL-DATA v1 dim=" << data.dim << " concepts=" << data.num_concepts << " seed=" << data.seed
    << '\n';
  char buf[32];
  for (const auto& r : data.records) {
    f << r.concept_id << '\t';
    for (std::size_t d = 0; d < r.sample.size(); ++d) {
      if (d) f << ',';
      auto res = std::to_chars(buf, buf + sizeof(buf), r.sample[d]);
      f.write(buf, res.ptr - buf);
    }
    f << '\n';
  }
}

ConceptDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("read_dataset: cannot open '" + path.string() + "'");
  std::string header;
  std::getline(f, header);
  ConceptDataset data;
  {
    std::istringstream hs(header);
    std::string magic, version, dim_kv, concepts_kv, seed_kv;
    hs >> magic >> version >> dim_kv >> concepts_kv >> seed_kv;
    if (magic != "FERL-DATA" || version != "v1" || dim_kv.rfind("dim=", 0) != 0 ||
        concepts_kv.rfind("concepts=", 0) != 0 || seed_kv.rfind("seed=", 0) != 0) {
      throw ValidationError(path.string() + ":1: expected header \"FERL-DATA v1 dim=D concepts=K seed=S\"");
    }
    data.dim = std::stoul(dim_kv.substr(4));
    data.num_concepts = std::stoul(concepts_kv.substr(9));
    data.seed = std::stoull(seed_kv.substr(5));
  }
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": missing tab separator");
    }
    ConceptRecord rec;
    rec.concept_id = std::stoi(line.substr(0, tab));
    if (rec.concept_id < 0 || static_cast<std::size_t>(rec.concept_id) >= data.num_concepts) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": concept id out of range");
    }
    std::vector<double> values;
    const char* p = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc()) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad number");
      }
      values.push_back(v);
      p = res.ptr;
      if (p < end && *p == ',') ++p;
    }
    if (values.size() != data.dim) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(data.dim) + " values");
    }
    rec.sample = RealArray::vector(std::move(values));
    data.records.push_back(std::move(rec));
  }
  for (std::size_t k = 0; k < data.num_concepts; ++k) {
    RealArray mu({data.dim});
    std::size_t n = 0;
    for (const auto& r : data.records) {
      if (r.concept_id != static_cast<ConceptId>(k)) continue;
      for (std::size_t d = 0; d < data.dim; ++d) mu[d] += r.sample[d];
      ++n;
    }
    for (std::size_t d = 0; d < data.dim && n; ++d) mu[d] /= static_cast<double>(n);
    data.means.push_back(std::move(mu));
  }
  return data;
}

std::vector<ConceptRecord> canonical_order(std::vector<ConceptRecord> records) {
  std::sort(records.begin(), records.end(), [](const ConceptRecord& a, const ConceptRecord& b) {
    if (a.concept_id != b.concept_id) return a.concept_id < b.concept_id;
    return std::lexicographical_compare(a.sample.values().begin(), a.sample.values().end(),
                                        b.sample.values().begin(), b.sample.values().end());
  });
  return records;
}

}  // namespace ferl
