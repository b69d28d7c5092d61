#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <utility>
#include <vector>

#include "ferl/tensor.hpp"

namespace ferl {

using ConceptId = int;
inline constexpr ConceptId kNullConcept = -1;
/// Number of prompt templates per concept ("an image of a <k> on a road", ...).
inline constexpr int kNumTemplates = 5;

struct ConceptPrompt {
  ConceptId concept_id = 0;
  int template_id = 0;

  bool is_null() const { return concept_id == kNullConcept; }
  friend bool operator==(const ConceptPrompt&, const ConceptPrompt&) = default;
};

using ConceptSet = std::set<ConceptId>;

struct ConceptRecord {
  ConceptId concept_id = 0;
  RealArray sample;
};

struct ConceptDataset {
  std::size_t num_concepts = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  double separation = 0.0;
  double noise = 0.1;
  std::vector<RealArray> means;  // generating means; empirical means for loaded files
  std::vector<ConceptRecord> records;

  std::vector<const ConceptRecord*> records_of(ConceptId concept_id) const;
};

/// Concept k ~ Normal(mu_k, 0.1^2 I), mu_k on a circle of radius `separation`
/// in the first two coordinates. Records are grouped by concept, in order.
ConceptDataset generate_mixture(std::size_t num_concepts, std::size_t per_concept,
                                std::size_t dim, double separation, std::uint64_t seed);

struct PromptPair {
  ConceptPrompt prompt;       // c: names the target concept
  ConceptPrompt counterpart;  // c-top: same template, a different concept
};

/// c-top is drawn uniformly from the concepts that are neither `target` nor
/// in `excluded`.
PromptPair make_prompt_pair(ConceptId target, std::size_t num_concepts, std::uint64_t seed,
                            const ConceptSet& excluded = {});

struct RetainRecord {
  ConceptPrompt prompt;
  RealArray reference;  // x_r
};

struct RetainSet {
  std::vector<RetainRecord> records;
};

RetainSet build_retain_set(const ConceptDataset& data, const ConceptSet& erase_set,
                           std::size_t size, std::uint64_t seed);

/// Text format: header "FERL-DATA v1 dim=D concepts=K seed=S" then one
/// "concept_id<TAB>v1,v2,...,vD" line per record.
void write_dataset(const std::filesystem::path& path, const ConceptDataset& data);
ConceptDataset read_dataset(const std::filesystem::path& path);

/// Deterministic order independent of record order: by concept, then by
/// sample values lexicographically.
std::vector<ConceptRecord> canonical_order(std::vector<ConceptRecord> records);

}  // namespace ferl
