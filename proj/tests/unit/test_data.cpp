#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "ferl/checkpoint.hpp"
#include "ferl/concepts.hpp"
#include "ferl/errors.hpp"
#include "ferl/random.hpp"

using namespace ferl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ferl_unit";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("generate_mixture: counts and empirical means near the circle points") {
  const ConceptDataset d = generate_mixture(4, 1000, 2, 2.0, 7);
  CHECK(d.records.size() == 4000);
  for (ConceptId k = 0; k < 4; ++k) {
    const auto recs = d.records_of(k);
    CHECK(recs.size() == 1000);
    double mx = 0.0, my = 0.0;
    for (const auto* r : recs) {
      mx += r->sample[0];
      my += r->sample[1];
    }
    mx /= 1000.0;
    my /= 1000.0;
    const double angle = 2.0 * std::numbers::pi * k / 4.0;
    CHECK(d.means[k][0] == doctest::Approx(2.0 * std::cos(angle)).epsilon(1e-12));
    CHECK(d.means[k][1] == doctest::Approx(2.0 * std::sin(angle)).epsilon(1e-12));
    CHECK(std::abs(mx - d.means[k][0]) < 0.02);
    CHECK(std::abs(my - d.means[k][1]) < 0.02);
  }
}

TEST_CASE("generate_mixture: determinism and degenerate inputs") {
  const ConceptDataset a = generate_mixture(3, 50, 3, 1.5, 11);
  const ConceptDataset b = generate_mixture(3, 50, 3, 1.5, 11);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].concept_id == b.records[i].concept_id);
    CHECK(a.records[i].sample == b.records[i].sample);
  }
  CHECK(generate_mixture(3, 50, 3, 1.5, 12).records[0].sample != a.records[0].sample);
  CHECK_THROWS_AS(generate_mixture(3, 50, 2, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(generate_mixture(3, 50, 1, 1.0, 1), ValidationError);
  CHECK_THROWS_AS(generate_mixture(1, 50, 2, 1.0, 1), ValidationError);
}

TEST_CASE("make_prompt_pair: definition and exclusion") {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const PromptPair p = make_prompt_pair(0, 4, s);
    CHECK(p.prompt.concept_id == 0);
    CHECK(p.counterpart.concept_id != 0);
    CHECK(p.counterpart.concept_id >= 1);
    CHECK(p.counterpart.concept_id <= 3);
    CHECK(p.counterpart.template_id == p.prompt.template_id);
  }
  CHECK_THROWS_AS(make_prompt_pair(0, 1, 0), ValidationError);
  CHECK_THROWS_AS(make_prompt_pair(0, 2, 0, {1}), ValidationError);
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto c = make_prompt_pair(2, 6, s, {0, 2, 4}).counterpart.concept_id;
    CHECK((c == 1 || c == 3 || c == 5));
  }
}

TEST_CASE("make_prompt_pair: counterpart distribution is uniform") {
  std::map<ConceptId, int> counts;
  const int n = 10000;
  for (std::uint64_t s = 0; s < n; ++s) ++counts[make_prompt_pair(1, 4, derive_seed(3, {s})).counterpart.concept_id];
  CHECK(counts.size() == 3);
  const double p = 1.0 / 3.0;
  const double sd = std::sqrt(n * p * (1.0 - p));
  double chi2 = 0.0;
  for (auto [k, c] : counts) {
    CHECK(k != 1);
    CHECK(std::abs(c - n * p) < 3.0 * sd);
    chi2 += (c - n * p) * (c - n * p) / (n * p);
  }
  // 99.9% quantile of chi-square with 2 degrees of freedom.
  CHECK(chi2 < 13.82);
}

TEST_CASE("build_retain_set: exclusion, purity and coverage") {
  const ConceptDataset d = generate_mixture(4, 100, 2, 2.0, 1);
  const ConceptSet erase{0};
  const RetainSet r = build_retain_set(d, erase, 300, 9);
  CHECK(r.records.size() == 300);
  std::map<ConceptId, int> counts;
  for (const auto& rec : r.records) {
    CHECK(!erase.contains(rec.prompt.concept_id));
    ++counts[rec.prompt.concept_id];
    bool from_data = false;
    for (const auto* dr : d.records_of(rec.prompt.concept_id)) from_data |= dr->sample == rec.reference;
    CHECK(from_data);
  }
  for (ConceptId k : {1, 2, 3}) CHECK(counts[k] >= 300 / (3 * 3));

  const ConceptDataset ten = generate_mixture(10, 10, 2, 2.0, 1);
  CHECK_THROWS_AS(build_retain_set(ten, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 10, 1), ValidationError);
}

TEST_CASE("dataset file: format, round trip and byte reproducibility") {
  const ConceptDataset d = generate_mixture(3, 5, 2, 2.0, 21);
  const fs::path a = scratch("data_a.txt"), b = scratch("data_b.txt");
  write_dataset(a, d);
  write_dataset(b, generate_mixture(3, 5, 2, 2.0, 21));
  CHECK(slurp(a) == slurp(b));
  std::istringstream lines(slurp(a));
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  CHECK(header == "FERL-DATA v1 dim=2 concepts=3 seed=21");
  CHECK(first.rfind("0\t", 0) == 0);
  const ConceptDataset back = read_dataset(a);
  REQUIRE(back.records.size() == d.records.size());
  for (std::size_t i = 0; i < d.records.size(); ++i) CHECK(back.records[i].sample == d.records[i].sample);

  const fs::path bad = scratch("data_bad.txt");
  std::ofstream(bad) << "FERL-DATA v1 dim=2 concepts=3 seed=1\n0\t1.0\n";
  CHECK_THROWS_AS(read_dataset(bad), ValidationError);
}

TEST_CASE("canonical_order: independent of record order") {
  const ConceptDataset d = generate_mixture(3, 20, 2, 2.0, 5);
  auto shuffled = d.records;
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto a = canonical_order(d.records);
  const auto b = canonical_order(shuffled);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].sample == b[i].sample);
}

TEST_CASE("checkpoint: round trip, layout, bad magic and truncation") {
  TensorList t{{"a", RealArray::matrix(2, 2, {1, 2, 3, 4.5})}, {"scalar", RealArray::scalar(-0.25)}};
  const std::string bytes = encode_checkpoint(t);
  CHECK(bytes.substr(0, 5) == "FERL1");
  // name length, name, rank, dims, values.
  CHECK(bytes.size() == 5 + (8 + 1 + 8 + 16 + 32) + (8 + 6 + 8 + 0 + 8));
  CHECK(static_cast<unsigned char>(bytes[5]) == 1);
  const TensorList back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].value == t[0].value);
  CHECK(back[1].value.item() == -0.25);
  CHECK(find_tensor(back, "scalar").item() == -0.25);
  CHECK_THROWS_AS(find_tensor(back, "missing"), ValidationError);

  std::string bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL("expected failure");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("FERL1") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ValidationError);

  const fs::path p = scratch("t.ckpt");
  write_checkpoint(p, t);
  CHECK(slurp(p) == bytes);
  CHECK(read_checkpoint(p)[0].value == t[0].value);
  CHECK_THROWS_AS(read_checkpoint(scratch("does_not_exist.ckpt")), UsageError);
}

TEST_CASE("derive_seed and uniform_draw are pure") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
  const double u = uniform_draw(5, {1, 2});
  CHECK(u == uniform_draw(5, {1, 2}));
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
}
