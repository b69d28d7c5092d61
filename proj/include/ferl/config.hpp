#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "ferl/baselines.hpp"
#include "ferl/flow.hpp"
#include "ferl/grpo.hpp"
#include "ferl/optim.hpp"
#include "ferl/perception.hpp"
#include "ferl/rewards.hpp"
#include "ferl/scheduler.hpp"

namespace ferl {

struct DataConfig {
  std::string dataset_path;  // empty: generate from the parameters below
  std::size_t num_concepts = 4;
  std::size_t per_concept = 1000;
  std::size_t dim = 2;
  double separation = 2.0;
  ConceptId sensitive_concept = 0;
};

struct EraseConfig {
  std::size_t epochs = 120;
  std::size_t batches_per_epoch = 16;
  std::size_t prompts_per_batch = 4;
  std::size_t retain_size = 300;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool dual_path = true;
};

struct EvalConfig {
  std::size_t n = 500;
  std::uint64_t seed = 1;
  /// Per-concept hit rate every base model must reach.
  double base_asr_gate = 90.0;
  /// cmd_eval gates: fail when asr_e exceeds / asr_k falls below these.
  double max_asr_e = 100.0;
  double min_asr_k = 0.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  std::string base_checkpoint;  // empty: <out_dir>/base.ckpt
  DataConfig data;
  FieldShape field;
  FlowTrainConfig base;
  PerceptionConfig perception;
  SamplerConfig sampler;
  RewardConfig reward;
  UpdateConfig update;
  SchedulerConfig scheduler;
  EraseConfig erase;
  EsdConfig esd;
  DveConfig dve;
  EvalConfig eval;
};

/// Defaults; the reward erase set is {0}.
RunConfig default_config();

/// Flat "key = value" text, '#' starts a comment. Unknown keys, malformed
/// values and constraint violations throw ValidationError naming the key
/// and line. Keys not present keep their defaults.
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);

/// Cross-field checks; `lines` maps keys to their source line for messages.
void validate(const RunConfig& cfg, const std::string& source = "config",
              const std::map<std::string, std::size_t>& lines = {});

/// Overrides one key as if it appeared in a config file.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every key in sorted order, one "key = value" line each.
std::string effective_config(const RunConfig& cfg);
/// FNV-1a over the canonical effective config.
std::string config_digest(const RunConfig& cfg);

/// Derived links: update.sigma mirrors sampler.sigma, dve.erase_set mirrors
/// the reward erase set, and --no-dual-path pins rho to 0.
void apply_links(RunConfig& cfg);

}  // namespace ferl
