#include "ferl/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "ferl/checkpoint.hpp"
#include "ferl/errors.hpp"
#include "ferl/format.hpp"

namespace ferl {

namespace {

// Raised by value parsers and range checks; the caller adds key and line.
struct BadValue {
  std::string what;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_real(const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw BadValue{"expected a real number, got '" + v + "'"};
  return out;
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw BadValue{"expected a non-negative integer, got '" + v + "'"};
  }
  return out;
}

long long parse_int(const std::string& v) {
  long long out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw BadValue{"expected an integer, got '" + v + "'"};
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw BadValue{"expected true or false, got '" + v + "'"};
}

ConceptSet parse_set(const std::string& v) {
  ConceptSet out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const long long id = parse_int(item);
    if (id < 0) throw BadValue{"concept ids must be >= 0"};
    out.insert(static_cast<ConceptId>(id));
  }
  return out;
}

std::string format_set(const ConceptSet& s) {
  std::string out;
  for (ConceptId id : s) {
    if (!out.empty()) out += ',';
    out += std::to_string(id);
  }
  return out;
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Entry real_entry(std::string key, T RunConfig::*group, double T::*field) {
  return {std::move(key), [=](RunConfig& c, const std::string& v) { (c.*group).*field = parse_real(v); },
          [=](const RunConfig& c) { return format_real((c.*group).*field); }};
}

template <typename T, typename U>
Entry uint_entry(std::string key, T RunConfig::*group, U T::*field) {
  return {std::move(key),
          [=](RunConfig& c, const std::string& v) { (c.*group).*field = static_cast<U>(parse_uint(v)); },
          [=](const RunConfig& c) { return std::to_string((c.*group).*field); }};
}

template <typename T>
Entry bool_entry(std::string key, T RunConfig::*group, bool T::*field) {
  return {std::move(key), [=](RunConfig& c, const std::string& v) { (c.*group).*field = parse_bool(v); },
          [=](const RunConfig& c) { return std::string((c.*group).*field ? "true" : "false"); }};
}

template <typename T>
Entry concept_entry(std::string key, T RunConfig::*group, ConceptId T::*field, bool allow_null) {
  return {std::move(key),
          [=](RunConfig& c, const std::string& v) {
            const long long id = parse_int(v);
            if (id < (allow_null ? -1 : 0)) throw BadValue{allow_null ? "expected a concept id or -1" : "expected a concept id"};
            (c.*group).*field = static_cast<ConceptId>(id);
          },
          [=](const RunConfig& c) { return std::to_string((c.*group).*field); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_uint(v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    t.push_back({"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
                 [](const RunConfig& c) { return c.out_dir; }});
    t.push_back({"base_checkpoint", [](RunConfig& c, const std::string& v) { c.base_checkpoint = v; },
                 [](const RunConfig& c) { return c.base_checkpoint; }});
    t.push_back({"dataset_path", [](RunConfig& c, const std::string& v) { c.data.dataset_path = v; },
                 [](const RunConfig& c) { return c.data.dataset_path; }});
    t.push_back(uint_entry("num_concepts", &RunConfig::data, &DataConfig::num_concepts));
    t.push_back(uint_entry("per_concept", &RunConfig::data, &DataConfig::per_concept));
    t.push_back(uint_entry("data_dim", &RunConfig::data, &DataConfig::dim));
    t.push_back(real_entry("separation", &RunConfig::data, &DataConfig::separation));
    t.push_back(concept_entry("sensitive_concept", &RunConfig::data, &DataConfig::sensitive_concept, false));

    t.push_back(uint_entry("cond_dim", &RunConfig::field, &FieldShape::cond_dim));
    t.push_back(uint_entry("hidden", &RunConfig::field, &FieldShape::hidden));
    t.push_back(uint_entry("hidden_layers", &RunConfig::field, &FieldShape::hidden_layers));
    t.push_back({"activation",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "tanh") c.field.activation = Activation::kTanh;
                   else if (v == "relu") c.field.activation = Activation::kRelu;
                   else throw BadValue{"expected tanh or relu, got '" + v + "'"};
                 },
                 [](const RunConfig& c) { return std::string(c.field.activation == Activation::kTanh ? "tanh" : "relu"); }});

    t.push_back(uint_entry("base_steps", &RunConfig::base, &FlowTrainConfig::steps));
    t.push_back(uint_entry("base_batch", &RunConfig::base, &FlowTrainConfig::batch));
    t.push_back(real_entry("base_lr", &RunConfig::base, &FlowTrainConfig::learning_rate));
    t.push_back(real_entry("null_prob", &RunConfig::base, &FlowTrainConfig::null_prob));

    t.push_back(uint_entry("perception_epochs", &RunConfig::perception, &PerceptionConfig::epochs));
    t.push_back(uint_entry("perception_batch", &RunConfig::perception, &PerceptionConfig::batch));
    t.push_back(real_entry("perception_lr", &RunConfig::perception, &PerceptionConfig::learning_rate));
    t.push_back(real_entry("min_accuracy", &RunConfig::perception, &PerceptionConfig::min_accuracy));

    t.push_back(uint_entry("steps", &RunConfig::sampler, &SamplerConfig::steps));
    t.push_back(real_entry("sigma", &RunConfig::sampler, &SamplerConfig::sigma));

    t.push_back(real_entry("alpha", &RunConfig::reward, &RewardConfig::alpha));
    t.push_back(real_entry("beta", &RunConfig::reward, &RewardConfig::beta));
    t.push_back(real_entry("gamma", &RunConfig::reward, &RewardConfig::gamma));
    t.push_back(real_entry("lambda", &RunConfig::reward, &RewardConfig::lambda));
    t.push_back({"erase_set", [](RunConfig& c, const std::string& v) { c.reward.erase_set = parse_set(v); },
                 [](const RunConfig& c) { return format_set(c.reward.erase_set); }});
    t.push_back(bool_entry("sensitive_mode", &RunConfig::reward, &RewardConfig::sensitive_mode));

    t.push_back(uint_entry("group_size", &RunConfig::update, &UpdateConfig::group_size));
    t.push_back(real_entry("clip_epsilon", &RunConfig::update, &UpdateConfig::clip_epsilon));
    t.push_back(real_entry("kappa", &RunConfig::update, &UpdateConfig::kappa));
    t.push_back(uint_entry("epochs_per_rollout", &RunConfig::update, &UpdateConfig::epochs_per_rollout));

    t.push_back(real_entry("ema", &RunConfig::scheduler, &SchedulerConfig::ema));
    t.push_back(real_entry("delta", &RunConfig::scheduler, &SchedulerConfig::delta));
    t.push_back(real_entry("tau_high", &RunConfig::scheduler, &SchedulerConfig::tau_high));
    t.push_back(real_entry("tau_low", &RunConfig::scheduler, &SchedulerConfig::tau_low));
    t.push_back(real_entry("rho_min", &RunConfig::scheduler, &SchedulerConfig::rho_min));
    t.push_back(real_entry("rho_max", &RunConfig::scheduler, &SchedulerConfig::rho_max));
    t.push_back(real_entry("rho0", &RunConfig::scheduler, &SchedulerConfig::rho0));

    t.push_back(uint_entry("epochs", &RunConfig::erase, &EraseConfig::epochs));
    t.push_back(uint_entry("batches_per_epoch", &RunConfig::erase, &EraseConfig::batches_per_epoch));
    t.push_back(uint_entry("prompts_per_batch", &RunConfig::erase, &EraseConfig::prompts_per_batch));
    t.push_back(uint_entry("retain_size", &RunConfig::erase, &EraseConfig::retain_size));
    t.push_back(real_entry("lr", &RunConfig::erase, &EraseConfig::learning_rate));
    t.push_back({"optimizer",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "adam") c.erase.optimizer = OptimizerKind::kAdam;
                   else if (v == "sgd") c.erase.optimizer = OptimizerKind::kSgd;
                   else throw BadValue{"expected adam or sgd, got '" + v + "'"};
                 },
                 [](const RunConfig& c) { return std::string(c.erase.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"); }});
    t.push_back(bool_entry("dual_path", &RunConfig::erase, &EraseConfig::dual_path));

    t.push_back(real_entry("esd_eta", &RunConfig::esd, &EsdConfig::eta));
    t.push_back(uint_entry("esd_steps", &RunConfig::esd, &EsdConfig::steps));
    t.push_back(uint_entry("esd_batch", &RunConfig::esd, &EsdConfig::batch));
    t.push_back(real_entry("esd_lr", &RunConfig::esd, &EsdConfig::learning_rate));
    t.push_back(concept_entry("dve_anchor", &RunConfig::dve, &DveConfig::anchor, true));
    t.push_back(real_entry("dve_gamma", &RunConfig::dve, &DveConfig::gamma));
    t.push_back(real_entry("dve_tau", &RunConfig::dve, &DveConfig::tau));
    t.push_back(real_entry("dve_t_early", &RunConfig::dve, &DveConfig::t_early));

    t.push_back(uint_entry("eval_n", &RunConfig::eval, &EvalConfig::n));
    t.push_back(uint_entry("eval_seed", &RunConfig::eval, &EvalConfig::seed));
    t.push_back(real_entry("base_asr_gate", &RunConfig::eval, &EvalConfig::base_asr_gate));
    t.push_back(real_entry("max_asr_e", &RunConfig::eval, &EvalConfig::max_asr_e));
    t.push_back(real_entry("min_asr_k", &RunConfig::eval, &EvalConfig::min_asr_k));
    std::sort(t.begin(), t.end(), [](const Entry& a, const Entry& b) { return a.key < b.key; });
    return t;
  }();
  return table;
}

const Entry* find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

}  // namespace

RunConfig default_config() {
  RunConfig c;
  c.reward.erase_set = {0};
  apply_links(c);
  return c;
}

void apply_links(RunConfig& cfg) {
  cfg.update.sigma = cfg.sampler.sigma;
  cfg.dve.erase_set = cfg.reward.erase_set;
  if (!cfg.erase.dual_path) {
    cfg.scheduler.rho_min = 0.0;
    cfg.scheduler.rho_max = 0.0;
    cfg.scheduler.rho0 = 0.0;
  }
}

void validate(const RunConfig& c, const std::string& source, const std::map<std::string, std::size_t>& lines) {
  auto fail = [&](const std::string& key, const std::string& msg) {
    const auto it = lines.find(key);
    const std::string where = it == lines.end() ? source : source + ":" + std::to_string(it->second);
    throw ValidationError(where + ": key '" + key + "': " + msg);
  };
  if (c.data.num_concepts < 2) fail("num_concepts", "must be >= 2");
  if (c.data.per_concept == 0) fail("per_concept", "must be >= 1");
  if (c.data.dim < 2) fail("data_dim", "must be >= 2");
  if (!(c.data.separation > 0.0)) fail("separation", "must be > 0");
  if (static_cast<std::size_t>(c.data.sensitive_concept) >= c.data.num_concepts) {
    fail("sensitive_concept", "must be < num_concepts");
  }
  if (c.field.cond_dim == 0) fail("cond_dim", "must be >= 1");
  if (c.field.hidden == 0) fail("hidden", "must be >= 1");
  if (c.base.batch == 0) fail("base_batch", "must be >= 1");
  if (!(c.base.learning_rate > 0.0)) fail("base_lr", "must be > 0");
  if (!(c.base.null_prob >= 0.0 && c.base.null_prob <= 1.0)) fail("null_prob", "must lie in [0,1]");
  if (c.perception.batch == 0) fail("perception_batch", "must be >= 1");
  if (!(c.perception.learning_rate > 0.0)) fail("perception_lr", "must be > 0");
  if (!(c.perception.min_accuracy >= 0.0 && c.perception.min_accuracy <= 1.0)) fail("min_accuracy", "must lie in [0,1]");
  if (c.sampler.steps == 0) fail("steps", "must be >= 1");
  if (!(c.sampler.sigma > 0.0)) fail("sigma", "must be > 0");
  if (!(c.reward.lambda >= 0.0)) fail("lambda", "must be >= 0");
  for (ConceptId id : c.reward.erase_set) {
    if (static_cast<std::size_t>(id) >= c.data.num_concepts) fail("erase_set", "concept " + std::to_string(id) + " out of range");
  }
  if (c.reward.erase_set.size() >= c.data.num_concepts) fail("erase_set", "must leave at least one concept retained");
  if (c.update.group_size < 2) fail("group_size", "must be >= 2");
  if (!(c.update.clip_epsilon > 0.0 && c.update.clip_epsilon < 1.0)) fail("clip_epsilon", "must lie in (0,1)");
  if (!(c.update.kappa >= 0.0)) fail("kappa", "must be >= 0");
  if (c.update.epochs_per_rollout == 0) fail("epochs_per_rollout", "must be >= 1");
  if (!(c.scheduler.ema >= 0.0 && c.scheduler.ema < 1.0)) fail("ema", "must lie in [0,1)");
  if (!(c.scheduler.delta > 0.0)) fail("delta", "must be > 0");
  if (!(c.scheduler.tau_low < c.scheduler.tau_high)) fail("tau_high", "must exceed tau_low (" + format_real(c.scheduler.tau_low) + ")");
  if (!(c.scheduler.rho_min >= 0.0)) fail("rho_min", "must be >= 0");
  if (!(c.scheduler.rho_max <= 1.0 && c.scheduler.rho_min <= c.scheduler.rho_max)) fail("rho_max", "must lie in [rho_min, 1]");
  if (!(c.scheduler.rho0 >= c.scheduler.rho_min && c.scheduler.rho0 <= c.scheduler.rho_max)) {
    fail("rho0", "must lie in [rho_min, rho_max]");
  }
  if (c.erase.batches_per_epoch == 0) fail("batches_per_epoch", "must be >= 1");
  if (c.erase.prompts_per_batch == 0) fail("prompts_per_batch", "must be >= 1");
  if (c.erase.retain_size == 0) fail("retain_size", "must be >= 1");
  if (!(c.erase.learning_rate > 0.0)) fail("lr", "must be > 0");
  if (c.esd.batch == 0) fail("esd_batch", "must be >= 1");
  if (!(c.esd.learning_rate > 0.0)) fail("esd_lr", "must be > 0");
  if (c.dve.anchor != kNullConcept && static_cast<std::size_t>(c.dve.anchor) >= c.data.num_concepts) {
    fail("dve_anchor", "out of range");
  }
  if (c.reward.erase_set.contains(c.dve.anchor)) fail("dve_anchor", "must not be an erased concept");
  if (!(c.dve.gamma > 0.0)) fail("dve_gamma", "must be > 0");
  if (!(c.dve.tau <= 0.0)) fail("dve_tau", "must be <= 0");
  if (!(c.dve.t_early >= 0.0 && c.dve.t_early <= 1.0)) fail("dve_t_early", "must lie in [0,1]");
  if (c.eval.n < Embedder::kEmbedding + 1) fail("eval_n", "must be >= " + std::to_string(Embedder::kEmbedding + 1));
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Entry* e = find_entry(key);
  if (!e) throw ValidationError("config: unknown key '" + key + "'");
  try {
    e->set(cfg, value);
  } catch (const BadValue& bad) {
    throw ValidationError("config: key '" + key + "': " + bad.what);
  }
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg = default_config();
  std::map<std::string, std::size_t> lines;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ValidationError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const Entry* e = find_entry(key);
    if (!e) throw ValidationError(where + ": unknown key '" + key + "'");
    if (lines.contains(key)) throw ValidationError(where + ": key '" + key + "' set twice");
    try {
      e->set(cfg, value);
    } catch (const BadValue& bad) {
      throw ValidationError(where + ": key '" + key + "': " + bad.what);
    }
    lines[key] = lineno;
  }
  apply_links(cfg);
  validate(cfg, source, lines);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string effective_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

std::string config_digest(const RunConfig& cfg) {
  std::string canon;
  for (const auto& e : entries()) canon += e.key + "=" + e.get(cfg) + "\n";
  return digest_hex(canon);
}

}  // namespace ferl
