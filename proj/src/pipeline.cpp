#include "ferl/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "ferl/baselines.hpp"
#include "ferl/errors.hpp"
#include "ferl/format.hpp"
#include "ferl/grpo.hpp"
#include "ferl/random.hpp"
#include "ferl/scheduler.hpp"

namespace ferl {

namespace fs = std::filesystem;

TensorList bundle_tensors(const ModelBundle& b) {
  TensorList t = b.field.to_tensors("flow.");
  for (auto& nt : b.perception.detector.to_tensors()) t.push_back(std::move(nt));
  for (auto& nt : b.perception.embedder.to_tensors()) t.push_back(std::move(nt));
  t.push_back({"det.heldout_accuracy", RealArray::scalar(b.perception.heldout_accuracy)});
  const std::size_t n = b.data.records.size();
  RealArray samples({n, b.data.dim});
  RealArray labels({n});
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = b.data.records[i].concept_id;
    for (std::size_t d = 0; d < b.data.dim; ++d) samples.at(i, d) = b.data.records[i].sample[d];
  }
  t.push_back({"data.meta", RealArray::vector({static_cast<double>(b.data.num_concepts), static_cast<double>(b.data.dim),
                                               static_cast<double>(b.data.seed), b.data.separation})});
  t.push_back({"data.samples", std::move(samples)});
  t.push_back({"data.labels", std::move(labels)});
  return t;
}

ModelBundle bundle_from_tensors(const TensorList& t) {
  ModelBundle b;
  b.field = VelocityField::from_tensors(t, "flow.");
  b.perception.detector = Detector::from_tensors(t);
  b.perception.embedder = Embedder::from_tensors(t);
  b.perception.heldout_accuracy = find_tensor(t, "det.heldout_accuracy").item();
  const RealArray& meta = find_tensor(t, "data.meta");
  const RealArray& samples = find_tensor(t, "data.samples");
  const RealArray& labels = find_tensor(t, "data.labels");
  if (meta.size() != 4 || samples.rank() != 2 || labels.size() != samples.rows()) {
    throw ValidationError("checkpoint: malformed data tensors");
  }
  b.data.num_concepts = static_cast<std::size_t>(meta[0]);
  b.data.dim = static_cast<std::size_t>(meta[1]);
  b.data.seed = static_cast<std::uint64_t>(meta[2]);
  b.data.separation = meta[3];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    b.data.records.push_back({static_cast<ConceptId>(labels[i]),
                              RealArray::vector(std::vector<double>(samples.row(i).begin(), samples.row(i).end()))});
  }
  for (std::size_t k = 0; k < b.data.num_concepts; ++k) {
    RealArray mu({b.data.dim});
    std::size_t n = 0;
    for (const auto& r : b.data.records) {
      if (r.concept_id != static_cast<ConceptId>(k)) continue;
      for (std::size_t d = 0; d < b.data.dim; ++d) mu[d] += r.sample[d];
      ++n;
    }
    for (std::size_t d = 0; d < b.data.dim && n; ++d) mu[d] /= static_cast<double>(n);
    b.data.means.push_back(std::move(mu));
  }
  return b;
}

void write_bundle(const fs::path& path, const ModelBundle& b) { write_checkpoint(path, bundle_tensors(b)); }

ModelBundle read_bundle(const fs::path& path) { return bundle_from_tensors(read_checkpoint(path)); }

ConceptDataset load_or_generate_data(const RunConfig& cfg) {
  if (!cfg.data.dataset_path.empty()) {
    ConceptDataset d = read_dataset(cfg.data.dataset_path);
    if (d.num_concepts != cfg.data.num_concepts || d.dim != cfg.data.dim) {
      throw ValidationError("dataset '" + cfg.data.dataset_path + "' does not match num_concepts/data_dim of the config");
    }
    return d;
  }
  return generate_mixture(cfg.data.num_concepts, cfg.data.per_concept, cfg.data.dim, cfg.data.separation, cfg.seed);
}

fs::path base_checkpoint_path(const RunConfig& cfg) {
  return cfg.base_checkpoint.empty() ? fs::path(cfg.out_dir) / "base.ckpt" : fs::path(cfg.base_checkpoint);
}

void prepare_run_dir(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream f(fs::path(cfg.out_dir) / "effective_config.txt", std::ios::trunc);
  f << effective_config(cfg);
}

RealArray retained_reference(const ConceptDataset& data, const ConceptSet& erase_set) {
  std::vector<double> values;
  std::size_t rows = 0;
  for (const auto& r : data.records) {
    if (erase_set.contains(r.concept_id)) continue;
    values.insert(values.end(), r.sample.values().begin(), r.sample.values().end());
    ++rows;
  }
  return RealArray({rows, data.dim}, std::move(values));
}

ErasureReport evaluate_bundle(const ModelBundle& b, const RunConfig& cfg, const VelocityHook& hook) {
  EvalSettings s{cfg.eval.n, cfg.eval.seed, config_digest(cfg)};
  return evaluate_model(ode_sampler(b.field, cfg.sampler, hook), b.perception.detector, b.perception.embedder,
                        cfg.reward.erase_set, retained_reference(b.data, cfg.reward.erase_set), s);
}

void write_reports(const RunConfig& cfg, const ErasureReport& r, const std::string& stem) {
  fs::create_directories(cfg.out_dir);
  write_report_text(fs::path(cfg.out_dir) / (stem + ".txt"), r);
  append_report_csv(fs::path(cfg.out_dir) / (stem + ".csv"), r);
}

BaseResult train_base(const RunConfig& cfg) {
  validate(cfg);
  prepare_run_dir(cfg);
  BaseResult res;
  ModelBundle& b = res.bundle;
  b.data = load_or_generate_data(cfg);
  b.perception = train_perception(b.data, cfg.data.sensitive_concept, cfg.perception, cfg.seed);

  FieldShape shape = cfg.field;
  shape.data_dim = b.data.dim;
  shape.num_concepts = b.data.num_concepts;
  b.field = VelocityField(shape, cfg.seed);
  const std::uint64_t eval_seed = derive_seed(cfg.seed, {kTagEval, 0});
  res.untrained_loss = evaluate_cfm(b.field, b.data, 4096, eval_seed);
  const auto curve = train_flow(b.field, b.data, cfg.base, cfg.seed);
  res.trained_loss = evaluate_cfm(b.field, b.data, 4096, eval_seed);

  {
    std::ofstream f(fs::path(cfg.out_dir) / "base_loss.csv", std::ios::trunc);
    f << "step,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) f << i << ',' << format_real(curve[i]) << '\n';
  }
  write_bundle(base_checkpoint_path(cfg), b);

  RunConfig base_cfg = cfg;
  base_cfg.reward.erase_set.clear();
  const ErasureReport report = evaluate_bundle(b, base_cfg);
  write_reports(cfg, report, "base_report");
  for (const auto& row : report.concepts) res.asr[row.concept_id] = row.hit_rate;
  for (const auto& [k, rate] : res.asr) {
    if (rate < cfg.eval.base_asr_gate) {
      throw GateFailure("base model: concept " + std::to_string(k) + " hit rate " + format_real(rate) +
                        "% is below the " + format_real(cfg.eval.base_asr_gate) + "% gate");
    }
  }
  return res;
}

namespace {

constexpr const char* kMetricsHeader = "iter,path,mean_reward,kl,clip_frac,rho_t,r_hat";

struct EraseFiles {
  fs::path metrics, trace, rewards, state, erased;
};

EraseFiles erase_files(const RunConfig& cfg) {
  const fs::path dir(cfg.out_dir);
  return {dir / "metrics.csv", dir / "scheduler_trace.csv", dir / "reward_log.csv", dir / "erase_state.ckpt",
          dir / "erased.ckpt"};
}

void write_state(const fs::path& path, const VelocityField& field, const OptimizerState& opt,
                 const SchedulerState& sched, const EraseFiles& files) {
  TensorList t = field.to_tensors("flow.");
  const auto params = field.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    t.push_back({"opt.m." + params[i]->name, opt.first_moment[i]});
    t.push_back({"opt.v." + params[i]->name, opt.second_moment[i]});
  }
  t.push_back({"opt.step", RealArray::scalar(static_cast<double>(opt.step))});
  t.push_back({"sched.state", RealArray::vector({static_cast<double>(sched.epoch), sched.rho, sched.r_hat,
                                                 sched.initialized ? 1.0 : 0.0})});
  t.push_back({"files.sizes", RealArray::vector({static_cast<double>(fs::file_size(files.metrics)),
                                                 static_cast<double>(fs::file_size(files.trace)),
                                                 static_cast<double>(fs::file_size(files.rewards))})});
  const fs::path tmp = path.string() + ".tmp";
  write_checkpoint(tmp, t);
  fs::rename(tmp, path);
}

void start_csv(const fs::path& path, std::string_view header) {
  std::ofstream f(path, std::ios::trunc);
  f << header << '\n';
}

template <typename Batch>
double mean_reward(const std::vector<Batch>& groups) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (double r : g.rewards) s += r;
    n += g.rewards.size();
  }
  return s / static_cast<double>(n);
}

}  // namespace

EraseResult run_erasure(const RunConfig& cfg, const EraseOptions& opts) {
  validate(cfg);
  if (cfg.reward.erase_set.empty()) throw ValidationError("erase: the erase set is empty");
  prepare_run_dir(cfg);
  const ModelBundle base = read_bundle(base_checkpoint_path(cfg));
  const VelocityField& ref = base.field;
  EraseResult res;
  res.bundle = base;
  VelocityField& field = res.bundle.field;
  const Detector& det = base.perception.detector;
  const Embedder& emb = base.perception.embedder;
  const std::size_t num_concepts = base.data.num_concepts;
  for (ConceptId id : cfg.reward.erase_set) {
    if (static_cast<std::size_t>(id) >= num_concepts) throw ValidationError("erase: concept out of range for checkpoint");
  }
  const std::vector<ConceptId> erase(cfg.reward.erase_set.begin(), cfg.reward.erase_set.end());
  const RetainSet retain =
      build_retain_set(base.data, cfg.reward.erase_set, cfg.erase.retain_size, derive_seed(cfg.seed, {kTagRetain}));

  auto params = field.parameters();
  OptimizerState opt = OptimizerState::create(cfg.erase.optimizer, cfg.erase.learning_rate, params);
  SchedulerState sched = initial_state(cfg.scheduler);
  const EraseFiles files = erase_files(cfg);

  if (opts.resume && fs::exists(files.state)) {
    const TensorList t = read_checkpoint(files.state);
    field = VelocityField::from_tensors(t, "flow.");
    params = field.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.first_moment[i] = find_tensor(t, "opt.m." + params[i]->name);
      opt.second_moment[i] = find_tensor(t, "opt.v." + params[i]->name);
    }
    opt.step = static_cast<std::uint64_t>(find_tensor(t, "opt.step").item());
    const RealArray& s = find_tensor(t, "sched.state");
    sched.epoch = static_cast<std::size_t>(s[0]);
    sched.rho = s[1];
    sched.r_hat = s[2];
    sched.initialized = s[3] != 0.0;
    const RealArray& sizes = find_tensor(t, "files.sizes");
    fs::resize_file(files.metrics, static_cast<std::uintmax_t>(sizes[0]));
    fs::resize_file(files.trace, static_cast<std::uintmax_t>(sizes[1]));
    fs::resize_file(files.rewards, static_cast<std::uintmax_t>(sizes[2]));
  } else {
    start_csv(files.metrics, kMetricsHeader);
    start_csv(files.trace, kSchedulerTraceHeader);
    start_csv(files.rewards, kRewardLogHeader);
  }

  const std::size_t batches = cfg.erase.batches_per_epoch;
  const std::size_t prompts = cfg.erase.prompts_per_batch;
  const std::size_t group = cfg.update.group_size;
  while (sched.epoch < cfg.erase.epochs) {
    if (opts.stop_after_epochs && sched.epoch >= *opts.stop_after_epochs) {
      res.scheduler = sched;
      return res;
    }
    const std::size_t epoch = sched.epoch;
    std::ostringstream metrics_rows, trace_rows, reward_rows;
    std::size_t ns = 0, ce = 0;
    double ce_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const RewardPath path = choose_path(sched, uniform_draw(cfg.seed, {kTagRoute, epoch, b}));
      std::vector<GroupBatch> groups;
      groups.reserve(prompts);
      for (std::size_t p = 0; p < prompts; ++p) {
        Rng rng(derive_seed(cfg.seed, {kTagPrompt, epoch, b, p}));
        GroupBatch g;
        if (path == RewardPath::kCE) {
          const ConceptId target = erase[std::uniform_int_distribution<std::size_t>(0, erase.size() - 1)(rng)];
          const PromptPair pair = make_prompt_pair(target, num_concepts, rng(), cfg.reward.erase_set);
          g = sample_group(field, pair.prompt, group, cfg.sampler, derive_seed(cfg.seed, {kTagGroup, epoch, b, p}));
          g.pair = pair;
          std::vector<RewardSample> samples;
          for (const auto& t : g.trajectories) {
            samples.push_back(reward_ce(t.final_state(), pair, det, emb, cfg.reward));
          }
          set_rewards(g, std::move(samples));
        } else {
          const RetainRecord& rec =
              retain.records[std::uniform_int_distribution<std::size_t>(0, retain.records.size() - 1)(rng)];
          g = sample_group(field, rec.prompt, group, cfg.sampler, derive_seed(cfg.seed, {kTagGroup, epoch, b, p}));
          g.retain = rec;
          std::vector<RewardSample> samples;
          for (const auto& t : g.trajectories) {
            samples.push_back(reward_ns(t.final_state(), rec.prompt, rec.reference, emb, cfg.reward));
          }
          set_rewards(g, std::move(samples));
        }
        g.path = path;
        for (const auto& s : g.samples) write_reward_log_row(reward_rows, epoch, b, s);
        groups.push_back(std::move(g));
      }
      if (path == RewardPath::kCE) {
        ++ce;
        ce_sum += mean_reward(groups);
      } else {
        ++ns;
      }
      const StepMetrics m = policy_step(field, ref, groups, cfg.update, opt);
      metrics_rows << epoch * batches + b << ',' << path_name(path) << ',' << format_real(m.mean_reward) << ','
                   << format_real(m.kl) << ',' << format_real(m.clip_fraction) << ',' << format_real(sched.rho) << ','
                   << (sched.initialized ? format_real(sched.r_hat) : "n/a") << '\n';
    }
    const std::optional<double> r_bar = ce ? std::optional(ce_sum / static_cast<double>(ce)) : std::nullopt;
    sched = end_epoch(sched, r_bar, cfg.scheduler);
    write_trace_row(trace_rows, {epoch, r_bar, sched, ns, ce});
    std::ofstream(files.metrics, std::ios::app) << metrics_rows.str();
    std::ofstream(files.trace, std::ios::app) << trace_rows.str();
    std::ofstream(files.rewards, std::ios::app) << reward_rows.str();
    write_state(files.state, field, opt, sched, files);
  }

  write_bundle(files.erased, res.bundle);
  res.scheduler = sched;
  res.finished = true;
  res.report = evaluate_bundle(res.bundle, cfg);
  write_reports(cfg, *res.report);
  return res;
}

void write_dve_artifact(const fs::path& path, const DveArtifact& a) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("dve: cannot write '" + path.string() + "'");
  std::string erase;
  for (ConceptId id : a.dve.erase_set) erase += (erase.empty() ? "" : ",") + std::to_string(id);
  f << "FERL-DVE v1\n";
  f << "checkpoint = " << a.checkpoint << '\n';
  f << "erase_set = " << erase << '\n';
  f << "anchor = " << a.dve.anchor << '\n';
  f << "gamma = " << format_real(a.dve.gamma) << '\n';
  f << "tau = " << format_real(a.dve.tau) << '\n';
  f << "t_early = " << format_real(a.dve.t_early) << '\n';
}

DveArtifact read_dve_artifact(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("dve: cannot open '" + path.string() + "'");
  std::string line;
  std::getline(f, line);
  if (line != "FERL-DVE v1") throw ValidationError(path.string() + ":1: expected header \"FERL-DVE v1\"");
  DveArtifact a;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    try {
      if (key == "checkpoint") {
        a.checkpoint = value;
      } else if (key == "erase_set") {
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) a.dve.erase_set.insert(std::stoi(item));
      } else if (key == "anchor") {
        a.dve.anchor = std::stoi(value);
      } else if (key == "gamma") {
        a.dve.gamma = std::stod(value);
      } else if (key == "tau") {
        a.dve.tau = std::stod(value);
      } else if (key == "t_early") {
        a.dve.t_early = std::stod(value);
      } else {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  validate(a.dve);
  return a;
}

ErasureReport run_baseline(const std::string& method, const RunConfig& cfg) {
  if (method != "esd" && method != "dve") throw UsageError("baseline: unknown method '" + method + "' (expected esd or dve)");
  validate(cfg);
  if (cfg.reward.erase_set.empty()) throw ValidationError("baseline: the erase set is empty");
  prepare_run_dir(cfg);
  ModelBundle b = read_bundle(base_checkpoint_path(cfg));
  ErasureReport report;
  if (method == "esd") {
    const VelocityField frozen = b.field;
    train_esd(b.field, frozen, cfg.reward.erase_set, cfg.esd, cfg.sampler, cfg.seed);
    write_bundle(fs::path(cfg.out_dir) / "esd.ckpt", b);
    report = evaluate_bundle(b, cfg);
  } else {
    DveArtifact a{fs::absolute(base_checkpoint_path(cfg)).string(), cfg.dve};
    validate(a.dve);
    write_dve_artifact(fs::path(cfg.out_dir) / "dve.txt", a);
    report = evaluate_bundle(b, cfg, dve_hook(b.field, a.dve));
  }
  write_reports(cfg, report, method + "_report");
  return report;
}

ErasureReport run_eval(const fs::path& target, const RunConfig& cfg) {
  validate(cfg);
  if (!fs::exists(target)) throw UsageError("eval: '" + target.string() + "' does not exist");
  std::ifstream probe(target, std::ios::binary);
  std::string head(11, '\0');
  probe.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(probe.gcount()));
  ErasureReport report;
  if (head == "FERL-DVE v1") {
    const DveArtifact a = read_dve_artifact(target);
    const ModelBundle b = read_bundle(a.checkpoint);
    RunConfig eval_cfg = cfg;
    eval_cfg.reward.erase_set = a.dve.erase_set;
    report = evaluate_bundle(b, eval_cfg, dve_hook(b.field, a.dve));
  } else {
    report = evaluate_bundle(read_bundle(target), cfg);
  }
  write_reports(cfg, report);
  if (report.asr_e && *report.asr_e > cfg.eval.max_asr_e) {
    throw GateFailure("eval: asr_e " + format_real(*report.asr_e) + "% exceeds the " + format_real(cfg.eval.max_asr_e) + "% gate");
  }
  if (report.asr_k < cfg.eval.min_asr_k) {
    throw GateFailure("eval: asr_k " + format_real(report.asr_k) + "% is below the " + format_real(cfg.eval.min_asr_k) + "% gate");
  }
  return report;
}

}  // namespace ferl
