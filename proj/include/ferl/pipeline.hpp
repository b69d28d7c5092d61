#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "ferl/concepts.hpp"
#include "ferl/config.hpp"
#include "ferl/eval.hpp"
#include "ferl/flow.hpp"
#include "ferl/perception.hpp"

namespace ferl {

/// Everything a model checkpoint carries: the velocity field ("flow."),
/// the frozen perception models ("det.", "emb.") and the training data
/// ("data.").
struct ModelBundle {
  VelocityField field;
  PerceptionModels perception;
  ConceptDataset data;
};

TensorList bundle_tensors(const ModelBundle& b);
ModelBundle bundle_from_tensors(const TensorList& t);
void write_bundle(const std::filesystem::path& path, const ModelBundle& b);
ModelBundle read_bundle(const std::filesystem::path& path);

/// Dataset from cfg.data: read from dataset_path or generated.
ConceptDataset load_or_generate_data(const RunConfig& cfg);

std::filesystem::path base_checkpoint_path(const RunConfig& cfg);

/// Writes the effective config into the run directory (created if needed).
void prepare_run_dir(const RunConfig& cfg);

struct BaseResult {
  ModelBundle bundle;
  std::map<ConceptId, double> asr;
  double untrained_loss = 0.0;
  double trained_loss = 0.0;
};

/// Perception, then the conditional flow. Writes base.ckpt, base_loss.csv,
/// the effective config and a report. Throws GateFailure when the
/// perception or per-concept ASR gate fails.
BaseResult train_base(const RunConfig& cfg);

struct EraseOptions {
  /// Stop cleanly after this many completed epochs (simulated interruption).
  std::optional<std::size_t> stop_after_epochs;
  /// Continue from <out_dir>/erase_state.ckpt when it exists.
  bool resume = false;
};

struct EraseResult {
  ModelBundle bundle;
  SchedulerState scheduler;
  bool finished = false;
  std::optional<ErasureReport> report;
};

/// FlowErase-RL. Files in out_dir: erased.ckpt, erase_state.ckpt,
/// metrics.csv, scheduler_trace.csv, reward_log.csv, report.txt,
/// report.csv, effective_config.txt.
EraseResult run_erasure(const RunConfig& cfg, const EraseOptions& opts = {});

/// Reference features for the Frechet term: data records of retained concepts.
RealArray retained_reference(const ConceptDataset& data, const ConceptSet& erase_set);

ErasureReport evaluate_bundle(const ModelBundle& b, const RunConfig& cfg, const VelocityHook& hook = {});

/// Writes report.txt (overwritten) and appends report.csv in out_dir.
void write_reports(const RunConfig& cfg, const ErasureReport& r, const std::string& stem = "report");

/// ESD fine-tune (writes esd.ckpt) or DVE artifact (writes dve.txt); both
/// followed by an evaluation report. Unknown methods are usage errors.
ErasureReport run_baseline(const std::string& method, const RunConfig& cfg);

struct DveArtifact {
  std::string checkpoint;
  DveConfig dve;
};
void write_dve_artifact(const std::filesystem::path& path, const DveArtifact& a);
DveArtifact read_dve_artifact(const std::filesystem::path& path);

/// Evaluates a model checkpoint or a dve.txt artifact, writes the report
/// files, and throws GateFailure when cfg.eval gates fail.
ErasureReport run_eval(const std::filesystem::path& target, const RunConfig& cfg);

}  // namespace ferl
