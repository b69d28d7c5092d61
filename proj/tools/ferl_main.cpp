// Command-line front end. Exit codes: 0 ok, 1 usage, 2 validation,
// 3 gate failure, 4 divergence.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "ferl/config.hpp"
#include "ferl/errors.hpp"
#include "ferl/format.hpp"
#include "ferl/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool no_dual_path = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Config file (flat key = value)");
  app->add_option("--seed", c.seed, "Override the run seed");
  app->add_option("--out", c.out, "Run directory");
  app->add_flag("--no-dual-path", c.no_dual_path, "Disable NS routing (rho pinned to 0)");
}

ferl::RunConfig resolve(const Common& c) {
  ferl::RunConfig cfg = c.config.empty() ? ferl::default_config() : ferl::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.no_dual_path) cfg.erase.dual_path = false;
  ferl::apply_links(cfg);
  ferl::validate(cfg);
  return cfg;
}

void print_report(const ferl::ErasureReport& r) {
  std::cout << "asr_e: " << (r.asr_e ? ferl::format_real(*r.asr_e) : "n/a") << "\n"
            << "asr_k: " << ferl::format_real(r.asr_k) << "\n"
            << "frechet (toy): " << ferl::format_real(r.frechet) << "\n"
            << "alignment: " << ferl::format_real(r.alignment) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ferl: concept erasure for toy conditional flow models"};
  app.require_subcommand(1);

  Common train_opts, erase_opts, base_opts, eval_opts, data_opts;
  auto* train = app.add_subcommand("train-base", "Train perception models and the base flow");
  add_common(train, train_opts);

  auto* erase = app.add_subcommand("erase", "Run RL concept erasure on a base checkpoint");
  add_common(erase, erase_opts);
  bool resume = false;
  erase->add_flag("--resume", resume, "Continue from erase_state.ckpt in the run directory");

  auto* baseline = app.add_subcommand("baseline", "Run the esd or dve baseline");
  add_common(baseline, base_opts);
  std::string method;
  baseline->add_option("method", method, "esd or dve")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a dve.txt artifact");
  add_common(eval, eval_opts);
  std::string target;
  eval->add_option("target", target, "Checkpoint or DVE artifact (default: <out>/erased.ckpt)");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset");
  add_common(gen, data_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train->parsed()) {
      const auto cfg = resolve(train_opts);
      const auto res = ferl::train_base(cfg);
      std::cout << "perception held-out accuracy: " << ferl::format_real(res.bundle.perception.heldout_accuracy) << "\n"
                << "cfm loss: untrained " << ferl::format_real(res.untrained_loss) << ", trained "
                << ferl::format_real(res.trained_loss) << "\n";
      for (const auto& [k, rate] : res.asr) std::cout << "concept " << k << " hit rate: " << ferl::format_real(rate) << "\n";
    } else if (erase->parsed()) {
      const auto cfg = resolve(erase_opts);
      ferl::EraseOptions opts;
      opts.resume = resume;
      const auto res = ferl::run_erasure(cfg, opts);
      if (res.report) print_report(*res.report);
    } else if (baseline->parsed()) {
      print_report(ferl::run_baseline(method, resolve(base_opts)));
    } else if (eval->parsed()) {
      const auto cfg = resolve(eval_opts);
      const std::filesystem::path t = target.empty() ? std::filesystem::path(cfg.out_dir) / "erased.ckpt" : std::filesystem::path(target);
      print_report(ferl::run_eval(t, cfg));
    } else if (gen->parsed()) {
      const auto cfg = resolve(data_opts);
      std::filesystem::create_directories(cfg.out_dir);
      const auto path = std::filesystem::path(cfg.out_dir) / "dataset.txt";
      ferl::write_dataset(path, ferl::load_or_generate_data(cfg));
      std::cout << path.string() << "\n";
    }
  } catch (const ferl::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ferl::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const ferl::GateFailure& e) {
    std::cerr << "gate failure: " << e.what() << "\n";
    return 3;
  } catch (const ferl::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
