// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "wsdlab/runner.hpp"

namespace {

using namespace wsdlab;

struct GlobalOptions {
  std::string manifest_path;
  std::string out_dir;
  int workers = 0;
  std::optional<double> beta1, beta2, beta_power, weight_decay;
  std::optional<uint64_t> seed;
  bool no_weight_decay = false;
  bool reset_optimizer = false;
};

std::filesystem::path resolve_out(const GlobalOptions& opts, const Manifest& manifest) {
  if (!opts.out_dir.empty()) return opts.out_dir;
  if (const char* env = std::getenv("WSDLAB_OUT")) return env;
  return manifest.output_dir;
}

Manifest load_with_overrides(const GlobalOptions& opts) {
  if (opts.manifest_path.empty()) throw std::runtime_error("--manifest is required");
  Manifest manifest = load_manifest(opts.manifest_path);
  if (opts.beta1) manifest.optimizer.beta1 = *opts.beta1;
  if (opts.beta2) manifest.optimizer.beta2 = *opts.beta2;
  if (opts.beta_power) {
    manifest.optimizer.beta1 = rescale_beta(manifest.optimizer.beta1, *opts.beta_power);
    manifest.optimizer.beta2 = rescale_beta(manifest.optimizer.beta2, *opts.beta_power);
  }
  if (opts.weight_decay) manifest.optimizer.weight_decay = *opts.weight_decay;
  if (opts.no_weight_decay) manifest.optimizer.weight_decay = 0.0;
  if (opts.seed) manifest.base.seed = *opts.seed;
  manifest.optimizer.validate();
  return manifest;
}

ManifestRunner make_runner(const GlobalOptions& opts) {
  Manifest manifest = load_with_overrides(opts);
  const auto out = resolve_out(opts, manifest);
  return ManifestRunner(std::move(manifest), out, opts.workers);
}

void print_record(const RunRecord& record) {
  std::cout << "run " << record.run_id << " status=" << record.status
            << " final_val_loss=" << record.final_val_loss
            << " final_val_ppl=" << record.final_val_ppl() << "\n";
}

int report_cells(const std::vector<SweepCell>& cells) {
  int failures = 0;
  for (const auto& cell : cells) {
    if (cell.failed) {
      failures += 1;
      std::cout << to_string(cell.shape) << " seed " << cell.seed << ": FAILED (" << cell.error
                << ")\n";
    } else {
      std::cout << to_string(cell.shape) << " seed " << cell.seed
                << ": val_loss=" << cell.record.final_val_loss << "\n";
    }
  }
  return failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wsdlab: a desk-scale laboratory for WSD cooldown experiments"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand

  GlobalOptions opts;
  app.add_option("--manifest,-m", opts.manifest_path, "experiment manifest (JSON)");
  app.add_option("--out,-o", opts.out_dir, "output root (overrides WSDLAB_OUT and the manifest)");
  app.add_option("--workers,-w", opts.workers, "worker pool size for independent runs");
  app.add_option("--seed", opts.seed, "override the base run seed");
  app.add_option("--beta1", opts.beta1, "override AdamW beta1");
  app.add_option("--beta2", opts.beta2, "override AdamW beta2");
  app.add_option("--beta-power", opts.beta_power, "raise both betas to this power");
  app.add_option("--weight-decay", opts.weight_decay, "override decoupled weight decay");
  app.add_flag("--no-weight-decay", opts.no_weight_decay, "disable weight decay");
  app.add_flag("--reset-optimizer", opts.reset_optimizer,
               "reset optimizer state when resuming a cooldown");

  // train: the base (pre-cooldown) run, or a standalone run config.
  auto* train_cmd = app.add_subcommand("train", "run base training (or a standalone run config)");
  std::string run_config_path;
  train_cmd->add_option("--config", run_config_path, "standalone run config JSON");

  // cooldown: one cooldown resumption from the base checkpoint.
  auto* cooldown_cmd = app.add_subcommand("cooldown", "resume one cooldown from the base run");
  std::string cooldown_shape = "sqrt";
  uint64_t cooldown_seed = 0;
  cooldown_cmd->add_option("--shape", cooldown_shape,
                           "cooldown shape (linear|cosine|mirror_cosine|square|sqrt|"
                           "lowered_linear:<alpha>)");
  cooldown_cmd->add_option("--permutation-seed", cooldown_seed, "data permutation seed");

  auto* sweep_cmd = app.add_subcommand("sweep", "shape x permutation-seed cooldown sweep");
  auto* reference_cmd = app.add_subcommand("reference", "long reference cooldowns (sqrt)");
  auto* batch_cmd = app.add_subcommand("batch-sweep", "batch-size sweep at fixed token budget");
  auto* beta_cmd = app.add_subcommand("beta-sweep", "AdamW beta-power sweep");

  auto* analyze_cmd = app.add_subcommand("analyze", "bias-variance and shift-deviation reports");
  std::vector<std::string> spaces;
  analyze_cmd->add_option("--space", spaces,
                          "bias-variance spaces to compute (loss|weight|loss_simple|kl)");

  auto* landscape_cmd = app.add_subcommand("landscape", "2D perplexity scans around checkpoints");
  std::vector<std::string> landscape_at;
  landscape_cmd->add_option("--at", landscape_at, "scan points (start|mid|end)");

  auto* probe_cmd = app.add_subcommand("probe", "linear probes over cooldown checkpoints");
  auto* export_cmd = app.add_subcommand("export", "plot-ready CSV/JSONL bundle");
  auto* verify_cmd = app.add_subcommand("verify", "re-hash recorded artifacts");
  auto* run_cmd = app.add_subcommand("run", "all manifest stages in dependency order");

  // schedule: emit a (step, lr) CSV for plotting.
  auto* schedule_cmd = app.add_subcommand("schedule", "emit a (step, lr) CSV for a schedule");
  std::string sched_kind = "wsd", sched_shape = "linear", sched_out;
  double sched_peak = 1e-3;
  long sched_warmup = 0, sched_stable = 0, sched_cooldown = 100;
  schedule_cmd->add_option("--kind", sched_kind, "wsd|cosine|linear_decay|constant");
  schedule_cmd->add_option("--shape", sched_shape, "cooldown shape for wsd");
  schedule_cmd->add_option("--peak-lr", sched_peak, "peak learning rate");
  schedule_cmd->add_option("--warmup-steps", sched_warmup, "warmup steps");
  schedule_cmd->add_option("--stable-steps", sched_stable, "stable steps");
  schedule_cmd->add_option("--cooldown-steps", sched_cooldown, "cooldown steps");
  schedule_cmd->add_option("--csv", sched_out, "output path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (schedule_cmd->parsed()) {
      ScheduleSpec spec;
      spec.kind = parse_schedule_kind(sched_kind);
      spec.shape = parse_shape(sched_shape);
      spec.peak_lr = sched_peak;
      spec.warmup_steps = sched_warmup;
      spec.stable_steps = sched_stable;
      spec.cooldown_steps = sched_cooldown;
      spec.validate();
      if (sched_out.empty()) {
        write_schedule_csv(spec, std::cout);
      } else {
        std::ofstream out(sched_out);
        if (!out) throw std::runtime_error("cannot write " + sched_out);
        write_schedule_csv(spec, out);
      }
      return 0;
    }

    if (train_cmd->parsed() && !run_config_path.empty()) {
      const auto cfg = run_config_from_json(Json::parse(read_file_bytes(run_config_path)));
      const auto tokenizer = make_tokenizer(cfg.data.tokenizer);
      const auto corpus = load_corpus(cfg.data.corpus, *tokenizer);
      std::filesystem::path out = opts.out_dir.empty()
                                      ? (std::getenv("WSDLAB_OUT") ? std::getenv("WSDLAB_OUT")
                                                                   : "wsdlab_out")
                                      : std::filesystem::path(opts.out_dir);
      ArtifactStore store(out / "store");
      const auto record = train_cached(cfg, corpus, store, out / "runs");
      print_record(record);
      return record.ok() ? 0 : 1;
    }

    auto runner = make_runner(opts);
    int failures = 0;

    if (train_cmd->parsed()) {
      print_record(runner.base());
    } else if (cooldown_cmd->parsed()) {
      auto cfg = runner.cooldown_template();
      cfg.schedule.shape = parse_shape(cooldown_shape);
      cfg.data.permutation_seed = cooldown_seed;
      cfg.reset_optimizer = opts.reset_optimizer;
      if (opts.no_weight_decay) cfg.no_weight_decay = true;
      const auto record = resume_cooldown(cfg, runner.corpus(), runner.store(),
                                          runner.out() / "runs");
      print_record(record);
      failures += record.ok() ? 0 : 1;
    } else if (sweep_cmd->parsed()) {
      failures += report_cells(runner.run_sweep());
    } else if (reference_cmd->parsed()) {
      failures += report_cells(runner.run_references());
    } else if (batch_cmd->parsed()) {
      failures += report_cells(runner.run_batch_sweep());
    } else if (beta_cmd->parsed()) {
      failures += report_cells(runner.run_beta_sweep());
    } else if (analyze_cmd->parsed()) {
      if (!spaces.empty()) {
        Manifest patched = runner.manifest();
        patched.analysis.spaces = spaces;
        ManifestRunner scoped(std::move(patched), runner.out(), opts.workers);
        scoped.run_analysis();
        failures += scoped.failed_cells();
      } else {
        runner.run_analysis();
        failures += runner.failed_cells();
      }
      std::cout << "analysis tables written under " << (runner.out() / "analysis").string()
                << "\n";
    } else if (landscape_cmd->parsed()) {
      if (!landscape_at.empty()) {
        Manifest patched = runner.manifest();
        if (!patched.landscape) patched.landscape = LandscapeSpec{};
        patched.landscape->at = landscape_at;
        ManifestRunner scoped(std::move(patched), runner.out(), opts.workers);
        scoped.run_landscape();
      } else {
        runner.run_landscape();
      }
      std::cout << "landscape scans written under " << (runner.out() / "landscape").string()
                << "\n";
    } else if (probe_cmd->parsed()) {
      runner.run_probe();
      std::cout << "probe table written under " << (runner.out() / "probe").string() << "\n";
    } else if (export_cmd->parsed()) {
      runner.run_export();
      std::cout << "export bundle written under " << (runner.out() / "exports").string() << "\n";
    } else if (verify_cmd->parsed()) {
      const auto mismatches = runner.run_verify();
      for (const auto& m : mismatches) {
        std::cout << "MISMATCH " << m.path << " expected " << m.expected << " got "
                  << (m.actual.empty() ? "<missing>" : m.actual) << "\n";
      }
      std::cout << (mismatches.empty() ? "all artifacts verified" : "verification failed")
                << "\n";
      failures += static_cast<int>(mismatches.size());
    } else if (run_cmd->parsed()) {
      runner.run_all();
      failures += runner.failed_cells();
    }
    return failures == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
