// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iostream>
#include <memory>
#include <numeric>

#include "wsdlab/manifest.hpp"

namespace wsdlab {

// Executes manifest stages in dependency order. Training runs are cached by
// config content hash, analysis stages by input-id keys, so re-running a
// completed manifest retrains nothing.
class ManifestRunner {
 public:
  ManifestRunner(Manifest manifest, std::filesystem::path out_root, int workers_override = 0)
      : manifest_(std::move(manifest)),
        out_(std::move(out_root)),
        store_(out_ / "store"),
        workers_(workers_override > 0 ? workers_override : manifest_.workers) {
    std::filesystem::create_directories(out_);
  }

  const Manifest& manifest() const { return manifest_; }
  const std::filesystem::path& out() const { return out_; }
  const ArtifactStore& store() const { return store_; }
  int workers() const { return workers_; }
  int failed_cells() const { return failed_cells_; }

  const TokenCorpus& corpus() {
    if (!corpus_) {
      const auto tokenizer = make_tokenizer(manifest_.corpus.tokenizer);
      corpus_ = load_corpus(manifest_.corpus.path, *tokenizer);
    }
    return *corpus_;
  }

  // --- base (pre-cooldown) run --------------------------------------------

  RunConfig base_config() {
    RunConfig cfg;
    cfg.model = manifest_.model;
    cfg.optimizer = manifest_.optimizer;
    cfg.schedule = ScheduleSpec{};
    cfg.schedule.kind = ScheduleKind::wsd;
    cfg.schedule.peak_lr = manifest_.base.peak_lr;
    cfg.schedule.warmup_steps = manifest_.base.warmup_steps;
    cfg.schedule.stable_steps = manifest_.base.stable_steps;
    cfg.schedule.cooldown_steps = 0;
    cfg.data.corpus = manifest_.corpus.path;
    cfg.data.tokenizer = manifest_.corpus.tokenizer;
    cfg.data.train_fraction = manifest_.corpus.train_fraction;
    cfg.data.batch_size = manifest_.base.batch_size;
    cfg.data.portion_first = manifest_.base.portion_first;
    cfg.data.portion_count = manifest_.base.portion_count;
    cfg.data.permutation_seed = manifest_.base.permutation_seed;
    cfg.eval_every = manifest_.base.eval_every;
    cfg.val_batches = manifest_.base.val_batches;
    cfg.seed = manifest_.base.seed;
    return cfg;
  }

  RunRecord base() {
    auto record = train_cached(base_config(), corpus(), store_, out_ / "runs");
    if (!record.ok()) throw std::runtime_error("base run failed: " + record.status);
    return record;
  }

  RunConfig cooldown_template() {
    const auto pre = base();
    auto cfg = cooldown_config(base_config(), pre.pre_cooldown_checkpoint,
                               pre.pre_cooldown_opt_state, CooldownShape::sqrt(),
                               manifest_.cooldown.steps, /*permutation_seed=*/0);
    cfg.data.portion_first = manifest_.cooldown.portion_first;
    cfg.data.portion_count = manifest_.cooldown.portion_count;
    return cfg;
  }

  // --- sweeps ---------------------------------------------------------------

  std::vector<SweepCell> run_sweep() {
    if (!manifest_.sweep) throw std::runtime_error("manifest has no sweep section");
    const auto cells =
        permutation_sweep(cooldown_template(), manifest_.sweep->shapes, manifest_.sweep->seeds,
                          corpus(), store_, out_ / "runs", workers_);
    note_failures(cells, "sweep");
    return cells;
  }

  std::vector<SweepCell> run_references() {
    if (!manifest_.reference) throw std::runtime_error("manifest has no reference section");
    const long ref_steps = manifest_.cooldown.steps * manifest_.reference->length_factor;
    const auto cells = train_reference(cooldown_template(), manifest_.reference->seeds, ref_steps,
                                       corpus(), store_, out_ / "runs", workers_);
    note_failures(cells, "reference");
    return cells;
  }

  struct SoupingRuns {
    std::vector<CooldownShape> shapes;
    std::vector<std::vector<SweepCell>> members;  // per shape, one cell per portion
    std::optional<RunRecord> longer_run;
  };

  // §-style averaging experiment: per shape, one cooldown per disjoint data
  // portion; optionally one long run consuming the union of those portions.
  SoupingRuns run_souping() {
    if (!manifest_.souping) throw std::runtime_error("manifest has no souping section");
    const auto& spec = *manifest_.souping;
    const auto tmpl = cooldown_template();
    const BatchRange whole{manifest_.cooldown.portion_first,
                           manifest_.cooldown.portion_count * spec.portions};
    const auto portions = partition_batches(whole, spec.portions);

    SoupingRuns result;
    result.shapes = spec.shapes;
    struct Cell {
      RunConfig cfg;
      SweepCell* out;
    };
    std::vector<Cell> cells;
    result.members.resize(spec.shapes.size());
    for (size_t s = 0; s < spec.shapes.size(); ++s) {
      result.members[s].resize(portions.size());
      for (size_t p = 0; p < portions.size(); ++p) {
        RunConfig cfg = tmpl;
        cfg.schedule.shape = spec.shapes[s];
        cfg.data.portion_first = portions[p].first;
        cfg.data.portion_count = portions[p].count;
        cfg.data.permutation_seed = spec.seed + p;
        result.members[s][p].shape = spec.shapes[s];
        result.members[s][p].seed = cfg.data.permutation_seed;
        cells.push_back({std::move(cfg), &result.members[s][p]});
      }
    }
    parallel_cells(cells.size(), workers_, [&](size_t i) {
      try {
        cells[i].out->record = train_cached(cells[i].cfg, corpus(), store_, out_ / "runs");
        cells[i].out->failed = !cells[i].out->record.ok();
        if (cells[i].out->failed) cells[i].out->error = cells[i].out->record.status;
      } catch (const std::exception& e) {
        cells[i].out->failed = true;
        cells[i].out->error = e.what();
      }
    });
    for (const auto& per_shape : result.members) note_failures(per_shape, "souping");

    if (spec.longer_run) {
      // One model trained on all data the short runs saw, same flops total:
      // continuation of the same length, cooling down over the final 20% of
      // the combined (base + continuation) duration.
      RunConfig cfg = tmpl;
      cfg.schedule.shape = CooldownShape::sqrt();
      const long base_steps = manifest_.base.warmup_steps + manifest_.base.stable_steps;
      const long continuation = manifest_.cooldown.steps * spec.portions;
      const long cooldown = std::max<long>(1, (base_steps + continuation) / 5);
      if (cooldown > continuation) {
        throw std::runtime_error("souping longer run: cooldown exceeds continuation length");
      }
      cfg.schedule.stable_steps = continuation - cooldown;
      cfg.schedule.cooldown_steps = cooldown;
      cfg.data.portion_first = whole.first;
      cfg.data.portion_count = whole.count;
      cfg.data.permutation_seed = spec.seed + 1000;
      result.longer_run = train_cached(cfg, corpus(), store_, out_ / "runs");
      if (!result.longer_run->ok()) {
        failed_cells_ += 1;
        std::cerr << "souping longer run failed: " << result.longer_run->status << "\n";
      }
    }
    return result;
  }

  // Batch-size sweep at fixed token budget: batch x k, steps / k, learning
  // rate scaled by the table, betas raised to k when half-life matching is on.
  std::vector<SweepCell> run_batch_sweep() {
    if (!manifest_.batch_sweep) throw std::runtime_error("manifest has no batch_sweep section");
    const auto& spec = *manifest_.batch_sweep;
    const auto tmpl = cooldown_template();
    const auto table =
        spec.lr_table == "tuned" ? tuned_lr_scale_table() : std::map<double, double>{};

    std::vector<SweepCell> cells(spec.scales.size());
    std::vector<RunConfig> configs;
    CsvWriter csv({"k", "batch_size", "steps", "lr_scale", "beta1", "beta2", "final_val_loss",
                   "final_val_ppl"});
    for (size_t i = 0; i < spec.scales.size(); ++i) {
      const long k = spec.scales[i];
      if (k < 1) throw std::invalid_argument("batch scale must be >= 1");
      RunConfig cfg = tmpl;
      cfg.data.batch_size = static_cast<int>(tmpl.data.batch_size * k);
      cfg.schedule.cooldown_steps = manifest_.cooldown.steps / k;  // rounded down, recorded
      if ((manifest_.cooldown.portion_first % k) != 0) {
        throw std::invalid_argument("cooldown portion start must align with the batch scale");
      }
      cfg.data.portion_first = manifest_.cooldown.portion_first / k;
      cfg.data.portion_count = std::max<long>(cfg.schedule.cooldown_steps, 1);
      cfg.schedule.peak_lr =
          tmpl.schedule.peak_lr * lr_scale_for_batch(static_cast<double>(k), table);
      if (spec.match_half_life) {
        cfg.optimizer.beta1 = rescale_beta(cfg.optimizer.beta1, static_cast<double>(k));
        cfg.optimizer.beta2 = rescale_beta(cfg.optimizer.beta2, static_cast<double>(k));
      }
      cfg.data.permutation_seed = spec.seed + i;
      cfg.val_batches = std::max(1, tmpl.val_batches / static_cast<int>(k));
      cells[i].shape = cfg.schedule.shape;
      cells[i].seed = cfg.data.permutation_seed;
      configs.push_back(std::move(cfg));
    }
    parallel_cells(cells.size(), workers_, [&](size_t i) {
      try {
        cells[i].record = train_cached(configs[i], corpus(), store_, out_ / "runs");
        cells[i].failed = !cells[i].record.ok();
        if (cells[i].failed) cells[i].error = cells[i].record.status;
      } catch (const std::exception& e) {
        cells[i].failed = true;
        cells[i].error = e.what();
      }
    });
    note_failures(cells, "batch_sweep");
    for (size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].failed) continue;
      const auto& cfg = configs[i];
      csv.row({CsvWriter::num(spec.scales[i]), CsvWriter::num(long{cfg.data.batch_size}),
               CsvWriter::num(cfg.schedule.cooldown_steps),
               CsvWriter::num(cfg.schedule.peak_lr / tmpl.schedule.peak_lr),
               CsvWriter::num(cfg.optimizer.beta1), CsvWriter::num(cfg.optimizer.beta2),
               CsvWriter::num(cells[i].record.final_val_loss),
               CsvWriter::num(cells[i].record.final_val_ppl())});
    }
    write_artifact(out_ / "analysis" / "batch_sweep.csv", csv.str());
    return cells;
  }

  // AdamW beta sweep: betas raised to p, either both or beta2 alone.
  std::vector<SweepCell> run_beta_sweep() {
    if (!manifest_.beta_sweep) throw std::runtime_error("manifest has no beta_sweep section");
    const auto& spec = *manifest_.beta_sweep;
    const auto tmpl = cooldown_template();

    std::vector<SweepCell> cells(spec.powers.size());
    std::vector<RunConfig> configs;
    for (size_t i = 0; i < spec.powers.size(); ++i) {
      const double p = spec.powers[i];
      if (!(p > 0.0)) throw std::invalid_argument("beta power must be positive");
      RunConfig cfg = tmpl;
      if (spec.vary == "both") cfg.optimizer.beta1 = rescale_beta(cfg.optimizer.beta1, p);
      cfg.optimizer.beta2 = rescale_beta(cfg.optimizer.beta2, p);
      cfg.data.permutation_seed = spec.seed;
      cells[i].shape = cfg.schedule.shape;
      cells[i].seed = cfg.data.permutation_seed;
      configs.push_back(std::move(cfg));
    }
    parallel_cells(cells.size(), workers_, [&](size_t i) {
      try {
        cells[i].record = train_cached(configs[i], corpus(), store_, out_ / "runs");
        cells[i].failed = !cells[i].record.ok();
        if (cells[i].failed) cells[i].error = cells[i].record.status;
      } catch (const std::exception& e) {
        cells[i].failed = true;
        cells[i].error = e.what();
      }
    });
    note_failures(cells, "beta_sweep");
    CsvWriter csv({"p", "beta1", "beta2", "final_val_loss", "final_val_ppl"});
    for (size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].failed) continue;
      csv.row({CsvWriter::num(spec.powers[i]), CsvWriter::num(configs[i].optimizer.beta1),
               CsvWriter::num(configs[i].optimizer.beta2),
               CsvWriter::num(cells[i].record.final_val_loss),
               CsvWriter::num(cells[i].record.final_val_ppl())});
    }
    write_artifact(out_ / "analysis" / "beta_sweep.csv", csv.str());
    return cells;
  }

  // --- analysis --------------------------------------------------------------

  LossEvaluator validation_evaluator() {
    if (!val_set_) {
      val_set_ = validation_batches(corpus(), manifest_.model, manifest_.corpus.train_fraction,
                                    manifest_.base.batch_size, manifest_.base.val_batches);
    }
    return [this](const WeightVector<float>& w) {
      return mean_eval_loss(w, manifest_.model, *val_set_);
    };
  }

  std::vector<WeightVector<float>> member_weights(const std::vector<SweepCell>& cells,
                                                  const CooldownShape& shape,
                                                  const std::vector<uint64_t>& seeds) {
    std::vector<WeightVector<float>> members;
    for (const auto& cell : cells) {
      if (cell.failed || !(cell.shape == shape)) continue;
      if (std::find(seeds.begin(), seeds.end(), cell.seed) == seeds.end()) continue;
      members.push_back(store_.get_checkpoint(cell.record.final_checkpoint).weights);
    }
    return members;
  }

  // Writes one CSV per requested space with the (shape, alpha, bias,
  // variance, residual) schema; the loss-space table carries the extra
  // mean/soup/variance columns.
  void run_analysis() {
    const auto cells = run_sweep();
    const auto refs = run_references();
    std::vector<WeightVector<float>> ref_weights;
    for (const auto& ref : refs) {
      if (!ref.failed) {
        ref_weights.push_back(store_.get_checkpoint(ref.record.final_checkpoint).weights);
      }
    }
    if (ref_weights.empty()) throw std::runtime_error("no usable reference runs");
    auto evaluate = validation_evaluator();

    const auto& shapes = manifest_.sweep->shapes;
    const auto& seeds = manifest_.sweep->seeds;
    auto wants = [&](const std::string& space) {
      const auto& spaces = manifest_.analysis.spaces;
      return std::find(spaces.begin(), spaces.end(), space) != spaces.end();
    };

    std::optional<CsvWriter> loss_csv, weight_csv, simple_csv, kl_csv;
    if (wants("loss")) {
      loss_csv.emplace(std::vector<std::string>{
          "shape", "alpha", "bias", "variance", "residual", "soup_loss", "reference_loss",
          "mean_member_loss", "loss_variance", "weight_variance"});
    }
    if (wants("weight")) {
      weight_csv.emplace(std::vector<std::string>{"shape", "alpha", "bias", "variance",
                                                  "residual"});
    }
    if (wants("loss_simple")) {
      simple_csv.emplace(std::vector<std::string>{"shape", "alpha", "bias", "variance",
                                                  "residual"});
    }
    if (wants("kl")) {
      kl_csv.emplace(std::vector<std::string>{"shape", "alpha", "bias", "variance", "residual"});
    }

    std::vector<RowMat<float>> ref_predictions;
    std::vector<Batch> kl_batches;
    if (kl_csv) {
      const auto vr = val_range(corpus(), manifest_.corpus.train_fraction);
      for (int i = 0; i < manifest_.analysis.kl_batches; ++i) {
        kl_batches.push_back(make_batch(corpus(), vr, manifest_.base.batch_size,
                                        manifest_.model.seq_len, i));
      }
      for (const auto& ref : ref_weights) {
        ref_predictions.push_back(predictions_on(ref, kl_batches));
      }
    }

    for (const auto& shape : shapes) {
      const auto members = member_weights(cells, shape, seeds);
      if (members.empty()) continue;
      const std::string label = shape_kind_name(shape.kind);
      const std::string alpha = CsvWriter::num(shape.alpha);
      if (loss_csv) {
        const auto report = bias_variance_loss_space(members, ref_weights, evaluate);
        const double weight_variance =
            members.size() >= 2 ? bias_variance_weight_space(members, ref_weights).variance : 0.0;
        loss_csv->row({label, alpha, CsvWriter::num(report.bias), CsvWriter::num(report.variance),
                       CsvWriter::num(report.residual), CsvWriter::num(report.soup_loss),
                       CsvWriter::num(report.reference_loss),
                       CsvWriter::num(report.mean_member_loss),
                       CsvWriter::num(report.loss_variance), CsvWriter::num(weight_variance)});
      }
      if (weight_csv && members.size() >= 2) {
        const auto report = bias_variance_weight_space(members, ref_weights);
        weight_csv->row({label, alpha, CsvWriter::num(report.bias),
                         CsvWriter::num(report.variance), CsvWriter::num(0.0)});
      }
      if (simple_csv && members.size() >= 2) {
        std::vector<double> losses;
        for (const auto& m : members) losses.push_back(evaluate(m));
        const auto report = bias_variance_loss_simple(losses);
        simple_csv->row({label, alpha, CsvWriter::num(report.bias),
                         CsvWriter::num(report.variance), CsvWriter::num(0.0)});
      }
      if (kl_csv) {
        std::vector<RowMat<float>> member_predictions;
        for (const auto& m : members) member_predictions.push_back(predictions_on(m, kl_batches));
        const auto report = bias_variance_kl_space(member_predictions, ref_predictions);
        kl_csv->row({label, alpha, CsvWriter::num(report.bias), CsvWriter::num(report.variance),
                     CsvWriter::num(0.0)});
      }
    }

    if (loss_csv) write_artifact(out_ / "analysis" / "bias_variance_loss.csv", loss_csv->str());
    if (weight_csv) {
      write_artifact(out_ / "analysis" / "bias_variance_weight.csv", weight_csv->str());
    }
    if (simple_csv) {
      write_artifact(out_ / "analysis" / "bias_variance_loss_simple.csv", simple_csv->str());
    }
    if (kl_csv) write_artifact(out_ / "analysis" / "bias_variance_kl.csv", kl_csv->str());

    if (manifest_.souping) run_souping_report();
    if (manifest_.analysis.shift_deviation) run_shift_deviation();
  }

  // Souping table: member mean loss vs soup loss per shape, plus the longer
  // run as a shared comparison column.
  void run_souping_report() {
    const auto souping = run_souping();
    auto evaluate = validation_evaluator();
    const double longer_loss =
        souping.longer_run && souping.longer_run->ok() ? souping.longer_run->final_val_loss
                                                       : std::nan("");
    CsvWriter csv({"shape", "alpha", "mean_member_loss", "soup_loss", "longer_run_loss"});
    for (size_t s = 0; s < souping.shapes.size(); ++s) {
      std::vector<WeightVector<float>> members;
      double mean_loss = 0.0;
      int n = 0;
      for (const auto& cell : souping.members[s]) {
        if (cell.failed) continue;
        members.push_back(store_.get_checkpoint(cell.record.final_checkpoint).weights);
        mean_loss += cell.record.final_val_loss;
        n += 1;
      }
      if (members.empty()) continue;
      mean_loss /= n;
      const double soup_loss = evaluate(average_weights(members));
      csv.row({shape_kind_name(souping.shapes[s].kind), CsvWriter::num(souping.shapes[s].alpha),
               CsvWriter::num(mean_loss), CsvWriter::num(soup_loss),
               CsvWriter::num(longer_loss)});
    }
    write_artifact(out_ / "analysis" / "souping.csv", csv.str());
  }

  // Retrospective per-batch perplexity of the pre-cooldown model and one
  // member per shape over the original training order; Eq.-style shift and
  // deviation, with the all-batches shift variant alongside.
  void run_shift_deviation() {
    const auto pre = base();
    const auto cells = run_sweep();
    const auto& shapes = manifest_.sweep->shapes;
    const auto& seeds = manifest_.sweep->seeds;

    std::string key = pre.final_checkpoint;
    std::vector<const SweepCell*> chosen;
    for (const auto& shape : shapes) {
      for (const auto& cell : cells) {
        if (!cell.failed && cell.shape == shape && cell.seed == seeds.front()) {
          chosen.push_back(&cell);
          key += ":" + cell.record.final_checkpoint;
          break;
        }
      }
    }
    StageCache cache(out_ / "analysis" / "shift_deviation_stage");
    const std::string cache_key = hex64(fnv1a64(key.data(), key.size()));
    if (cache.done(cache_key)) return;

    const auto train_split = train_range(corpus(), manifest_.corpus.train_fraction);
    const auto pre_weights = store_.get_checkpoint(pre.pre_cooldown_checkpoint).weights;

    const auto pre_series_base =
        retrospective_eval(pre_weights, manifest_.model, corpus(), train_split,
                           manifest_.base.batch_size, pre.visited_batches);

    struct ShapeRow {
      ShiftDeviationReport cooldown_shift;
      ShiftDeviationReport all_shift;
    };
    std::vector<ShapeRow> rows(chosen.size());
    parallel_cells(chosen.size(), workers_, [&](size_t i) {
      const auto* cell = chosen[i];
      const auto member_weights = store_.get_checkpoint(cell->record.final_checkpoint).weights;
      std::vector<long> order = pre.visited_batches;
      order.insert(order.end(), cell->record.visited_batches.begin(),
                   cell->record.visited_batches.end());
      const size_t P = pre.visited_batches.size();

      auto pre_series = pre_series_base;
      const auto pre_cooldown_part =
          retrospective_eval(pre_weights, manifest_.model, corpus(), train_split,
                             manifest_.base.batch_size, cell->record.visited_batches);
      pre_series.insert(pre_series.end(), pre_cooldown_part.begin(), pre_cooldown_part.end());
      const auto post_series = retrospective_eval(member_weights, manifest_.model, corpus(),
                                                  train_split, manifest_.base.batch_size, order);
      rows[i].cooldown_shift = shift_deviation(pre_series, post_series, P);
      rows[i].all_shift = shift_deviation(pre_series, post_series, 0);
    });

    CsvWriter csv({"shape", "alpha", "shift", "deviation", "shift_all", "deviation_all"});
    for (size_t i = 0; i < chosen.size(); ++i) {
      const auto* cell = chosen[i];
      csv.row({shape_kind_name(cell->shape.kind), CsvWriter::num(cell->shape.alpha),
               CsvWriter::num(rows[i].cooldown_shift.shift),
               CsvWriter::num(rows[i].cooldown_shift.deviation),
               CsvWriter::num(rows[i].all_shift.shift),
               CsvWriter::num(rows[i].all_shift.deviation)});

      CsvWriter series({"index", "difference", "difference_smoothed"});
      const auto& differences = rows[i].cooldown_shift.differences;
      const auto smoothed = window_smooth(differences, 100);
      for (size_t k = 0; k < differences.size(); ++k) {
        series.row({CsvWriter::num(static_cast<long>(k)), CsvWriter::num(differences[k]),
                    CsvWriter::num(smoothed[k])});
      }
      write_artifact(out_ / "analysis" / ("shift_series_" + to_string(cell->shape) + ".csv"),
                     series.str());
    }
    write_artifact(out_ / "analysis" / "shift_deviation.csv", csv.str());
    cache.mark_done(cache_key);
  }

  // --- landscape --------------------------------------------------------------

  RunRecord landscape_run() {
    const LandscapeSpec& spec = landscape_spec();
    RunConfig cfg = cooldown_template();
    cfg.schedule.shape = CooldownShape::sqrt();
    cfg.data.permutation_seed = spec.seed;
    cfg.checkpoint_every = std::max<long>(1, manifest_.cooldown.steps / 2);
    auto record = train_cached(cfg, corpus(), store_, out_ / "runs");
    if (!record.ok()) throw std::runtime_error("landscape run failed: " + record.status);
    return record;
  }

  const LandscapeSpec& landscape_spec() const {
    if (!manifest_.landscape) throw std::runtime_error("manifest has no landscape section");
    return *manifest_.landscape;
  }

  void run_landscape() {
    const LandscapeSpec& spec = landscape_spec();
    const auto pre = base();
    const auto run = landscape_run();
    const auto pre_weights = store_.get_checkpoint(pre.pre_cooldown_checkpoint).weights;
    const auto final_weights = store_.get_checkpoint(run.final_checkpoint).weights;
    const auto e1 = global_direction(pre_weights, final_weights);

    const auto vr = val_range(corpus(), manifest_.corpus.train_fraction);
    std::vector<Batch> eval_batches;
    for (int i = 0; i < spec.eval_batches; ++i) {
      eval_batches.push_back(
          make_batch(corpus(), vr, manifest_.base.batch_size, manifest_.model.seq_len, i));
    }
    const auto train_split = train_range(corpus(), manifest_.corpus.train_fraction);

    for (const auto& at : spec.at) {
      std::string ckpt_id, opt_id;
      long step_pos = 0;
      if (at == "start") {
        ckpt_id = pre.pre_cooldown_checkpoint;
        opt_id = pre.pre_cooldown_opt_state;
        step_pos = 0;
      } else if (at == "mid") {
        if (run.periodic_checkpoints.empty()) throw std::runtime_error("no mid checkpoint");
        ckpt_id = run.periodic_checkpoints.front().checkpoint_id;
        opt_id = run.periodic_checkpoints.front().opt_state_id;
        step_pos = run.periodic_checkpoints.front().step;
      } else if (at == "end") {
        ckpt_id = run.final_checkpoint;
        opt_id = run.final_opt_state;
        step_pos = manifest_.cooldown.steps;
      } else {
        throw std::invalid_argument("landscape.at entries must be start|mid|end");
      }

      const auto center = store_.get_checkpoint(ckpt_id).weights;
      const auto state = store_.get_opt_state(opt_id);
      // Probe batches: the next training batches in the run's order, cycling
      // past the end of the cooldown.
      std::vector<Batch> probe_batches;
      const auto& visited = run.visited_batches;
      for (int i = 0; i < spec.probe_steps; ++i) {
        const long idx = visited[(static_cast<size_t>(step_pos) + i) % visited.size()];
        probe_batches.push_back(make_batch(corpus(), train_split, manifest_.base.batch_size,
                                           manifest_.model.seq_len, idx));
      }
      // The end point sits at lr 0; probing uses the last nonzero scheduled lr.
      const long lr_step = std::min(step_pos + 1, run.config.schedule.total_steps() - 1);
      const double lr = lr_at(run.config.schedule, std::max<long>(lr_step, 1));

      const auto e2 = adam_steps_direction(center, state, manifest_.model, probe_batches, lr,
                                           manifest_.optimizer, spec.probe_steps);
      const auto a_list = linspace(spec.a_range[0], spec.a_range[1], spec.grid_points);
      const auto b_list = linspace(spec.b_range[0], spec.b_range[1], spec.grid_points);
      const auto grid = scan_grid(center, manifest_.model, e1, e2, a_list, b_list, eval_batches);

      CsvWriter csv({"a", "b", "perplexity"});
      for (size_t ai = 0; ai < a_list.size(); ++ai) {
        for (size_t bi = 0; bi < b_list.size(); ++bi) {
          csv.row({CsvWriter::num(a_list[ai]), CsvWriter::num(b_list[bi]),
                   CsvWriter::num(grid.values(static_cast<Eigen::Index>(ai),
                                              static_cast<Eigen::Index>(bi)))});
        }
      }
      write_artifact(out_ / "landscape" / ("landscape_" + at + ".csv"), csv.str());

      std::string eval_key = corpus().source_digest + ":" +
                             std::to_string(spec.eval_batches);
      Json meta{{"at", at},
                {"center_checkpoint", ckpt_id},
                {"e1_norm", e1.norm},
                {"e2_norm", e2.norm},
                {"e1_e2_cosine", direction_cosine(e1, e2)},
                {"probe_lr", lr},
                {"step", step_pos},
                {"eval_subset_digest", hex64(fnv1a64(eval_key.data(), eval_key.size()))},
                {"non_finite_cells", grid.non_finite_cells.size()}};
      write_artifact(out_ / "landscape" / ("landscape_" + at + ".json"), meta.dump(2) + "\n");
    }
  }

  // --- probes -----------------------------------------------------------------

  void run_probe() {
    if (!manifest_.probe) throw std::runtime_error("manifest has no probe section");
    const ProbeSpec& spec = *manifest_.probe;
    RunConfig cfg = cooldown_template();
    cfg.schedule.shape = CooldownShape::sqrt();
    cfg.data.permutation_seed = spec.seed;
    cfg.checkpoint_every = spec.every;
    auto record = train_cached(cfg, corpus(), store_, out_ / "runs");
    if (!record.ok()) throw std::runtime_error("probe run failed: " + record.status);

    const auto train_split = train_range(corpus(), manifest_.corpus.train_fraction);
    const long held_out_first = manifest_.cooldown.portion_first + manifest_.cooldown.portion_count;
    std::vector<Batch> probe_train, probe_eval;
    for (int i = 0; i < spec.train_batches; ++i) {
      probe_train.push_back(make_batch(corpus(), train_split, manifest_.base.batch_size,
                                       manifest_.model.seq_len,
                                       manifest_.cooldown.portion_first + i));
    }
    for (int i = 0; i < spec.eval_batches; ++i) {
      probe_eval.push_back(make_batch(corpus(), train_split, manifest_.base.batch_size,
                                      manifest_.model.seq_len, held_out_first + i));
    }

    ProbeOptions options;
    options.steps = spec.steps;
    options.lr = spec.lr;

    std::vector<std::pair<long, std::string>> points;
    points.emplace_back(0, base().pre_cooldown_checkpoint);
    for (const auto& pc : record.periodic_checkpoints) {
      points.emplace_back(pc.step, pc.checkpoint_id);
    }
    points.emplace_back(manifest_.cooldown.steps, record.final_checkpoint);

    CsvWriter csv({"step", "layer", "eval_ppl_before", "eval_ppl_after"});
    for (const auto& [step, ckpt_id] : points) {
      const auto weights = store_.get_checkpoint(ckpt_id).weights;
      const auto results = probe_layers(weights, manifest_.model, probe_train, probe_eval,
                                        options);
      for (const auto& r : results) {
        csv.row({CsvWriter::num(step), CsvWriter::num(long{r.layer}),
                 CsvWriter::num(r.eval_ppl_before), CsvWriter::num(r.eval_ppl_after)});
      }
    }
    write_artifact(out_ / "probe" / "probe.csv", csv.str());
  }

  // --- exports ----------------------------------------------------------------

  // Plot-ready bundle: schedule curves, run curves, alignment series, copies
  // of every analysis table. Missing analyses are listed, not fatal.
  void run_export() {
    std::vector<std::string> missing;

    if (manifest_.sweep) {
      for (const auto& shape : manifest_.sweep->shapes) {
        ScheduleSpec spec;
        spec.kind = ScheduleKind::wsd;
        spec.peak_lr = manifest_.base.peak_lr;
        spec.warmup_steps = 0;
        spec.stable_steps = 0;
        spec.cooldown_steps = manifest_.cooldown.steps;
        spec.shape = shape;
        std::ostringstream csv;
        write_schedule_csv(spec, csv);
        write_artifact(out_ / "exports" / "schedules" / (to_string(shape) + ".csv"), csv.str());
      }
    }

    for (const auto& entry : std::filesystem::directory_iterator(out_ / "runs")) {
      if (!entry.is_directory()) continue;
      const auto record_path = entry.path() / "record.json";
      const auto metrics_path = entry.path() / "metrics.jsonl";
      if (!std::filesystem::exists(record_path) || !std::filesystem::exists(metrics_path)) {
        continue;
      }
      const auto record = run_record_from_json(Json::parse(read_file_bytes(record_path)));
      const auto rows = load_metrics(metrics_path);

      CsvWriter curve({"step", "val_perplexity"});
      for (const auto& row : rows) {
        if (row.val_loss) curve.row({CsvWriter::num(row.step), CsvWriter::num(std::exp(*row.val_loss))});
      }
      write_artifact(out_ / "exports" / "runs" / (record.run_id + "_curve.csv"), curve.str());

      CsvWriter series({"step", "lr", "train_loss", "grad_norm", "grad_norm_smoothed",
                        "momentum_alignment", "momentum_alignment_smoothed"});
      std::vector<double> norms, aligns;
      for (const auto& row : rows) {
        norms.push_back(row.grad_norm);
        aligns.push_back(row.momentum_alignment.value_or(0.0));
      }
      const auto norms_s = window_smooth(norms, manifest_.analysis.alignment_window);
      const auto aligns_s = window_smooth(aligns, manifest_.analysis.alignment_window);
      for (size_t i = 0; i < rows.size(); ++i) {
        series.row({CsvWriter::num(rows[i].step), CsvWriter::num(rows[i].lr),
                    CsvWriter::num(rows[i].train_loss), CsvWriter::num(norms[i]),
                    CsvWriter::num(norms_s[i]), CsvWriter::num(aligns[i]),
                    CsvWriter::num(aligns_s[i])});
      }
      write_artifact(out_ / "exports" / "runs" / (record.run_id + "_series.csv"), series.str());
    }

    const char* tables[] = {"bias_variance_loss.csv",   "bias_variance_weight.csv",
                            "bias_variance_loss_simple.csv", "bias_variance_kl.csv",
                            "shift_deviation.csv",      "souping.csv",
                            "batch_sweep.csv",          "beta_sweep.csv"};
    for (const char* table : tables) {
      const auto src = out_ / "analysis" / table;
      if (std::filesystem::exists(src)) {
        write_artifact(out_ / "exports" / "tables" / table, read_file_bytes(src));
      } else {
        missing.emplace_back(std::string("analysis/") + table);
      }
    }
    if (std::filesystem::exists(out_ / "landscape")) {
      for (const auto& entry : std::filesystem::directory_iterator(out_ / "landscape")) {
        write_artifact(out_ / "exports" / "landscape" / entry.path().filename(),
                       read_file_bytes(entry.path()));
      }
    } else {
      missing.emplace_back("landscape/");
    }
    const auto probe_csv = out_ / "probe" / "probe.csv";
    if (std::filesystem::exists(probe_csv)) {
      write_artifact(out_ / "exports" / "probe.csv", read_file_bytes(probe_csv));
    } else {
      missing.emplace_back("probe/probe.csv");
    }

    std::string missing_text;
    for (const auto& m : missing) missing_text += m + "\n";
    write_artifact(out_ / "exports" / "missing.txt", missing_text);
  }

  // Re-hashes every recorded artifact; returns the mismatches. Checkpoint
  // files are self-addressed, so their names double as expected hashes.
  std::vector<ArtifactIndex::Mismatch> run_verify() {
    ArtifactIndex index(out_);
    auto mismatches = index.verify();
    if (std::filesystem::exists(store_.dir())) {
      for (const auto& entry : std::filesystem::directory_iterator(store_.dir())) {
        const auto name = entry.path().filename().string();
        const auto stem = entry.path().stem().string();
        const auto pos = stem.find('_');
        if (pos == std::string::npos) continue;
        const std::string expected = stem.substr(pos + 1);
        const std::string actual = content_id(read_file_bytes(entry.path()));
        if (expected != actual) {
          mismatches.push_back({"store/" + name, expected, actual});
        }
      }
    }
    return mismatches;
  }

  // All stages requested by the manifest, in dependency order.
  void run_all() {
    base();
    if (manifest_.sweep) run_sweep();
    if (manifest_.reference) run_references();
    if (manifest_.souping) run_souping();
    if (manifest_.batch_sweep) run_batch_sweep();
    if (manifest_.beta_sweep) run_beta_sweep();
    if (manifest_.sweep && manifest_.reference) run_analysis();
    if (manifest_.landscape) run_landscape();
    if (manifest_.probe) run_probe();
    run_export();
  }

 private:
  RowMat<float> predictions_on(const WeightVector<float>& weights,
                               const std::vector<Batch>& batches) {
    RowMat<float> all;
    Eigen::Index rows = 0;
    for (const auto& b : batches) rows += b.batch_size() * manifest_.model.seq_len;
    all.resize(rows, manifest_.model.vocab_size);
    Eigen::Index cursor = 0;
    for (const auto& b : batches) {
      const auto probs = token_distributions(weights, manifest_.model, b);
      all.middleRows(cursor, probs.rows()) = probs;
      cursor += probs.rows();
    }
    return all;
  }

  void note_failures(const std::vector<SweepCell>& cells, const char* stage) {
    for (const auto& cell : cells) {
      if (cell.failed) {
        failed_cells_ += 1;
        std::cerr << stage << " cell (" << to_string(cell.shape) << ", seed " << cell.seed
                  << ") failed: " << cell.error << "\n";
      }
    }
  }

  void write_artifact(const std::filesystem::path& path, const std::string& bytes) {
    write_file_bytes(path, bytes);
    ArtifactIndex index(out_);
    index.record(path);
  }

  Manifest manifest_;
  std::filesystem::path out_;
  ArtifactStore store_;
  int workers_ = 2;
  int failed_cells_ = 0;
  std::optional<TokenCorpus> corpus_;
  std::optional<std::vector<Batch>> val_set_;
};

}  // namespace wsdlab
