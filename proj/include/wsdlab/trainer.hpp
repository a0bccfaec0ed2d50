// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "wsdlab/checkpoint.hpp"
#include "wsdlab/config_json.hpp"
#include "wsdlab/datapipe.hpp"
#include "wsdlab/nanomodel.hpp"
#include "wsdlab/optimizer.hpp"
#include "wsdlab/schedules.hpp"

namespace wsdlab {

struct DataSpec {
  std::string corpus;
  std::string tokenizer = "byte";
  double train_fraction = 0.9;
  int batch_size = 16;
  long portion_first = 0;   // batch index within the train split
  long portion_count = -1;  // -1 means all train batches
  uint64_t permutation_seed = 0;
  bool with_repetition = false;  // allow more steps than portion batches
};

inline Json data_to_json(const DataSpec& d) {
  return Json{{"corpus", d.corpus},
              {"tokenizer", d.tokenizer},
              {"train_fraction", d.train_fraction},
              {"batch_size", d.batch_size},
              {"portion_first", d.portion_first},
              {"portion_count", d.portion_count},
              {"permutation_seed", d.permutation_seed},
              {"with_repetition", d.with_repetition}};
}

inline DataSpec data_from_json(const Json& j) {
  require_keys(j, "data",
               {"corpus", "tokenizer", "train_fraction", "batch_size", "portion_first",
                "portion_count", "permutation_seed", "with_repetition"});
  DataSpec d;
  read_field(j, "corpus", d.corpus);
  read_field(j, "tokenizer", d.tokenizer);
  read_field(j, "train_fraction", d.train_fraction);
  read_field(j, "batch_size", d.batch_size);
  read_field(j, "portion_first", d.portion_first);
  read_field(j, "portion_count", d.portion_count);
  read_field(j, "permutation_seed", d.permutation_seed);
  read_field(j, "with_repetition", d.with_repetition);
  return d;
}

struct RunConfig {
  ModelConfig model;
  ScheduleSpec schedule;
  OptimizerConfig optimizer;
  DataSpec data;
  std::string resume_from;       // checkpoint id, empty for fresh init
  std::string resume_opt_state;  // optimizer-state id, empty for fresh moments
  bool reset_optimizer = false;
  bool no_weight_decay = false;
  long eval_every = 100;
  int val_batches = 16;
  long checkpoint_every = 0;  // extra periodic checkpoints, 0 = boundaries only
  uint64_t seed = 0;

  void validate() const {
    model.validate();
    // A zero-length schedule is the degenerate no-op run (final state equals
    // the initial state); anything longer must be a valid schedule.
    if (schedule.total_steps() > 0) {
      schedule.validate();
    } else if (schedule.total_steps() < 0) {
      throw std::invalid_argument("negative schedule length");
    }
    optimizer.validate();
    if (eval_every <= 0) throw std::invalid_argument("eval_every must be positive");
    if (val_batches <= 0) throw std::invalid_argument("val_batches must be positive");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
    if (data.batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  }
};

inline Json run_config_to_json(const RunConfig& cfg) {
  return Json{{"model", model_to_json(cfg.model)},
              {"schedule", schedule_to_json(cfg.schedule)},
              {"optimizer", optimizer_to_json(cfg.optimizer)},
              {"data", data_to_json(cfg.data)},
              {"resume_from", cfg.resume_from},
              {"resume_opt_state", cfg.resume_opt_state},
              {"reset_optimizer", cfg.reset_optimizer},
              {"no_weight_decay", cfg.no_weight_decay},
              {"eval_every", cfg.eval_every},
              {"val_batches", cfg.val_batches},
              {"checkpoint_every", cfg.checkpoint_every},
              {"seed", cfg.seed}};
}

inline RunConfig run_config_from_json(const Json& j) {
  require_keys(j, "run config",
               {"model", "schedule", "optimizer", "data", "resume_from", "resume_opt_state",
                "reset_optimizer", "no_weight_decay", "eval_every", "val_batches",
                "checkpoint_every", "seed"});
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
  if (j.contains("schedule")) cfg.schedule = schedule_from_json(j.at("schedule"));
  if (j.contains("optimizer")) cfg.optimizer = optimizer_from_json(j.at("optimizer"));
  if (j.contains("data")) cfg.data = data_from_json(j.at("data"));
  read_field(j, "resume_from", cfg.resume_from);
  read_field(j, "resume_opt_state", cfg.resume_opt_state);
  read_field(j, "reset_optimizer", cfg.reset_optimizer);
  read_field(j, "no_weight_decay", cfg.no_weight_decay);
  read_field(j, "eval_every", cfg.eval_every);
  read_field(j, "val_batches", cfg.val_batches);
  read_field(j, "checkpoint_every", cfg.checkpoint_every);
  read_field(j, "seed", cfg.seed);
  cfg.validate();
  return cfg;
}

// Identifies a run by the content of its configuration.
inline std::string run_id_for(const RunConfig& cfg) {
  const std::string dump = run_config_to_json(cfg).dump();
  return hex64(fnv1a64(dump.data(), dump.size()));
}

struct MetricRow {
  long step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> momentum_alignment;
  std::optional<double> val_loss;
};

struct SavedCheckpoint {
  long step = 0;
  std::string checkpoint_id;
  std::string opt_state_id;
};

struct RunRecord {
  RunConfig config;
  std::string run_id;
  std::string status = "ok";  // or "aborted: <reason>"
  std::string warmup_checkpoint;
  std::string pre_cooldown_checkpoint;
  std::string pre_cooldown_opt_state;
  std::string final_checkpoint;
  std::string final_opt_state;
  std::vector<SavedCheckpoint> periodic_checkpoints;
  std::vector<long> visited_batches;  // absolute train-split indices, in order
  double final_train_loss = 0.0;
  double final_val_loss = 0.0;
  double wall_seconds = 0.0;

  double final_val_ppl() const { return std::exp(final_val_loss); }
  bool ok() const { return status == "ok"; }
};

inline Json run_record_to_json(const RunRecord& r) {
  Json periodic = Json::array();
  for (const auto& pc : r.periodic_checkpoints) {
    periodic.push_back(Json{{"step", pc.step},
                            {"checkpoint", pc.checkpoint_id},
                            {"opt_state", pc.opt_state_id}});
  }
  return Json{{"config", run_config_to_json(r.config)},
              {"run_id", r.run_id},
              {"status", r.status},
              {"warmup_checkpoint", r.warmup_checkpoint},
              {"pre_cooldown_checkpoint", r.pre_cooldown_checkpoint},
              {"pre_cooldown_opt_state", r.pre_cooldown_opt_state},
              {"final_checkpoint", r.final_checkpoint},
              {"final_opt_state", r.final_opt_state},
              {"periodic_checkpoints", periodic},
              {"visited_batches", r.visited_batches},
              {"final_train_loss",
               std::isfinite(r.final_train_loss) ? Json(r.final_train_loss) : Json(nullptr)},
              {"final_val_loss",
               std::isfinite(r.final_val_loss) ? Json(r.final_val_loss) : Json(nullptr)},
              {"wall_seconds", r.wall_seconds}};
}

inline RunRecord run_record_from_json(const Json& j) {
  RunRecord r;
  r.config = run_config_from_json(j.at("config"));
  r.run_id = j.at("run_id").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.warmup_checkpoint = j.at("warmup_checkpoint").get<std::string>();
  r.pre_cooldown_checkpoint = j.at("pre_cooldown_checkpoint").get<std::string>();
  r.pre_cooldown_opt_state = j.at("pre_cooldown_opt_state").get<std::string>();
  r.final_checkpoint = j.at("final_checkpoint").get<std::string>();
  r.final_opt_state = j.at("final_opt_state").get<std::string>();
  for (const auto& pc : j.at("periodic_checkpoints")) {
    r.periodic_checkpoints.push_back({pc.at("step").get<long>(),
                                      pc.at("checkpoint").get<std::string>(),
                                      pc.at("opt_state").get<std::string>()});
  }
  r.visited_batches = j.at("visited_batches").get<std::vector<long>>();
  r.final_train_loss =
      j.at("final_train_loss").is_null() ? std::nan("") : j.at("final_train_loss").get<double>();
  r.final_val_loss =
      j.at("final_val_loss").is_null() ? std::nan("") : j.at("final_val_loss").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

// Fixed validation subset: the first `count` batches of the validation split.
// Chosen once per corpus so losses are comparable across runs.
inline std::vector<Batch> validation_batches(const TokenCorpus& corpus, const ModelConfig& model,
                                             double train_fraction, int batch_size, int count) {
  const auto range = val_range(corpus, train_fraction);
  const long available = n_batches_in(range, batch_size, model.seq_len);
  if (available < count) throw std::runtime_error("validation split too small for requested subset");
  std::vector<Batch> batches;
  batches.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    batches.push_back(make_batch(corpus, range, batch_size, model.seq_len, i));
  }
  return batches;
}

template <typename T>
double mean_eval_loss(const WeightVector<T>& w, const ModelConfig& model,
                      const std::vector<Batch>& batches) {
  if (batches.empty()) throw std::invalid_argument("empty evaluation set");
  double total = 0.0;
  for (const auto& batch : batches) total += eval_loss(w, model, batch);
  return total / static_cast<double>(batches.size());
}

namespace detail {

inline Json metric_row_to_json(const MetricRow& row) {
  Json j{{"step", row.step},
         {"lr", row.lr},
         {"train_loss", row.train_loss},
         {"grad_norm", row.grad_norm}};
  j["momentum_alignment"] = row.momentum_alignment ? Json(*row.momentum_alignment) : Json(nullptr);
  j["val_loss"] = row.val_loss ? Json(*row.val_loss) : Json(nullptr);
  return j;
}

inline MetricRow metric_row_from_json(const Json& j) {
  MetricRow row;
  row.step = j.at("step").get<long>();
  row.lr = j.at("lr").get<double>();
  row.train_loss = j.at("train_loss").get<double>();
  row.grad_norm = j.at("grad_norm").get<double>();
  if (!j.at("momentum_alignment").is_null()) {
    row.momentum_alignment = j.at("momentum_alignment").get<double>();
  }
  if (!j.at("val_loss").is_null()) row.val_loss = j.at("val_loss").get<double>();
  return row;
}

}  // namespace detail

inline std::vector<MetricRow> load_metrics(const std::filesystem::path& jsonl_path) {
  std::ifstream f(jsonl_path);
  if (!f) throw std::runtime_error("cannot open " + jsonl_path.string());
  std::vector<MetricRow> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    rows.push_back(detail::metric_row_from_json(Json::parse(line)));
  }
  return rows;
}

// Trains one run to completion. Deterministic given (config, corpus): all
// randomness flows from the config seeds and the computation is
// single-threaded. Metrics are appended to <run_dir>/metrics.jsonl, the
// record to <run_dir>/record.json, checkpoints into the store.
inline RunRecord train(const RunConfig& cfg, const TokenCorpus& corpus, const ArtifactStore& store,
                       const std::filesystem::path& run_dir) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  RunRecord record;
  record.config = cfg;
  record.run_id = run_id_for(cfg);

  WeightVector<float> weights;
  OptimizerState<float> state;
  if (!cfg.resume_from.empty()) {
    Checkpoint ckpt = store.get_checkpoint(cfg.resume_from);
    if (!(ckpt.config == cfg.model)) {
      throw std::invalid_argument("resume checkpoint model config differs from run config");
    }
    weights = std::move(ckpt.weights);
    if (!cfg.resume_opt_state.empty() && !cfg.reset_optimizer) {
      state = store.get_opt_state(cfg.resume_opt_state);
      require_same_layout(state.exp_avg.layout, weights.layout);
    } else {
      state = OptimizerState<float>(weights.layout);
    }
  } else {
    weights = init_weights(cfg.model, cfg.seed);
    state = OptimizerState<float>(weights.layout);
  }

  const TokenRange train_split = train_range(corpus, cfg.data.train_fraction);
  const long n_train_batches = n_batches_in(train_split, cfg.data.batch_size, cfg.model.seq_len);
  const long portion_first = cfg.data.portion_first;
  const long portion_count = cfg.data.portion_count < 0
                                 ? n_train_batches - portion_first
                                 : cfg.data.portion_count;
  if (portion_first < 0 || portion_count <= 0 || portion_first + portion_count > n_train_batches) {
    throw std::invalid_argument("data portion outside the train split");
  }

  const long total_steps = cfg.schedule.total_steps();
  std::vector<size_t> order;
  if (cfg.data.with_repetition && total_steps > portion_count) {
    order = permute_with_repetition(portion_count, total_steps, cfg.data.permutation_seed);
  } else {
    if (total_steps > portion_count) {
      throw std::invalid_argument("more steps than portion batches; set with_repetition");
    }
    order = permute(portion_count, cfg.data.permutation_seed);
    order.resize(static_cast<size_t>(total_steps));
  }

  const auto val_set = validation_batches(corpus, cfg.model, cfg.data.train_fraction,
                                          cfg.data.batch_size, cfg.val_batches);

  OptimizerConfig opt_cfg = cfg.optimizer;
  if (cfg.no_weight_decay) opt_cfg.weight_decay = 0.0;

  std::filesystem::create_directories(run_dir);
  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write metrics in " + run_dir.string());

  const long warmup_end = cfg.schedule.warmup_steps;
  const long stable_end = cfg.schedule.warmup_steps + cfg.schedule.stable_steps;

  record.visited_batches.reserve(static_cast<size_t>(total_steps));
  double last_train_loss = 0.0;

  auto save_boundary = [&](long step) {
    const std::string ckpt_id = store.put_checkpoint(cfg.model, weights);
    const std::string opt_id = store.put_opt_state(state);
    if (step == warmup_end && cfg.schedule.warmup_steps > 0) record.warmup_checkpoint = ckpt_id;
    if (step == stable_end) {
      record.pre_cooldown_checkpoint = ckpt_id;
      record.pre_cooldown_opt_state = opt_id;
    }
    return std::pair{ckpt_id, opt_id};
  };

  for (long step = 1; step <= total_steps; ++step) {
    const long batch_index = portion_first + static_cast<long>(order[step - 1]);
    record.visited_batches.push_back(batch_index);
    const Batch batch =
        make_batch(corpus, train_split, cfg.data.batch_size, cfg.model.seq_len, batch_index);

    auto bw = loss_and_gradients(weights, cfg.model, batch);
    last_train_loss = bw.loss;
    if (!std::isfinite(bw.loss)) {
      record.status = "aborted: non-finite loss at step " + std::to_string(step);
      break;
    }

    MetricRow row;
    row.step = step;
    row.train_loss = bw.loss;
    const auto alignment = momentum_alignment(state, bw.grads);
    if (alignment.defined) row.momentum_alignment = alignment.weighted_mean;

    if (opt_cfg.clip_norm) {
      row.grad_norm = clip_gradients(bw.grads, *opt_cfg.clip_norm).norm_before;
    } else {
      double sq = 0.0;
      for (const float g : bw.grads.values) sq += static_cast<double>(g) * g;
      row.grad_norm = std::sqrt(sq);
    }
    if (!std::isfinite(row.grad_norm)) {
      record.status = "aborted: non-finite gradient at step " + std::to_string(step);
      break;
    }

    row.lr = lr_at(cfg.schedule, step);
    adamw_step(weights, bw.grads, state, row.lr, opt_cfg);

    if ((step == warmup_end && cfg.schedule.warmup_steps > 0) ||
        (step == stable_end && step < total_steps)) {
      save_boundary(step);
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total_steps) {
      const auto [ckpt_id, opt_id] = save_boundary(step);
      record.periodic_checkpoints.push_back({step, ckpt_id, opt_id});
    }

    if (step % cfg.eval_every == 0 || step == total_steps) {
      row.val_loss = mean_eval_loss(weights, cfg.model, val_set);
    }
    metrics << detail::metric_row_to_json(row).dump() << '\n';
  }

  record.final_checkpoint = store.put_checkpoint(cfg.model, weights);
  record.final_opt_state = store.put_opt_state(state);
  if (stable_end == total_steps && record.pre_cooldown_checkpoint.empty()) {
    record.pre_cooldown_checkpoint = record.final_checkpoint;
    record.pre_cooldown_opt_state = record.final_opt_state;
  }
  record.final_train_loss = last_train_loss;
  record.final_val_loss =
      record.ok() ? mean_eval_loss(weights, cfg.model, val_set) : std::nan("");

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  write_file_bytes(run_dir / "record.json", run_record_to_json(record).dump(2) + "\n");
  return record;
}

// Returns the cached record when the run directory already holds a completed
// run of this exact configuration; trains otherwise. Content-addressed ids
// make the cache safe under the determinism contract.
inline RunRecord train_cached(const RunConfig& cfg, const TokenCorpus& corpus,
                              const ArtifactStore& store, const std::filesystem::path& runs_root) {
  const std::string id = run_id_for(cfg);
  const auto run_dir = runs_root / id;
  const auto record_path = run_dir / "record.json";
  if (std::filesystem::exists(record_path)) {
    auto record = run_record_from_json(Json::parse(read_file_bytes(record_path)));
    if (record.ok() && record.run_id == id) return record;
  }
  return train(cfg, corpus, store, run_dir);
}

// Cooldown resumption from a pre-cooldown checkpoint: optimizer state is
// restored unless the reset flag is set; the data order comes from the
// permutation seed.
inline RunConfig cooldown_config(const RunConfig& base, const std::string& pre_ckpt,
                                 const std::string& pre_opt_state, CooldownShape shape,
                                 long cooldown_steps, uint64_t permutation_seed) {
  RunConfig cfg = base;
  cfg.resume_from = pre_ckpt;
  cfg.resume_opt_state = pre_opt_state;
  cfg.schedule.warmup_steps = 0;
  cfg.schedule.stable_steps = 0;
  cfg.schedule.cooldown_steps = cooldown_steps;
  cfg.schedule.kind = ScheduleKind::wsd;
  cfg.schedule.shape = shape;
  cfg.data.permutation_seed = permutation_seed;
  return cfg;
}

inline RunRecord resume_cooldown(const RunConfig& cooldown_cfg, const TokenCorpus& corpus,
                                 const ArtifactStore& store,
                                 const std::filesystem::path& runs_root) {
  if (cooldown_cfg.resume_from.empty()) {
    throw std::invalid_argument("resume_cooldown requires a pre-cooldown checkpoint");
  }
  return train_cached(cooldown_cfg, corpus, store, runs_root);
}

// Bounded worker pool; cells own disjoint outputs, so the only shared state
// is the immutable corpus and the content-addressed store.
inline void parallel_cells(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const size_t n_threads = std::min<size_t>(static_cast<size_t>(workers), n);
  pool.reserve(n_threads);
  for (size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct SweepCell {
  CooldownShape shape;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  RunRecord record;
};

// |shapes| x |seeds| independent cooldowns from one pre-cooldown checkpoint;
// a failing cell is marked and the sweep continues.
inline std::vector<SweepCell> permutation_sweep(const RunConfig& cooldown_template,
                                                const std::vector<CooldownShape>& shapes,
                                                const std::vector<uint64_t>& seeds,
                                                const TokenCorpus& corpus,
                                                const ArtifactStore& store,
                                                const std::filesystem::path& runs_root,
                                                int workers = 1) {
  if (seeds.size() < 1) throw std::invalid_argument("sweep needs at least one seed");
  std::vector<SweepCell> cells(shapes.size() * seeds.size());
  parallel_cells(cells.size(), workers, [&](size_t i) {
    const auto& shape = shapes[i / seeds.size()];
    const uint64_t seed = seeds[i % seeds.size()];
    SweepCell& cell = cells[i];
    cell.shape = shape;
    cell.seed = seed;
    try {
      RunConfig cfg = cooldown_template;
      cfg.schedule.shape = shape;
      cfg.data.permutation_seed = seed;
      cell.record = train_cached(cfg, corpus, store, runs_root);
      cell.failed = !cell.record.ok();
      if (cell.failed) cell.error = cell.record.status;
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
  });
  return cells;
}

// Reference runs: much longer cooldowns (sqrt shape) over the same dataset
// portion, permuted with repetitions to fill the extended duration.
inline std::vector<SweepCell> train_reference(const RunConfig& cooldown_template,
                                              const std::vector<uint64_t>& seeds,
                                              long reference_cooldown_steps,
                                              const TokenCorpus& corpus,
                                              const ArtifactStore& store,
                                              const std::filesystem::path& runs_root,
                                              int workers = 1) {
  if (reference_cooldown_steps <= cooldown_template.schedule.cooldown_steps) {
    throw std::invalid_argument("reference runs must be longer than sweep runs");
  }
  RunConfig ref_template = cooldown_template;
  ref_template.schedule.cooldown_steps = reference_cooldown_steps;
  ref_template.schedule.shape = CooldownShape::sqrt();
  ref_template.data.with_repetition = true;
  return permutation_sweep(ref_template, {CooldownShape::sqrt()}, seeds, corpus, store, runs_root,
                           workers);
}

}  // namespace wsdlab
