// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wsdlab/analysis.hpp"
#include "wsdlab/landscape.hpp"
#include "wsdlab/probe.hpp"
#include "wsdlab/trainer.hpp"

namespace wsdlab {

// ---------------------------------------------------------------------------
// Manifest schema. One JSON file drives a whole experiment: corpus, the base
// (pre-cooldown) run, cooldown sweeps, references, souping, hyperparameter
// sweeps, analyses, landscape scans and probes. Unknown keys are errors.
// ---------------------------------------------------------------------------

struct CorpusSpec {
  std::string path;
  std::string tokenizer = "byte";
  double train_fraction = 0.9;
};

struct BaseSpec {
  double peak_lr = 2e-3;
  long warmup_steps = 300;
  long stable_steps = 2700;
  long portion_first = 0;
  long portion_count = 3000;
  int batch_size = 16;
  uint64_t permutation_seed = 1;
  uint64_t seed = 1;
  long eval_every = 150;
  int val_batches = 16;
};

struct CooldownSpec {
  long steps = 750;
  long portion_first = 3000;
  long portion_count = 750;
};

struct SweepSpec {
  std::vector<CooldownShape> shapes;
  std::vector<uint64_t> seeds;
};

struct ReferenceSpec {
  std::vector<uint64_t> seeds;
  long length_factor = 2;  // reference cooldown = factor * sweep cooldown
};

struct SoupingSpec {
  std::vector<CooldownShape> shapes;
  int portions = 4;
  uint64_t seed = 500;
  bool longer_run = true;
};

struct BatchSweepSpec {
  std::vector<long> scales;
  bool match_half_life = true;
  std::string lr_table = "sqrt";  // "sqrt" or "tuned"
  uint64_t seed = 600;
};

struct BetaSweepSpec {
  std::vector<double> powers;
  std::string vary = "both";  // "both" or "beta2_only"
  uint64_t seed = 700;
};

struct AnalysisSpec {
  std::vector<std::string> spaces = {"loss", "weight", "loss_simple"};
  bool shift_deviation = false;
  int kl_batches = 4;
  size_t alignment_window = 40;
};

struct LandscapeSpec {
  std::vector<std::string> at = {"start", "end"};
  int grid_points = 9;
  std::array<double, 2> a_range = {-0.5, 1.5};
  std::array<double, 2> b_range = {-2.0, 2.0};
  int eval_batches = 4;
  int probe_steps = 10;
  uint64_t seed = 900;
};

struct ProbeSpec {
  long every = 250;
  long steps = 500;
  int train_batches = 8;
  int eval_batches = 4;
  double lr = 1e-3;
  uint64_t seed = 900;
};

struct Manifest {
  std::string name = "experiment";
  CorpusSpec corpus;
  ModelConfig model;
  OptimizerConfig optimizer;
  BaseSpec base;
  CooldownSpec cooldown;
  std::optional<SweepSpec> sweep;
  std::optional<ReferenceSpec> reference;
  std::optional<SoupingSpec> souping;
  std::optional<BatchSweepSpec> batch_sweep;
  std::optional<BetaSweepSpec> beta_sweep;
  AnalysisSpec analysis;
  std::optional<LandscapeSpec> landscape;
  std::optional<ProbeSpec> probe;
  std::string output_dir = "wsdlab_out";
  int workers = 2;
};

namespace detail {

inline std::vector<CooldownShape> shapes_from_json(const Json& j) {
  std::vector<CooldownShape> shapes;
  for (const auto& s : j) shapes.push_back(parse_shape(s.get<std::string>()));
  return shapes;
}

}  // namespace detail

inline Manifest manifest_from_json(const Json& j) {
  require_keys(j, "manifest",
               {"version", "name", "corpus", "model", "optimizer", "base", "cooldown", "sweep",
                "reference", "souping", "batch_sweep", "beta_sweep", "analysis", "landscape",
                "probe", "output_dir", "workers"});
  if (!j.contains("version") || j.at("version").get<int>() != 1) {
    throw std::invalid_argument("manifest requires \"version\": 1");
  }
  Manifest m;
  read_field(j, "name", m.name);
  read_field(j, "output_dir", m.output_dir);
  read_field(j, "workers", m.workers);

  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    require_keys(c, "corpus", {"path", "tokenizer", "train_fraction"});
    read_field(c, "path", m.corpus.path);
    read_field(c, "tokenizer", m.corpus.tokenizer);
    read_field(c, "train_fraction", m.corpus.train_fraction);
  }
  if (j.contains("model")) m.model = model_from_json(j.at("model"));
  if (j.contains("optimizer")) m.optimizer = optimizer_from_json(j.at("optimizer"));

  if (j.contains("base")) {
    const auto& b = j.at("base");
    require_keys(b, "base",
                 {"peak_lr", "warmup_steps", "stable_steps", "portion_first", "portion_count",
                  "batch_size", "permutation_seed", "seed", "eval_every", "val_batches"});
    read_field(b, "peak_lr", m.base.peak_lr);
    read_field(b, "warmup_steps", m.base.warmup_steps);
    read_field(b, "stable_steps", m.base.stable_steps);
    read_field(b, "portion_first", m.base.portion_first);
    read_field(b, "portion_count", m.base.portion_count);
    read_field(b, "batch_size", m.base.batch_size);
    read_field(b, "permutation_seed", m.base.permutation_seed);
    read_field(b, "seed", m.base.seed);
    read_field(b, "eval_every", m.base.eval_every);
    read_field(b, "val_batches", m.base.val_batches);
  }
  if (j.contains("cooldown")) {
    const auto& c = j.at("cooldown");
    require_keys(c, "cooldown", {"steps", "portion_first", "portion_count"});
    read_field(c, "steps", m.cooldown.steps);
    read_field(c, "portion_first", m.cooldown.portion_first);
    read_field(c, "portion_count", m.cooldown.portion_count);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    require_keys(s, "sweep", {"shapes", "seeds"});
    SweepSpec spec;
    if (s.contains("shapes")) spec.shapes = detail::shapes_from_json(s.at("shapes"));
    read_field(s, "seeds", spec.seeds);
    m.sweep = spec;
  }
  if (j.contains("reference")) {
    const auto& r = j.at("reference");
    require_keys(r, "reference", {"seeds", "length_factor"});
    ReferenceSpec spec;
    read_field(r, "seeds", spec.seeds);
    read_field(r, "length_factor", spec.length_factor);
    m.reference = spec;
  }
  if (j.contains("souping")) {
    const auto& s = j.at("souping");
    require_keys(s, "souping", {"shapes", "portions", "seed", "longer_run"});
    SoupingSpec spec;
    if (s.contains("shapes")) spec.shapes = detail::shapes_from_json(s.at("shapes"));
    read_field(s, "portions", spec.portions);
    read_field(s, "seed", spec.seed);
    read_field(s, "longer_run", spec.longer_run);
    m.souping = spec;
  }
  if (j.contains("batch_sweep")) {
    const auto& b = j.at("batch_sweep");
    require_keys(b, "batch_sweep", {"scales", "match_half_life", "lr_table", "seed"});
    BatchSweepSpec spec;
    read_field(b, "scales", spec.scales);
    read_field(b, "match_half_life", spec.match_half_life);
    read_field(b, "lr_table", spec.lr_table);
    read_field(b, "seed", spec.seed);
    m.batch_sweep = spec;
  }
  if (j.contains("beta_sweep")) {
    const auto& b = j.at("beta_sweep");
    require_keys(b, "beta_sweep", {"powers", "vary", "seed"});
    BetaSweepSpec spec;
    read_field(b, "powers", spec.powers);
    read_field(b, "vary", spec.vary);
    read_field(b, "seed", spec.seed);
    if (spec.vary != "both" && spec.vary != "beta2_only") {
      throw std::invalid_argument("beta_sweep.vary must be 'both' or 'beta2_only'");
    }
    m.beta_sweep = spec;
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    require_keys(a, "analysis", {"spaces", "shift_deviation", "kl_batches", "alignment_window"});
    read_field(a, "spaces", m.analysis.spaces);
    read_field(a, "shift_deviation", m.analysis.shift_deviation);
    read_field(a, "kl_batches", m.analysis.kl_batches);
    read_field(a, "alignment_window", m.analysis.alignment_window);
  }
  if (j.contains("landscape")) {
    const auto& l = j.at("landscape");
    require_keys(l, "landscape",
                 {"at", "grid_points", "a_range", "b_range", "eval_batches", "probe_steps",
                  "seed"});
    LandscapeSpec spec;
    read_field(l, "at", spec.at);
    read_field(l, "grid_points", spec.grid_points);
    if (l.contains("a_range")) {
      spec.a_range = {l.at("a_range").at(0).get<double>(), l.at("a_range").at(1).get<double>()};
    }
    if (l.contains("b_range")) {
      spec.b_range = {l.at("b_range").at(0).get<double>(), l.at("b_range").at(1).get<double>()};
    }
    read_field(l, "eval_batches", spec.eval_batches);
    read_field(l, "probe_steps", spec.probe_steps);
    read_field(l, "seed", spec.seed);
    m.landscape = spec;
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    require_keys(p, "probe", {"every", "steps", "train_batches", "eval_batches", "lr", "seed"});
    ProbeSpec spec;
    read_field(p, "every", spec.every);
    read_field(p, "steps", spec.steps);
    read_field(p, "train_batches", spec.train_batches);
    read_field(p, "eval_batches", spec.eval_batches);
    read_field(p, "lr", spec.lr);
    read_field(p, "seed", spec.seed);
    m.probe = spec;
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(Json::parse(read_file_bytes(path)));
}

// ---------------------------------------------------------------------------
// CSV helpers. Numbers print with enough digits to re-parse exactly.
// ---------------------------------------------------------------------------

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {
    out_ << std::setprecision(17);
    for (size_t i = 0; i < columns_.size(); ++i) out_ << (i ? "," : "") << columns_[i];
    out_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size()) throw std::invalid_argument("csv row arity mismatch");
    for (size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

  static std::string num(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  }
  static std::string num(long v) { return std::to_string(v); }

  std::string str() const { return out_.str(); }

 private:
  std::vector<std::string> columns_;
  std::ostringstream out_;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  double value(size_t row, const std::string& column) const {
    for (size_t c = 0; c < columns.size(); ++c) {
      if (columns[c] == column) return std::stod(rows.at(row).at(c));
    }
    throw std::out_of_range("no csv column " + column);
  }
  const std::string& cell(size_t row, const std::string& column) const {
    for (size_t c = 0; c < columns.size(); ++c) {
      if (columns[c] == column) return rows.at(row).at(c);
    }
    throw std::out_of_range("no csv column " + column);
  }
};

inline CsvTable parse_csv(const std::string& text) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (header) {
      table.columns = cells;
      header = false;
    } else {
      table.rows.push_back(cells);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Artifact index: relative path -> content hash, checked by `verify`.
// ---------------------------------------------------------------------------

class ArtifactIndex {
 public:
  explicit ArtifactIndex(std::filesystem::path root) : root_(std::move(root)) {
    const auto path = index_path();
    if (std::filesystem::exists(path)) {
      const Json j = Json::parse(read_file_bytes(path));
      for (const auto& [key, value] : j.items()) entries_[key] = value.get<std::string>();
    }
  }

  void record(const std::filesystem::path& file) {
    const auto rel = std::filesystem::relative(file, root_).generic_string();
    entries_[rel] = content_id(read_file_bytes(file));
    save();
  }

  struct Mismatch {
    std::string path;
    std::string expected;
    std::string actual;  // empty when missing
  };

  std::vector<Mismatch> verify() const {
    std::vector<Mismatch> mismatches;
    for (const auto& [rel, expected] : entries_) {
      const auto path = root_ / rel;
      if (!std::filesystem::exists(path)) {
        mismatches.push_back({rel, expected, ""});
        continue;
      }
      const auto actual = content_id(read_file_bytes(path));
      if (actual != expected) mismatches.push_back({rel, expected, actual});
    }
    return mismatches;
  }

  size_t size() const { return entries_.size(); }

 private:
  std::filesystem::path index_path() const { return root_ / "artifacts_index.json"; }

  void save() const {
    Json j = Json::object();
    for (const auto& [key, value] : entries_) j[key] = value;
    write_file_bytes(index_path(), j.dump(2) + "\n");
  }

  std::filesystem::path root_;
  std::map<std::string, std::string> entries_;
};

// Stage-level completion marker keyed by the stage inputs.
class StageCache {
 public:
  explicit StageCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  bool done(const std::string& key) const {
    const auto path = dir_ / "DONE";
    return std::filesystem::exists(path) && read_file_bytes(path) == key;
  }
  void mark_done(const std::string& key) const { write_file_bytes(dir_ / "DONE", key); }

 private:
  std::filesystem::path dir_;
};

}  // namespace wsdlab
