// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "support/synthetic_corpus.hpp"
#include "wsdlab/runner.hpp"

#ifndef WSDLAB_CLI_PATH
#define WSDLAB_CLI_PATH "wsdlab"
#endif

namespace wsdlab {
namespace {

class ManifestTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() / "wsdlab_cli_test";
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
    write_file_bytes(dir_ / "corpus.txt", testsupport::synthetic_text(400'000, 5));
    write_file_bytes(dir_ / "manifest.json", manifest_json().dump(2));
  }

  void TearDown() override { std::filesystem::remove_all(dir_); }

  Json manifest_json() const {
    return Json{
        {"version", 1},
        {"name", "mini"},
        {"corpus",
         {{"path", (dir_ / "corpus.txt").string()}, {"tokenizer", "byte"},
          {"train_fraction", 0.9}}},
        {"model",
         {{"d_model", 16}, {"n_layers", 1}, {"ffw_dim", 32}, {"head_dim", 8}, {"n_heads", 2},
          {"vocab_size", 256}, {"seq_len", 16}}},
        {"base",
         {{"peak_lr", 2e-3}, {"warmup_steps", 5}, {"stable_steps", 25}, {"portion_first", 0},
          {"portion_count", 30}, {"batch_size", 4}, {"permutation_seed", 1}, {"seed", 1},
          {"eval_every", 10}, {"val_batches", 4}}},
        {"cooldown", {{"steps", 10}, {"portion_first", 30}, {"portion_count", 10}}},
        {"sweep", {{"shapes", {"sqrt", "square"}}, {"seeds", {11, 12}}}},
        {"reference", {{"seeds", {21, 22}}, {"length_factor", 2}}},
        {"souping", {{"shapes", {"square"}}, {"portions", 2}, {"seed", 31}, {"longer_run", true}}},
        {"batch_sweep",
         {{"scales", {1, 2}}, {"match_half_life", true}, {"lr_table", "sqrt"}, {"seed", 41}}},
        {"beta_sweep", {{"powers", {0.5, 1.0}}, {"vary", "beta2_only"}, {"seed", 51}}},
        {"analysis",
         {{"spaces", {"loss", "weight", "loss_simple", "kl"}}, {"shift_deviation", true},
          {"kl_batches", 2}, {"alignment_window", 5}}},
        {"landscape",
         {{"at", {"start", "mid", "end"}}, {"grid_points", 3}, {"a_range", {-0.5, 1.5}},
          {"b_range", {-1.0, 1.0}}, {"eval_batches", 2}, {"probe_steps", 2}, {"seed", 61}}},
        {"probe",
         {{"every", 5}, {"steps", 10}, {"train_batches", 2}, {"eval_batches", 2}, {"lr", 1e-3},
          {"seed", 71}}},
        {"output_dir", (dir_ / "out").string()},
        {"workers", 2}};
  }

  std::filesystem::path dir_;
};

TEST_F(ManifestTest, StrictKeyValidation) {
  Json j = manifest_json();
  EXPECT_NO_THROW(manifest_from_json(j));

  Json bad = j;
  bad["learning_rate"] = 1.0;
  EXPECT_THROW(manifest_from_json(bad), std::invalid_argument);

  bad = j;
  bad["sweep"]["alphas"] = {0.1};
  EXPECT_THROW(manifest_from_json(bad), std::invalid_argument);

  bad = j;
  bad.erase("version");
  EXPECT_THROW(manifest_from_json(bad), std::invalid_argument);
}

TEST_F(ManifestTest, RunAllProducesExpectedArtifacts) {
  auto manifest = load_manifest(dir_ / "manifest.json");
  ManifestRunner runner(manifest, dir_ / "out", 2);
  runner.run_all();
  EXPECT_EQ(runner.failed_cells(), 0);

  const auto out = dir_ / "out";
  for (const char* rel :
       {"analysis/bias_variance_loss.csv", "analysis/bias_variance_weight.csv",
        "analysis/bias_variance_loss_simple.csv", "analysis/bias_variance_kl.csv",
        "analysis/shift_deviation.csv", "analysis/souping.csv", "analysis/batch_sweep.csv",
        "analysis/beta_sweep.csv", "landscape/landscape_start.csv",
        "landscape/landscape_mid.json", "landscape/landscape_end.csv", "probe/probe.csv",
        "exports/missing.txt", "exports/schedules/sqrt.csv", "artifacts_index.json"}) {
    EXPECT_TRUE(std::filesystem::exists(out / rel)) << rel;
  }

  // Bias-variance tables carry one row per sweep shape with exact re-parse.
  const auto table = parse_csv(read_file_bytes(out / "analysis" / "bias_variance_loss.csv"));
  ASSERT_EQ(table.rows.size(), 2u);
  for (size_t r = 0; r < table.rows.size(); ++r) {
    EXPECT_NEAR(table.value(r, "residual"), 0.0, 1e-9);
    for (const char* col : {"bias", "variance", "soup_loss", "mean_member_loss"}) {
      const std::string& cell = table.cell(r, col);
      EXPECT_EQ(CsvWriter::num(std::stod(cell)), cell) << "column " << col;
    }
  }

  // Schedule exports end at exactly zero.
  const auto sched = parse_csv(read_file_bytes(out / "exports" / "schedules" / "sqrt.csv"));
  EXPECT_DOUBLE_EQ(sched.value(sched.rows.size() - 1, "lr"), 0.0);

  // Landscape metadata references a stored checkpoint.
  const auto meta = Json::parse(read_file_bytes(out / "landscape" / "landscape_start.json"));
  EXPECT_TRUE(std::filesystem::exists(
      runner.store().checkpoint_path(meta.at("center_checkpoint").get<std::string>())));
  EXPECT_LE(std::abs(meta.at("e1_e2_cosine").get<double>()), 1.0);

  // Probe table covers layers 0..n_layers at steps {0, 5, 10}.
  const auto probe = parse_csv(read_file_bytes(out / "probe" / "probe.csv"));
  EXPECT_EQ(probe.rows.size(), 3u * 2u);  // 3 points x (n_layers + 1 = 2)

  // verify passes, then detects corruption.
  EXPECT_TRUE(runner.run_verify().empty());
  const auto victim = out / "analysis" / "souping.csv";
  auto bytes = read_file_bytes(victim);
  bytes[bytes.size() / 2] ^= 0x01;
  std::ofstream(victim, std::ios::binary | std::ios::trunc) << bytes;
  EXPECT_FALSE(runner.run_verify().empty());
}

TEST_F(ManifestTest, RerunReusesCachedRuns) {
  auto manifest = load_manifest(dir_ / "manifest.json");
  ManifestRunner first(manifest, dir_ / "out", 2);
  const auto base1 = first.base();
  const auto sweep1 = first.run_sweep();

  ManifestRunner second(manifest, dir_ / "out", 2);
  const auto base2 = second.base();
  const auto sweep2 = second.run_sweep();
  EXPECT_EQ(base1.final_checkpoint, base2.final_checkpoint);
  EXPECT_EQ(base1.wall_seconds, base2.wall_seconds);  // loaded, not retrained
  for (size_t i = 0; i < sweep1.size(); ++i) {
    EXPECT_EQ(sweep1[i].record.final_checkpoint, sweep2[i].record.final_checkpoint);
    EXPECT_EQ(sweep1[i].record.wall_seconds, sweep2[i].record.wall_seconds);
  }
}

TEST_F(ManifestTest, EmptyAxesRunsBaseOnly) {
  Json j = manifest_json();
  j.erase("sweep");
  j.erase("reference");
  j.erase("souping");
  j.erase("batch_sweep");
  j.erase("beta_sweep");
  j.erase("landscape");
  j.erase("probe");
  const auto manifest = manifest_from_json(j);
  ManifestRunner runner(manifest, dir_ / "out_base_only", 2);
  runner.run_all();

  size_t run_dirs = 0;
  for (const auto& entry :
       std::filesystem::directory_iterator(dir_ / "out_base_only" / "runs")) {
    run_dirs += entry.is_directory();
  }
  EXPECT_EQ(run_dirs, 1u);
  EXPECT_FALSE(std::filesystem::exists(dir_ / "out_base_only" / "analysis"));
  EXPECT_FALSE(std::filesystem::exists(dir_ / "out_base_only" / "landscape"));
}

TEST_F(ManifestTest, CliBinaryEndToEnd) {
  const std::string cli = WSDLAB_CLI_PATH;
  ASSERT_TRUE(std::filesystem::exists(cli));
  const auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > " + (dir_ / "cli_out.txt").string() + " 2>&1";
    return std::system(cmd.c_str());
  };

  EXPECT_EQ(run("schedule --kind wsd --shape lowered_linear:0.7 --peak-lr 1.0 "
                "--cooldown-steps 10 --csv " +
                (dir_ / "sched.csv").string()),
            0);
  const auto sched = parse_csv(read_file_bytes(dir_ / "sched.csv"));
  EXPECT_EQ(sched.rows.size(), 11u);
  EXPECT_DOUBLE_EQ(sched.value(0, "lr"), 0.7);
  EXPECT_DOUBLE_EQ(sched.value(10, "lr"), 0.0);

  const std::string m = " --manifest " + (dir_ / "manifest.json").string();
  EXPECT_EQ(run("train" + m), 0);
  EXPECT_EQ(run("cooldown --shape sqrt --permutation-seed 99" + m), 0);
  EXPECT_EQ(run("sweep" + m), 0);
  EXPECT_EQ(run("reference" + m), 0);
  EXPECT_EQ(run("analyze --space loss" + m), 0);
  EXPECT_EQ(run("verify" + m), 0);
  EXPECT_NE(run("train --manifest /nonexistent.json"), 0);

  EXPECT_TRUE(std::filesystem::exists(dir_ / "out" / "analysis" / "bias_variance_loss.csv"));
}

}  // namespace
}  // namespace wsdlab
