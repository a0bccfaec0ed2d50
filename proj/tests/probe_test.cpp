// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#include "wsdlab/probe.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "support/synthetic_corpus.hpp"
#include "wsdlab/datapipe.hpp"
#include "wsdlab/trainer.hpp"

namespace wsdlab {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.n_layers = 2;
  cfg.ffw_dim = 32;
  cfg.vocab_size = 256;
  cfg.seq_len = 16;
  return cfg;
}

std::vector<Batch> corpus_batches(const TokenCorpus& corpus, const TokenRange& range,
                                  const ModelConfig& cfg, int batch_size, long first, long count) {
  std::vector<Batch> batches;
  for (long i = first; i < first + count; ++i) {
    batches.push_back(make_batch(corpus, range, batch_size, cfg.seq_len, i));
  }
  return batches;
}

TokenCorpus test_corpus() {
  ByteTokenizer tok;
  TokenCorpus corpus;
  const std::string text = testsupport::synthetic_text(400'000, 77);
  corpus.tokens = tok.encode(text);
  corpus.source_digest = hex64(fnv1a64(text.data(), text.size()));
  corpus.tokenizer_id = tok.id();
  return corpus;
}

TEST(ProbeData, ShapesAndTargets) {
  const auto cfg = tiny_config();
  const auto corpus = test_corpus();
  const TokenRange all{0, corpus.tokens.size()};
  const auto batches = corpus_batches(corpus, all, cfg, 2, 0, 3);
  const auto w = init_weights(cfg, 5);
  const auto data = collect_probe_data(w, cfg, batches, 1);
  EXPECT_EQ(data.features.rows(), 3 * 2 * cfg.seq_len);
  EXPECT_EQ(data.features.cols(), cfg.d_model);
  EXPECT_EQ(data.targets.size(), static_cast<size_t>(data.features.rows()));
}

TEST(TrainProbe, FinalLayerWithTrueHeadAndZeroStepsReproducesModelPerplexity) {
  const auto cfg = tiny_config();
  const auto corpus = test_corpus();
  const TokenRange all{0, corpus.tokens.size()};
  const auto eval_batches = corpus_batches(corpus, all, cfg, 2, 0, 4);
  const auto w = init_weights(cfg, 6);

  const auto data = collect_probe_data(w, cfg, eval_batches, cfg.n_layers);
  const RowMat<float> head = w.matrix("lm_head");
  ProbeOptions options;
  options.steps = 0;
  const auto result = train_probe<float>(head, data, data, options);

  const double model_ppl = std::exp(mean_eval_loss(w, cfg, eval_batches));
  EXPECT_NEAR(result.eval_ppl_before, model_ppl, 1e-9 * model_ppl);
  EXPECT_EQ(result.eval_ppl_before, result.eval_ppl_after);
}

TEST(TrainProbe, TrainingDoesNotWorsenTrainPerplexity) {
  const auto cfg = tiny_config();
  const auto corpus = test_corpus();
  const TokenRange all{0, corpus.tokens.size()};
  const auto train_batches = corpus_batches(corpus, all, cfg, 4, 0, 4);
  const auto eval_batches = corpus_batches(corpus, all, cfg, 4, 4, 2);
  const auto w = init_weights(cfg, 7);

  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    const auto train_data = collect_probe_data(w, cfg, train_batches, layer);
    const auto eval_data = collect_probe_data(w, cfg, eval_batches, layer);
    ProbeOptions options;
    options.steps = 200;
    const auto result = train_probe<float>(w.matrix("lm_head"), train_data, eval_data, options);
    EXPECT_LE(result.train_ppl_after, result.train_ppl_before) << "layer " << layer;
  }
}

TEST(TrainProbe, EmptyEvalSetRejected) {
  const auto cfg = tiny_config();
  const auto corpus = test_corpus();
  const TokenRange all{0, corpus.tokens.size()};
  const auto batches = corpus_batches(corpus, all, cfg, 2, 0, 2);
  const auto w = init_weights(cfg, 8);
  const auto data = collect_probe_data(w, cfg, batches, 0);
  ProbeData<float> empty;
  ProbeOptions options;
  EXPECT_THROW(train_probe<float>(w.matrix("lm_head"), data, empty, options),
               std::invalid_argument);
  EXPECT_THROW(collect_probe_data(w, cfg, {}, 0), std::invalid_argument);
}

// Desk-style directional check at miniature scale: after brief training,
// deeper representations probe better than raw embeddings.
TEST(ProbeLayers, DeeperLayersBeatEmbeddingsOnTrainedModel) {
  const auto cfg = tiny_config();
  const auto dir = std::filesystem::temp_directory_path() / "wsdlab_probe_test";
  std::filesystem::remove_all(dir);
  ArtifactStore store(dir / "store");

  ByteTokenizer tok;
  write_file_bytes(dir / "corpus.txt", testsupport::synthetic_text(800'000, 99));
  const auto corpus = load_corpus(dir / "corpus.txt", tok);

  RunConfig run;
  run.model = cfg;
  run.schedule = wsd_schedule(2e-3, 30, 470, 100, CooldownShape::linear());
  run.data.batch_size = 8;
  run.data.portion_count = 600;
  run.data.permutation_seed = 3;
  run.eval_every = 300;
  run.val_batches = 4;
  run.seed = 9;
  const auto record = train(run, corpus, store, dir / "run");
  ASSERT_TRUE(record.ok());
  const auto weights = store.get_checkpoint(record.final_checkpoint).weights;

  const auto train_split = train_range(corpus, run.data.train_fraction);
  const auto probe_train = corpus_batches(corpus, train_split, cfg, 8, 700, 6);
  const auto vr = val_range(corpus, run.data.train_fraction);
  const auto probe_eval = corpus_batches(corpus, vr, cfg, 8, 0, 3);

  ProbeOptions options;
  options.steps = 400;
  const auto results = probe_layers(weights, cfg, probe_train, probe_eval, options);
  ASSERT_EQ(results.size(), static_cast<size_t>(cfg.n_layers + 1));
  EXPECT_LT(results.back().eval_ppl_after, results.front().eval_ppl_after);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace wsdlab
