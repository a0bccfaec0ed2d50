// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#include "wsdlab/nanomodel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace wsdlab {
namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.n_layers = 2;
  cfg.ffw_dim = 32;
  cfg.vocab_size = 32;
  cfg.seq_len = 8;
  return cfg;
}

Batch random_batch(const ModelConfig& cfg, int batch_size, uint64_t seed) {
  Rng rng(seed);
  Batch batch;
  batch.tokens.resize(batch_size, cfg.seq_len + 1);
  for (Eigen::Index r = 0; r < batch.tokens.rows(); ++r) {
    for (Eigen::Index c = 0; c < batch.tokens.cols(); ++c) {
      batch.tokens(r, c) = static_cast<int32_t>(uniform_below(rng, cfg.vocab_size));
    }
  }
  return batch;
}

TEST(ModelConfig, ValidationAndParamCount) {
  ModelConfig cfg = tiny_config();
  cfg.validate();
  EXPECT_EQ(build_layout(cfg)->total_size(), static_cast<size_t>(cfg.param_count()));

  ModelConfig bad = cfg;
  bad.d_model = 17;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.n_layers = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  ModelConfig desk;  // spec'd desk defaults
  EXPECT_EQ(desk.d_model, 64);
  EXPECT_EQ(desk.n_layers, 4);
  EXPECT_EQ(desk.ffw_dim, 192);
  EXPECT_EQ(desk.vocab_size, 256);
  EXPECT_EQ(desk.seq_len, 128);
  EXPECT_EQ(build_layout(desk)->total_size(), static_cast<size_t>(desk.param_count()));
}

TEST(Forward, ZeroHeadGivesUniformDistribution) {
  const auto cfg = tiny_config();
  auto w = init_weights(cfg, 1).cast<double>();
  w.matrix("lm_head").setZero();
  const auto batch = random_batch(cfg, 2, 2);
  const auto logits = forward(w, cfg, batch);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) EXPECT_EQ(logits(r, c), 0.0);
  }
  EXPECT_NEAR(loss(logits, batch.targets()), std::log(cfg.vocab_size), 1e-12);
}

TEST(Forward, BatchRowPermutationEquivariance) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 3).cast<double>();
  auto batch = random_batch(cfg, 3, 4);
  const auto logits = forward(w, cfg, batch);

  Batch swapped;
  swapped.tokens = batch.tokens;
  swapped.tokens.row(0) = batch.tokens.row(2);
  swapped.tokens.row(2) = batch.tokens.row(0);
  const auto logits_swapped = forward(w, cfg, swapped);

  const int L = cfg.seq_len;
  EXPECT_EQ(logits_swapped.middleRows(0 * L, L), logits.middleRows(2 * L, L));
  EXPECT_EQ(logits_swapped.middleRows(2 * L, L), logits.middleRows(0 * L, L));
  EXPECT_EQ(logits_swapped.middleRows(1 * L, L), logits.middleRows(1 * L, L));
}

TEST(Forward, CausalityIsExact) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 5).cast<float>();
  auto batch = random_batch(cfg, 1, 6);
  const auto logits = forward(w, cfg, batch);

  const int cut = 4;
  Batch perturbed;
  perturbed.tokens = batch.tokens;
  for (Eigen::Index c = cut + 1; c < perturbed.tokens.cols(); ++c) {
    perturbed.tokens(0, c) = (perturbed.tokens(0, c) + 1) % cfg.vocab_size;
  }
  const auto logits2 = forward(w, cfg, perturbed);
  for (int t = 0; t <= cut; ++t) {
    for (Eigen::Index v = 0; v < logits.cols(); ++v) {
      ASSERT_EQ(logits(t, v), logits2(t, v)) << "position " << t;
    }
  }
}

TEST(Forward, FiniteForRandomWeights) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 8);
  const auto logits = forward(w, cfg, random_batch(cfg, 2, 9));
  EXPECT_TRUE(logits.allFinite());
}

// Independent double-precision oracle for a single-token context: plain
// nested loops, attention collapses to the value projection.
std::vector<double> single_token_oracle(const WeightVector<double>& w, const ModelConfig& cfg,
                                        int token) {
  const int d = cfg.d_model, f = cfg.ffw_dim;
  auto rms = [&](const std::vector<double>& x, const char* gain_name) {
    auto gain = w.matrix(gain_name);
    double ss = 0.0;
    for (int i = 0; i < d; ++i) ss += x[i] * x[i];
    const double inv = 1.0 / std::sqrt(ss / d + cfg.rms_eps);
    std::vector<double> y(d);
    for (int i = 0; i < d; ++i) y[i] = x[i] * inv * gain(0, i);
    return y;
  };
  auto matvec = [](auto mat, const std::vector<double>& x) {
    std::vector<double> y(mat.rows(), 0.0);
    for (Eigen::Index r = 0; r < mat.rows(); ++r) {
      for (Eigen::Index c = 0; c < mat.cols(); ++c) y[r] += mat(r, c) * x[c];
    }
    return y;
  };

  auto emb = w.matrix("tok_emb");
  std::vector<double> x(d);
  for (int i = 0; i < d; ++i) x[i] = emb(token, i);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto h1 = rms(x, (p + "attn_norm").c_str());
    // Softmax over a single position is 1, and RoPE at position 0 is the
    // identity rotation, so the context is exactly the value projection.
    const auto v = matvec(w.matrix(p + "wv"), h1);
    const auto attn = matvec(w.matrix(p + "wo"), v);
    for (int i = 0; i < d; ++i) x[i] += attn[i];

    const auto h2 = rms(x, (p + "ffn_norm").c_str());
    const auto gate = matvec(w.matrix(p + "w_gate"), h2);
    const auto up = matvec(w.matrix(p + "w_up"), h2);
    std::vector<double> act(f);
    for (int i = 0; i < f; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-gate[i]));
      act[i] = gate[i] * s * up[i];
    }
    const auto down = matvec(w.matrix(p + "w_down"), act);
    for (int i = 0; i < d; ++i) x[i] += down[i];
  }
  const auto xf = rms(x, "final_norm");
  return matvec(w.matrix("lm_head"), xf);
}

TEST(Forward, SingleTokenMatchesDoublePrecisionOracle) {
  ModelConfig cfg = tiny_config();
  cfg.seq_len = 1;
  const auto w32 = init_weights(cfg, 77);
  const auto w64 = w32.cast<double>();

  Batch batch;
  batch.tokens.resize(1, 2);
  batch.tokens << 13, 21;

  const auto logits = forward(w32, cfg, batch);
  const auto expected = single_token_oracle(w64, cfg, 13);
  for (Eigen::Index v = 0; v < logits.cols(); ++v) {
    const double rel = std::abs(logits(0, v) - expected[v]) /
                       std::max(1e-6, std::abs(expected[v]));
    EXPECT_LT(rel, 1e-4) << "vocab entry " << v;
  }
}

TEST(Loss, HandComputedCases) {
  RowMat<double> logits(1, 2);
  logits << 0.0, 0.0;
  TokenMat targets(1, 1);
  targets << 0;
  EXPECT_NEAR(loss(logits, targets), std::log(2.0), 1e-12);

  logits << 50.0, 0.0;
  EXPECT_NEAR(loss(logits, targets), 0.0, 1e-12);

  targets << 5;
  EXPECT_THROW(loss(logits, targets), std::invalid_argument);
  targets << -1;
  EXPECT_THROW(loss(logits, targets), std::invalid_argument);
}

TEST(Loss, UniformModelPerplexityEqualsVocabSize) {
  const auto cfg = tiny_config();
  auto w = init_weights(cfg, 10);
  w.matrix("lm_head").setZero();
  const double l = eval_loss(w, cfg, random_batch(cfg, 2, 11));
  EXPECT_NEAR(std::exp(l), static_cast<double>(cfg.vocab_size), 1e-4);
}

TEST(Gradients, MatchCentralFiniteDifferences) {
  const auto cfg = tiny_config();
  ASSERT_LE(cfg.param_count(), 10000);
  auto w = init_weights(cfg, 20).cast<double>();
  const auto batch = random_batch(cfg, 2, 21);

  const auto result = loss_and_gradients(w, cfg, batch);
  ASSERT_TRUE(result.grads.array().isFinite().all());

  // Relative error per parameter segment in the L2 sense, plus a
  // per-component mixed absolute/relative bound; components whose first
  // derivative nearly cancels are truncation-noise-dominated at this eps.
  const double eps = 1e-3;
  double max_seg_rel = 0.0;
  double max_component_excess = 0.0;
  for (const auto& seg : w.layout->segments()) {
    double diff_sq = 0.0, fd_sq = 0.0;
    for (size_t i = seg.offset; i < seg.offset + seg.size(); ++i) {
      const double orig = w.values[i];
      w.values[i] = orig + eps;
      const double up = eval_loss(w, cfg, batch);
      w.values[i] = orig - eps;
      const double down = eval_loss(w, cfg, batch);
      w.values[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double ad = result.grads.values[i];
      diff_sq += (ad - fd) * (ad - fd);
      fd_sq += fd * fd;
      max_component_excess =
          std::max(max_component_excess, std::abs(ad - fd) - 1e-3 * std::abs(fd));
    }
    max_seg_rel = std::max(max_seg_rel, std::sqrt(diff_sq) / std::sqrt(fd_sq));
  }
  EXPECT_LT(max_seg_rel, 1e-3);
  EXPECT_LT(max_component_excess, 1e-5);
}

TEST(Gradients, UnusedEmbeddingRowHasZeroGradient) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 30).cast<double>();
  Batch batch;
  batch.tokens.resize(1, cfg.seq_len + 1);
  batch.tokens.setConstant(3);  // only token 3 appears
  const auto grads = gradients(w, cfg, batch);
  auto demb = grads.matrix("tok_emb");
  for (int vocab = 0; vocab < cfg.vocab_size; ++vocab) {
    if (vocab == 3) continue;
    EXPECT_EQ(demb.row(vocab).cwiseAbs().maxCoeff(), 0.0) << "row " << vocab;
  }
  EXPECT_GT(demb.row(3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradients, DuplicatedBatchRowsLeaveMeanGradientUnchanged) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 33).cast<double>();
  const auto single = random_batch(cfg, 1, 34);
  Batch doubled;
  doubled.tokens.resize(2, cfg.seq_len + 1);
  doubled.tokens.row(0) = single.tokens.row(0);
  doubled.tokens.row(1) = single.tokens.row(0);

  const auto r1 = loss_and_gradients(w, cfg, single);
  const auto r2 = loss_and_gradients(w, cfg, doubled);
  EXPECT_NEAR(r1.loss, r2.loss, 1e-12);
  for (size_t i = 0; i < r1.grads.size(); ++i) {
    EXPECT_NEAR(r1.grads.values[i], r2.grads.values[i], 1e-12);
  }
}

TEST(HiddenStates, LayerZeroIsEmbeddingLookup) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 40).cast<double>();
  const auto batch = random_batch(cfg, 2, 41);
  const auto h0 = hidden_states(w, cfg, batch, 0);
  auto emb = w.matrix("tok_emb");
  for (Eigen::Index b = 0; b < batch.batch_size(); ++b) {
    for (int t = 0; t < cfg.seq_len; ++t) {
      EXPECT_EQ(h0.row(b * cfg.seq_len + t), emb.row(batch.tokens(b, t)));
    }
  }
}

TEST(HiddenStates, FinalLayerIsPreHeadRepresentation) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 42).cast<double>();
  const auto batch = random_batch(cfg, 2, 43);
  const auto hfinal = hidden_states(w, cfg, batch, cfg.n_layers);
  RowMat<double> expected_logits = hfinal * w.matrix("lm_head").transpose();
  const auto logits = forward(w, cfg, batch);
  EXPECT_LT((expected_logits - logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(HiddenStates, ShapeAndRangeChecks) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 44);
  const auto batch = random_batch(cfg, 2, 45);
  for (int l = 0; l <= cfg.n_layers; ++l) {
    const auto h = hidden_states(w, cfg, batch, l);
    EXPECT_EQ(h.rows(), batch.batch_size() * cfg.seq_len);
    EXPECT_EQ(h.cols(), cfg.d_model);
    EXPECT_TRUE(h.allFinite());
  }
  EXPECT_THROW(hidden_states(w, cfg, batch, -1), std::out_of_range);
  EXPECT_THROW(hidden_states(w, cfg, batch, cfg.n_layers + 1), std::out_of_range);
}

TEST(TokenDistributions, RowsAreDistributions) {
  const auto cfg = tiny_config();
  const auto w = init_weights(cfg, 50);
  const auto probs = token_distributions(w, cfg, random_batch(cfg, 2, 51));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    EXPECT_NEAR(probs.row(r).sum(), 1.0f, 1e-5);
    EXPECT_GE(probs.row(r).minCoeff(), 0.0f);
  }
}

TEST(Forward, RejectsMismatchedShapes) {
  const auto cfg = tiny_config();
  ModelConfig other = cfg;
  other.ffw_dim = 48;
  const auto w = init_weights(other, 60);
  EXPECT_THROW(forward(w, cfg, random_batch(cfg, 1, 61)), std::invalid_argument);

  Batch bad = random_batch(cfg, 1, 62);
  bad.tokens(0, 0) = cfg.vocab_size;  // out of vocabulary
  EXPECT_THROW(forward(init_weights(cfg, 63), cfg, bad), std::invalid_argument);
}

}  // namespace
}  // namespace wsdlab
