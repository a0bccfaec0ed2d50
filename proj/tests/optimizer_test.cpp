// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#include "wsdlab/optimizer.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support/adamw_oracle.hpp"

namespace wsdlab {
namespace {

LayoutPtr scalar_layout() {
  auto layout = std::make_shared<WeightLayout>();
  layout->add("w", 1, 1);
  return layout;
}

LayoutPtr two_segment_layout(size_t n1, size_t n2) {
  auto layout = std::make_shared<WeightLayout>();
  layout->add("a", 1, n1);
  layout->add("b", 1, n2);
  return layout;
}

OptimizerConfig no_clip_config(double b1 = 0.9, double b2 = 0.95, double wd = 0.0) {
  OptimizerConfig cfg;
  cfg.beta1 = b1;
  cfg.beta2 = b2;
  cfg.weight_decay = wd;
  cfg.clip_norm.reset();
  return cfg;
}

TEST(AdamwStep, HandComputedFirstStep) {
  // w=1, g=1, lr=0.1, betas (0.9, 0.95), wd=0:
  // m=0.1, v=0.05, m_hat=1, v_hat=1 -> w' = 1 - 0.1/(1+1e-8) ~ 0.9.
  WeightVector<double> w(scalar_layout());
  w.values[0] = 1.0;
  WeightVector<double> g(scalar_layout());
  g.values[0] = 1.0;
  OptimizerState<double> state(scalar_layout());
  adamw_step(w, g, state, 0.1, no_clip_config());
  EXPECT_NEAR(w.values[0], 0.9, 1e-8);
  EXPECT_NEAR(state.exp_avg.values[0], 0.1, 1e-15);
  EXPECT_NEAR(state.exp_avg_sq.values[0], 0.05, 1e-15);
  EXPECT_EQ(state.step_count, 1);
}

TEST(AdamwStep, ZeroLrLeavesWeightsButUpdatesMoments) {
  WeightVector<double> w(scalar_layout());
  w.values[0] = 2.5;
  WeightVector<double> g(scalar_layout());
  g.values[0] = 0.3;
  OptimizerState<double> state(scalar_layout());
  adamw_step(w, g, state, 0.0, no_clip_config());
  EXPECT_DOUBLE_EQ(w.values[0], 2.5);
  EXPECT_GT(state.exp_avg.values[0], 0.0);
  EXPECT_GT(state.exp_avg_sq.values[0], 0.0);
}

TEST(AdamwStep, ZeroGradFreshStateLeavesWeights) {
  WeightVector<double> w(scalar_layout());
  w.values[0] = -1.25;
  WeightVector<double> g(scalar_layout());
  OptimizerState<double> state(scalar_layout());
  adamw_step(w, g, state, 0.1, no_clip_config());
  EXPECT_DOUBLE_EQ(w.values[0], -1.25);
}

TEST(AdamwStep, MatchesScalarOracleOverRandomizedSteps) {
  const size_t n = 17;
  auto layout = two_segment_layout(9, 8);
  WeightVector<double> w(layout);
  OptimizerState<double> state(layout);
  OptimizerConfig cfg = no_clip_config(0.9, 0.95, 0.1);

  testsupport::ScalarAdamW oracle(n, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  std::vector<double> w_ref(n);
  Rng rng(2024);
  for (size_t i = 0; i < n; ++i) {
    w.values[i] = normal(rng);
    w_ref[i] = w.values[i];
  }
  for (int step = 0; step < 1000; ++step) {
    WeightVector<double> g(layout);
    std::vector<double> g_ref(n);
    for (size_t i = 0; i < n; ++i) {
      g.values[i] = normal(rng);
      g_ref[i] = g.values[i];
    }
    const double lr = 0.05 * uniform01(rng);
    adamw_step(w, g, state, lr, cfg);
    oracle.step(w_ref, g_ref, lr);
    for (size_t i = 0; i < n; ++i) {
      ASSERT_NEAR(w.values[i], w_ref[i], 1e-12) << "step " << step << " component " << i;
    }
  }
}

TEST(AdamwStep, UpdateMagnitudeBoundedByAdaptiveTerm) {
  auto layout = two_segment_layout(32, 16);
  WeightVector<double> w(layout);
  OptimizerState<double> state(layout);
  const OptimizerConfig cfg = no_clip_config();
  Rng rng(99);
  for (auto& v : w.values) v = normal(rng);
  for (int step = 0; step < 50; ++step) {
    WeightVector<double> g(layout);
    for (auto& v : g.values) v = normal(rng);
    const auto before = w.values;
    const double lr = 0.01;
    adamw_step(w, g, state, lr, cfg);
    const double bc1 = 1.0 - std::pow(cfg.beta1, state.step_count);
    const double bc2 = 1.0 - std::pow(cfg.beta2, state.step_count);
    for (size_t i = 0; i < w.size(); ++i) {
      const double m_hat = state.exp_avg.values[i] / bc1;
      const double v_hat = state.exp_avg_sq.values[i] / bc2;
      const double bound = lr * std::abs(m_hat) / (std::sqrt(v_hat) + cfg.eps);
      EXPECT_LE(std::abs(w.values[i] - before[i]), bound + 1e-15);
    }
  }
}

TEST(AdamwStep, DuplicatedParametersYieldDuplicatedResults) {
  auto layout = two_segment_layout(5, 5);
  WeightVector<double> w(layout), g(layout);
  OptimizerState<double> state(layout);
  Rng rng(7);
  for (size_t i = 0; i < 5; ++i) {
    w.values[i] = w.values[i + 5] = normal(rng);
    g.values[i] = g.values[i + 5] = normal(rng);
  }
  adamw_step(w, g, state, 0.02, no_clip_config(0.9, 0.95, 0.1));
  for (size_t i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(w.values[i], w.values[i + 5]);
    EXPECT_DOUBLE_EQ(state.exp_avg.values[i], state.exp_avg.values[i + 5]);
  }
}

TEST(AdamwStep, ResetMatchesFreshOptimizerExactly) {
  auto layout = two_segment_layout(6, 2);
  WeightVector<double> w1(layout), g(layout);
  Rng rng(13);
  for (auto& v : w1.values) v = normal(rng);
  for (auto& v : g.values) v = normal(rng);
  WeightVector<double> w2 = w1;

  OptimizerState<double> used(layout);
  adamw_step(w1, g, used, 0.01, no_clip_config());
  w1 = w2;
  used.reset();
  EXPECT_EQ(used.step_count, 0);
  for (const auto v : used.exp_avg.values) EXPECT_EQ(v, 0.0);

  OptimizerState<double> fresh(layout);
  adamw_step(w1, g, used, 0.01, no_clip_config());
  adamw_step(w2, g, fresh, 0.01, no_clip_config());
  EXPECT_EQ(w1.values, w2.values);
  EXPECT_EQ(used.exp_avg.values, fresh.exp_avg.values);
  EXPECT_EQ(used.exp_avg_sq.values, fresh.exp_avg_sq.values);
}

TEST(AdamwStep, SkipsGainDecayWhenConfigured) {
  auto layout = std::make_shared<WeightLayout>();
  layout->add("layer0.attn_norm", 1, 1);
  layout->add("layer0.wq", 1, 1);
  LayoutPtr lp = layout;
  WeightVector<double> w(lp), g(lp);
  w.values = {1.0, 1.0};
  OptimizerState<double> state(lp);
  OptimizerConfig cfg = no_clip_config(0.9, 0.95, 0.5);
  cfg.decay_gains = false;
  adamw_step(w, g, state, 0.1, cfg);
  EXPECT_DOUBLE_EQ(w.values[0], 1.0);        // gain: no decay, no gradient
  EXPECT_DOUBLE_EQ(w.values[1], 1.0 - 0.05);  // decayed by lr*wd
}

TEST(AdamwStep, RejectsNonFiniteGradients) {
  WeightVector<double> w(scalar_layout()), g(scalar_layout());
  g.values[0] = std::numeric_limits<double>::quiet_NaN();
  OptimizerState<double> state(scalar_layout());
  EXPECT_THROW(adamw_step(w, g, state, 0.1, no_clip_config()), std::runtime_error);
}

TEST(ClipGradients, IdentityBelowThreshold) {
  WeightVector<double> g(two_segment_layout(3, 1));
  g.values = {0.3, 0.0, 0.4, 0.0};  // norm 0.5
  const auto before = g.values;
  const auto result = clip_gradients(g, 1.0);
  EXPECT_FALSE(result.clipped);
  EXPECT_DOUBLE_EQ(result.norm_before, 0.5);
  EXPECT_EQ(g.values, before);
}

TEST(ClipGradients, RescalesToThreshold) {
  WeightVector<double> g(two_segment_layout(2, 2));
  g.values = {0.0, 4.0, 0.0, 0.0};  // norm 4
  const auto result = clip_gradients(g, 1.0);
  EXPECT_TRUE(result.clipped);
  EXPECT_DOUBLE_EQ(result.norm_before, 4.0);
  EXPECT_DOUBLE_EQ(g.values[1], 1.0);  // scaled by 0.25
}

TEST(ClipGradients, PostClipNormNeverExceedsThreshold) {
  Rng rng(555);
  for (int trial = 0; trial < 200; ++trial) {
    WeightVector<double> g(two_segment_layout(31, 17));
    for (auto& v : g.values) v = normal(rng, 0.0, 4.0);
    clip_gradients(g, 1.0);
    double sq = 0.0;
    for (const auto v : g.values) sq += v * v;
    EXPECT_LE(std::sqrt(sq), 1.0 + 1e-9);
  }
}

TEST(RescaleBeta, DirectPowers) {
  EXPECT_DOUBLE_EQ(rescale_beta(0.95, 2.0), 0.9025);
  EXPECT_DOUBLE_EQ(rescale_beta(0.9, 2.0), 0.81);
  EXPECT_DOUBLE_EQ(rescale_beta(0.7, 1.0), 0.7);
  EXPECT_THROW(rescale_beta(1.0, 2.0), std::invalid_argument);
  EXPECT_THROW(rescale_beta(0.9, 0.0), std::invalid_argument);
}

TEST(TokenHalfLife, ClosedFormAndInvariance) {
  EXPECT_DOUBLE_EQ(token_half_life(0.5, 1024.0), 1024.0);
  EXPECT_NEAR(token_half_life(0.95, 102400.0), 1.3838e6, 1e3);
  const double base = token_half_life(0.95, 102400.0);
  for (const double k : {2.0, 4.0, 8.0, 10.0}) {
    const double scaled = token_half_life(rescale_beta(0.95, k), k * 102400.0);
    EXPECT_NEAR(scaled / base, 1.0, 1e-9);
  }
  EXPECT_THROW(token_half_life(0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(token_half_life(1.0, 1.0), std::invalid_argument);
}

TEST(MomentumAlignment, SignedAndOrthogonalCases) {
  auto layout = two_segment_layout(4, 4);
  OptimizerState<double> state(layout);
  WeightVector<double> g(layout);
  state.exp_avg.values = {1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0};

  g.values = state.exp_avg.values;
  auto report = momentum_alignment(state, g);
  ASSERT_TRUE(report.defined);
  EXPECT_DOUBLE_EQ(report.weighted_mean, 1.0);
  for (const auto& seg : report.segments) EXPECT_DOUBLE_EQ(seg.cosine, 1.0);

  for (auto& v : g.values) v = -v;
  report = momentum_alignment(state, g);
  EXPECT_DOUBLE_EQ(report.weighted_mean, -1.0);

  g.values = {2.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0};
  report = momentum_alignment(state, g);
  EXPECT_NEAR(report.weighted_mean, 0.0, 1e-15);
}

TEST(MomentumAlignment, ZeroNormSegmentsExcluded) {
  auto layout = two_segment_layout(2, 2);
  OptimizerState<double> state(layout);
  WeightVector<double> g(layout);
  state.exp_avg.values = {0.0, 0.0, 1.0, 0.0};
  g.values = {1.0, 1.0, 1.0, 0.0};
  const auto report = momentum_alignment(state, g);
  EXPECT_FALSE(report.segments[0].defined);
  EXPECT_TRUE(report.segments[1].defined);
  EXPECT_DOUBLE_EQ(report.weighted_mean, 1.0);
}

TEST(LrScaleForBatch, SqrtDefaultAndTableOverride) {
  EXPECT_DOUBLE_EQ(lr_scale_for_batch(64.0), 8.0);
  EXPECT_DOUBLE_EQ(lr_scale_for_batch(4.0), 2.0);
  const auto table = tuned_lr_scale_table();
  EXPECT_DOUBLE_EQ(lr_scale_for_batch(4.0, table), 2.12);
  EXPECT_DOUBLE_EQ(lr_scale_for_batch(1.0, table), 1.06);
  EXPECT_DOUBLE_EQ(lr_scale_for_batch(1.0), 1.0);
  EXPECT_THROW(lr_scale_for_batch(0.5), std::invalid_argument);
}

}  // namespace
}  // namespace wsdlab
