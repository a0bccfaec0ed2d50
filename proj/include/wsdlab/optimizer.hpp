// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsdlab/weights.hpp"

namespace wsdlab {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::optional<double> clip_norm = 1.0;
  // Default decays every parameter; set false to exempt normalization gains.
  bool decay_gains = true;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("betas must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
    if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  }

  bool operator==(const OptimizerConfig&) const = default;
};

inline bool is_gain_segment(const std::string& name) {
  return name.find("norm") != std::string::npos;
}

template <typename T>
struct OptimizerState {
  WeightVector<T> exp_avg;
  WeightVector<T> exp_avg_sq;
  long step_count = 0;

  OptimizerState() = default;
  explicit OptimizerState(LayoutPtr layout)
      : exp_avg(layout), exp_avg_sq(std::move(layout)), step_count(0) {}

  void reset() {
    std::fill(exp_avg.values.begin(), exp_avg.values.end(), T{0});
    std::fill(exp_avg_sq.values.begin(), exp_avg_sq.values.end(), T{0});
    step_count = 0;
  }
};

// One AdamW update with bias correction and decoupled weight decay; the decay
// term -lr*wd*w uses the pre-update weights and is independent of the adaptive
// term. Moment arithmetic runs in double regardless of the storage type.
template <typename T>
void adamw_step(WeightVector<T>& weights, const WeightVector<T>& grads, OptimizerState<T>& state,
                double lr, const OptimizerConfig& cfg) {
  cfg.validate();
  require_same_layout(weights.layout, grads.layout);
  require_same_layout(weights.layout, state.exp_avg.layout);
  if (lr < 0.0) throw std::invalid_argument("learning rate must be non-negative");
  for (const T g : grads.values) {
    if (!std::isfinite(static_cast<double>(g))) {
      throw std::runtime_error("non-finite gradient component");
    }
  }

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));

  for (const auto& seg : weights.layout->segments()) {
    const double wd = (cfg.decay_gains || !is_gain_segment(seg.name)) ? cfg.weight_decay : 0.0;
    auto w = weights.segment(seg);
    auto g = grads.segment(seg);
    auto m = state.exp_avg.segment(seg);
    auto v = state.exp_avg_sq.segment(seg);
    for (size_t i = 0; i < seg.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      const double wi = static_cast<double>(w[i]);
      w[i] = static_cast<T>(wi - lr * wd * wi - lr * update);
    }
  }
}

template <typename T>
struct ClipResult {
  double norm_before = 0.0;
  bool clipped = false;
};

// Global L2-norm clipping; a no-op when the norm is already within bounds.
template <typename T>
ClipResult<T> clip_gradients(WeightVector<T>& grads, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  double sq = 0.0;
  for (const T g : grads.values) sq += static_cast<double>(g) * static_cast<double>(g);
  ClipResult<T> result;
  result.norm_before = std::sqrt(sq);
  if (result.norm_before > clip_norm) {
    const double scale = clip_norm / result.norm_before;
    for (T& g : grads.values) g = static_cast<T>(static_cast<double>(g) * scale);
    result.clipped = true;
  }
  return result;
}

// Momentum retuning for a batch-size change by factor k: beta -> beta^k keeps
// the EMA token half-life fixed.
inline double rescale_beta(double beta, double k) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("beta must be in [0, 1)");
  if (!(k > 0.0)) throw std::invalid_argument("k must be positive");
  return std::pow(beta, k);
}

// Number of tokens whose contributions make up half of the EMA accumulator:
// (ln 0.5 / ln beta) * tokens_per_step. Diverges as beta -> 1.
inline double token_half_life(double beta, double tokens_per_step) {
  if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("beta must be in (0, 1)");
  return std::log(0.5) / std::log(beta) * tokens_per_step;
}

struct SegmentAlignment {
  std::string name;
  size_t count = 0;
  double cosine = 0.0;
  bool defined = false;  // false when either vector has zero norm
};

struct AlignmentReport {
  std::vector<SegmentAlignment> segments;
  double weighted_mean = 0.0;  // over defined segments, weighted by element count
  bool defined = false;
};

// Cosine similarity between the first-moment accumulator and a gradient, per
// parameter tensor, plus the element-count-weighted mean.
template <typename T>
AlignmentReport momentum_alignment(const OptimizerState<T>& state, const WeightVector<T>& grads) {
  require_same_layout(state.exp_avg.layout, grads.layout);
  AlignmentReport report;
  double weighted = 0.0;
  size_t total = 0;
  for (const auto& seg : grads.layout->segments()) {
    auto m = state.exp_avg.segment(seg);
    auto g = grads.segment(seg);
    double dot = 0.0, mm = 0.0, gg = 0.0;
    for (size_t i = 0; i < seg.size(); ++i) {
      const double mi = static_cast<double>(m[i]), gi = static_cast<double>(g[i]);
      dot += mi * gi;
      mm += mi * mi;
      gg += gi * gi;
    }
    SegmentAlignment sa;
    sa.name = seg.name;
    sa.count = seg.size();
    if (mm > 0.0 && gg > 0.0) {
      sa.cosine = dot / (std::sqrt(mm) * std::sqrt(gg));
      sa.defined = true;
      weighted += sa.cosine * static_cast<double>(seg.size());
      total += seg.size();
    }
    report.segments.push_back(std::move(sa));
  }
  if (total > 0) {
    report.weighted_mean = weighted / static_cast<double>(total);
    report.defined = true;
  }
  return report;
}

// Learning-rate multiplier for a batch-size scale factor k; sqrt(k) unless a
// sweep table supplies a tuned value for that exact k.
inline double lr_scale_for_batch(double k, const std::map<double, double>& table = {}) {
  if (!(k >= 1.0)) throw std::invalid_argument("batch scale factor must be >= 1");
  const auto it = table.find(k);
  if (it != table.end()) return it->second;
  return std::sqrt(k);
}

// Tuned multipliers from the batch-size sweep, keyed by scale factor relative
// to the base batch size.
inline std::map<double, double> tuned_lr_scale_table() {
  return {{1.0, 1.06}, {2.0, 1.50}, {4.0, 2.12}, {8.0, 3.00}, {10.0, 3.35}};
}

}  // namespace wsdlab
