// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wsdlab/nanomodel.hpp"
#include "wsdlab/optimizer.hpp"
#include "wsdlab/trainer.hpp"
#include "wsdlab/weights.hpp"

namespace wsdlab {

enum class DirectionKind { global_optimization, adam_steps };

// Weight-space displacement. Kept in double so grid points reconstruct the
// endpoints exactly: center + 1.0 * (final - center) casts back to the final
// model bit-for-bit.
struct Direction {
  WeightVector<double> vector;
  double norm = 0.0;
  DirectionKind kind = DirectionKind::global_optimization;
};

inline double direction_norm(const WeightVector<double>& v) {
  double sq = 0.0;
  for (const double x : v.values) sq += x * x;
  return std::sqrt(sq);
}

// e1: the vector connecting the pre-cooldown checkpoint to the final model.
inline Direction global_direction(const WeightVector<float>& pre,
                                  const WeightVector<float>& final_weights) {
  require_same_layout(pre.layout, final_weights.layout);
  Direction dir;
  dir.kind = DirectionKind::global_optimization;
  dir.vector = WeightVector<double>(pre.layout);
  for (size_t i = 0; i < pre.size(); ++i) {
    dir.vector.values[i] =
        static_cast<double>(final_weights.values[i]) - static_cast<double>(pre.values[i]);
  }
  dir.norm = direction_norm(dir.vector);
  if (dir.norm == 0.0) throw std::invalid_argument("degenerate direction: checkpoints identical");
  return dir;
}

// e2: the displacement produced by n optimizer steps from the given point
// (several steps to average away single-batch noise). Works on copies; the
// caller's weights and optimizer state are never touched.
inline Direction adam_steps_direction(const WeightVector<float>& weights,
                                      const OptimizerState<float>& state, const ModelConfig& model,
                                      const std::vector<Batch>& batches, double lr,
                                      const OptimizerConfig& opt_cfg, int n_steps = 10) {
  if (n_steps < 1) throw std::invalid_argument("adam_steps_direction: n_steps must be >= 1");
  if (batches.empty()) throw std::invalid_argument("adam_steps_direction: no probe batches");
  WeightVector<float> probe = weights;
  OptimizerState<float> probe_state = state;
  for (int s = 0; s < n_steps; ++s) {
    auto bw = loss_and_gradients(probe, model, batches[static_cast<size_t>(s) % batches.size()]);
    if (!std::isfinite(bw.loss)) throw std::runtime_error("non-finite loss during probe steps");
    if (opt_cfg.clip_norm) clip_gradients(bw.grads, *opt_cfg.clip_norm);
    adamw_step(probe, bw.grads, probe_state, lr, opt_cfg);
  }
  Direction dir;
  dir.kind = DirectionKind::adam_steps;
  dir.vector = WeightVector<double>(weights.layout);
  for (size_t i = 0; i < weights.size(); ++i) {
    dir.vector.values[i] =
        static_cast<double>(probe.values[i]) - static_cast<double>(weights.values[i]);
  }
  dir.norm = direction_norm(dir.vector);
  if (dir.norm == 0.0) throw std::invalid_argument("degenerate direction: probe did not move");
  return dir;
}

inline double direction_cosine(const Direction& a, const Direction& b) {
  require_same_layout(a.vector.layout, b.vector.layout);
  double dot = 0.0;
  for (size_t i = 0; i < a.vector.size(); ++i) dot += a.vector.values[i] * b.vector.values[i];
  return dot / (a.norm * b.norm);
}

struct LandscapeGrid {
  std::vector<double> a_coefficients;  // along e1
  std::vector<double> b_coefficients;  // along e2
  RowMat<double> values;               // perplexity, shape |a| x |b|
  std::vector<std::pair<size_t, size_t>> non_finite_cells;
  double e1_norm = 0.0;
  double e2_norm = 0.0;
};

// Perplexity of center + a*e1 + b*e2 on the fixed evaluation subset. Pure in
// all inputs; per-cell non-finite values are flagged, not fatal.
inline LandscapeGrid scan_grid(const WeightVector<float>& center, const ModelConfig& model,
                               const Direction& e1, const Direction& e2,
                               const std::vector<double>& a_list, const std::vector<double>& b_list,
                               const std::vector<Batch>& eval_batches) {
  require_same_layout(center.layout, e1.vector.layout);
  require_same_layout(center.layout, e2.vector.layout);
  if (eval_batches.empty()) throw std::invalid_argument("scan_grid: empty evaluation set");
  LandscapeGrid grid;
  grid.a_coefficients = a_list;
  grid.b_coefficients = b_list;
  grid.e1_norm = e1.norm;
  grid.e2_norm = e2.norm;
  grid.values.resize(static_cast<Eigen::Index>(a_list.size()),
                     static_cast<Eigen::Index>(b_list.size()));

  WeightVector<float> point(center.layout);
  for (size_t ai = 0; ai < a_list.size(); ++ai) {
    for (size_t bi = 0; bi < b_list.size(); ++bi) {
      const double a = a_list[ai], b = b_list[bi];
      for (size_t i = 0; i < center.size(); ++i) {
        point.values[i] = static_cast<float>(static_cast<double>(center.values[i]) +
                                             a * e1.vector.values[i] + b * e2.vector.values[i]);
      }
      double ppl = std::numeric_limits<double>::quiet_NaN();
      try {
        ppl = std::exp(mean_eval_loss(point, model, eval_batches));
      } catch (const std::exception&) {
        // flagged below
      }
      grid.values(static_cast<Eigen::Index>(ai), static_cast<Eigen::Index>(bi)) = ppl;
      if (!std::isfinite(ppl)) grid.non_finite_cells.emplace_back(ai, bi);
    }
  }
  return grid;
}

inline std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 2) throw std::invalid_argument("linspace needs at least two points");
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / (n - 1);
  }
  return out;
}

}  // namespace wsdlab
