// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wsdlab/weights.hpp"

namespace wsdlab {

// Validation loss of a model; the same evaluator must be used for members,
// soups and references so the loss-space decomposition is an identity.
using LossEvaluator = std::function<double(const WeightVector<float>&)>;

// Componentwise arithmetic mean in weight space ("model souping").
// Accumulates in double; permutation-invariant in the member list.
inline WeightVector<float> average_weights(const std::vector<WeightVector<float>>& members) {
  if (members.empty()) throw std::invalid_argument("average_weights: no members");
  for (const auto& m : members) require_same_layout(members.front().layout, m.layout);
  const size_t n = members.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& m : members) {
    for (size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(m.values[i]);
  }
  WeightVector<float> out(members.front().layout);
  const double inv = 1.0 / static_cast<double>(members.size());
  for (size_t i = 0; i < n; ++i) out.values[i] = static_cast<float>(acc[i] * inv);
  return out;
}

// One experiment family: N models sharing a cooldown shape, differing only in
// the data permutation.
struct ExperimentSet {
  std::string label;       // shape name, e.g. "lowered_linear:0.7"
  double alpha = 1.0;      // lowered_linear parameter when applicable
  std::vector<WeightVector<float>> members;
};

struct LossSpaceReport {
  double bias = 0.0;       // L(soup(members)) - L(soup(references))
  double variance = 0.0;   // mean member loss - L(soup(members))
  double residual = 0.0;   // (bias + variance) - (mean member loss - L(m*))
  double soup_loss = 0.0;
  double reference_loss = 0.0;
  double mean_member_loss = 0.0;
  double loss_variance = 0.0;  // 1/N sum (L_i - mean)^2, extra column
  std::vector<double> member_losses;
};

inline LossSpaceReport bias_variance_loss_space(const std::vector<WeightVector<float>>& members,
                                                const std::vector<WeightVector<float>>& references,
                                                const LossEvaluator& evaluate) {
  if (members.empty()) throw std::invalid_argument("loss space: no members");
  if (references.empty()) throw std::invalid_argument("loss space: no references");
  LossSpaceReport report;
  report.soup_loss = evaluate(average_weights(members));
  report.reference_loss = evaluate(average_weights(references));
  double total = 0.0;
  for (const auto& m : members) {
    report.member_losses.push_back(evaluate(m));
    total += report.member_losses.back();
  }
  report.mean_member_loss = total / static_cast<double>(members.size());
  for (const double l : report.member_losses) {
    const double d = l - report.mean_member_loss;
    report.loss_variance += d * d;
  }
  report.loss_variance /= static_cast<double>(members.size());
  report.bias = report.soup_loss - report.reference_loss;
  report.variance = report.mean_member_loss - report.soup_loss;
  report.residual =
      (report.bias + report.variance) - (report.mean_member_loss - report.reference_loss);
  return report;
}

struct WeightSpaceReport {
  double bias = 0.0;      // || mean(references) - mean(members) ||
  double variance = 0.0;  // 1/(N-1) sum || m_i - mean ||^2
};

inline WeightSpaceReport bias_variance_weight_space(
    const std::vector<WeightVector<float>>& members,
    const std::vector<WeightVector<float>>& references) {
  if (members.size() < 2) throw std::invalid_argument("weight space needs N >= 2 members");
  if (references.empty()) throw std::invalid_argument("weight space: no references");
  const auto member_mean = average_weights(members);
  const auto reference_mean = average_weights(references);
  require_same_layout(member_mean.layout, reference_mean.layout);

  WeightSpaceReport report;
  double bias_sq = 0.0;
  for (size_t i = 0; i < member_mean.size(); ++i) {
    const double d = static_cast<double>(reference_mean.values[i]) - member_mean.values[i];
    bias_sq += d * d;
  }
  report.bias = std::sqrt(bias_sq);
  for (const auto& m : members) {
    double dist_sq = 0.0;
    for (size_t i = 0; i < m.size(); ++i) {
      const double d = static_cast<double>(m.values[i]) - member_mean.values[i];
      dist_sq += d * d;
    }
    report.variance += dist_sq;
  }
  report.variance /= static_cast<double>(members.size() - 1);
  return report;
}

struct SimpleLossReport {
  double bias = 0.0;      // mean of member losses
  double variance = 0.0;  // 1/N sum (L_i - mean)^2
};

inline SimpleLossReport bias_variance_loss_simple(const std::vector<double>& member_losses) {
  if (member_losses.size() < 2) throw std::invalid_argument("loss_simple needs N >= 2 losses");
  SimpleLossReport report;
  for (const double l : member_losses) report.bias += l;
  report.bias /= static_cast<double>(member_losses.size());
  for (const double l : member_losses) {
    const double d = l - report.bias;
    report.variance += d * d;
  }
  report.variance /= static_cast<double>(member_losses.size());
  return report;
}

struct KlSpaceReport {
  double bias = 0.0;      // mean over tokens of KL(mean ref dist || mean member dist)
  double variance = 0.0;  // 1/(NK) sum_n sum_k || s_nk - mean_k ||^2
};

// Per-token soft-label matrices, one (tokens x vocab) matrix per model. A
// 1e-12 floor with renormalization guards the log against underflowed
// probabilities.
inline KlSpaceReport bias_variance_kl_space(const std::vector<RowMat<float>>& member_predictions,
                                            const std::vector<RowMat<float>>& reference_predictions,
                                            double eps_floor = 1e-12) {
  if (member_predictions.empty() || reference_predictions.empty()) {
    throw std::invalid_argument("kl space: empty prediction set");
  }
  const Eigen::Index K = member_predictions.front().rows();
  const Eigen::Index V = member_predictions.front().cols();
  for (const auto& p : member_predictions) {
    if (p.rows() != K || p.cols() != V) throw std::invalid_argument("prediction shape mismatch");
  }
  for (const auto& p : reference_predictions) {
    if (p.rows() != K || p.cols() != V) throw std::invalid_argument("prediction shape mismatch");
  }

  RowMat<double> member_mean = RowMat<double>::Zero(K, V);
  for (const auto& p : member_predictions) member_mean += p.cast<double>();
  member_mean /= static_cast<double>(member_predictions.size());
  RowMat<double> reference_mean = RowMat<double>::Zero(K, V);
  for (const auto& p : reference_predictions) reference_mean += p.cast<double>();
  reference_mean /= static_cast<double>(reference_predictions.size());

  KlSpaceReport report;
  for (Eigen::Index k = 0; k < K; ++k) {
    auto p = reference_mean.row(k).array().max(eps_floor);
    auto q = member_mean.row(k).array().max(eps_floor);
    const double ps = p.sum(), qs = q.sum();
    report.bias += (p / ps * ((p / ps) / (q / qs)).log()).sum();
  }
  report.bias /= static_cast<double>(K);

  for (const auto& p : member_predictions) {
    report.variance += (p.cast<double>() - member_mean).squaredNorm();
  }
  report.variance /=
      static_cast<double>(member_predictions.size()) * static_cast<double>(K);
  return report;
}

struct ShiftDeviationReport {
  double shift = 0.0;      // mean difference over cooldown batches
  double deviation = 0.0;  // mean squared residual over all batches
  std::vector<double> differences;
};

// difference_i = post(b_i) - pre(b_i) over the original training order;
// shift averages indices i > P (1-indexed), deviation averages all batches.
// P = 0 gives the all-batches variant of the shift.
inline ShiftDeviationReport shift_deviation(const std::vector<double>& pre_series,
                                            const std::vector<double>& post_series, size_t P) {
  const size_t N = pre_series.size();
  if (post_series.size() != N) throw std::invalid_argument("series lengths differ");
  if (P >= N) throw std::invalid_argument("empty cooldown range");
  ShiftDeviationReport report;
  report.differences.resize(N);
  for (size_t i = 0; i < N; ++i) report.differences[i] = post_series[i] - pre_series[i];
  for (size_t i = P; i < N; ++i) report.shift += report.differences[i];
  report.shift /= static_cast<double>(N - P);
  for (size_t i = 0; i < N; ++i) {
    const double d = report.differences[i] - report.shift;
    report.deviation += d * d;
  }
  report.deviation /= static_cast<double>(N);
  return report;
}

// Average ranks with ties broken by the mean rank of the tied block.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation; nullopt when either input is constant.
inline std::optional<double> spearman(const std::vector<double>& xs,
                                      const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
  if (xs.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mean_x = 0.0, mean_y = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mean_x += rx[i];
    mean_y += ry[i];
  }
  mean_x /= n;
  mean_y /= n;
  double cov = 0.0, var_x = 0.0, var_y = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double dx = rx[i] - mean_x, dy = ry[i] - mean_y;
    cov += dx * dy;
    var_x += dx * dx;
    var_y += dy * dy;
  }
  if (var_x == 0.0 || var_y == 0.0) return std::nullopt;
  return cov / std::sqrt(var_x * var_y);
}

}  // namespace wsdlab
