// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wsdlab/nanomodel.hpp"
#include "wsdlab/optimizer.hpp"

namespace wsdlab {

// Feature rows for a linear probe: residual-stream activations at one layer,
// paired with the next-token targets.
template <typename T>
struct ProbeData {
  RowMat<T> features;            // (tokens, d_model)
  std::vector<int32_t> targets;  // one per row
};

template <typename T>
ProbeData<T> collect_probe_data(const WeightVector<T>& weights, const ModelConfig& model,
                                const std::vector<Batch>& batches, int layer) {
  if (batches.empty()) throw std::invalid_argument("collect_probe_data: empty batch set");
  ProbeData<T> data;
  Eigen::Index rows = 0;
  for (const auto& b : batches) rows += b.batch_size() * model.seq_len;
  data.features.resize(rows, model.d_model);
  data.targets.reserve(static_cast<size_t>(rows));
  Eigen::Index cursor = 0;
  for (const auto& batch : batches) {
    const auto h = hidden_states(weights, model, batch, layer);
    data.features.middleRows(cursor, h.rows()) = h;
    cursor += h.rows();
    const auto targets = batch.targets();
    for (Eigen::Index r = 0; r < targets.rows(); ++r) {
      for (Eigen::Index c = 0; c < targets.cols(); ++c) data.targets.push_back(targets(r, c));
    }
  }
  return data;
}

// Mean cross-entropy of the linear map `head` (vocab x d_model) on the rows.
template <typename T>
double probe_loss(const RowMat<T>& head, const ProbeData<T>& data) {
  RowMat<T> logits = data.features * head.transpose();
  TokenMat targets(1, static_cast<Eigen::Index>(data.targets.size()));
  for (size_t i = 0; i < data.targets.size(); ++i) {
    targets(0, static_cast<Eigen::Index>(i)) = data.targets[i];
  }
  return loss(logits, targets);
}

namespace detail {

// Gradient of mean cross-entropy for the linear probe on one slice of rows.
template <typename T>
double probe_loss_and_grad(const RowMat<T>& head, const ProbeData<T>& data, Eigen::Index row_begin,
                           Eigen::Index row_count, RowMat<T>& grad) {
  auto x = data.features.middleRows(row_begin, row_count);
  RowMat<T> logits = x * head.transpose();
  RowMat<T> dlogits(row_count, logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < row_count; ++r) {
    const int32_t tgt = data.targets[static_cast<size_t>(row_begin + r)];
    const auto row = logits.row(r);
    const T m = row.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      denom += std::exp(static_cast<double>(row(j) - m));
    }
    total += static_cast<double>(m) + std::log(denom) - static_cast<double>(row(tgt));
    for (Eigen::Index j = 0; j < row.size(); ++j) {
      dlogits(r, j) = static_cast<T>(std::exp(static_cast<double>(row(j) - m)) / denom /
                                     static_cast<double>(row_count));
    }
    dlogits(r, tgt) -= static_cast<T>(1.0 / static_cast<double>(row_count));
  }
  grad.noalias() = dlogits.transpose() * x;
  return total / static_cast<double>(row_count);
}

}  // namespace detail

struct ProbeOptions {
  long steps = 500;
  long rows_per_step = 2048;  // minibatch size over feature rows
  double lr = 1e-3;
  OptimizerConfig optimizer = [] {
    OptimizerConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.clip_norm.reset();
    return cfg;
  }();
};

template <typename T>
struct ProbeResult {
  int layer = 0;
  double eval_ppl_before = 0.0;
  double eval_ppl_after = 0.0;
  double train_ppl_before = 0.0;
  double train_ppl_after = 0.0;
  RowMat<T> head;
};

// Trains a linear probe from the given initialization (App-style: the current
// lm-head weights) with the shared AdamW module; evaluates before and after.
template <typename T>
ProbeResult<T> train_probe(const RowMat<T>& init_head, const ProbeData<T>& train_data,
                           const ProbeData<T>& eval_data, const ProbeOptions& options) {
  if (eval_data.targets.empty()) throw std::invalid_argument("train_probe: empty evaluation set");
  if (train_data.targets.empty()) throw std::invalid_argument("train_probe: empty training set");

  ProbeResult<T> result;
  result.head = init_head;
  result.eval_ppl_before = std::exp(probe_loss(result.head, eval_data));
  result.train_ppl_before = std::exp(probe_loss(result.head, train_data));

  auto layout = std::make_shared<WeightLayout>();
  layout->add("probe", static_cast<size_t>(init_head.rows()),
              static_cast<size_t>(init_head.cols()));
  WeightVector<T> w(layout);
  w.matrix("probe") = init_head;
  OptimizerState<T> state(layout);

  const Eigen::Index total_rows = train_data.features.rows();
  RowMat<T> grad(init_head.rows(), init_head.cols());
  Eigen::Index cursor = 0;
  for (long step = 0; step < options.steps; ++step) {
    const Eigen::Index count = std::min<Eigen::Index>(options.rows_per_step, total_rows - cursor);
    const double l =
        detail::probe_loss_and_grad<T>(w.matrix("probe"), train_data, cursor, count, grad);
    if (!std::isfinite(l)) throw std::runtime_error("non-finite probe loss");
    cursor = (cursor + count) % total_rows;
    WeightVector<T> g(layout);
    g.matrix("probe") = grad;
    if (options.optimizer.clip_norm) clip_gradients(g, *options.optimizer.clip_norm);
    adamw_step(w, g, state, options.lr, options.optimizer);
  }
  result.head = w.matrix("probe");
  result.eval_ppl_after = std::exp(probe_loss(result.head, eval_data));
  result.train_ppl_after = std::exp(probe_loss(result.head, train_data));
  return result;
}

// Probes every layer 0..n_layers of a model, each initialized with the
// model's own lm-head.
template <typename T>
std::vector<ProbeResult<T>> probe_layers(const WeightVector<T>& weights, const ModelConfig& model,
                                         const std::vector<Batch>& train_batches,
                                         const std::vector<Batch>& eval_batches,
                                         const ProbeOptions& options) {
  std::vector<ProbeResult<T>> results;
  const RowMat<T> head_init = weights.matrix("lm_head");
  for (int layer = 0; layer <= model.n_layers; ++layer) {
    const auto train_data = collect_probe_data(weights, model, train_batches, layer);
    const auto eval_data = collect_probe_data(weights, model, eval_batches, layer);
    auto result = train_probe<T>(head_init, train_data, eval_data, options);
    result.layer = layer;
    results.push_back(std::move(result));
  }
  return results;
}

}  // namespace wsdlab
