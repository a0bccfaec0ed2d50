// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wsdlab/common.hpp"
#include "wsdlab/weights.hpp"

namespace wsdlab {

// Decoder-only transformer: pre-norm blocks of causal attention + SwiGLU
// feed-forward, RMSNorm, rotary position embeddings, untied input embedding
// and output head, no biases.
struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int ffw_dim = 192;
  int head_dim = 16;
  int n_heads = 4;
  int vocab_size = 256;
  int seq_len = 128;

  double rms_eps = 1e-5;
  double rope_base = 10000.0;

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || ffw_dim <= 0 || head_dim <= 0 || n_heads <= 0 ||
        vocab_size <= 0 || seq_len <= 0) {
      throw std::invalid_argument("model dimensions must be positive");
    }
    if (d_model != head_dim * n_heads) {
      throw std::invalid_argument("d_model must equal head_dim * n_heads");
    }
    if (head_dim % 2 != 0) throw std::invalid_argument("head_dim must be even for rotary embeddings");
  }

  // Closed-form parameter count; checked against the layout in tests.
  long param_count() const {
    const long d = d_model, f = ffw_dim, v = vocab_size, l = n_layers;
    return 2 * v * d + d + l * (2 * d + 4 * d * d + 3 * d * f);
  }

  bool operator==(const ModelConfig&) const = default;
};

inline LayoutPtr build_layout(const ModelConfig& cfg) {
  cfg.validate();
  auto layout = std::make_shared<WeightLayout>();
  const auto d = static_cast<size_t>(cfg.d_model);
  const auto f = static_cast<size_t>(cfg.ffw_dim);
  const auto v = static_cast<size_t>(cfg.vocab_size);
  layout->add("tok_emb", v, d);
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    layout->add(p + "attn_norm", 1, d);
    layout->add(p + "wq", d, d);
    layout->add(p + "wk", d, d);
    layout->add(p + "wv", d, d);
    layout->add(p + "wo", d, d);
    layout->add(p + "ffn_norm", 1, d);
    layout->add(p + "w_gate", f, d);
    layout->add(p + "w_up", f, d);
    layout->add(p + "w_down", d, f);
  }
  layout->add("final_norm", 1, d);
  layout->add("lm_head", v, d);
  return layout;
}

// Gaussian init (std 0.02) for all projection/embedding weights, ones for
// normalization gains. Draw order follows the layout, one draw per element.
inline WeightVector<float> init_weights(const ModelConfig& cfg, uint64_t seed) {
  WeightVector<float> w(build_layout(cfg));
  Rng rng(seed);
  for (const auto& seg : w.layout->segments()) {
    auto span = w.segment(seg);
    const bool is_gain = seg.name.find("norm") != std::string::npos;
    for (auto& v : span) {
      v = is_gain ? 1.0f : static_cast<float>(normal(rng, 0.0, 0.02));
    }
  }
  return w;
}

// Token id matrix of shape (batch, seq_len + 1): the first seq_len columns are
// inputs, the view shifted one to the right gives the targets.
struct Batch {
  TokenMat tokens;

  Eigen::Index batch_size() const { return tokens.rows(); }
  Eigen::Index seq_len() const { return tokens.cols() - 1; }

  TokenMat inputs() const { return tokens.leftCols(tokens.cols() - 1); }
  TokenMat targets() const { return tokens.rightCols(tokens.cols() - 1); }

  void validate(const ModelConfig& cfg) const {
    if (seq_len() != cfg.seq_len) throw std::invalid_argument("batch seq_len does not match config");
    if ((tokens.array() < 0).any() || (tokens.array() >= cfg.vocab_size).any()) {
      throw std::invalid_argument("token id out of vocabulary");
    }
  }
};

namespace detail {

template <typename T>
struct RmsCache {
  RowMat<T> normed;                       // x * gain * inv, per row
  Eigen::Array<T, Eigen::Dynamic, 1> inv; // 1/sqrt(mean(x^2) + eps), per row
};

template <typename T>
void rmsnorm(const RowMat<T>& x, Eigen::Map<const RowMat<T>> gain, double eps, RmsCache<T>& out) {
  const auto d = x.cols();
  out.inv = (x.array().square().rowwise().mean() + static_cast<T>(eps)).rsqrt();
  out.normed = (x.array().colwise() * out.inv).rowwise() * gain.row(0).array();
  (void)d;
}

// dx and dgain for y = x * gain * inv(x).
template <typename T>
void rmsnorm_backward(const RowMat<T>& x, Eigen::Map<const RowMat<T>> gain,
                      const Eigen::Array<T, Eigen::Dynamic, 1>& inv, const RowMat<T>& dy,
                      RowMat<T>& dx, Eigen::Map<RowMat<T>> dgain) {
  const auto d = static_cast<T>(x.cols());
  // dgain_j = sum_rows dy_rj * x_rj * inv_r
  dgain.row(0).array() += (dy.array() * (x.array().colwise() * inv)).colwise().sum();
  // dx = g .* dy .* inv  -  x .* inv^3/d .* rowsum(dy .* g .* x)
  Eigen::Array<T, Eigen::Dynamic, 1> rowdot =
      ((dy.array().rowwise() * gain.row(0).array()) * x.array()).rowwise().sum();
  dx = ((dy.array().rowwise() * gain.row(0).array()).colwise() * inv).matrix() -
       (x.array().colwise() * (inv.cube() * rowdot / d)).matrix();
}

template <typename T>
struct RopeTable {
  RowMat<T> cos_t;  // (seq_len, head_dim/2)
  RowMat<T> sin_t;
};

template <typename T>
RopeTable<T> make_rope_table(const ModelConfig& cfg) {
  const int half = cfg.head_dim / 2;
  RopeTable<T> table;
  table.cos_t.resize(cfg.seq_len, half);
  table.sin_t.resize(cfg.seq_len, half);
  for (int pos = 0; pos < cfg.seq_len; ++pos) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(cfg.rope_base, -2.0 * i / cfg.head_dim);
      const double angle = pos * freq;
      table.cos_t(pos, i) = static_cast<T>(std::cos(angle));
      table.sin_t(pos, i) = static_cast<T>(std::sin(angle));
    }
  }
  return table;
}

// In-place pairwise rotation of each head slice; sign=-1 applies the inverse
// rotation (used in the backward pass).
template <typename T>
void apply_rope(RowMat<T>& x, const ModelConfig& cfg, const RopeTable<T>& table, int sign) {
  const int half = cfg.head_dim / 2;
  const auto rows = x.rows();
  const int L = cfg.seq_len;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int pos = static_cast<int>(r % L);
    for (int h = 0; h < cfg.n_heads; ++h) {
      T* p = x.row(r).data() + h * cfg.head_dim;
      for (int i = 0; i < half; ++i) {
        const T c = table.cos_t(pos, i);
        const T s = static_cast<T>(sign) * table.sin_t(pos, i);
        const T a = p[2 * i], b = p[2 * i + 1];
        p[2 * i] = c * a - s * b;
        p[2 * i + 1] = s * a + c * b;
      }
    }
  }
}

template <typename T>
struct LayerCache {
  RowMat<T> x_in;  // residual entering the block
  RmsCache<T> attn_norm;
  RowMat<T> q, k, v;              // q, k post-rotation
  std::vector<RowMat<T>> probs;   // per (batch row, head), lower-triangular
  RowMat<T> ctx;                  // concatenated attention context
  RowMat<T> x_mid;                // residual after attention
  RmsCache<T> ffn_norm;
  RowMat<T> gate_pre, up, act;    // SwiGLU internals
};

template <typename T>
struct Activations {
  RowMat<T> embedded;
  std::vector<LayerCache<T>> layers;
  RowMat<T> x_final;  // residual after the last block
  RmsCache<T> final_norm;
  RowMat<T> logits;
};

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// Causal softmax(QK^T/sqrt(hd))V per (batch row, head); probs rows are
// normalized over positions <= the query position, zero elsewhere.
template <typename T>
void attention(const ModelConfig& cfg, const RowMat<T>& q, const RowMat<T>& k, const RowMat<T>& v,
               std::vector<RowMat<T>>& probs, RowMat<T>& ctx, Eigen::Index batch) {
  const int L = cfg.seq_len, hd = cfg.head_dim, H = cfg.n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  ctx.resize(q.rows(), q.cols());
  probs.assign(static_cast<size_t>(batch) * H, RowMat<T>());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int h = 0; h < H; ++h) {
      auto qb = q.block(b * L, h * hd, L, hd);
      auto kb = k.block(b * L, h * hd, L, hd);
      auto vb = v.block(b * L, h * hd, L, hd);
      RowMat<T>& p = probs[static_cast<size_t>(b) * H + h];
      p.noalias() = qb * kb.transpose();
      p *= scale;
      for (int i = 0; i < L; ++i) {
        auto row = p.row(i);
        const T m = row.head(i + 1).maxCoeff();
        T denom = T(0);
        for (int j = 0; j <= i; ++j) {
          row(j) = std::exp(row(j) - m);
          denom += row(j);
        }
        for (int j = 0; j <= i; ++j) row(j) /= denom;
        for (int j = i + 1; j < L; ++j) row(j) = T(0);
      }
      ctx.block(b * L, h * hd, L, hd).noalias() = p * vb;
    }
  }
}

template <typename T>
void forward_impl(const WeightVector<T>& w, const ModelConfig& cfg, const Batch& batch,
                  Activations<T>& acts, int stop_layer) {
  cfg.validate();
  batch.validate(cfg);
  if (w.layout->total_size() != static_cast<size_t>(cfg.param_count())) {
    throw std::invalid_argument("weight layout does not match model config");
  }
  const Eigen::Index B = batch.batch_size();
  const int L = cfg.seq_len;
  const Eigen::Index N = B * L;

  auto emb = w.matrix("tok_emb");
  acts.embedded.resize(N, cfg.d_model);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int t = 0; t < L; ++t) {
      acts.embedded.row(b * L + t) = emb.row(batch.tokens(b, t));
    }
  }
  if (stop_layer == 0) return;

  const auto rope = make_rope_table<T>(cfg);
  RowMat<T> x = acts.embedded;
  acts.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerCache<T>& c = acts.layers[l];
    c.x_in = x;

    rmsnorm(x, w.matrix(p + "attn_norm"), cfg.rms_eps, c.attn_norm);
    c.q.noalias() = c.attn_norm.normed * w.matrix(p + "wq").transpose();
    c.k.noalias() = c.attn_norm.normed * w.matrix(p + "wk").transpose();
    c.v.noalias() = c.attn_norm.normed * w.matrix(p + "wv").transpose();
    apply_rope(c.q, cfg, rope, +1);
    apply_rope(c.k, cfg, rope, +1);
    attention(cfg, c.q, c.k, c.v, c.probs, c.ctx, B);
    x.noalias() += c.ctx * w.matrix(p + "wo").transpose();
    c.x_mid = x;

    rmsnorm(x, w.matrix(p + "ffn_norm"), cfg.rms_eps, c.ffn_norm);
    c.gate_pre.noalias() = c.ffn_norm.normed * w.matrix(p + "w_gate").transpose();
    c.up.noalias() = c.ffn_norm.normed * w.matrix(p + "w_up").transpose();
    c.act = c.gate_pre.unaryExpr([](T g) { return g * sigmoid(g); }).cwiseProduct(c.up);
    x.noalias() += c.act * w.matrix(p + "w_down").transpose();

    if (stop_layer == l + 1 && stop_layer < cfg.n_layers) {
      acts.x_final = x;
      return;
    }
  }
  acts.x_final = x;
  rmsnorm(acts.x_final, w.matrix("final_norm"), cfg.rms_eps, acts.final_norm);
  if (stop_layer == cfg.n_layers) return;
  acts.logits.noalias() = acts.final_norm.normed * w.matrix("lm_head").transpose();
}

}  // namespace detail

// Logits of shape (batch*seq_len, vocab); row b*seq_len + t scores position t
// of batch row b. Causal: positions attend only to themselves and earlier.
template <typename T>
RowMat<T> forward(const WeightVector<T>& w, const ModelConfig& cfg, const Batch& batch) {
  detail::Activations<T> acts;
  detail::forward_impl(w, cfg, batch, acts, -1);
  return std::move(acts.logits);
}

// Mean per-token cross-entropy in nats, accumulated in double precision.
template <typename T>
double loss(const RowMat<T>& logits, const TokenMat& targets) {
  const Eigen::Index N = logits.rows();
  if (targets.size() != N) throw std::invalid_argument("loss: logits/targets size mismatch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < N; ++r) {
    const int32_t tgt = targets(r / targets.cols(), r % targets.cols());
    if (tgt < 0 || tgt >= logits.cols()) throw std::invalid_argument("target id out of vocabulary");
    const auto row = logits.row(r);
    const T m = row.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      denom += std::exp(static_cast<double>(row(j) - m));
    }
    total += static_cast<double>(m) + std::log(denom) - static_cast<double>(row(tgt));
  }
  return total / static_cast<double>(N);
}

template <typename T>
double eval_loss(const WeightVector<T>& w, const ModelConfig& cfg, const Batch& batch) {
  return loss(forward(w, cfg, batch), batch.targets());
}

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  WeightVector<T> grads;
};

template <typename T>
BackwardResult<T> loss_and_gradients(const WeightVector<T>& w, const ModelConfig& cfg,
                                     const Batch& batch) {
  detail::Activations<T> acts;
  detail::forward_impl(w, cfg, batch, acts, -1);

  BackwardResult<T> result;
  result.grads = WeightVector<T>(w.layout);
  WeightVector<T>& g = result.grads;

  const Eigen::Index B = batch.batch_size();
  const int L = cfg.seq_len, H = cfg.n_heads, hd = cfg.head_dim;
  const Eigen::Index N = B * L;
  const TokenMat targets = batch.targets();

  // Softmax cross-entropy: dlogits = (softmax - onehot) / N.
  RowMat<T> dlogits(N, cfg.vocab_size);
  double total = 0.0;
  for (Eigen::Index r = 0; r < N; ++r) {
    const int32_t tgt = targets(r / L, r % L);
    if (tgt < 0 || tgt >= cfg.vocab_size) throw std::invalid_argument("target id out of vocabulary");
    const auto row = acts.logits.row(r);
    const T m = row.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < cfg.vocab_size; ++j) {
      denom += std::exp(static_cast<double>(row(j) - m));
    }
    total += static_cast<double>(m) + std::log(denom) - static_cast<double>(row(tgt));
    for (Eigen::Index j = 0; j < cfg.vocab_size; ++j) {
      const double p = std::exp(static_cast<double>(row(j) - m)) / denom;
      dlogits(r, j) = static_cast<T>(p / static_cast<double>(N));
    }
    dlogits(r, tgt) -= static_cast<T>(1.0 / static_cast<double>(N));
  }
  result.loss = total / static_cast<double>(N);

  // Head and final norm.
  g.matrix("lm_head").noalias() += dlogits.transpose() * acts.final_norm.normed;
  RowMat<T> dx(N, cfg.d_model);
  {
    RowMat<T> dnormed;
    dnormed.noalias() = dlogits * w.matrix("lm_head");
    detail::rmsnorm_backward(acts.x_final, w.matrix("final_norm"), acts.final_norm.inv, dnormed,
                             dx, g.matrix("final_norm"));
  }

  const auto rope = detail::make_rope_table<T>(cfg);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    detail::LayerCache<T>& c = acts.layers[l];

    // Feed-forward: x = x_mid + act * Wd^T.
    {
      RowMat<T> dact;
      dact.noalias() = dx * w.matrix(p + "w_down");
      g.matrix(p + "w_down").noalias() += dx.transpose() * c.act;
      RowMat<T> silu_g = c.gate_pre.unaryExpr([](T v) { return v * detail::sigmoid(v); });
      RowMat<T> dup = dact.cwiseProduct(silu_g);
      RowMat<T> dgate = dact.cwiseProduct(c.up).cwiseProduct(
          c.gate_pre.unaryExpr([](T v) {
            const T s = detail::sigmoid(v);
            return s * (T(1) + v * (T(1) - s));
          }));
      g.matrix(p + "w_up").noalias() += dup.transpose() * c.ffn_norm.normed;
      g.matrix(p + "w_gate").noalias() += dgate.transpose() * c.ffn_norm.normed;
      RowMat<T> dnormed;
      dnormed.noalias() = dup * w.matrix(p + "w_up");
      dnormed.noalias() += dgate * w.matrix(p + "w_gate");
      RowMat<T> dxm;
      detail::rmsnorm_backward(c.x_mid, w.matrix(p + "ffn_norm"), c.ffn_norm.inv, dnormed, dxm,
                               g.matrix(p + "ffn_norm"));
      dx += dxm;  // residual path
    }

    // Attention: x_mid = x_in + ctx * Wo^T.
    {
      RowMat<T> dctx;
      dctx.noalias() = dx * w.matrix(p + "wo");
      g.matrix(p + "wo").noalias() += dx.transpose() * c.ctx;

      RowMat<T> dq = RowMat<T>::Zero(N, cfg.d_model);
      RowMat<T> dk = RowMat<T>::Zero(N, cfg.d_model);
      RowMat<T> dv = RowMat<T>::Zero(N, cfg.d_model);
      for (Eigen::Index b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          const RowMat<T>& probs = c.probs[static_cast<size_t>(b) * H + h];
          auto vb = c.v.block(b * L, h * hd, L, hd);
          auto qb = c.q.block(b * L, h * hd, L, hd);
          auto kb = c.k.block(b * L, h * hd, L, hd);
          auto dctxb = dctx.block(b * L, h * hd, L, hd);

          dv.block(b * L, h * hd, L, hd).noalias() = probs.transpose() * dctxb;
          RowMat<T> dprobs;
          dprobs.noalias() = dctxb * vb.transpose();
          // softmax backward per row: ds = p .* (dp - sum(dp .* p))
          RowMat<T> dscores(L, L);
          for (int i = 0; i < L; ++i) {
            const T rowdot = probs.row(i).dot(dprobs.row(i));
            dscores.row(i).array() = probs.row(i).array() * (dprobs.row(i).array() - rowdot);
          }
          dq.block(b * L, h * hd, L, hd).noalias() = dscores * kb * scale;
          dk.block(b * L, h * hd, L, hd).noalias() = dscores.transpose() * qb * scale;
        }
      }
      detail::apply_rope(dq, cfg, rope, -1);
      detail::apply_rope(dk, cfg, rope, -1);

      g.matrix(p + "wq").noalias() += dq.transpose() * c.attn_norm.normed;
      g.matrix(p + "wk").noalias() += dk.transpose() * c.attn_norm.normed;
      g.matrix(p + "wv").noalias() += dv.transpose() * c.attn_norm.normed;

      RowMat<T> dnormed;
      dnormed.noalias() = dq * w.matrix(p + "wq");
      dnormed.noalias() += dk * w.matrix(p + "wk");
      dnormed.noalias() += dv * w.matrix(p + "wv");
      RowMat<T> dxin;
      detail::rmsnorm_backward(c.x_in, w.matrix(p + "attn_norm"), c.attn_norm.inv, dnormed, dxin,
                               g.matrix(p + "attn_norm"));
      dx += dxin;
    }
  }

  // Embedding scatter.
  auto demb = g.matrix("tok_emb");
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int t = 0; t < L; ++t) {
      demb.row(batch.tokens(b, t)) += dx.row(b * L + t);
    }
  }
  return result;
}

template <typename T>
WeightVector<T> gradients(const WeightVector<T>& w, const ModelConfig& cfg, const Batch& batch) {
  return loss_and_gradients(w, cfg, batch).grads;
}

// Residual-stream activations after the given block, shape (batch*seq_len,
// d_model). Index 0 is the embedding lookup; index n_layers is the pre-head
// representation, i.e. the final RMSNorm output the head consumes.
template <typename T>
RowMat<T> hidden_states(const WeightVector<T>& w, const ModelConfig& cfg, const Batch& batch,
                        int layer) {
  if (layer < 0 || layer > cfg.n_layers) throw std::out_of_range("hidden_states: layer out of range");
  detail::Activations<T> acts;
  detail::forward_impl(w, cfg, batch, acts, layer);
  if (layer == 0) return std::move(acts.embedded);
  if (layer == cfg.n_layers) return std::move(acts.final_norm.normed);
  return std::move(acts.x_final);
}

// Per-token predictive distributions, shape (batch*seq_len, vocab).
template <typename T>
RowMat<T> token_distributions(const WeightVector<T>& w, const ModelConfig& cfg,
                              const Batch& batch) {
  RowMat<T> logits = forward(w, cfg, batch);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const T m = row.maxCoeff();
    row.array() = (row.array() - m).exp();
    row /= row.sum();
  }
  return logits;
}

}  // namespace wsdlab
