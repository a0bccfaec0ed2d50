// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <utility>

#include "wsdlab/nanomodel.hpp"
#include "wsdlab/optimizer.hpp"
#include "wsdlab/weights.hpp"

namespace wsdlab {

// Binary formats, little-endian throughout. A checkpoint is a header (magic,
// version, model config, layout table) followed by float32 parameter values;
// optimizer-state files use the identical layout scheme for both moment
// vectors. Files are content-addressed: the id is the FNV-1a hash of the
// serialized bytes.

inline constexpr char kCheckpointMagic[9] = "WSDCKPT1";
inline constexpr char kOptStateMagic[9] = "WSDOPT01";

namespace detail {

inline void put_model_config(std::string& out, const ModelConfig& cfg) {
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.d_model));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.n_layers));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.ffw_dim));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.head_dim));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.n_heads));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.vocab_size));
  put_int<uint32_t>(out, static_cast<uint32_t>(cfg.seq_len));
  put_int<double>(out, cfg.rms_eps);
  put_int<double>(out, cfg.rope_base);
}

inline ModelConfig get_model_config(ByteReader& in) {
  ModelConfig cfg;
  cfg.d_model = static_cast<int>(in.read_int<uint32_t>());
  cfg.n_layers = static_cast<int>(in.read_int<uint32_t>());
  cfg.ffw_dim = static_cast<int>(in.read_int<uint32_t>());
  cfg.head_dim = static_cast<int>(in.read_int<uint32_t>());
  cfg.n_heads = static_cast<int>(in.read_int<uint32_t>());
  cfg.vocab_size = static_cast<int>(in.read_int<uint32_t>());
  cfg.seq_len = static_cast<int>(in.read_int<uint32_t>());
  cfg.rms_eps = in.read_int<double>();
  cfg.rope_base = in.read_int<double>();
  return cfg;
}

}  // namespace detail

struct Checkpoint {
  ModelConfig config;
  WeightVector<float> weights;
};

inline std::string serialize_checkpoint(const ModelConfig& cfg, const WeightVector<float>& w) {
  std::string out;
  detail::put_bytes(out, kCheckpointMagic, 8);
  detail::put_int<uint32_t>(out, 1);
  detail::put_model_config(out, cfg);
  serialize_layout(out, *w.layout);
  serialize_values_f32(out, w.values);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader in({bytes.data(), bytes.size()});
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
    throw std::runtime_error("not a checkpoint file");
  }
  if (in.read_int<uint32_t>() != 1) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.config = detail::get_model_config(in);
  auto layout = std::make_shared<WeightLayout>(deserialize_layout(in));
  ckpt.weights = unflatten<float>(layout, deserialize_values_f32(in));
  return ckpt;
}

inline std::string serialize_opt_state(const OptimizerState<float>& state) {
  std::string out;
  detail::put_bytes(out, kOptStateMagic, 8);
  detail::put_int<uint32_t>(out, 1);
  detail::put_int<uint64_t>(out, static_cast<uint64_t>(state.step_count));
  serialize_layout(out, *state.exp_avg.layout);
  serialize_values_f32(out, state.exp_avg.values);
  serialize_values_f32(out, state.exp_avg_sq.values);
  return out;
}

inline OptimizerState<float> deserialize_opt_state(const std::string& bytes) {
  detail::ByteReader in({bytes.data(), bytes.size()});
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != std::string(kOptStateMagic, 8)) {
    throw std::runtime_error("not an optimizer-state file");
  }
  if (in.read_int<uint32_t>() != 1) throw std::runtime_error("unsupported state version");
  OptimizerState<float> state;
  state.step_count = static_cast<long>(in.read_int<uint64_t>());
  auto layout = std::make_shared<WeightLayout>(deserialize_layout(in));
  state.exp_avg = unflatten<float>(layout, deserialize_values_f32(in));
  state.exp_avg_sq = unflatten<float>(layout, deserialize_values_f32(in));
  return state;
}

// Content-addressed store: <dir>/ckpt_<id>.bin and <dir>/opt_<id>.bin.
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::string put_checkpoint(const ModelConfig& cfg, const WeightVector<float>& w) const {
    const std::string bytes = serialize_checkpoint(cfg, w);
    const std::string id = content_id(bytes);
    write_file_bytes(checkpoint_path(id), bytes);
    return id;
  }

  Checkpoint get_checkpoint(const std::string& id) const {
    return deserialize_checkpoint(read_file_bytes(checkpoint_path(id)));
  }

  std::string put_opt_state(const OptimizerState<float>& state) const {
    const std::string bytes = serialize_opt_state(state);
    const std::string id = content_id(bytes);
    write_file_bytes(opt_state_path(id), bytes);
    return id;
  }

  OptimizerState<float> get_opt_state(const std::string& id) const {
    return deserialize_opt_state(read_file_bytes(opt_state_path(id)));
  }

  std::filesystem::path checkpoint_path(const std::string& id) const {
    return dir_ / ("ckpt_" + id + ".bin");
  }
  std::filesystem::path opt_state_path(const std::string& id) const {
    return dir_ / ("opt_" + id + ".bin");
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace wsdlab
