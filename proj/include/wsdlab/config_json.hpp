// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "wsdlab/nanomodel.hpp"
#include "wsdlab/optimizer.hpp"
#include "wsdlab/schedules.hpp"

namespace wsdlab {

using Json = nlohmann::ordered_json;

// Unknown keys are configuration errors; missing keys take defaults.
inline void require_keys(const Json& j, const char* what,
                         std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || (key == a);
    if (!ok) throw std::invalid_argument(std::string("unknown key '") + key + "' in " + what);
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Json model_to_json(const ModelConfig& cfg) {
  return Json{{"d_model", cfg.d_model},       {"n_layers", cfg.n_layers},
              {"ffw_dim", cfg.ffw_dim},       {"head_dim", cfg.head_dim},
              {"n_heads", cfg.n_heads},       {"vocab_size", cfg.vocab_size},
              {"seq_len", cfg.seq_len},       {"rms_eps", cfg.rms_eps},
              {"rope_base", cfg.rope_base}};
}

inline ModelConfig model_from_json(const Json& j) {
  require_keys(j, "model", {"d_model", "n_layers", "ffw_dim", "head_dim", "n_heads", "vocab_size",
                            "seq_len", "rms_eps", "rope_base"});
  ModelConfig cfg;
  read_field(j, "d_model", cfg.d_model);
  read_field(j, "n_layers", cfg.n_layers);
  read_field(j, "ffw_dim", cfg.ffw_dim);
  read_field(j, "head_dim", cfg.head_dim);
  read_field(j, "n_heads", cfg.n_heads);
  read_field(j, "vocab_size", cfg.vocab_size);
  read_field(j, "seq_len", cfg.seq_len);
  read_field(j, "rms_eps", cfg.rms_eps);
  read_field(j, "rope_base", cfg.rope_base);
  cfg.validate();
  return cfg;
}

inline Json optimizer_to_json(const OptimizerConfig& cfg) {
  Json j{{"beta1", cfg.beta1},
         {"beta2", cfg.beta2},
         {"eps", cfg.eps},
         {"weight_decay", cfg.weight_decay},
         {"decay_gains", cfg.decay_gains}};
  j["clip_norm"] = cfg.clip_norm ? Json(*cfg.clip_norm) : Json(nullptr);
  return j;
}

inline OptimizerConfig optimizer_from_json(const Json& j) {
  require_keys(j, "optimizer", {"beta1", "beta2", "eps", "weight_decay", "clip_norm",
                                "decay_gains"});
  OptimizerConfig cfg;
  read_field(j, "beta1", cfg.beta1);
  read_field(j, "beta2", cfg.beta2);
  read_field(j, "eps", cfg.eps);
  read_field(j, "weight_decay", cfg.weight_decay);
  if (j.contains("clip_norm")) {
    if (j.at("clip_norm").is_null()) {
      cfg.clip_norm.reset();
    } else {
      cfg.clip_norm = j.at("clip_norm").get<double>();
    }
  }
  read_field(j, "decay_gains", cfg.decay_gains);
  cfg.validate();
  return cfg;
}

inline Json schedule_to_json(const ScheduleSpec& spec) {
  return Json{{"kind", to_string(spec.kind)},
              {"shape", shape_kind_name(spec.shape.kind)},
              {"alpha", spec.shape.alpha},
              {"warmup_steps", spec.warmup_steps},
              {"stable_steps", spec.stable_steps},
              {"cooldown_steps", spec.cooldown_steps},
              {"peak_lr", spec.peak_lr}};
}

inline ScheduleSpec schedule_from_json(const Json& j) {
  require_keys(j, "schedule", {"kind", "shape", "alpha", "warmup_steps", "stable_steps",
                               "cooldown_steps", "peak_lr"});
  ScheduleSpec spec;
  std::string kind = "wsd", shape = "linear";
  read_field(j, "kind", kind);
  read_field(j, "shape", shape);
  spec.kind = parse_schedule_kind(kind);
  spec.shape = parse_shape(shape);
  read_field(j, "alpha", spec.shape.alpha);
  read_field(j, "warmup_steps", spec.warmup_steps);
  read_field(j, "stable_steps", spec.stable_steps);
  read_field(j, "cooldown_steps", spec.cooldown_steps);
  read_field(j, "peak_lr", spec.peak_lr);
  return spec;
}

}  // namespace wsdlab
