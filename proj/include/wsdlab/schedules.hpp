// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>

#include "wsdlab/common.hpp"

namespace wsdlab {

enum class ShapeKind {
  linear,
  cosine,
  mirror_cosine,
  square,
  sqrt,
  lowered_linear,
};

// Multiplier applied to the peak learning rate over the cooldown. Every shape
// starts in (0, 1], decreases monotonically, and hits exactly 0 at x = 1.
struct CooldownShape {
  ShapeKind kind = ShapeKind::linear;
  double alpha = 1.0;  // starting multiplier, lowered_linear only

  static CooldownShape linear() { return {ShapeKind::linear, 1.0}; }
  static CooldownShape cosine() { return {ShapeKind::cosine, 1.0}; }
  static CooldownShape mirror_cosine() { return {ShapeKind::mirror_cosine, 1.0}; }
  static CooldownShape square() { return {ShapeKind::square, 1.0}; }
  static CooldownShape sqrt() { return {ShapeKind::sqrt, 1.0}; }
  static CooldownShape lowered_linear(double alpha) { return {ShapeKind::lowered_linear, alpha}; }

  void validate() const {
    if (kind == ShapeKind::lowered_linear && !(alpha > 0.0 && alpha <= 1.0)) {
      throw std::invalid_argument("lowered_linear alpha must be in (0, 1]");
    }
  }

  bool operator==(const CooldownShape&) const = default;
};

inline std::string shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::linear: return "linear";
    case ShapeKind::cosine: return "cosine";
    case ShapeKind::mirror_cosine: return "mirror_cosine";
    case ShapeKind::square: return "square";
    case ShapeKind::sqrt: return "sqrt";
    case ShapeKind::lowered_linear: return "lowered_linear";
  }
  throw std::logic_error("unreachable");
}

inline std::string to_string(const CooldownShape& shape) {
  if (shape.kind == ShapeKind::lowered_linear) {
    return "lowered_linear:" + std::to_string(shape.alpha);
  }
  return shape_kind_name(shape.kind);
}

// Accepts the names above; lowered_linear takes its alpha after a colon,
// e.g. "lowered_linear:0.7".
inline CooldownShape parse_shape(const std::string& text) {
  if (text == "linear") return CooldownShape::linear();
  if (text == "cosine") return CooldownShape::cosine();
  if (text == "mirror_cosine") return CooldownShape::mirror_cosine();
  if (text == "square") return CooldownShape::square();
  if (text == "sqrt") return CooldownShape::sqrt();
  const std::string prefix = "lowered_linear";
  if (text.rfind(prefix, 0) == 0) {
    double alpha = 1.0;
    if (text.size() > prefix.size()) {
      if (text[prefix.size()] != ':') throw std::invalid_argument("bad shape: " + text);
      alpha = std::stod(text.substr(prefix.size() + 1));
    }
    auto shape = CooldownShape::lowered_linear(alpha);
    shape.validate();
    return shape;
  }
  throw std::invalid_argument("unknown cooldown shape: " + text);
}

// Closed-form shape value at cooldown fraction x in [0, 1].
inline double shape_value(const CooldownShape& shape, double x) {
  if (!(x >= 0.0 && x <= 1.0)) {
    throw std::domain_error("shape_value: x must be in [0, 1]");
  }
  shape.validate();
  switch (shape.kind) {
    case ShapeKind::linear: return 1.0 - x;
    case ShapeKind::cosine: return (1.0 + std::cos(M_PI * x)) / 2.0;
    case ShapeKind::mirror_cosine: return 2.0 * (1.0 - x) - (1.0 + std::cos(M_PI * x)) / 2.0;
    case ShapeKind::square: return 1.0 - x * x;
    case ShapeKind::sqrt: return 1.0 - std::sqrt(x);
    case ShapeKind::lowered_linear: return shape.alpha * (1.0 - x);
  }
  throw std::logic_error("unreachable");
}

enum class ScheduleKind {
  wsd,           // warmup, stable plateau, shaped cooldown to zero
  cosine,        // warmup, then cosine decay to zero over the remaining steps
  linear_decay,  // warmup, then linear decay to zero over the remaining steps
  constant,      // warmup, then flat (control runs)
};

inline std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::wsd: return "wsd";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::linear_decay: return "linear_decay";
    case ScheduleKind::constant: return "constant";
  }
  throw std::logic_error("unreachable");
}

inline ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "wsd") return ScheduleKind::wsd;
  if (text == "cosine") return ScheduleKind::cosine;
  if (text == "linear_decay") return ScheduleKind::linear_decay;
  if (text == "constant") return ScheduleKind::constant;
  throw std::invalid_argument("unknown schedule kind: " + text);
}

// Piecewise learning-rate schedule over step indices [0, total_steps].
// Immutable after construction; safe to share across threads.
struct ScheduleSpec {
  double peak_lr = 0.0;
  long warmup_steps = 0;
  long stable_steps = 0;
  long cooldown_steps = 0;
  CooldownShape shape = CooldownShape::linear();
  ScheduleKind kind = ScheduleKind::wsd;

  long total_steps() const { return warmup_steps + stable_steps + cooldown_steps; }

  void validate() const {
    if (!(peak_lr > 0.0)) throw std::invalid_argument("peak_lr must be positive");
    if (warmup_steps < 0 || stable_steps < 0 || cooldown_steps < 0) {
      throw std::invalid_argument("phase lengths must be non-negative");
    }
    if (total_steps() <= 0) throw std::invalid_argument("total_steps must be positive");
    shape.validate();
  }

  bool operator==(const ScheduleSpec&) const = default;
};

// Learning rate at a step index in [0, total_steps]. Phases partition the
// index range as warmup [0, w), stable [w, w+s), cooldown [w+s, total]; the
// cooldown fraction reaches exactly 1 at total_steps, so WSD / cosine /
// linear_decay schedules terminate at a learning rate of exactly 0.
inline double lr_at(const ScheduleSpec& spec, long step) {
  spec.validate();
  if (step < 0 || step > spec.total_steps()) {
    throw std::domain_error("lr_at: step outside [0, total_steps]");
  }
  if (spec.warmup_steps > 0 && step < spec.warmup_steps) {
    return spec.peak_lr * static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
  }
  const long decay_len = spec.total_steps() - spec.warmup_steps;
  const long into_decay = step - spec.warmup_steps;
  switch (spec.kind) {
    case ScheduleKind::constant:
      return spec.peak_lr;
    case ScheduleKind::cosine: {
      const double t = static_cast<double>(into_decay) / static_cast<double>(decay_len);
      return spec.peak_lr * (1.0 + std::cos(M_PI * t)) / 2.0;
    }
    case ScheduleKind::linear_decay: {
      const double t = static_cast<double>(into_decay) / static_cast<double>(decay_len);
      return spec.peak_lr * (1.0 - t);
    }
    case ScheduleKind::wsd: {
      if (step < spec.warmup_steps + spec.stable_steps) return spec.peak_lr;
      if (spec.cooldown_steps == 0) return spec.peak_lr;
      const double x = static_cast<double>(step - spec.warmup_steps - spec.stable_steps) /
                       static_cast<double>(spec.cooldown_steps);
      return spec.peak_lr * shape_value(spec.shape, x);
    }
  }
  throw std::logic_error("unreachable");
}

// Warmup followed by cosine decay to zero over all remaining steps.
inline ScheduleSpec cosine_baseline(double peak_lr, long warmup_steps, long decay_steps) {
  ScheduleSpec spec;
  spec.peak_lr = peak_lr;
  spec.warmup_steps = warmup_steps;
  spec.stable_steps = 0;
  spec.cooldown_steps = decay_steps;
  spec.kind = ScheduleKind::cosine;
  spec.validate();
  return spec;
}

// Warmup followed by linear decay to zero over all remaining steps.
inline ScheduleSpec linear_baseline(double peak_lr, long warmup_steps, long decay_steps) {
  ScheduleSpec spec;
  spec.peak_lr = peak_lr;
  spec.warmup_steps = warmup_steps;
  spec.stable_steps = 0;
  spec.cooldown_steps = decay_steps;
  spec.kind = ScheduleKind::linear_decay;
  spec.validate();
  return spec;
}

inline ScheduleSpec wsd_schedule(double peak_lr, long warmup_steps, long stable_steps,
                                 long cooldown_steps, CooldownShape shape) {
  ScheduleSpec spec;
  spec.peak_lr = peak_lr;
  spec.warmup_steps = warmup_steps;
  spec.stable_steps = stable_steps;
  spec.cooldown_steps = cooldown_steps;
  spec.shape = shape;
  spec.kind = ScheduleKind::wsd;
  spec.validate();
  return spec;
}

inline ScheduleSpec constant_schedule(double peak_lr, long warmup_steps, long steps) {
  ScheduleSpec spec;
  spec.peak_lr = peak_lr;
  spec.warmup_steps = warmup_steps;
  spec.stable_steps = steps;
  spec.cooldown_steps = 0;
  spec.kind = ScheduleKind::constant;
  spec.validate();
  return spec;
}

// One (step, lr) row per step index, for plotting.
inline void write_schedule_csv(const ScheduleSpec& spec, std::ostream& out) {
  out << std::setprecision(17);
  out << "step,lr\n";
  for (long step = 0; step <= spec.total_steps(); ++step) {
    out << step << ',' << lr_at(spec, step) << '\n';
  }
}

}  // namespace wsdlab
