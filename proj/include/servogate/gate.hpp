#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "servogate/error.hpp"

namespace servogate {

// Default slope thresholds, used when a caller injects no calibrated values.
inline constexpr double kDefaultTauP = -0.310;
inline constexpr double kDefaultTauR = -0.487;

inline constexpr double kPi = 3.14159265358979323846;

/// One recorded step of predictive variances.
struct VarianceEntry {
  long t = 0;          // step index, >= 0
  double var_p = 0.0;  // meters^2
  double var_r = 0.0;  // radians
};

/// Time series of per-step variances. Step indices must start at 0 and be
/// strictly increasing.
class VarianceTrace {
 public:
  VarianceTrace() = default;

  explicit VarianceTrace(std::vector<VarianceEntry> entries) {
    for (const VarianceEntry& e : entries) push_back(e);
  }

  void push_back(const VarianceEntry& e) {
    const long expected_min = entries_.empty() ? 0 : entries_.back().t + 1;
    if (e.t < expected_min || (entries_.empty() && e.t != 0)) {
      throw Error("variance trace steps must start at 0 and strictly increase");
    }
    if (!(e.var_p >= 0.0) || !std::isfinite(e.var_p)) {
      throw Error("var_p must be finite and non-negative");
    }
    if (!(e.var_r >= 0.0) || e.var_r > kPi + 1e-12) {
      throw Error("var_r must lie in [0, pi]");
    }
    entries_.push_back(e);
  }

  const std::vector<VarianceEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  long last_step() const { return entries_.empty() ? -1 : entries_.back().t; }

  /// Entry for step t; throws MissingStep when absent.
  const VarianceEntry& at_step(long t) const {
    for (const VarianceEntry& e : entries_) {
      if (e.t == t) return e;
    }
    throw MissingStep(t);
  }

  bool has_step(long t) const {
    for (const VarianceEntry& e : entries_) {
      if (e.t == t) return true;
    }
    return false;
  }

 private:
  std::vector<VarianceEntry> entries_;
};

/// Step-to-step change in positional and rotational variance.
struct UncertaintyVector {
  double d_var_p = 0.0;
  double d_var_r = 0.0;
};

/// Variance slope at step t: components of var(t) - var(t-1). Requires both
/// steps to be present in the trace.
inline UncertaintyVector uncertainty_vector(const VarianceTrace& trace, long t) {
  if (t < 1) throw MissingStep(t - 1);
  const VarianceEntry& prev = trace.at_step(t - 1);
  const VarianceEntry& cur = trace.at_step(t);
  return UncertaintyVector{cur.var_p - prev.var_p, cur.var_r - prev.var_r};
}

enum class GateMode { Position, Rotation, Both };

enum class GateComponent { Position, Rotation };

struct GateConfig {
  double tau_p = kDefaultTauP;
  double tau_r = kDefaultTauR;
  GateMode mode = GateMode::Position;
  long decision_step = 1;
  bool monitor_continuously = false;
};

enum class GateAction { Proceed, RequestIntervention };

struct GateDecision {
  GateAction action = GateAction::Proceed;
  std::vector<GateComponent> triggered_by;  // non-empty iff RequestIntervention
  long at_step = 0;
  UncertaintyVector u;
};

namespace detail {

inline std::vector<GateComponent> violated_components(const UncertaintyVector& u,
                                                      const GateConfig& cfg) {
  std::vector<GateComponent> out;
  const bool check_p = cfg.mode == GateMode::Position || cfg.mode == GateMode::Both;
  const bool check_r = cfg.mode == GateMode::Rotation || cfg.mode == GateMode::Both;
  // A component is violated when its slope exceeds the threshold strictly:
  // the variance failed to decrease enough. Equality proceeds.
  if (check_p && u.d_var_p > cfg.tau_p) out.push_back(GateComponent::Position);
  if (check_r && u.d_var_r > cfg.tau_r) out.push_back(GateComponent::Rotation);
  return out;
}

}  // namespace detail

/// The intervene/proceed meta-decision over a variance trace.
///
/// With monitor_continuously unset (the default, matching a single decision
/// at decision_step), the slope is evaluated once at cfg.decision_step. With
/// it set, every step from 1 through the end of the trace is checked and the
/// first violation wins; Proceed is reported at the last step otherwise.
inline GateDecision evaluate_gate(const VarianceTrace& trace, const GateConfig& cfg) {
  if (cfg.decision_step < 1) throw Error("decision_step must be >= 1");

  if (!cfg.monitor_continuously) {
    const UncertaintyVector u = uncertainty_vector(trace, cfg.decision_step);
    std::vector<GateComponent> violated = detail::violated_components(u, cfg);
    GateDecision decision;
    decision.action = violated.empty() ? GateAction::Proceed
                                       : GateAction::RequestIntervention;
    decision.triggered_by = std::move(violated);
    decision.at_step = cfg.decision_step;
    decision.u = u;
    return decision;
  }

  if (!trace.has_step(1)) throw MissingStep(1);
  GateDecision decision;
  for (long t = 1; t <= trace.last_step(); ++t) {
    const UncertaintyVector u = uncertainty_vector(trace, t);
    std::vector<GateComponent> violated = detail::violated_components(u, cfg);
    decision.at_step = t;
    decision.u = u;
    if (!violated.empty()) {
      decision.action = GateAction::RequestIntervention;
      decision.triggered_by = std::move(violated);
      return decision;
    }
  }
  decision.action = GateAction::Proceed;
  return decision;
}

}  // namespace servogate
