#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "servogate/error.hpp"
#include "servogate/gate.hpp"

namespace servogate {

/// Ground truth paired with the gate's output for one trial.
struct TrialLabel {
  bool intervention_needed = false;    // autonomous run would fail
  bool intervention_requested = false; // gate asked for help
};

struct ConfusionMatrix {
  std::size_t tp = 0;  // needed and requested
  std::size_t fp = 0;  // not needed but requested
  std::size_t fn = 0;  // needed but not requested
  std::size_t tn = 0;  // not needed and not requested

  std::size_t total() const { return tp + fp + fn + tn; }
};

inline ConfusionMatrix confusion(const std::vector<TrialLabel>& labels) {
  if (labels.empty()) throw EmptyInput("confusion: no labels");
  ConfusionMatrix cm;
  for (const TrialLabel& l : labels) {
    if (l.intervention_needed) {
      l.intervention_requested ? ++cm.tp : ++cm.fn;
    } else {
      l.intervention_requested ? ++cm.fp : ++cm.tn;
    }
  }
  return cm;
}

struct RateMetrics {
  double accuracy = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

/// accuracy = (tp+tn)/total, fpr = fp/(fp+tn), fnr = fn/(fn+tp).
inline RateMetrics metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw EmptyInput("metrics: empty confusion matrix");
  if (cm.fp + cm.tn == 0) throw UndefinedRate("fpr undefined: no negative-class trials");
  if (cm.fn + cm.tp == 0) throw UndefinedRate("fnr undefined: no positive-class trials");
  RateMetrics m;
  m.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
  m.fpr = static_cast<double>(cm.fp) / static_cast<double>(cm.fp + cm.tn);
  m.fnr = static_cast<double>(cm.fn) / static_cast<double>(cm.fn + cm.tp);
  return m;
}

/// One calibration observation: the slope pair at the decision step plus the
/// counterfactual ground truth.
struct SlopeSample {
  double slope_p = 0.0;
  double slope_r = 0.0;
  bool intervention_needed = false;
};

inline double slope_component(const SlopeSample& s, GateComponent c) {
  return c == GateComponent::Position ? s.slope_p : s.slope_r;
}

/// The factor w = P(failure | FP) weighting false positives against false
/// negatives. The positive failure cost cancels out of the argmin.
struct MetaObjectiveConfig {
  double w = 1.0;
};

struct SweepPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

/// Applies the gate rule (slope > tau requests intervention) at every grid
/// threshold and reports the resulting rates, ordered by threshold.
inline std::vector<SweepPoint> sweep_thresholds(const std::vector<SlopeSample>& samples,
                                                GateComponent component,
                                                std::vector<double> grid) {
  if (samples.empty()) throw EmptyInput("sweep_thresholds: no samples");
  if (grid.empty()) throw EmptyInput("sweep_thresholds: empty grid");
  std::sort(grid.begin(), grid.end());

  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (double tau : grid) {
    std::vector<TrialLabel> labels;
    labels.reserve(samples.size());
    for (const SlopeSample& s : samples) {
      labels.push_back(TrialLabel{s.intervention_needed, slope_component(s, component) > tau});
    }
    const RateMetrics m = metrics(confusion(labels));
    out.push_back(SweepPoint{tau, m.fpr, m.fnr});
  }
  return out;
}

/// Midpoints between consecutive distinct slope values, bracketed by -inf
/// and +inf. The gate objective is piecewise constant in the threshold, so
/// this grid is exhaustive.
inline std::vector<double> midpoint_grid(const std::vector<SlopeSample>& samples,
                                         GateComponent component) {
  std::vector<double> values;
  values.reserve(samples.size());
  for (const SlopeSample& s : samples) values.push_back(slope_component(s, component));
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  std::vector<double> grid;
  grid.push_back(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i + 1 < values.size(); ++i) {
    grid.push_back(0.5 * (values[i] + values[i + 1]));
  }
  grid.push_back(std::numeric_limits<double>::infinity());
  return grid;
}

struct CalibrationResult {
  double tau_star = 0.0;
  double objective = 0.0;  // FN + w * FP, in counts
};

/// Minimizes FN(tau) + w * FP(tau) (counts, not rates) over the grid. Ties
/// break toward the largest threshold, i.e. the fewest interventions.
inline CalibrationResult calibrate(const std::vector<SlopeSample>& samples,
                                   GateComponent component,
                                   const MetaObjectiveConfig& cfg,
                                   std::vector<double> grid) {
  if (samples.empty()) throw EmptyInput("calibrate: no samples");
  if (grid.empty()) throw EmptyInput("calibrate: empty grid");
  if (cfg.w < 0.0 || cfg.w > 1.0) throw Error("meta-objective weight must lie in [0, 1]");
  std::sort(grid.begin(), grid.end());

  // Sort slopes once; FP/FN counts at any threshold then come from
  // positions in the sorted order rather than a rescan of every sample.
  std::vector<std::pair<double, bool>> sorted;  // (slope, needed)
  sorted.reserve(samples.size());
  for (const SlopeSample& s : samples) {
    sorted.emplace_back(slope_component(s, component), s.intervention_needed);
  }
  std::sort(sorted.begin(), sorted.end());

  // needed_leq[i] = number of needed samples among the first i sorted slopes
  std::vector<std::size_t> needed_leq(sorted.size() + 1, 0);
  std::vector<std::size_t> not_needed_leq(sorted.size() + 1, 0);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    needed_leq[i + 1] = needed_leq[i] + (sorted[i].second ? 1 : 0);
    not_needed_leq[i + 1] = not_needed_leq[i] + (sorted[i].second ? 0 : 1);
  }

  CalibrationResult best;
  bool have_best = false;
  for (double tau : grid) {
    // samples with slope <= tau do not request an intervention
    const std::size_t below =
        std::upper_bound(sorted.begin(), sorted.end(), tau,
                         [](double v, const std::pair<double, bool>& s) {
                           return v < s.first;
                         }) -
        sorted.begin();
    const std::size_t fn = needed_leq[below];
    const std::size_t fp = not_needed_leq.back() - not_needed_leq[below];
    const double objective = static_cast<double>(fn) + cfg.w * static_cast<double>(fp);
    if (!have_best || objective < best.objective ||
        (objective == best.objective && tau > best.tau_star)) {
      best = CalibrationResult{tau, objective};
      have_best = true;
    }
  }
  return best;
}

/// Samples with their moment-matched Gaussian fit. Moments use the 1/n
/// convention so they equal the raw sample moments exactly.
struct DistributionSummary {
  std::vector<double> samples;
  double fitted_mean = 0.0;
  double fitted_variance = 0.0;

  static DistributionSummary fit(std::vector<double> xs) {
    if (xs.empty()) throw EmptyInput("DistributionSummary: no samples");
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return DistributionSummary{std::move(xs), mean, var};
  }
};

/// Closed-form KL divergence between the two moment-fitted Gaussians:
/// log(s_q/s_p) + (s_p^2 + (m_p - m_q)^2) / (2 s_q^2) - 1/2.
inline double kl_divergence_gaussian(const DistributionSummary& p,
                                     const DistributionSummary& q) {
  if (!(p.fitted_variance > 0.0)) throw DegenerateDistribution("p has zero variance");
  if (!(q.fitted_variance > 0.0)) throw DegenerateDistribution("q has zero variance");
  const double var_p = p.fitted_variance;
  const double var_q = q.fitted_variance;
  const double dm = p.fitted_mean - q.fitted_mean;
  return 0.5 * std::log(var_q / var_p) + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
}

/// Histogram estimator over shared equal-width bins with additive smoothing,
/// as a sensitivity check on the Gaussian closed form.
inline double kl_divergence_histogram(const DistributionSummary& p,
                                      const DistributionSummary& q,
                                      std::size_t bins = 20,
                                      double smoothing = 1e-9) {
  if (p.samples.empty() || q.samples.empty()) throw EmptyInput("histogram KL: no samples");
  if (bins < 2) throw Error("histogram KL needs at least 2 bins");

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : p.samples) { lo = std::min(lo, x); hi = std::max(hi, x); }
  for (double x : q.samples) { lo = std::min(lo, x); hi = std::max(hi, x); }
  if (!(hi > lo)) throw DegenerateDistribution("all samples identical");

  const double width = (hi - lo) / static_cast<double>(bins);
  auto histogram = [&](const std::vector<double>& xs) {
    std::vector<double> h(bins, smoothing);
    for (double x : xs) {
      std::size_t b = static_cast<std::size_t>((x - lo) / width);
      if (b >= bins) b = bins - 1;
      h[b] += 1.0;
    }
    double total = 0.0;
    for (double v : h) total += v;
    for (double& v : h) v /= total;
    return h;
  };

  const std::vector<double> hp = histogram(p.samples);
  const std::vector<double> hq = histogram(q.samples);
  double kl = 0.0;
  for (std::size_t i = 0; i < bins; ++i) kl += hp[i] * std::log(hp[i] / hq[i]);
  return kl;
}

/// CSV schema for calibration samples: header `slope_p,slope_r,intervention_needed`,
/// booleans encoded as 0/1.
inline void write_slope_samples(const std::vector<SlopeSample>& samples,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.precision(12);
  out << "slope_p,slope_r,intervention_needed\n";
  for (const SlopeSample& s : samples) {
    out << s.slope_p << ',' << s.slope_r << ',' << (s.intervention_needed ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write to " + path + " failed");
}

inline std::vector<SlopeSample> read_slope_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
  ++lineno;
  std::string header = line;
  header.erase(std::remove_if(header.begin(), header.end(),
                              [](unsigned char c) { return std::isspace(c); }),
               header.end());
  if (header != "slope_p,slope_r,intervention_needed") {
    throw ParseError(path, 1, "expected header slope_p,slope_r,intervention_needed");
  }

  std::vector<SlopeSample> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f0, f1, f2;
    if (!std::getline(ss, f0, ',') || !std::getline(ss, f1, ',') || !std::getline(ss, f2)) {
      throw ParseError(path, lineno, "expected 3 fields");
    }
    SlopeSample s;
    try {
      s.slope_p = std::stod(f0);
      s.slope_r = std::stod(f1);
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "bad slope value");
    }
    if (f2 == "0") s.intervention_needed = false;
    else if (f2 == "1") s.intervention_needed = true;
    else throw ParseError(path, lineno, "intervention_needed must be 0 or 1");
    out.push_back(s);
  }
  return out;
}

}  // namespace servogate
