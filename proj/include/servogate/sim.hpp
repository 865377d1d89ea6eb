#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "servogate/error.hpp"
#include "servogate/gate.hpp"
#include "servogate/pointcloud.hpp"
#include "servogate/predictors.hpp"
#include "servogate/se3.hpp"

namespace servogate {

namespace detail {

// splitmix64-style mixing for deriving independent seed streams
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 0x632be59bd9b4e019ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// fixed stream tags so every random draw in a trial is independently seeded
inline constexpr std::uint64_t kStreamGoal = 11;
inline constexpr std::uint64_t kStreamSense = 23;
inline constexpr std::uint64_t kStreamPredict = 37;
inline constexpr std::uint64_t kStreamFinalSense = 41;
inline constexpr std::uint64_t kStreamOracleSense = 43;
inline constexpr std::uint64_t kStreamScenario = 53;
inline constexpr std::uint64_t kStreamTraining = 61;

}  // namespace detail

// Global simulation constants shared by every trial of a campaign.
struct SimParams {
  double spacing = 0.015;             // grid spacing, m
  double noise_sigma = 0.0003;        // sensing noise, m
  std::size_t subsample = 0;          // sensed points; 0 = every visible node
  int max_steps = 20;
  double eps_succ = 0.003;            // success chamfer threshold, m
  double convergence_eps = 0.001;     // ||p_hat|| termination threshold, m
  double max_action_translation = 0.05;  // per-step workspace guard, m
};

enum class SheetEdge { RowMin, RowMax, ColMin, ColMax };

/// Kernel-deformable sheet: a rows x cols grid of nodes with per-node
/// displacements. One grid edge is anchored and never moves. Actions move
/// nodes by a rigid motion about the grasp point, attenuated by
/// w_i = exp(-d_i^2 / sigma^2) with d_i the rest-frame distance to the
/// grasp node, so the attenuation profile does not drift as the sheet
/// deforms.
class DeformableSheet {
 public:
  DeformableSheet(int rows, int cols, double spacing, double kernel_sigma,
                  double curvature = 0.0, SheetEdge anchored = SheetEdge::RowMin)
      : rows_(rows), cols_(cols), spacing_(spacing), sigma_(kernel_sigma),
        curvature_(curvature), anchored_(anchored) {
    if (rows < 4 || cols < 4) throw Error("sheet grid must be at least 4x4");
    if (!(spacing > 0.0) || !(kernel_sigma > 0.0)) {
      throw Error("spacing and kernel_sigma must be positive");
    }
    rest_.reserve(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double arc = curvature * std::sin(kPi * c / (cols - 1));
        rest_.emplace_back(c * spacing, r * spacing, arc);
      }
    }
    disp_.assign(rest_.size(), Vec3::Zero());
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double spacing() const { return spacing_; }
  double kernel_sigma() const { return sigma_; }
  std::size_t node_count() const { return rest_.size(); }

  int node_index(int r, int c) const { return r * cols_ + c; }

  bool is_anchored(int node) const {
    const int r = node / cols_;
    const int c = node % cols_;
    switch (anchored_) {
      case SheetEdge::RowMin: return r == 0;
      case SheetEdge::RowMax: return r == rows_ - 1;
      case SheetEdge::ColMin: return c == 0;
      case SheetEdge::ColMax: return c == cols_ - 1;
    }
    return false;
  }

  const Vec3& rest(int node) const { return rest_.at(node); }
  Vec3 position(int node) const { return rest_.at(node) + disp_.at(node); }

  std::vector<Vec3> positions() const {
    std::vector<Vec3> out;
    out.reserve(rest_.size());
    for (std::size_t i = 0; i < rest_.size(); ++i) out.push_back(rest_[i] + disp_[i]);
    return out;
  }

  void reset() { disp_.assign(rest_.size(), Vec3::Zero()); }

  /// Moves every node i by w_i toward the rigid motion of the action about
  /// the grasp node's current position, then re-clamps the anchored edge.
  void apply_action(int grasp_node, const RigidTransform& action,
                    double max_translation = 0.05) {
    if (grasp_node < 0 || grasp_node >= static_cast<int>(rest_.size())) {
      throw Error("grasp node out of range");
    }
    if (is_anchored(grasp_node)) throw GraspOnAnchor(grasp_node);
    const double t_norm = action.translation.norm();
    if (t_norm > max_translation) throw ActionOutOfRange(t_norm, max_translation);

    const Vec3 grasp_pos = position(grasp_node);
    const Vec3 grasp_rest = rest_[grasp_node];
    const double inv_sigma_sq = 1.0 / (sigma_ * sigma_);

    for (std::size_t i = 0; i < rest_.size(); ++i) {
      if (is_anchored(static_cast<int>(i))) continue;
      const double d_sq = (rest_[i] - grasp_rest).squaredNorm();
      const double w = std::exp(-d_sq * inv_sigma_sq);
      const Vec3 x = rest_[i] + disp_[i];
      const Vec3 target = action.rotation * (x - grasp_pos) + grasp_pos + action.translation;
      disp_[i] += w * (target - x);
    }
  }

  /// Nodes visible from above: current positions are binned on the rest-grid
  /// pitch in xy and only the highest node per occupied bin survives. An
  /// undeformed sheet is fully visible; folds occlude what they cover.
  std::vector<int> visible_nodes() const {
    std::map<std::pair<long, long>, int> best;
    for (std::size_t i = 0; i < rest_.size(); ++i) {
      const Vec3 p = rest_[i] + disp_[i];
      const std::pair<long, long> key(std::lround(p.x() / spacing_),
                                      std::lround(p.y() / spacing_));
      auto it = best.find(key);
      if (it == best.end() || p.z() > position(it->second).z()) {
        best[key] = static_cast<int>(i);
      }
    }
    std::vector<int> out;
    out.reserve(best.size());
    for (const auto& [key, idx] : best) out.push_back(idx);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  int rows_;
  int cols_;
  double spacing_;
  double sigma_;
  double curvature_;
  SheetEdge anchored_;
  std::vector<Vec3> rest_;
  std::vector<Vec3> disp_;
};

/// Sensing: visible nodes, farthest-point subsampled, with i.i.d. Gaussian
/// position noise. Deterministic given the seed. When subsample_n is 0 or
/// exceeds the visible count, every visible node is returned.
inline PointCloud sense_point_cloud(const DeformableSheet& sheet, std::size_t subsample_n,
                                    double noise_sigma, std::uint64_t seed) {
  if (subsample_n > sheet.node_count()) {
    throw BadCount("subsample_n exceeds node count");
  }
  PointCloud visible;
  for (int idx : sheet.visible_nodes()) visible.points.push_back(sheet.position(idx));

  PointCloud cloud;
  if (subsample_n == 0 || subsample_n >= visible.size()) {
    cloud = std::move(visible);
  } else {
    cloud = downsample_farthest(visible, subsample_n, detail::mix_seed(seed, 1));
  }

  if (noise_sigma > 0.0) {
    std::mt19937_64 rng(detail::mix_seed(seed, 2));
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (Vec3& p : cloud.points) {
      p.x() += noise(rng);
      p.y() += noise(rng);
      p.z() += noise(rng);
    }
  }
  return cloud;
}

enum class ScenarioKind { InDistribution, SuboptimalGrasp, NonLocalGoal, OODGeometry, Bimanual };

inline std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::InDistribution: return "in_distribution";
    case ScenarioKind::SuboptimalGrasp: return "suboptimal_grasp";
    case ScenarioKind::NonLocalGoal: return "non_local_goal";
    case ScenarioKind::OODGeometry: return "ood_geometry";
    case ScenarioKind::Bimanual: return "bimanual";
  }
  throw Error("unknown scenario kind");
}

inline ScenarioKind scenario_kind_from_string(const std::string& s) {
  if (s == "in_distribution") return ScenarioKind::InDistribution;
  if (s == "suboptimal_grasp") return ScenarioKind::SuboptimalGrasp;
  if (s == "non_local_goal") return ScenarioKind::NonLocalGoal;
  if (s == "ood_geometry") return ScenarioKind::OODGeometry;
  if (s == "bimanual") return ScenarioKind::Bimanual;
  throw Error("unknown scenario kind '" + s + "'");
}

/// One reproducible episode setup. Everything downstream (goal, sensing,
/// dropout) derives from the seed.
struct Scenario {
  ScenarioKind kind = ScenarioKind::InDistribution;
  std::uint64_t seed = 0;
  int rows = 11;
  int cols = 11;
  double kernel_sigma = 0.05;
  double curvature = 0.0;
  int grasp_node = 0;       // the gated arm's grasp
  int left_grasp_node = -1; // bimanual only: the always-teleoperated arm
};

inline DeformableSheet make_sheet(const Scenario& sc, const SimParams& sim) {
  return DeformableSheet(sc.rows, sc.cols, sim.spacing, sc.kernel_sigma, sc.curvature);
}

namespace detail {

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 v(gauss(rng), gauss(rng), gauss(rng));
  double n = v.norm();
  while (n < 1e-9) {
    v = Vec3(gauss(rng), gauss(rng), gauss(rng));
    n = v.norm();
  }
  return v / n;
}

// single-manipulation action family used for training data and in-distribution
// goals: isotropic translation direction, modest magnitude and rotation
inline RigidTransform draw_primitive_action(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.028, 0.046);
  std::uniform_real_distribution<double> angle(0.04, 0.10);
  const Vec3 translation = random_unit_vector(rng) * mag(rng);
  const Vec3 axis = random_unit_vector(rng);
  return RigidTransform(Rotation3::exp(axis * angle(rng)), translation);
}

inline int free_edge_node(const DeformableSheet& sheet, int col) {
  return sheet.node_index(sheet.rows() - 1, col);
}

}  // namespace detail

/// Draws a reproducible scenario of the given kind. In-distribution scenarios
/// match the training family (square-ish grid, kernel width in the training
/// range, grasp on the free edge); the other kinds perturb exactly one
/// ingredient: the grasp point, the goal structure, or the geometry.
inline Scenario make_scenario(ScenarioKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(detail::mix_seed(seed, detail::kStreamScenario));
  Scenario sc;
  sc.kind = kind;
  sc.seed = seed;

  auto id_geometry = [&]() {
    std::uniform_int_distribution<int> dim(10, 12);
    std::uniform_real_distribution<double> sigma(0.045, 0.065);
    sc.rows = dim(rng);
    sc.cols = dim(rng);
    sc.kernel_sigma = sigma(rng);
    sc.curvature = 0.0;
  };
  auto free_edge_grasp = [&]() {
    std::uniform_int_distribution<int> col(1, sc.cols - 2);
    sc.grasp_node = (sc.rows - 1) * sc.cols + col(rng);
  };

  switch (kind) {
    case ScenarioKind::InDistribution:
    case ScenarioKind::NonLocalGoal:
      id_geometry();
      free_edge_grasp();
      break;
    case ScenarioKind::SuboptimalGrasp: {
      id_geometry();
      // narrow kernels from the low end of the training range keep the
      // near-anchor grasp from reaching the free edge at all
      std::uniform_real_distribution<double> sigma(0.045, 0.052);
      sc.kernel_sigma = sigma(rng);
      // grasping right next to the anchored edge cannot reproduce a
      // free-edge manipulation
      std::uniform_int_distribution<int> col(1, sc.cols - 2);
      sc.grasp_node = 1 * sc.cols + col(rng);
      break;
    }
    case ScenarioKind::OODGeometry: {
      std::uniform_int_distribution<int> r(6, 7);
      std::uniform_int_distribution<int> c(18, 20);
      std::uniform_real_distribution<double> sigma(0.020, 0.030);
      std::uniform_real_distribution<double> curve(0.035, 0.055);
      sc.rows = r(rng);
      sc.cols = c(rng);
      sc.kernel_sigma = sigma(rng);
      sc.curvature = curve(rng);
      free_edge_grasp();
      break;
    }
    case ScenarioKind::Bimanual: {
      std::uniform_int_distribution<int> r(10, 11);
      std::uniform_int_distribution<int> c(14, 16);
      std::uniform_real_distribution<double> sigma(0.045, 0.065);
      sc.rows = r(rng);
      sc.cols = c(rng);
      sc.kernel_sigma = sigma(rng);
      sc.curvature = 0.0;
      std::uniform_int_distribution<int> left_col(1, sc.cols / 2 - 2);
      std::uniform_int_distribution<int> right_col(sc.cols / 2 + 1, sc.cols - 2);
      sc.left_grasp_node = (sc.rows - 1) * sc.cols + left_col(rng);
      sc.grasp_node = (sc.rows - 1) * sc.cols + right_col(rng);
      break;
    }
  }
  return sc;
}

/// A goal cloud plus the action sequence that generated it. The sequence is
/// the intervention oracle: replaying it from the episode's initial state
/// reaches the goal by construction.
struct GoalSpec {
  PointCloud goal_cloud;
  std::vector<RigidTransform> oracle_actions;       // gated arm's generating actions
  int oracle_grasp_node = -1;                       // where they act
  std::vector<RigidTransform> left_oracle_actions;  // bimanual: teleoperated arm
  int left_grasp_node = -1;
};

/// Generates the goal for a scenario by applying a seeded oracle action
/// sequence to a copy of the sheet and sensing the result. The input sheet
/// is not modified.
inline GoalSpec make_goal(const DeformableSheet& sheet, const Scenario& sc,
                          const SimParams& sim) {
  std::mt19937_64 rng(detail::mix_seed(sc.seed, detail::kStreamGoal));
  DeformableSheet work = sheet;
  GoalSpec goal;

  switch (sc.kind) {
    case ScenarioKind::InDistribution:
    case ScenarioKind::OODGeometry:
      goal.oracle_grasp_node = sc.grasp_node;
      goal.oracle_actions.push_back(detail::draw_primitive_action(rng));
      break;
    case ScenarioKind::SuboptimalGrasp: {
      // the goal is a normal free-edge manipulation; only the robot's grasp
      // point is wrong for it
      std::uniform_int_distribution<int> col(1, sc.cols - 2);
      goal.oracle_grasp_node = detail::free_edge_node(work, col(rng));
      goal.oracle_actions.push_back(detail::draw_primitive_action(rng));
      break;
    }
    case ScenarioKind::NonLocalGoal: {
      // lift the edge, roll it over, and place it back down elsewhere: the
      // partial fold is far outside the single-manipulation family
      goal.oracle_grasp_node = sc.grasp_node;
      std::uniform_real_distribution<double> lift(0.020, 0.030);
      std::uniform_real_distribution<double> dx_dist(-0.010, 0.010);
      std::uniform_real_distribution<double> back(0.008, 0.018);
      std::uniform_real_distribution<double> roll1(0.7, 1.1);
      std::uniform_real_distribution<double> roll2(0.6, 1.0);
      const double h = lift(rng);
      goal.oracle_actions.push_back(
          RigidTransform(Rotation3::about_x(roll1(rng)), Vec3(0.0, 0.0, h)));
      goal.oracle_actions.push_back(RigidTransform(
          Rotation3::about_x(roll2(rng)), Vec3(dx_dist(rng), -back(rng), -0.8 * h)));
      break;
    }
    case ScenarioKind::Bimanual: {
      goal.oracle_grasp_node = sc.grasp_node;
      goal.left_grasp_node = sc.left_grasp_node;
      goal.left_oracle_actions.push_back(detail::draw_primitive_action(rng));
      goal.oracle_actions.push_back(detail::draw_primitive_action(rng));
      break;
    }
  }

  if (sc.kind == ScenarioKind::Bimanual) {
    for (std::size_t i = 0; i < goal.oracle_actions.size(); ++i) {
      if (i < goal.left_oracle_actions.size()) {
        work.apply_action(goal.left_grasp_node, goal.left_oracle_actions[i],
                          sim.max_action_translation);
      }
      work.apply_action(goal.oracle_grasp_node, goal.oracle_actions[i],
                        sim.max_action_translation);
    }
  } else {
    for (const RigidTransform& a : goal.oracle_actions) {
      work.apply_action(goal.oracle_grasp_node, a, sim.max_action_translation);
    }
  }

  goal.goal_cloud = sense_point_cloud(work, sim.subsample, sim.noise_sigma,
                                      detail::mix_seed(sc.seed, detail::kStreamGoal + 1));
  return goal;
}

/// Either predictor flavor behind one call.
struct Predictor {
  std::variant<EnsemblePredictor, StochasticPredictor> impl;

  explicit Predictor(EnsemblePredictor e) : impl(std::move(e)) {}
  explicit Predictor(StochasticPredictor s) : impl(std::move(s)) {}

  EnsembleOutputs predict(const ShapeServoInput& input, std::uint64_t step_seed) const {
    if (const auto* ens = std::get_if<EnsemblePredictor>(&impl)) {
      return predict_ensemble(*ens, input);
    }
    return predict_stochastic(std::get<StochasticPredictor>(impl), input, step_seed);
  }
};

struct StepRecord {
  long t = 0;
  double var_p = 0.0;
  double var_r = 0.0;
  ActionVector action = ActionVector::Zero();  // aggregate action (t, axis-angle)
  double translation_norm = 0.0;               // ||p_hat|| before clamping
  std::size_t member_count = 0;
};

enum class Termination { Converged, MaxSteps, Intervention };

inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::Converged: return "converged";
    case Termination::MaxSteps: return "max_steps";
    case Termination::Intervention: return "intervention";
  }
  throw Error("unknown termination");
}

/// One simulated episode and its labels. `steps` is what the gated episode
/// observed; the autonomous_* fields describe the counterfactual fully
/// autonomous rollout that defines intervention_needed.
struct TrialRecord {
  Scenario scenario;
  std::vector<StepRecord> steps;
  std::optional<GateDecision> gate;
  long terminated_at_step = 0;
  Termination termination = Termination::MaxSteps;
  double final_chamfer = 0.0;
  bool success = false;
  bool intervention_needed = false;
  bool intervention_requested = false;
  double autonomous_final_chamfer = 0.0;
  bool autonomous_success = false;
  long autonomous_terminated_at_step = 0;
};

namespace detail {

inline Vec3 nearest_cloud_point(const PointCloud& cloud, const Vec3& query) {
  double best = std::numeric_limits<double>::infinity();
  Vec3 out = cloud.points.front();
  for (const Vec3& p : cloud.points) {
    const double d = (p - query).squaredNorm();
    if (d < best) {
      best = d;
      out = p;
    }
  }
  return out;
}

inline RigidTransform clamp_translation(const RigidTransform& action, double max_norm) {
  const double n = action.translation.norm();
  if (n <= max_norm) return action;
  // back off slightly so the rescaled norm cannot round above the limit
  return RigidTransform(action.rotation, action.translation * (0.999999 * max_norm / n));
}

struct RolloutResult {
  std::vector<StepRecord> steps;
  VarianceTrace trace;
  long terminated_at_step = 0;
  Termination termination = Termination::MaxSteps;
  double final_chamfer = 0.0;
  bool success = false;
};

// Fully autonomous closed-loop rollout. Every random draw is seeded from the
// scenario seed and the step index, so reruns and any worker schedule agree.
inline RolloutResult run_autonomous(const DeformableSheet& initial, const GoalSpec& goal,
                                    const Predictor& predictor, const Scenario& sc,
                                    const SimParams& sim) {
  DeformableSheet sheet = initial;
  RolloutResult result;

  for (int t = 0; t < sim.max_steps; ++t) {
    if (sc.kind == ScenarioKind::Bimanual &&
        t < static_cast<int>(goal.left_oracle_actions.size())) {
      sheet.apply_action(goal.left_grasp_node, goal.left_oracle_actions[t],
                         sim.max_action_translation);
    }

    const PointCloud cloud = sense_point_cloud(
        sheet, sim.subsample, sim.noise_sigma,
        mix_seed(sc.seed, kStreamSense + 1000 * static_cast<std::uint64_t>(t)));
    ShapeServoInput input{cloud, goal.goal_cloud,
                          nearest_cloud_point(cloud, sheet.position(sc.grasp_node))};

    const EnsembleOutputs outputs = predictor.predict(
        input, mix_seed(sc.seed, kStreamPredict + 1000 * static_cast<std::uint64_t>(t)));
    const AggregateResult agg = aggregate(outputs);

    StepRecord step;
    step.t = t;
    step.var_p = agg.var_p;
    step.var_r = agg.var_r;
    step.action = action_to_vector(agg.mean);
    step.translation_norm = agg.mean.translation.norm();
    step.member_count = outputs.size();
    result.steps.push_back(step);
    result.trace.push_back(VarianceEntry{t, agg.var_p, agg.var_r});

    result.terminated_at_step = t;
    if (step.translation_norm < sim.convergence_eps) {
      result.termination = Termination::Converged;
      break;
    }
    if (t + 1 == sim.max_steps) {
      result.termination = Termination::MaxSteps;
      break;
    }
    sheet.apply_action(sc.grasp_node,
                       clamp_translation(agg.mean, sim.max_action_translation),
                       sim.max_action_translation);
  }

  const PointCloud final_cloud = sense_point_cloud(
      sheet, sim.subsample, sim.noise_sigma, mix_seed(sc.seed, kStreamFinalSense));
  result.final_chamfer = chamfer(final_cloud, goal.goal_cloud);
  result.success = result.final_chamfer < sim.eps_succ;
  return result;
}

// The intervention oracle rewinds the episode to its initial state and
// replays the goal-generating action sequence.
inline std::pair<double, bool> oracle_complete(const DeformableSheet& initial,
                                               const GoalSpec& goal, const Scenario& sc,
                                               const SimParams& sim) {
  DeformableSheet sheet = initial;
  if (sc.kind == ScenarioKind::Bimanual) {
    for (std::size_t i = 0; i < goal.oracle_actions.size(); ++i) {
      if (i < goal.left_oracle_actions.size()) {
        sheet.apply_action(goal.left_grasp_node, goal.left_oracle_actions[i],
                           sim.max_action_translation);
      }
      sheet.apply_action(goal.oracle_grasp_node, goal.oracle_actions[i],
                         sim.max_action_translation);
    }
  } else {
    for (const RigidTransform& a : goal.oracle_actions) {
      sheet.apply_action(goal.oracle_grasp_node, a, sim.max_action_translation);
    }
  }
  const PointCloud final_cloud = sense_point_cloud(
      sheet, sim.subsample, sim.noise_sigma, mix_seed(sc.seed, kStreamOracleSense));
  const double dist = chamfer(final_cloud, goal.goal_cloud);
  return {dist, dist < sim.eps_succ};
}

inline TrialRecord run_trial_impl(const Predictor& predictor,
                                  const std::optional<GateConfig>& gate_config,
                                  const Scenario& sc, const SimParams& sim) {
  if (sim.max_steps < 2) throw Error("max_steps must be at least 2");

  const DeformableSheet initial = make_sheet(sc, sim);
  const GoalSpec goal = make_goal(initial, sc, sim);
  const RolloutResult autonomous = run_autonomous(initial, goal, predictor, sc, sim);

  TrialRecord record;
  record.scenario = sc;
  record.intervention_needed = !autonomous.success;
  record.autonomous_final_chamfer = autonomous.final_chamfer;
  record.autonomous_success = autonomous.success;
  record.autonomous_terminated_at_step = autonomous.terminated_at_step;

  std::optional<GateDecision> decision;
  if (gate_config.has_value()) {
    const long needed_step = gate_config->monitor_continuously ? 1 : gate_config->decision_step;
    if (autonomous.trace.has_step(needed_step) &&
        autonomous.trace.has_step(needed_step - 1)) {
      decision = evaluate_gate(autonomous.trace, *gate_config);
    }
    // otherwise the episode ended before the gate's first decision point;
    // it proceeds by default
  }
  record.gate = decision;

  if (decision.has_value() && decision->action == GateAction::RequestIntervention) {
    record.intervention_requested = true;
    record.termination = Termination::Intervention;
    record.terminated_at_step = decision->at_step;
    for (const StepRecord& s : autonomous.steps) {
      if (s.t > decision->at_step) break;
      record.steps.push_back(s);
    }
    const auto [dist, ok] = oracle_complete(initial, goal, sc, sim);
    record.final_chamfer = dist;
    record.success = ok;
  } else {
    record.intervention_requested = false;
    record.termination = autonomous.termination;
    record.terminated_at_step = autonomous.terminated_at_step;
    record.steps = autonomous.steps;
    record.final_chamfer = autonomous.final_chamfer;
    record.success = autonomous.success;
  }
  return record;
}

}  // namespace detail

/// Runs one gated (or, with nullopt, ungated) episode. The ground-truth
/// intervention_needed label always comes from the fully autonomous rollout
/// of the same seeds.
inline TrialRecord run_trial(const Predictor& predictor,
                             const std::optional<GateConfig>& gate_config,
                             const Scenario& scenario, const SimParams& sim) {
  if (scenario.kind == ScenarioKind::Bimanual) {
    throw Error("bimanual scenarios go through run_bimanual_trial");
  }
  return detail::run_trial_impl(predictor, gate_config, scenario, sim);
}

/// Bimanual variant: the left grasp follows the oracle controller at every
/// step; the right grasp runs the gated predictor.
inline TrialRecord run_bimanual_trial(const Predictor& predictor,
                                      const std::optional<GateConfig>& gate_config,
                                      const Scenario& scenario, const SimParams& sim) {
  if (scenario.kind != ScenarioKind::Bimanual) {
    throw Error("run_bimanual_trial needs a bimanual scenario");
  }
  if (scenario.left_grasp_node < 0) throw Error("bimanual scenario needs a left grasp node");
  return detail::run_trial_impl(predictor, gate_config, scenario, sim);
}

/// Dispatches on the scenario kind.
inline TrialRecord run_any_trial(const Predictor& predictor,
                                 const std::optional<GateConfig>& gate_config,
                                 const Scenario& scenario, const SimParams& sim) {
  return scenario.kind == ScenarioKind::Bimanual
             ? run_bimanual_trial(predictor, gate_config, scenario, sim)
             : run_trial(predictor, gate_config, scenario, sim);
}

/// Self-supervised training data: seeded in-distribution scenes, one random
/// manipulation each, sensed before and after. Half the scenes are
/// pre-deformed by an earlier manipulation at the same grasp so the data
/// covers the intermediate states a servo episode passes through, not just
/// rest-state starts.
inline std::vector<SupervisionTuple> generate_training_tuples(std::size_t count,
                                                              std::uint64_t seed,
                                                              const SimParams& sim) {
  std::vector<SupervisionTuple> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t scene_seed = detail::mix_seed(seed, detail::kStreamTraining + i);
    std::mt19937_64 rng(scene_seed);

    std::uniform_int_distribution<int> dim(10, 12);
    std::uniform_real_distribution<double> sigma(0.045, 0.065);
    const int rows = dim(rng);
    const int cols = dim(rng);
    DeformableSheet sheet(rows, cols, sim.spacing, sigma(rng));

    std::uniform_int_distribution<int> col(1, cols - 2);
    const int grasp = sheet.node_index(rows - 1, col(rng));

    std::uniform_int_distribution<int> coin(0, 1);
    if (coin(rng) == 1) {
      sheet.apply_action(grasp, detail::draw_primitive_action(rng),
                         sim.max_action_translation);
    }
    const RigidTransform action = detail::draw_primitive_action(rng);

    const PointCloud before = sense_point_cloud(sheet, sim.subsample, sim.noise_sigma,
                                                detail::mix_seed(scene_seed, 7));
    const Vec3 manipulation_point =
        detail::nearest_cloud_point(before, sheet.position(grasp));
    sheet.apply_action(grasp, action, sim.max_action_translation);
    const PointCloud after = sense_point_cloud(sheet, sim.subsample, sim.noise_sigma,
                                               detail::mix_seed(scene_seed, 8));

    ShapeServoInput input{before, after, manipulation_point};
    out.push_back(SupervisionTuple{std::move(input), action});
  }
  return out;
}

}  // namespace servogate
