#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "servogate/error.hpp"
#include "servogate/pointcloud.hpp"
#include "servogate/se3.hpp"

namespace servogate {

// Feature layout: centroid displacement (3), per-axis extent delta (3),
// manipulation-point offset from the current centroid (3), per-axis RMS
// spread delta (3), offset x displacement cross product (3).
inline constexpr int kFeatureDim = 15;
// Action parameters: translation (3) + rotation as axis-angle (3).
inline constexpr int kActionDim = 6;

using FeatureVector = Eigen::Matrix<double, kFeatureDim, 1>;
using ActionVector = Eigen::Matrix<double, kActionDim, 1>;
using WeightMatrix = Eigen::Matrix<double, kActionDim, kFeatureDim>;

/// Input to the shape-servo policy: current geometry, goal geometry, and the
/// grasped point. The manipulation point must lie inside the current cloud's
/// bounding box inflated by 10% per axis.
struct ShapeServoInput {
  PointCloud current_cloud;
  PointCloud goal_cloud;
  Vec3 manipulation_point;

  void validate() const {
    if (current_cloud.empty() || goal_cloud.empty()) {
      throw EmptyCloud("shape-servo input clouds must be non-empty");
    }
    Vec3 lo = current_cloud.points.front();
    Vec3 hi = lo;
    for (const Vec3& p : current_cloud.points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 inflate = 0.1 * (hi - lo);
    lo -= inflate;
    hi += inflate;
    for (int i = 0; i < 3; ++i) {
      if (manipulation_point[i] < lo[i] || manipulation_point[i] > hi[i]) {
        throw Error("manipulation point outside the inflated current-cloud bounds");
      }
    }
  }
};

/// Self-supervised training instance: the input that resulted from applying
/// `action`, labeled with that action.
struct SupervisionTuple {
  ShapeServoInput input;
  RigidTransform action;
};

namespace detail {

struct CloudStats {
  Vec3 centroid;
  Vec3 extent;  // per-axis max - min
  Vec3 spread;  // per-axis root mean squared deviation
};

inline CloudStats cloud_stats(const PointCloud& cloud) {
  if (cloud.empty()) throw EmptyCloud("cloud_stats of empty cloud");
  Vec3 lo = cloud.points.front();
  Vec3 hi = lo;
  Vec3 sum = Vec3::Zero();
  for (const Vec3& p : cloud.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
    sum += p;
  }
  CloudStats s;
  s.centroid = sum / static_cast<double>(cloud.size());
  s.extent = hi - lo;
  Vec3 acc = Vec3::Zero();
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - s.centroid;
    acc += d.cwiseProduct(d);
  }
  s.spread = (acc / static_cast<double>(cloud.size())).cwiseSqrt();
  return s;
}

}  // namespace detail

/// Deterministic hand-crafted features of a shape-servo input. Statistics of
/// the clouds (centroids, extents, spreads) rather than per-point values, so
/// padding or subsampling a cloud only moves features by sampling noise.
inline FeatureVector featurize(const ShapeServoInput& input) {
  if (input.current_cloud.empty() || input.goal_cloud.empty()) {
    throw EmptyCloud("featurize: empty cloud");
  }
  const detail::CloudStats cur = detail::cloud_stats(input.current_cloud);
  const detail::CloudStats goal = detail::cloud_stats(input.goal_cloud);

  const Vec3 displacement = goal.centroid - cur.centroid;
  const Vec3 extent_delta = goal.extent - cur.extent;
  const Vec3 offset = input.manipulation_point - cur.centroid;
  const Vec3 spread_delta = goal.spread - cur.spread;
  const Vec3 cross = offset.cross(displacement);

  FeatureVector f;
  f << displacement, extent_delta, offset, spread_delta, cross;
  return f;
}

/// One linear stand-in policy: a ridge-fit map from features to the 6-dof
/// action (translation meters, rotation axis-angle radians).
struct MemberModel {
  WeightMatrix weights = WeightMatrix::Zero();
  std::uint64_t seed = 0;
  double ridge_lambda = 1e-8;

  ActionVector predict_raw(const FeatureVector& features) const {
    return weights * features;
  }

  RigidTransform predict(const ShapeServoInput& input) const {
    return predict_from_features(featurize(input));
  }

  RigidTransform predict_from_features(const FeatureVector& features) const {
    const ActionVector a = predict_raw(features);
    Vec3 rot = a.tail<3>();
    // keep the axis-angle magnitude inside (0, pi)
    const double angle = rot.norm();
    constexpr double kMaxAngle = 3.14159265358979323846 - 1e-9;
    if (angle > kMaxAngle) rot *= kMaxAngle / angle;
    return RigidTransform(Rotation3::exp(rot), a.head<3>());
  }
};

inline ActionVector action_to_vector(const RigidTransform& action) {
  ActionVector v;
  v.head<3>() = action.translation;
  v.tail<3>() = action.rotation.log();
  return v;
}

/// Ridge least squares over a seeded bootstrap resample of the data:
/// minimizes sum ||W phi(x) - a||^2 + lambda ||W||_F^2. Deterministic given
/// (data, seed, lambda).
inline MemberModel fit_member(const std::vector<SupervisionTuple>& data,
                              std::uint64_t seed, double ridge_lambda) {
  if (data.size() < static_cast<std::size_t>(kFeatureDim)) {
    throw EmptyInput("fit_member: need at least " + std::to_string(kFeatureDim) +
                     " tuples, got " + std::to_string(data.size()));
  }
  if (ridge_lambda < 0.0) throw Error("ridge_lambda must be non-negative");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

  Eigen::Matrix<double, kFeatureDim, kFeatureDim> gram =
      Eigen::Matrix<double, kFeatureDim, kFeatureDim>::Zero();
  Eigen::Matrix<double, kFeatureDim, kActionDim> moment =
      Eigen::Matrix<double, kFeatureDim, kActionDim>::Zero();

  for (std::size_t i = 0; i < data.size(); ++i) {
    const SupervisionTuple& t = data[pick(rng)];
    const FeatureVector f = featurize(t.input);
    gram += f * f.transpose();
    moment += f * action_to_vector(t.action).transpose();
  }
  gram += ridge_lambda * Eigen::Matrix<double, kFeatureDim, kFeatureDim>::Identity();

  Eigen::LDLT<Eigen::Matrix<double, kFeatureDim, kFeatureDim>> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw RankDeficient();
  const Eigen::Matrix<double, kFeatureDim, kActionDim> solution = ldlt.solve(moment);
  if (!solution.allFinite()) throw RankDeficient();

  MemberModel model;
  model.weights = solution.transpose();
  model.seed = seed;
  model.ridge_lambda = ridge_lambda;
  return model;
}

/// Deep-ensemble stand-in: N independently fit members.
struct EnsemblePredictor {
  std::vector<MemberModel> members;

  explicit EnsemblePredictor(std::vector<MemberModel> m) : members(std::move(m)) {
    if (members.size() < 2) throw TooFewMembers(members.size());
  }

  std::size_t size() const { return members.size(); }
};

/// Fits N members with seeds derived from base_seed.
inline EnsemblePredictor fit_ensemble(const std::vector<SupervisionTuple>& data,
                                      std::size_t n_members, std::uint64_t base_seed,
                                      double ridge_lambda) {
  if (n_members < 2) throw TooFewMembers(n_members);
  std::vector<MemberModel> members;
  members.reserve(n_members);
  for (std::size_t i = 0; i < n_members; ++i) {
    members.push_back(fit_member(data, base_seed + i, ridge_lambda));
  }
  return EnsemblePredictor(std::move(members));
}

/// Member prediction in member order; aggregation happens downstream.
inline EnsembleOutputs predict_ensemble(const EnsemblePredictor& ens,
                                        const ShapeServoInput& input) {
  const FeatureVector f = featurize(input);
  std::vector<RigidTransform> outputs;
  outputs.reserve(ens.size());
  for (const MemberModel& m : ens.members) {
    outputs.push_back(m.predict_from_features(f));
  }
  return EnsembleOutputs(std::move(outputs));
}

/// Monte Carlo dropout stand-in over one base member: each sample zeroes
/// feature columns independently with probability dropout_rate and rescales
/// survivors by 1/(1-rate).
struct StochasticPredictor {
  MemberModel base;
  double dropout_rate = 0.5;
  int sample_count = 100;

  StochasticPredictor(MemberModel b, double rate, int samples)
      : base(std::move(b)), dropout_rate(rate), sample_count(samples) {
    if (!(rate > 0.0 && rate < 1.0)) throw Error("dropout_rate must lie in (0, 1)");
    if (samples < 2) throw TooFewMembers(static_cast<std::size_t>(samples));
  }
};

/// K dropout forward passes, deterministic given rng_seed.
inline EnsembleOutputs predict_stochastic(const StochasticPredictor& sp,
                                          const ShapeServoInput& input,
                                          std::uint64_t rng_seed) {
  const FeatureVector f = featurize(input);
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - sp.dropout_rate);

  std::vector<RigidTransform> outputs;
  outputs.reserve(static_cast<std::size_t>(sp.sample_count));
  for (int k = 0; k < sp.sample_count; ++k) {
    FeatureVector masked = f;
    for (int j = 0; j < kFeatureDim; ++j) {
      masked[j] = unit(rng) < sp.dropout_rate ? 0.0 : masked[j] * keep_scale;
    }
    outputs.push_back(sp.base.predict_from_features(masked));
  }
  return EnsembleOutputs(std::move(outputs));
}

/// Versioned textual model format:
///   servogate-member v1
///   feature_dim <F>
///   action_dim <A>
///   ridge_lambda <value>
///   seed <value>
/// followed by A rows of F weights, row-major, 17 significant digits.
inline void save_member(const MemberModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.precision(17);
  out << "servogate-member v1\n";
  out << "feature_dim " << kFeatureDim << "\n";
  out << "action_dim " << kActionDim << "\n";
  out << "ridge_lambda " << model.ridge_lambda << "\n";
  out << "seed " << model.seed << "\n";
  for (int r = 0; r < kActionDim; ++r) {
    for (int c = 0; c < kFeatureDim; ++c) {
      out << model.weights(r, c) << (c + 1 == kFeatureDim ? '\n' : ' ');
    }
  }
  if (!out) throw IoError("write to " + path + " failed");
}

inline MemberModel load_member(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;

  auto next_line = [&]() {
    if (!std::getline(in, line)) throw ParseError(path, lineno + 1, "unexpected end of file");
    ++lineno;
    return line;
  };

  if (next_line() != "servogate-member v1") throw ParseError(path, 1, "bad magic");

  auto read_field = [&](const std::string& key) {
    std::stringstream ss(next_line());
    std::string k, v;
    if (!(ss >> k >> v) || k != key) throw ParseError(path, lineno, "expected " + key);
    return v;
  };

  if (std::stoi(read_field("feature_dim")) != kFeatureDim) {
    throw ParseError(path, lineno, "feature_dim mismatch");
  }
  if (std::stoi(read_field("action_dim")) != kActionDim) {
    throw ParseError(path, lineno, "action_dim mismatch");
  }
  MemberModel model;
  model.ridge_lambda = std::stod(read_field("ridge_lambda"));
  model.seed = std::stoull(read_field("seed"));

  for (int r = 0; r < kActionDim; ++r) {
    std::stringstream ss(next_line());
    for (int c = 0; c < kFeatureDim; ++c) {
      if (!(ss >> model.weights(r, c))) {
        throw ParseError(path, lineno, "expected " + std::to_string(kFeatureDim) + " weights");
      }
    }
  }
  return model;
}

}  // namespace servogate
