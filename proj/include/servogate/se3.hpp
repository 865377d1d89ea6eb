#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "servogate/error.hpp"

namespace servogate {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Tolerance for the rotation-matrix invariants (Frobenius orthonormality
// and determinant).
inline constexpr double kRotationTol = 1e-6;

// Below this gap between the two smallest singular values of the member
// mean the nearest-rotation projection is treated as non-unique.
inline constexpr double kDegenerateMeanTol = 1e-9;

/// A validated proper rotation: m'm = I and det(m) = +1 within kRotationTol.
class Rotation3 {
 public:
  /// Validates and wraps a 3x3 matrix. Throws NotARotation with the largest
  /// observed deviation if the invariants fail.
  explicit Rotation3(const Mat3& m) : m_(m) {
    if (!m.allFinite()) throw NotARotation(std::numeric_limits<double>::infinity());
    const double ortho_dev = (m.transpose() * m - Mat3::Identity()).norm();
    const double det_dev = std::abs(m.determinant() - 1.0);
    const double dev = std::max(ortho_dev, det_dev);
    if (dev > kRotationTol) throw NotARotation(dev);
  }

  static Rotation3 identity() { return Rotation3(Mat3::Identity(), unchecked_t{}); }

  /// Rotation of |aa| radians about aa / |aa|; identity for the zero vector.
  static Rotation3 exp(const Vec3& aa) {
    const double angle = aa.norm();
    if (angle < 1e-14) return identity();
    return Rotation3(Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix(),
                     unchecked_t{});
  }

  static Rotation3 about_x(double angle) { return exp(Vec3::UnitX() * angle); }
  static Rotation3 about_y(double angle) { return exp(Vec3::UnitY() * angle); }
  static Rotation3 about_z(double angle) { return exp(Vec3::UnitZ() * angle); }

  const Mat3& matrix() const { return m_; }

  /// Axis-angle vector with magnitude in [0, pi].
  Vec3 log() const {
    const Eigen::AngleAxisd aa(m_);
    return aa.angle() * aa.axis();
  }

  Rotation3 inverse() const { return Rotation3(m_.transpose(), unchecked_t{}); }

  Rotation3 operator*(const Rotation3& rhs) const {
    return Rotation3(m_ * rhs.m_, unchecked_t{});
  }
  Vec3 operator*(const Vec3& p) const { return m_ * p; }

 private:
  struct unchecked_t {};
  Rotation3(const Mat3& m, unchecked_t) : m_(m) {}

  Mat3 m_;

  friend Rotation3 chordal_mean_rotation(const std::vector<Rotation3>&);
};

/// Checked construction of a Rotation3 from a raw matrix.
inline Rotation3 validate_rotation(const Mat3& m) { return Rotation3(m); }

/// One rigid-body action: rotation plus translation in meters.
struct RigidTransform {
  Rotation3 rotation;
  Vec3 translation;

  RigidTransform(Rotation3 r, Vec3 t) : rotation(std::move(r)), translation(std::move(t)) {}

  static RigidTransform identity() {
    return RigidTransform(Rotation3::identity(), Vec3::Zero());
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    Rotation3 rinv = rotation.inverse();
    return RigidTransform(rinv, -(rinv * translation));
  }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return RigidTransform(rotation * rhs.rotation, rotation * rhs.translation + translation);
  }
};

/// The set of per-member predictions for one input. At least two members,
/// since a singleton carries no spread information.
struct EnsembleOutputs {
  std::vector<RigidTransform> members;

  explicit EnsembleOutputs(std::vector<RigidTransform> m) : members(std::move(m)) {
    if (members.size() < 2) throw TooFewMembers(members.size());
  }

  std::size_t size() const { return members.size(); }
};

/// Component-wise arithmetic mean of the positional predictions.
inline Vec3 mean_position(const std::vector<Vec3>& positions) {
  if (positions.empty()) throw EmptyInput("mean_position: no positions");
  Vec3 sum = Vec3::Zero();
  for (const Vec3& p : positions) sum += p;
  return sum / static_cast<double>(positions.size());
}

/// Rotation angle of a'b in radians, in [0, pi]. The trace argument is
/// clamped to [-1, 1] so near-identical rotations cannot produce NaN.
inline double geodesic_distance(const Rotation3& a, const Rotation3& b) {
  const double tr = (a.matrix().transpose() * b.matrix()).trace();
  const double arg = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(arg);
}

/// Proper rotation nearest (Frobenius) to the arithmetic member mean
/// S = (1/N) sum R_i, via SVD projection S = U D V',
/// R = U diag(1, 1, det(UV')) V'. The determinant factor keeps the result a
/// rotation when det(S) < 0.
///
/// Throws DegenerateMean when the projection is non-unique: the two smallest
/// singular values of S coincide within kDegenerateMeanTol and either both
/// vanish or the uncorrected product UV' is a reflection.
inline Rotation3 chordal_mean_rotation(const std::vector<Rotation3>& rotations) {
  if (rotations.empty()) throw EmptyInput("chordal_mean_rotation: no rotations");

  Mat3 s = Mat3::Zero();
  for (const Rotation3& r : rotations) s += r.matrix();
  s /= static_cast<double>(rotations.size());

  Eigen::JacobiSVD<Mat3> svd(s, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();  // sorted descending
  const double det_uv = (svd.matrixU() * svd.matrixV().transpose()).determinant();

  const bool smallest_coincide = sv(1) - sv(2) <= kDegenerateMeanTol;
  if (smallest_coincide && (det_uv < 0.0 || sv(1) <= kDegenerateMeanTol)) {
    throw DegenerateMean();
  }

  Mat3 d = Mat3::Identity();
  d(2, 2) = det_uv < 0.0 ? -1.0 : 1.0;
  return Rotation3(svd.matrixU() * d * svd.matrixV().transpose(),
                   Rotation3::unchecked_t{});
}

/// (1/N) sum ||p_i - p_mean||^2, in meters^2.
inline double position_variance(const EnsembleOutputs& outputs) {
  std::vector<Vec3> positions;
  positions.reserve(outputs.size());
  for (const RigidTransform& t : outputs.members) positions.push_back(t.translation);
  const Vec3 mean = mean_position(positions);
  double acc = 0.0;
  for (const Vec3& p : positions) acc += (p - mean).squaredNorm();
  return acc / static_cast<double>(positions.size());
}

/// (1/N) sum geodesic_distance(R_i, R_mean), in radians. A mean absolute
/// deviation, not a squared quantity.
inline double rotation_variance(const EnsembleOutputs& outputs) {
  std::vector<Rotation3> rotations;
  rotations.reserve(outputs.size());
  for (const RigidTransform& t : outputs.members) rotations.push_back(t.rotation);
  const Rotation3 mean = chordal_mean_rotation(rotations);
  double acc = 0.0;
  for (const Rotation3& r : rotations) acc += geodesic_distance(r, mean);
  return acc / static_cast<double>(rotations.size());
}

struct AggregateResult {
  RigidTransform mean;
  double var_p;  // meters^2
  double var_r;  // radians
};

/// Mean action plus both predictive variances, computed from one member set.
inline AggregateResult aggregate(const EnsembleOutputs& outputs) {
  std::vector<Vec3> positions;
  std::vector<Rotation3> rotations;
  positions.reserve(outputs.size());
  rotations.reserve(outputs.size());
  for (const RigidTransform& t : outputs.members) {
    positions.push_back(t.translation);
    rotations.push_back(t.rotation);
  }

  const Vec3 p_mean = mean_position(positions);
  const Rotation3 r_mean = chordal_mean_rotation(rotations);

  double var_p = 0.0;
  for (const Vec3& p : positions) var_p += (p - p_mean).squaredNorm();
  var_p /= static_cast<double>(positions.size());

  double var_r = 0.0;
  for (const Rotation3& r : rotations) var_r += geodesic_distance(r, r_mean);
  var_r /= static_cast<double>(rotations.size());

  return AggregateResult{RigidTransform(r_mean, p_mean), var_p, var_r};
}

}  // namespace servogate
