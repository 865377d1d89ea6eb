#pragma once

#include <stdexcept>
#include <string>

namespace servogate {

// Base class for every failure the library reports.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// An operation that needs at least one element got none.
class EmptyInput : public Error {
 public:
  explicit EmptyInput(const std::string& what = "empty input") : Error(what) {}
};

// A 3x3 matrix failed the orthonormality / determinant invariants.
class NotARotation : public Error {
 public:
  explicit NotARotation(double max_deviation)
      : Error("matrix is not a rotation (max deviation " +
              std::to_string(max_deviation) + ")"),
        max_deviation_(max_deviation) {}
  double max_deviation() const { return max_deviation_; }

 private:
  double max_deviation_;
};

// The nearest-rotation projection is non-unique (antipodal member set).
class DegenerateMean : public Error {
 public:
  explicit DegenerateMean(const std::string& what = "chordal mean is degenerate")
      : Error(what) {}
};

// Variance over fewer than two members is undefined.
class TooFewMembers : public Error {
 public:
  explicit TooFewMembers(std::size_t n)
      : Error("ensemble needs at least 2 members, got " + std::to_string(n)) {}
};

// A variance trace does not contain the requested step (or its predecessor).
class MissingStep : public Error {
 public:
  explicit MissingStep(long step)
      : Error("variance trace has no entry for step " + std::to_string(step)) {}
};

// A rate with a zero denominator was requested.
class UndefinedRate : public Error {
 public:
  explicit UndefinedRate(const std::string& what) : Error(what) {}
};

// A fitted distribution has zero variance; KL against it is undefined.
class DegenerateDistribution : public Error {
 public:
  explicit DegenerateDistribution(const std::string& what = "sample variance is zero")
      : Error(what) {}
};

// A point-cloud operation received an empty cloud.
class EmptyCloud : public Error {
 public:
  explicit EmptyCloud(const std::string& what = "empty point cloud") : Error(what) {}
};

// Requested sample count is outside [1, cloud size].
class BadCount : public Error {
 public:
  explicit BadCount(const std::string& what) : Error(what) {}
};

// Malformed input file; line is 1-based.
class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : Error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

// Normal equations are singular beyond what the ridge term regularizes.
class RankDeficient : public Error {
 public:
  explicit RankDeficient(const std::string& what = "normal equations are rank deficient")
      : Error(what) {}
};

// Grasping an anchored node would tear the sheet off its support.
class GraspOnAnchor : public Error {
 public:
  explicit GraspOnAnchor(int node)
      : Error("grasp node " + std::to_string(node) + " lies on the anchored edge") {}
};

// Action translation exceeds the per-step workspace guard.
class ActionOutOfRange : public Error {
 public:
  explicit ActionOutOfRange(double norm, double limit)
      : Error("action translation " + std::to_string(norm) +
              " m exceeds per-step limit " + std::to_string(limit) + " m") {}
};

// Configuration file or flag combination is invalid.
class BadConfig : public Error {
 public:
  explicit BadConfig(const std::string& what) : Error(what) {}
};

}  // namespace servogate
