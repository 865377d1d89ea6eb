#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "servogate/error.hpp"
#include "servogate/se3.hpp"

namespace servogate {

struct PointCloud {
  std::vector<Vec3> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  Vec3 centroid() const {
    if (points.empty()) throw EmptyCloud("centroid of empty cloud");
    Vec3 sum = Vec3::Zero();
    for (const Vec3& p : points) sum += p;
    return sum / static_cast<double>(points.size());
  }
};

/// Symmetric Chamfer distance in meters: the average of the two directed
/// mean nearest-neighbor distances. Mean (not sum) per direction keeps the
/// metric independent of cloud resolution.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw EmptyCloud("chamfer of empty cloud");

  auto directed_mean = [](const PointCloud& from, const PointCloud& to) {
    double acc = 0.0;
    for (const Vec3& x : from.points) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& y : to.points) {
        best = std::min(best, (x - y).squaredNorm());
      }
      acc += std::sqrt(best);
    }
    return acc / static_cast<double>(from.size());
  };

  return 0.5 * (directed_mean(a, b) + directed_mean(b, a));
}

/// Deterministic farthest-point sampling. The seed selects the start point;
/// each following pick maximizes the distance to the already-selected set,
/// ties broken toward the lowest index. Output size is exactly n.
inline PointCloud downsample_farthest(const PointCloud& cloud, std::size_t n,
                                      std::uint64_t seed) {
  if (cloud.empty()) throw EmptyCloud("downsample of empty cloud");
  if (n < 1 || n > cloud.size()) {
    throw BadCount("requested " + std::to_string(n) + " of " +
                   std::to_string(cloud.size()) + " points");
  }

  std::mt19937_64 rng(seed);
  const std::size_t start =
      std::uniform_int_distribution<std::size_t>(0, cloud.size() - 1)(rng);

  std::vector<double> dist(cloud.size(), std::numeric_limits<double>::infinity());
  std::vector<std::size_t> picked;
  picked.reserve(n);
  picked.push_back(start);

  while (picked.size() < n) {
    const Vec3& last = cloud.points[picked.back()];
    std::size_t best = 0;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      dist[i] = std::min(dist[i], (cloud.points[i] - last).norm());
      if (dist[i] > best_dist) {
        best_dist = dist[i];
        best = i;
      }
    }
    picked.push_back(best);
  }

  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i : picked) out.points.push_back(cloud.points[i]);
  return out;
}

enum class CloudFormat { Csv, PlyAscii };

namespace detail {

inline bool parse_double(const std::string& token, double* out) {
  std::size_t pos = 0;
  try {
    *out = std::stod(token, &pos);
  } catch (const std::exception&) {
    return false;
  }
  while (pos < token.size() && std::isspace(static_cast<unsigned char>(token[pos]))) ++pos;
  return pos == token.size();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace detail

/// Reads `x,y,z` CSV (header required) or ascii PLY with vertex-only
/// elements. ParseError carries the 1-based offending line.
inline PointCloud read_cloud(const std::string& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);

  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;

  if (format == CloudFormat::Csv) {
    if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
    ++lineno;
    // tolerate a UTF-8 BOM and surrounding whitespace in the header
    std::string header = line;
    if (header.size() >= 3 && header.compare(0, 3, "\xEF\xBB\xBF") == 0) header = header.substr(3);
    header.erase(std::remove_if(header.begin(), header.end(),
                                [](unsigned char c) { return std::isspace(c); }),
                 header.end());
    if (header != "x,y,z") throw ParseError(path, 1, "expected header x,y,z");

    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const std::vector<std::string> fields = detail::split_csv_line(line);
      if (fields.size() != 3) throw ParseError(path, lineno, "expected 3 fields");
      Vec3 p;
      for (int i = 0; i < 3; ++i) {
        if (!detail::parse_double(fields[i], &p[i])) {
          throw ParseError(path, lineno, "bad number '" + fields[i] + "'");
        }
      }
      if (!p.allFinite()) throw ParseError(path, lineno, "non-finite coordinate");
      cloud.points.push_back(p);
    }
    return cloud;
  }

  // ascii PLY, element vertex with float properties x, y, z
  if (!std::getline(in, line)) throw ParseError(path, 1, "missing ply magic");
  ++lineno;
  if (line.substr(0, 3) != "ply") throw ParseError(path, 1, "missing ply magic");

  std::size_t vertex_count = 0;
  bool saw_format = false;
  bool in_header = true;
  while (in_header) {
    if (!std::getline(in, line)) throw ParseError(path, lineno, "unterminated header");
    ++lineno;
    std::stringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") throw ParseError(path, lineno, "only ascii ply supported");
      saw_format = true;
    } else if (word == "element") {
      std::string name;
      ss >> name >> vertex_count;
      if (name != "vertex") throw ParseError(path, lineno, "only vertex elements supported");
    } else if (word == "end_header") {
      in_header = false;
    } else if (word == "property" || word == "comment" || word.empty()) {
      // properties are assumed to be x, y, z in order
    } else {
      throw ParseError(path, lineno, "unexpected header token '" + word + "'");
    }
  }
  if (!saw_format) throw ParseError(path, lineno, "missing format line");

  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!std::getline(in, line)) throw ParseError(path, lineno + 1, "missing vertex row");
    ++lineno;
    std::stringstream ss(line);
    Vec3 p;
    if (!(ss >> p.x() >> p.y() >> p.z())) {
      throw ParseError(path, lineno, "expected 3 coordinates");
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

/// Writes with 12 significant digits so a read-back round trip stays within
/// 1e-9 of the source.
inline void write_cloud(const PointCloud& cloud, const std::string& path,
                        CloudFormat format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.precision(12);

  if (format == CloudFormat::Csv) {
    out << "x,y,z\n";
    for (const Vec3& p : cloud.points) {
      out << p.x() << ',' << p.y() << ',' << p.z() << '\n';
    }
  } else {
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << cloud.size() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    out << "end_header\n";
    for (const Vec3& p : cloud.points) {
      out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
    }
  }
  if (!out) throw IoError("write to " + path + " failed");
}

}  // namespace servogate
