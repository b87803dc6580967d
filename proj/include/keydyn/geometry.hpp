// Copyright 2026 The Keydyn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace keydyn {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec2 = Eigen::Vector2d;

/// World-frame point in meters: x right, y toward image top, z up.
struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  Vec2 xy() const { return {x, y}; }
  bool finite() const;
  friend bool operator==(const Point3&, const Point3&) = default;
};

double distance(const Point3& a, const Point3& b);

/// Ordered points with a per-point object label. `source_ids` is optional and,
/// when present, names the simulator particle (or rigid-body sample) a point was
/// taken from so it can be tracked across frames.
struct PointCloud {
  std::vector<Point3> points;
  std::vector<int> object_ids;
  std::vector<int> source_ids;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void add(const Point3& p, int object_id, int source_id = -1);
  PointCloud subset(std::span<const std::size_t> indices) const;
  PointCloud transformed(double dx, double dy, double dz = 0.0) const;
};

/// Planar rigid transform; rotation is kept in (-pi, pi].
class Pose2D {
 public:
  Pose2D() = default;
  Pose2D(double x, double y, double theta);

  double x() const { return x_; }
  double y() const { return y_; }
  double theta() const { return theta_; }
  Vec2 translation() const { return {x_, y_}; }

  Vec2 apply(const Vec2& p) const;
  Vec2 rotate(const Vec2& v) const;
  Pose2D inverse() const;
  Pose2D operator*(const Pose2D& other) const;

 private:
  double x_ = 0.0;
  double y_ = 0.0;
  double theta_ = 0.0;
};

double normalize_angle(double theta);

/// Greedy farthest point sampling. Returns indices in selection order starting
/// at `seed_index` (default: point nearest the centroid). Stops after
/// `max_count` picks or once the farthest remaining point is closer than
/// `min_radius` to the selection. Ties go to the lowest index.
std::vector<std::size_t> farthest_point_sample(
    std::span<const Point3> points, std::size_t max_count, double min_radius,
    std::optional<std::size_t> seed_index = std::nullopt);

std::vector<std::size_t> farthest_point_sample(
    const PointCloud& cloud, std::size_t max_count, double min_radius,
    std::optional<std::size_t> seed_index = std::nullopt);

std::size_t closest_to_centroid(std::span<const Point3> points);

/// Symmetric Chamfer distance: the mean of the two directed mean
/// nearest-neighbor distances.
double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b);
double chamfer_distance(const PointCloud& a, const PointCloud& b);

/// Index of the candidate nearest to `query`; lowest index wins ties.
std::size_t nearest_neighbor(const Point3& query,
                             std::span<const Point3> candidates);
std::size_t nearest_neighbor(const Point3& query, const PointCloud& candidates);

/// Least-squares rigid transform mapping `from[i]` onto `to[i]`.
Pose2D fit_rigid_transform(std::span<const Vec2> from, std::span<const Vec2> to);

}  // namespace keydyn
