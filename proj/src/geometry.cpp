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

#include "keydyn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace keydyn {

bool Point3::finite() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
}

double distance(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void PointCloud::add(const Point3& p, int object_id, int source_id) {
  if (!p.finite()) throw Error("non-finite point");
  points.push_back(p);
  object_ids.push_back(object_id);
  if (source_id >= 0 || !source_ids.empty()) {
    source_ids.resize(points.size() - 1, -1);
    source_ids.push_back(source_id);
  }
}

PointCloud PointCloud::subset(std::span<const std::size_t> indices) const {
  PointCloud out;
  out.points.reserve(indices.size());
  for (std::size_t i : indices) {
    out.points.push_back(points.at(i));
    out.object_ids.push_back(object_ids.empty() ? 0 : object_ids.at(i));
    if (!source_ids.empty()) out.source_ids.push_back(source_ids.at(i));
  }
  return out;
}

PointCloud PointCloud::transformed(double dx, double dy, double dz) const {
  PointCloud out = *this;
  for (Point3& p : out.points) {
    p.x += dx;
    p.y += dy;
    p.z += dz;
  }
  return out;
}

double normalize_angle(double theta) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double t = std::fmod(theta, kTwoPi);
  if (t <= -std::numbers::pi) t += kTwoPi;
  if (t > std::numbers::pi) t -= kTwoPi;
  return t;
}

Pose2D::Pose2D(double x, double y, double theta)
    : x_(x), y_(y), theta_(normalize_angle(theta)) {}

Vec2 Pose2D::rotate(const Vec2& v) const {
  const double c = std::cos(theta_);
  const double s = std::sin(theta_);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

Vec2 Pose2D::apply(const Vec2& p) const { return rotate(p) + Vec2(x_, y_); }

Pose2D Pose2D::inverse() const {
  const Pose2D r(0.0, 0.0, -theta_);
  const Vec2 t = r.rotate(Vec2(-x_, -y_));
  return {t.x(), t.y(), -theta_};
}

Pose2D Pose2D::operator*(const Pose2D& other) const {
  const Vec2 t = apply(other.translation());
  return {t.x(), t.y(), theta_ + other.theta_};
}

std::size_t closest_to_centroid(std::span<const Point3> points) {
  if (points.empty()) throw Error("empty point set");
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (const Point3& p : points) {
    cx += p.x;
    cy += p.y;
    cz += p.z;
  }
  const double n = static_cast<double>(points.size());
  return nearest_neighbor(Point3{cx / n, cy / n, cz / n}, points);
}

std::vector<std::size_t> farthest_point_sample(
    std::span<const Point3> points, std::size_t max_count, double min_radius,
    std::optional<std::size_t> seed_index) {
  if (points.empty()) throw Error("empty point set");
  if (max_count < 1) throw Error("max_count must be at least 1");
  if (!(min_radius >= 0.0)) throw Error("min_radius must be non-negative");
  const std::size_t seed = seed_index.value_or(closest_to_centroid(points));
  if (seed >= points.size()) throw Error("seed index out of range");

  std::vector<std::size_t> selected{seed};
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  std::size_t last = seed;
  while (selected.size() < max_count) {
    std::size_t best = points.size();
    double best_dist = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      dist[i] = std::min(dist[i], distance(points[i], points[last]));
      if (dist[i] > best_dist) {
        best_dist = dist[i];
        best = i;
      }
    }
    if (best_dist <= 0.0 || best_dist < min_radius) break;
    selected.push_back(best);
    last = best;
  }
  return selected;
}

std::vector<std::size_t> farthest_point_sample(
    const PointCloud& cloud, std::size_t max_count, double min_radius,
    std::optional<std::size_t> seed_index) {
  return farthest_point_sample(std::span<const Point3>(cloud.points), max_count,
                               min_radius, seed_index);
}

namespace {

double mean_nearest(std::span<const Point3> from, std::span<const Point3> to) {
  double sum = 0.0;
  for (const Point3& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point3& q : to) best = std::min(best, distance(p, q));
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace

double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) throw Error("chamfer distance of an empty cloud");
  return 0.5 * (mean_nearest(a, b) + mean_nearest(b, a));
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  return chamfer_distance(std::span<const Point3>(a.points),
                          std::span<const Point3>(b.points));
}

std::size_t nearest_neighbor(const Point3& query,
                             std::span<const Point3> candidates) {
  if (candidates.empty()) throw Error("nearest neighbor over empty candidates");
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double d = distance(query, candidates[i]);
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

std::size_t nearest_neighbor(const Point3& query, const PointCloud& candidates) {
  return nearest_neighbor(query, std::span<const Point3>(candidates.points));
}

Pose2D fit_rigid_transform(std::span<const Vec2> from, std::span<const Vec2> to) {
  if (from.size() != to.size() || from.empty()) {
    throw Error("rigid fit needs equally sized non-empty point sets");
  }
  Vec2 ca = Vec2::Zero(), cb = Vec2::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) {
    ca += from[i];
    cb += to[i];
  }
  ca /= static_cast<double>(from.size());
  cb /= static_cast<double>(to.size());
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    const Vec2 a = from[i] - ca;
    const Vec2 b = to[i] - cb;
    sxx += a.dot(b);
    sxy += a.x() * b.y() - a.y() * b.x();
  }
  const double theta = std::atan2(sxy, sxx);
  const Pose2D rot(0.0, 0.0, theta);
  const Vec2 t = cb - rot.rotate(ca);
  return {t.x(), t.y(), theta};
}

}  // namespace keydyn
