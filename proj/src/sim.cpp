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

#include "keydyn/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

namespace keydyn::sim {
namespace {

constexpr double kPi = std::numbers::pi;
// Ground friction enters the quasi-static limit surface only as a common
// scale, so it does not change block kinematics.
constexpr double kGroundFriction = 0.5;
constexpr double kContactFriction = 0.3;
constexpr double kOverlapTolerance = 1e-4;

const std::array<Vec2, 9>& cube_layout() {
  static const std::array<Vec2, 9> layout = [] {
    std::array<Vec2, 9> l;
    int k = 0;
    for (int j = -1; j <= 1; ++j)
      for (int i = -1; i <= 1; ++i) l[k++] = Vec2(0.01 * i, 0.01 * j);
    return l;
  }();
  return layout;
}

Vec2 clamp_to_workspace(const Vec2& p, double margin) {
  const double lim = kWorkspaceHalf - margin;
  return {std::clamp(p.x(), -lim, lim), std::clamp(p.y(), -lim, lim)};
}

/// Pushes a disk of radius `radius` at `p` out of the pusher. Returns true if
/// it moved.
bool resolve_pusher_contact(const Pusher& pusher, double radius, Vec2& p) {
  Vec2 closest = pusher.pose.translation();
  double reach = Pusher::kCylinderRadius + radius;
  if (pusher.kind == PusherKind::board) {
    const Vec2 axis = pusher.pose.rotate(Vec2(1.0, 0.0));
    const double half = 0.5 * Pusher::kBoardLength;
    const double t = std::clamp((p - closest).dot(axis), -half, half);
    closest = closest + t * axis;
    reach = 0.5 * Pusher::kBoardThickness + radius;
  }
  Vec2 d = p - closest;
  const double dist = d.norm();
  if (dist >= reach) return false;
  if (dist < 1e-12) {
    d = pusher.kind == PusherKind::board ? pusher.pose.rotate(Vec2(0.0, 1.0)) : Vec2(1.0, 0.0);
  } else {
    d /= dist;
  }
  p = closest + reach * d;
  return true;
}

double pusher_penetration(const Pusher& pusher, double radius, const Vec2& p) {
  Vec2 q = p;
  if (!resolve_pusher_contact(pusher, radius, q)) return 0.0;
  return (q - p).norm();
}

bool project_pair(Vec2& a, Vec2& b, double min_dist) {
  Vec2 d = b - a;
  const double dist = d.norm();
  if (dist >= min_dist) return false;
  if (dist < 1e-12) {
    d = Vec2(1.0, 0.0);
  } else {
    d /= dist;
  }
  const Vec2 corr = 0.5 * (min_dist - dist) * d;
  a -= corr;
  b += corr;
  return true;
}

void clamp_particles(WorldState& s, double radius) {
  for (Vec2& p : s.particles) p = clamp_to_workspace(p, radius);
}

// ----- rope -----

void rope_stretch(WorldState& s, double rest) {
  for (std::size_t i = 0; i + 1 < s.particles.size(); ++i) {
    Vec2 d = s.particles[i + 1] - s.particles[i];
    const double len = d.norm();
    if (len < 1e-12 || std::abs(len - rest) < 1e-12) continue;
    const Vec2 corr = 0.5 * (len - rest) / len * d;
    s.particles[i] += corr;
    s.particles[i + 1] -= corr;
  }
}

void rope_substep(WorldState& s, const std::vector<double>& bend_rest) {
  const double rest = s.material.segment_rest_length();
  const double k = 1.0 - std::pow(1.0 - std::min(s.material.stiffness, 1.0 - 1e-9),
                                  1.0 / kSolverIterations);
  for (int it = 0; it < kSolverIterations; ++it) {
    rope_stretch(s, rest);
    for (std::size_t i = 0; i + 2 < s.particles.size(); ++i) {
      Vec2 d = s.particles[i + 2] - s.particles[i];
      const double len = d.norm();
      if (len < 1e-12) continue;
      const Vec2 corr = 0.5 * k * (len - bend_rest[i]) / len * d;
      s.particles[i] += corr;
      s.particles[i + 2] -= corr;
    }
    for (Vec2& p : s.particles) resolve_pusher_contact(s.pusher, kRopeRadius, p);
    clamp_particles(s, kRopeRadius);
  }
}

// ----- granular -----

void granular_iteration(WorldState& s) {
  const double min_dist = 2.0 * s.material.radius;
  auto& p = s.particles;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j) project_pair(p[i], p[j], min_dist);
  for (Vec2& q : p) resolve_pusher_contact(s.pusher, s.material.radius, q);
  clamp_particles(s, s.material.radius);
}

// ----- cubes -----

void cube_shape_match(WorldState& s, const std::vector<bool>& touched) {
  const auto& layout = cube_layout();
  for (int c = 0; c < s.material.count; ++c) {
    if (!touched[c]) continue;
    const std::span<Vec2> pts(s.particles.data() + 9 * c, 9);
    const Pose2D pose = fit_rigid_transform(layout, std::span<const Vec2>(pts.data(), 9));
    for (int i = 0; i < 9; ++i) pts[i] = pose.apply(layout[i]);
  }
}

void cubes_iteration(WorldState& s) {
  auto& p = s.particles;
  const double min_dist = 2.0 * kCubeParticleRadius;
  std::vector<bool> touched(s.material.count, false);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j)
      if (s.particle_object[i] != s.particle_object[j] && project_pair(p[i], p[j], min_dist))
        touched[s.particle_object[i]] = touched[s.particle_object[j]] = true;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (resolve_pusher_contact(s.pusher, kCubeParticleRadius, p[i])) touched[s.particle_object[i]] = true;
    const Vec2 clamped = clamp_to_workspace(p[i], kCubeParticleRadius);
    if (clamped != p[i]) {
      p[i] = clamped;
      touched[s.particle_object[i]] = true;
    }
  }
  cube_shape_match(s, touched);
}

double max_cube_overlap(const WorldState& s) {
  double worst = 0.0;
  const auto& p = s.particles;
  for (std::size_t i = 0; i < p.size(); ++i) {
    worst = std::max(worst, pusher_penetration(s.pusher, kCubeParticleRadius, p[i]));
    for (std::size_t j = i + 1; j < p.size(); ++j)
      if (s.particle_object[i] != s.particle_object[j])
        worst = std::max(worst, 2.0 * kCubeParticleRadius - (p[i] - p[j]).norm());
  }
  return worst;
}

// ----- T block (quasi-static pushing, ellipsoidal limit surface) -----

double limit_surface_radius() {
  static const double c = [] {
    // Mean distance to the center of mass under uniform pressure.
    const Vec2 com = TBlockGeometry::center_of_mass();
    const double h = 0.0005;
    double sum = 0.0;
    int n = 0;
    for (double x = -0.06 + h / 2; x < 0.06; x += h)
      for (double y = -0.06 + h / 2; y < 0.06; y += h)
        if (TBlockGeometry::signed_distance({x, y}) < 0.0) {
          sum += (Vec2(x, y) - com).norm();
          ++n;
        }
    return sum / n;
  }();
  return c;
}

struct BlockContact {
  double penetration = 0.0;
  Vec2 inward_normal = Vec2::Zero();
  Vec2 point = Vec2::Zero();
};

BlockContact block_contact(const Pose2D& block, const Vec2& center, double radius) {
  const Vec2 local = block.inverse().apply(center);
  Vec2 n_local;
  const double sd = TBlockGeometry::signed_distance(local, &n_local);
  BlockContact c;
  c.penetration = radius - sd;
  c.inward_normal = -block.rotate(n_local);
  c.point = block.apply(local - sd * n_local);
  return c;
}

/// Body twist (about the center of mass) that moves the contact point with
/// velocity `vc` while sticking.
Eigen::Vector3d sticking_twist(const Vec2& r, const Vec2& vc, double c2) {
  const double denom = c2 + r.squaredNorm();
  const double vx = ((c2 + r.x() * r.x()) * vc.x() + r.x() * r.y() * vc.y()) / denom;
  const double vy = (r.x() * r.y() * vc.x() + (c2 + r.y() * r.y()) * vc.y()) / denom;
  const double w = (r.x() * vy - r.y() * vx) / c2;
  return {vx, vy, w};
}

Vec2 contact_velocity(const Vec2& r, const Eigen::Vector3d& twist) {
  return {twist.x() - twist.z() * r.y(), twist.y() + twist.z() * r.x()};
}

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

Eigen::Vector3d pushing_twist(const Vec2& r, const Vec2& n_in, const Vec2& vp) {
  const double cls = limit_surface_radius();
  const double c2 = cls * cls;
  const Vec2 t(-n_in.y(), n_in.x());
  auto twist_for_force = [&](const Vec2& f) {
    return Eigen::Vector3d(f.x(), f.y(), cross2(r, f) / c2);
  };
  const Vec2 vl = contact_velocity(r, twist_for_force(n_in + kContactFriction * t));
  const Vec2 vr = contact_velocity(r, twist_for_force(n_in - kContactFriction * t));
  const double s = cross2(vr, vl) >= 0.0 ? 1.0 : -1.0;
  Vec2 vc = vp;
  if (!(s * cross2(vr, vp) >= 0.0 && s * cross2(vp, vl) >= 0.0)) {
    const double cl = vl.dot(vp) / vl.norm();
    const double cr = vr.dot(vp) / vr.norm();
    const Vec2 vb = cl >= cr ? vl : vr;
    vc = vp.dot(n_in) / vb.dot(n_in) * vb;
  }
  return sticking_twist(r, vc, c2);
}

Pose2D apply_twist(const Pose2D& block, const Eigen::Vector3d& twist) {
  const Vec2 com_body = TBlockGeometry::center_of_mass();
  const Vec2 com = block.apply(com_body) + Vec2(twist.x(), twist.y());
  const Pose2D rotated(0.0, 0.0, block.theta() + twist.z());
  const Vec2 origin = com - rotated.rotate(com_body);
  return {origin.x(), origin.y(), block.theta() + twist.z()};
}

Pose2D clamp_block(const Pose2D& block) {
  double lo_x = 1e9, hi_x = -1e9, lo_y = 1e9, hi_y = -1e9;
  for (const auto& rect : TBlockGeometry::rectangles())
    for (const Vec2& v : rect) {
      const Vec2 w = block.apply(v);
      lo_x = std::min(lo_x, w.x());
      hi_x = std::max(hi_x, w.x());
      lo_y = std::min(lo_y, w.y());
      hi_y = std::max(hi_y, w.y());
    }
  double dx = 0.0, dy = 0.0;
  if (lo_x < -kWorkspaceHalf) dx = -kWorkspaceHalf - lo_x;
  if (hi_x > kWorkspaceHalf) dx = kWorkspaceHalf - hi_x;
  if (lo_y < -kWorkspaceHalf) dy = -kWorkspaceHalf - lo_y;
  if (hi_y > kWorkspaceHalf) dy = kWorkspaceHalf - hi_y;
  if (dx == 0.0 && dy == 0.0) return block;
  return {block.x() + dx, block.y() + dy, block.theta()};
}

void block_substep(WorldState& s, const Vec2& pusher_delta) {
  const double radius = Pusher::kCylinderRadius;
  const Vec2 center = s.pusher.pose.translation();
  for (int k = 0; k < 4; ++k) {
    const BlockContact c = block_contact(s.block, center, radius);
    if (c.penetration <= 1e-12) break;
    const double approach = pusher_delta.dot(c.inward_normal);
    if (k == 0 && approach > 1e-12) {
      const Vec2 vp = pusher_delta * std::min(1.0, c.penetration / approach);
      const Vec2 r = c.point - s.block.apply(TBlockGeometry::center_of_mass());
      s.block = apply_twist(s.block, pushing_twist(r, c.inward_normal, vp));
    } else {
      const Vec2 shift = c.inward_normal * c.penetration;
      s.block = Pose2D(s.block.x() + shift.x(), s.block.y() + shift.y(), s.block.theta());
    }
  }
  s.block = clamp_block(s.block);
}

// ----- shared sweep -----

void particle_substep(WorldState& s) {
  switch (s.material.kind) {
    case MaterialKind::rope: {
      std::vector<double> bend_rest(s.particles.size() > 2 ? s.particles.size() - 2 : 0);
      for (std::size_t i = 0; i < bend_rest.size(); ++i)
        bend_rest[i] = (s.particles[i + 2] - s.particles[i]).norm();
      rope_substep(s, bend_rest);
      break;
    }
    case MaterialKind::granular:
      for (int it = 0; it < kSolverIterations; ++it) granular_iteration(s);
      break;
    case MaterialKind::cubes:
      for (int it = 0; it < kSolverIterations; ++it) cubes_iteration(s);
      break;
    case MaterialKind::t_block:
      break;
  }
}

Pose2D pusher_pose_for(PusherKind kind, const Vec2& at, double travel_angle) {
  if (kind == PusherKind::board) return {at.x(), at.y(), travel_angle + kPi / 2};
  return {at.x(), at.y(), 0.0};
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(MaterialKind kind) {
  switch (kind) {
    case MaterialKind::rope: return "rope";
    case MaterialKind::cubes: return "cubes";
    case MaterialKind::granular: return "granular";
    case MaterialKind::t_block: return "t_block";
  }
  return "unknown";
}

MaterialKind material_kind_from_string(const std::string& name) {
  if (name == "rope") return MaterialKind::rope;
  if (name == "cubes") return MaterialKind::cubes;
  if (name == "granular") return MaterialKind::granular;
  if (name == "t_block") return MaterialKind::t_block;
  throw Error("unknown material kind: " + name);
}

std::string to_string(PusherKind kind) {
  return kind == PusherKind::cylinder ? "cylinder" : "board";
}

PusherKind pusher_kind_from_string(const std::string& name) {
  if (name == "cylinder") return PusherKind::cylinder;
  if (name == "board") return PusherKind::board;
  throw Error("unknown pusher kind: " + name);
}

Material Material::rope(double length, double stiffness) {
  Material m;
  m.kind = MaterialKind::rope;
  m.length = length;
  m.stiffness = stiffness;
  m.count = static_cast<int>(std::lround(length / kRopeSpacing)) + 1;
  return m;
}

Material Material::granular(int count, double radius) {
  Material m;
  m.kind = MaterialKind::granular;
  m.count = count;
  m.radius = radius;
  return m;
}

Material Material::cubes(int count) {
  Material m;
  m.kind = MaterialKind::cubes;
  m.count = count;
  return m;
}

Material Material::t_block() {
  Material m;
  m.kind = MaterialKind::t_block;
  m.count = 1;
  return m;
}

void Material::validate() const {
  if (count < 1) throw Error("material count must be at least 1");
  switch (kind) {
    case MaterialKind::rope:
      if (!(stiffness > 0.0 && stiffness <= 1.0)) throw Error("rope stiffness must lie in (0, 1]");
      if (count < 2) throw Error("rope needs at least two particles");
      if (!(length > 0.0)) throw Error("rope length must be positive");
      break;
    case MaterialKind::granular:
      if (!(radius > 0.0)) throw Error("granular radius must be positive");
      break;
    case MaterialKind::cubes:
      break;
    case MaterialKind::t_block:
      if (count != 1) throw Error("t_block count must be 1");
      break;
  }
}

double Material::segment_rest_length() const { return length / (count - 1); }

double Material::surface_z() const {
  switch (kind) {
    case MaterialKind::rope: return 0.005;
    case MaterialKind::granular: return 0.005;
    case MaterialKind::cubes: return kCubeSide;
    case MaterialKind::t_block: return 0.02;
  }
  return 0.0;
}

double Material::particle_radius() const {
  switch (kind) {
    case MaterialKind::rope: return kRopeRadius;
    case MaterialKind::granular: return radius;
    case MaterialKind::cubes: return kCubeParticleRadius;
    case MaterialKind::t_block: return 0.0;
  }
  return 0.0;
}

nlohmann::json Material::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)}, {"count", count}};
  if (kind == MaterialKind::rope) {
    j["length"] = length;
    j["stiffness"] = stiffness;
  }
  if (kind == MaterialKind::granular) j["radius"] = radius;
  return j;
}

Material Material::from_json(const nlohmann::json& j) {
  Material m;
  m.kind = material_kind_from_string(j.at("kind").get<std::string>());
  m.count = j.value("count", m.kind == MaterialKind::t_block ? 1 : m.count);
  m.length = j.value("length", m.length);
  m.stiffness = j.value("stiffness", m.stiffness);
  m.radius = j.value("radius", m.radius);
  m.validate();
  return m;
}

// ----- T geometry -----

Vec2 TBlockGeometry::center_of_mass() {
  const double bar_area = width * bar_width;
  const double stem_len = height - bar_width;
  const double stem_area = stem_width * stem_len;
  const double bar_y = height / 2 - bar_width / 2;
  const double stem_y = -height / 2 + stem_len / 2;
  return {0.0, (bar_area * bar_y + stem_area * stem_y) / (bar_area + stem_area)};
}

std::array<Vec2, 4> TBlockGeometry::keypoints() {
  return {Vec2(0.0, height / 2), Vec2(width / 2, height / 2), Vec2(-width / 2, height / 2),
          Vec2(0.0, -height / 2)};
}

std::array<std::array<Vec2, 4>, 2> TBlockGeometry::rectangles() {
  const double top = height / 2, bar_bottom = height / 2 - bar_width, bottom = -height / 2;
  const double hw = width / 2, sw = stem_width / 2;
  return {{{Vec2(-hw, bar_bottom), Vec2(hw, bar_bottom), Vec2(hw, top), Vec2(-hw, top)},
           {Vec2(-sw, bottom), Vec2(sw, bottom), Vec2(sw, bar_bottom), Vec2(-sw, bar_bottom)}}};
}

double TBlockGeometry::signed_distance(const Vec2& p, Vec2* normal) {
  double best = std::numeric_limits<double>::infinity();
  Vec2 best_normal(0.0, 1.0);
  for (const auto& rect : rectangles()) {
    const Vec2 center = 0.5 * (rect[0] + rect[2]);
    const Vec2 half = 0.5 * (rect[2] - rect[0]);
    const Vec2 rel = p - center;
    const Vec2 q(std::abs(rel.x()) - half.x(), std::abs(rel.y()) - half.y());
    const Vec2 outside(std::max(q.x(), 0.0), std::max(q.y(), 0.0));
    const double sd = outside.norm() + std::min(std::max(q.x(), q.y()), 0.0);
    if (sd < best) {
      best = sd;
      const double sx = rel.x() >= 0.0 ? 1.0 : -1.0;
      const double sy = rel.y() >= 0.0 ? 1.0 : -1.0;
      if (outside.norm() > 0.0) {
        best_normal = Vec2(outside.x() * sx, outside.y() * sy).normalized();
      } else if (q.x() > q.y()) {
        best_normal = Vec2(sx, 0.0);
      } else {
        best_normal = Vec2(0.0, sy);
      }
    }
  }
  if (normal) *normal = best_normal;
  return best;
}

const std::vector<Vec2>& TBlockGeometry::samples() {
  static const std::vector<Vec2> pts = [] {
    std::vector<Vec2> out;
    const double h = 0.005;
    // Bar: x in [-0.06, 0.06], y in [0.03, 0.06].
    for (int j = 0; j <= 6; ++j)
      for (int i = 0; i <= 24; ++i) out.emplace_back(-0.06 + h * i, 0.03 + h * j);
    // Stem: x in [-0.015, 0.015], y in [-0.06, 0.025].
    for (int j = 0; j <= 17; ++j)
      for (int i = 0; i <= 6; ++i) out.emplace_back(-0.015 + h * i, -0.06 + h * j);
    return out;
  }();
  return pts;
}

double TBlockGeometry::area() {
  return width * bar_width + stem_width * (height - bar_width);
}

// ----- pusher / action -----

std::vector<Vec2> Pusher::particles() const {
  if (kind == PusherKind::cylinder) return {pose.translation()};
  std::vector<Vec2> out;
  const Vec2 axis = pose.rotate(Vec2(1.0, 0.0));
  for (int i = 0; i < 5; ++i)
    out.push_back(pose.translation() + (-0.5 + 0.25 * i) * kBoardLength * axis);
  return out;
}

PusherKind Pusher::default_for(MaterialKind kind) {
  return (kind == MaterialKind::cubes || kind == MaterialKind::granular) ? PusherKind::board
                                                                         : PusherKind::cylinder;
}

Vec2 PushAction::direction() const { return {std::cos(angle), std::sin(angle)}; }

bool PushAction::valid() const {
  return std::isfinite(start_x) && std::isfinite(start_y) && std::isfinite(angle) &&
         std::isfinite(length) && length > 0.0 && length <= kMaxPushLength + 1e-12 &&
         std::abs(start_x) <= kWorkspaceHalf && std::abs(start_y) <= kWorkspaceHalf;
}

void PushAction::validate() const {
  if (!std::isfinite(start_x) || !std::isfinite(start_y) || !std::isfinite(angle) ||
      !std::isfinite(length)) {
    throw Error("non-finite push action");
  }
  if (std::abs(start_x) > kWorkspaceHalf || std::abs(start_y) > kWorkspaceHalf) {
    throw Error("action out of workspace");
  }
  if (!(length > 0.0 && length <= kMaxPushLength + 1e-12)) {
    throw Error("push length must lie in (0, 0.2] m");
  }
}

// ----- world state -----

int WorldState::object_count() const {
  switch (material.kind) {
    case MaterialKind::rope: return particles.empty() ? 0 : 1;
    case MaterialKind::granular: return particles.empty() ? 0 : 1;
    case MaterialKind::cubes: return static_cast<int>(particles.size() / 9);
    case MaterialKind::t_block: return 1;
  }
  return 0;
}

Pose2D WorldState::cube_pose(int id) const {
  const std::span<const Vec2> pts(particles.data() + 9 * id, 9);
  return fit_rigid_transform(cube_layout(), pts);
}

Vec2 Camera::to_pixel(const Vec2& world) const {
  const double s = meters_per_pixel();
  return {(world.x() + kWorkspaceHalf) / s, (kWorkspaceHalf - world.y()) / s};
}

Vec2 Camera::to_world(const Vec2& pixel) const {
  const double s = meters_per_pixel();
  return {pixel.x() * s - kWorkspaceHalf, kWorkspaceHalf - pixel.y() * s};
}

WorldState make_rope(double length, double stiffness, const std::vector<Vec2>& centerline) {
  WorldState s;
  s.material = Material::rope(length, stiffness);
  s.material.count = static_cast<int>(centerline.size());
  s.material.validate();
  s.particles = centerline;
  s.particle_object.assign(centerline.size(), 0);
  s.pusher.kind = PusherKind::cylinder;
  s.pusher.pose = Pose2D(kWorkspaceHalf - 0.01, kWorkspaceHalf - 0.01, 0.0);
  return s;
}

WorldState make_granular(const std::vector<Vec2>& centers, double radius) {
  WorldState s;
  s.material = Material::granular(static_cast<int>(centers.size()), radius);
  s.material.validate();
  s.particles = centers;
  s.particle_object.assign(centers.size(), 0);
  s.pusher.kind = PusherKind::board;
  s.pusher.pose = Pose2D(kWorkspaceHalf - 0.06, kWorkspaceHalf - 0.01, 0.0);
  return s;
}

WorldState make_cubes(const std::vector<Pose2D>& poses) {
  WorldState s;
  s.material = Material::cubes(static_cast<int>(poses.size()));
  s.material.validate();
  for (std::size_t c = 0; c < poses.size(); ++c)
    for (const Vec2& o : cube_layout()) {
      s.particles.push_back(poses[c].apply(o));
      s.particle_object.push_back(static_cast<int>(c));
    }
  s.pusher.kind = PusherKind::board;
  s.pusher.pose = Pose2D(kWorkspaceHalf - 0.06, kWorkspaceHalf - 0.01, 0.0);
  return s;
}

WorldState make_t_block(const Pose2D& pose) {
  WorldState s;
  s.material = Material::t_block();
  s.block = pose;
  s.pusher.kind = PusherKind::cylinder;
  s.pusher.pose = Pose2D(kWorkspaceHalf - 0.01, kWorkspaceHalf - 0.01, 0.0);
  return s;
}

double max_granular_overlap(const WorldState& s) {
  double worst = 0.0;
  const double min_dist = 2.0 * s.material.radius;
  for (std::size_t i = 0; i < s.particles.size(); ++i) {
    worst = std::max(worst, pusher_penetration(s.pusher, s.material.radius, s.particles[i]));
    for (std::size_t j = i + 1; j < s.particles.size(); ++j)
      worst = std::max(worst, min_dist - (s.particles[i] - s.particles[j]).norm());
  }
  return worst;
}

double max_rope_strain(const WorldState& s) {
  const double rest = s.material.segment_rest_length();
  double worst = 0.0;
  for (std::size_t i = 0; i + 1 < s.particles.size(); ++i)
    worst = std::max(worst, std::abs((s.particles[i + 1] - s.particles[i]).norm() - rest) / rest);
  return worst;
}

void settle(WorldState& s) {
  switch (s.material.kind) {
    case MaterialKind::rope: {
      const double rest = s.material.segment_rest_length();
      for (int it = 0; it < 500 && max_rope_strain(s) > 0.005; ++it) {
        rope_stretch(s, rest);
        for (Vec2& p : s.particles) resolve_pusher_contact(s.pusher, kRopeRadius, p);
        clamp_particles(s, kRopeRadius);
      }
      break;
    }
    case MaterialKind::granular:
      for (int it = 0; it < 4000 && max_granular_overlap(s) > 0.5 * kOverlapTolerance; ++it)
        granular_iteration(s);
      break;
    case MaterialKind::cubes:
      for (int it = 0; it < 2000 && max_cube_overlap(s) > 0.5 * kOverlapTolerance; ++it)
        cubes_iteration(s);
      break;
    case MaterialKind::t_block:
      break;
  }
}

StepResult step(const WorldState& state, const PushAction& action, double frame_stride) {
  action.validate();
  StepResult result;
  WorldState s = state;
  const Vec2 dir = action.direction();
  s.pusher.pose = pusher_pose_for(s.pusher.kind, action.start(), action.angle);

  // Lowering the pusher onto the table resolves any initial overlap.
  if (s.material.kind == MaterialKind::t_block) {
    block_substep(s, Vec2::Zero());
  } else {
    particle_substep(s);
  }

  const int substeps = static_cast<int>(std::ceil(action.length / kSubstep - 1e-9));
  double travelled = 0.0;
  double next_frame = frame_stride > 0.0 ? frame_stride : std::numeric_limits<double>::infinity();
  for (int k = 0; k < substeps; ++k) {
    const double delta = std::min(kSubstep, action.length - travelled);
    travelled = std::min(action.length, travelled + delta);
    const Vec2 move = delta * dir;
    const Vec2 c = s.pusher.pose.translation() + move;
    s.pusher.pose = Pose2D(c.x(), c.y(), s.pusher.pose.theta());
    if (s.material.kind == MaterialKind::t_block) {
      block_substep(s, move);
    } else {
      particle_substep(s);
    }
    if (travelled >= next_frame - 1e-12 && k + 1 < substeps) {
      WorldState snapshot = s;
      settle(snapshot);
      result.frames.push_back(std::move(snapshot));
      next_frame += frame_stride;
    }
  }
  settle(s);
  result.frames.push_back(s);
  result.state = std::move(s);
  return result;
}

// ----- data generation -----

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double gaussian(Rng& rng, double sigma) {
  return std::normal_distribution<double>(0.0, sigma)(rng);
}

std::vector<Vec2> random_rope_centerline(Rng& rng, int count, double spacing) {
  const double amplitude = uniform(rng, 0.0, 0.12);
  const double freq = uniform(rng, 0.5, 1.5);
  const double phase = uniform(rng, 0.0, 2 * kPi);
  std::vector<Vec2> pts{Vec2::Zero()};
  double heading = 0.0;
  for (int i = 1; i < count; ++i) {
    heading += amplitude * std::sin(2 * kPi * freq * i / count + phase);
    pts.push_back(pts.back() + spacing * Vec2(std::cos(heading), std::sin(heading)));
  }
  Vec2 c = Vec2::Zero();
  for (const Vec2& p : pts) c += p;
  c /= count;
  const Pose2D place(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), uniform(rng, -kPi, kPi));
  for (Vec2& p : pts) p = place.apply(p - c);
  return pts;
}

PushAction clamp_action(PushAction a) {
  const double lim = kWorkspaceHalf - 0.01;
  a.start_x = std::clamp(a.start_x, -lim, lim);
  a.start_y = std::clamp(a.start_y, -lim, lim);
  a.angle = normalize_angle(a.angle);
  a.length = std::clamp(a.length, 1e-4, kMaxPushLength);
  return a;
}

PushAction random_particle_push(Rng& rng, const WorldState& s, double back_min, double back_max,
                                double lateral) {
  const std::size_t j = std::uniform_int_distribution<std::size_t>(0, s.particles.size() - 1)(rng);
  const double angle = uniform(rng, -kPi, kPi);
  const Vec2 dir(std::cos(angle), std::sin(angle));
  const Vec2 perp(-dir.y(), dir.x());
  const Vec2 start = s.particles[j] - uniform(rng, back_min, back_max) * dir +
                     uniform(rng, -lateral, lateral) * perp;
  return clamp_action({start.x(), start.y(), angle, uniform(rng, 0.05, kMaxPushLength)});
}

bool pusher_clear_of_block(const Pose2D& block, const Vec2& p) {
  return TBlockGeometry::signed_distance(block.inverse().apply(p)) > Pusher::kCylinderRadius + 0.001;
}

}  // namespace

WorldState random_scene(const Material& material, std::uint64_t seed,
                        const EpisodeOptions& options) {
  Rng rng(seed);
  Material m = material;
  switch (m.kind) {
    case MaterialKind::rope: {
      if (options.randomize_params) {
        m = Material::rope(uniform(rng, options.rope_length_min, options.rope_length_max),
                           uniform(rng, options.rope_stiffness_min, options.rope_stiffness_max));
      }
      m.validate();
      return make_rope(m.length, m.stiffness,
                       random_rope_centerline(rng, m.count, m.segment_rest_length()));
    }
    case MaterialKind::granular: {
      if (options.randomize_params)
        m.radius = uniform(rng, options.granular_radius_min, options.granular_radius_max);
      m.validate();
      const Vec2 c(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1));
      const double sigma = m.radius * std::sqrt(static_cast<double>(m.count)) * 0.8;
      std::vector<Vec2> pts;
      for (int i = 0; i < m.count; ++i) pts.push_back(c + Vec2(gaussian(rng, sigma), gaussian(rng, sigma)));
      WorldState s = make_granular(pts, m.radius);
      settle(s);
      return s;
    }
    case MaterialKind::cubes: {
      m.validate();
      std::vector<Pose2D> poses;
      while (static_cast<int>(poses.size()) < m.count) {
        const Pose2D p(uniform(rng, -0.12, 0.12), uniform(rng, -0.12, 0.12), uniform(rng, -kPi, kPi));
        bool ok = true;
        for (const Pose2D& q : poses) ok = ok && (p.translation() - q.translation()).norm() > 0.05;
        if (ok) poses.push_back(p);
      }
      return make_cubes(poses);
    }
    case MaterialKind::t_block:
      return make_t_block(Pose2D(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), uniform(rng, -kPi, kPi)));
  }
  throw Error("unknown material");
}

std::vector<Point3> frame_points(const WorldState& state) {
  const double z = state.material.surface_z();
  std::vector<Point3> out;
  if (state.material.kind == MaterialKind::t_block) {
    for (const Vec2& k : TBlockGeometry::keypoints()) {
      const Vec2 w = state.block.apply(k);
      out.push_back({w.x(), w.y(), z});
    }
    return out;
  }
  for (const Vec2& p : state.particles) out.push_back({p.x(), p.y(), z});
  return out;
}

Episode generate_episode(const Material& material, int n_interactions, std::uint64_t seed,
                         const EpisodeOptions& options) {
  if (n_interactions < 1) throw Error("n_interactions must be at least 1");
  material.validate();
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  WorldState s = random_scene(material, seed, options);
  Episode ep;
  ep.material = s.material;
  ep.pusher = s.pusher.kind;
  ep.seed = seed;
  ep.frames.push_back(frame_points(s));

  auto record = [&](const PushAction& push) {
    ep.interaction_starts.push_back(ep.actions.size());
    const int segments = std::max(1, static_cast<int>(std::ceil(push.length / options.segment_length - 1e-9)));
    double done = 0.0;
    for (int k = 0; k < segments; ++k) {
      const double len = std::min(options.segment_length, push.length - done);
      const Vec2 start = push.start() + done * push.direction();
      PushAction seg{start.x(), start.y(), push.angle, len};
      if (!seg.valid()) break;
      s = step(s, seg).state;
      ep.actions.push_back(seg);
      ep.frames.push_back(frame_points(s));
      done += len;
    }
  };

  if (s.material.kind == MaterialKind::t_block) {
    // Random-walk teleoperation: short pushes that mostly continue from where
    // the pusher stopped, with occasional relocation next to the block.
    Vec2 pusher = Vec2::Zero();
    double heading = 0.0;
    bool placed = false;
    for (int i = 0; i < n_interactions; ++i) {
      const bool relocate = !placed || uniform(rng, 0.0, 1.0) < 0.25 ||
                            std::abs(pusher.x()) > kWorkspaceHalf - 0.02 ||
                            std::abs(pusher.y()) > kWorkspaceHalf - 0.02;
      if (relocate) {
        const auto& samples = TBlockGeometry::samples();
        for (int attempt = 0; attempt < 100; ++attempt) {
          const Vec2 local = samples[std::uniform_int_distribution<std::size_t>(0, samples.size() - 1)(rng)];
          Vec2 n_local;
          TBlockGeometry::signed_distance(local, &n_local);
          const Vec2 n = s.block.rotate(n_local);
          const Vec2 p = s.block.apply(local) + uniform(rng, 0.008, 0.03) * n;
          if (!pusher_clear_of_block(s.block, p)) continue;
          pusher = p;
          heading = std::atan2(-n.y(), -n.x()) + gaussian(rng, 0.5);
          if (s.block.translation().norm() > 0.2) {
            // Drift back toward the middle of the table.
            const Vec2 to_center = -s.block.translation();
            heading = std::atan2(to_center.y(), to_center.x()) + gaussian(rng, 0.4);
            const Vec2 behind = s.block.translation() - 0.09 * to_center.normalized();
            if (pusher_clear_of_block(s.block, behind)) pusher = behind;
          }
          break;
        }
        placed = true;
      } else {
        heading += gaussian(rng, 0.3);
      }
      PushAction push = clamp_action({pusher.x(), pusher.y(), heading,
                                      uniform(rng, 0.005, options.segment_length)});
      pusher = push.start();
      record(push);
      pusher = s.pusher.pose.translation();
    }
  } else {
    const bool board = s.pusher.kind == PusherKind::board;
    for (int i = 0; i < n_interactions; ++i) {
      const PushAction push = board ? random_particle_push(rng, s, 0.03, 0.10, 0.05)
                                    : random_particle_push(rng, s, 0.02, 0.08, 0.05);
      record(push);
    }
  }
  return ep;
}

nlohmann::json Episode::to_json() const {
  nlohmann::json mj = material.to_json();
  mj["pusher"] = to_string(pusher);
  nlohmann::json frames_j = nlohmann::json::array();
  for (const auto& f : frames) {
    nlohmann::json fj = nlohmann::json::array();
    for (const Point3& p : f) fj.push_back({p.x, p.y, p.z});
    frames_j.push_back(std::move(fj));
  }
  nlohmann::json actions_j = nlohmann::json::array();
  for (const PushAction& a : actions) actions_j.push_back({a.start_x, a.start_y, a.angle, a.length});
  return {{"material", mj},
          {"frames", frames_j},
          {"actions", actions_j},
          {"interaction_starts", interaction_starts},
          {"seed", seed}};
}

Episode Episode::from_json(const nlohmann::json& j) {
  Episode ep;
  ep.material = Material::from_json(j.at("material"));
  ep.pusher = j.at("material").contains("pusher")
                  ? pusher_kind_from_string(j.at("material").at("pusher").get<std::string>())
                  : Pusher::default_for(ep.material.kind);
  for (const auto& fj : j.at("frames")) {
    std::vector<Point3> f;
    for (const auto& pj : fj) f.push_back({pj.at(0).get<double>(), pj.at(1).get<double>(), pj.at(2).get<double>()});
    ep.frames.push_back(std::move(f));
  }
  for (const auto& aj : j.at("actions"))
    ep.actions.push_back({aj.at(0).get<double>(), aj.at(1).get<double>(), aj.at(2).get<double>(),
                          aj.at(3).get<double>()});
  if (j.contains("interaction_starts")) {
    ep.interaction_starts = j.at("interaction_starts").get<std::vector<std::size_t>>();
  } else {
    for (std::size_t i = 0; i < ep.actions.size(); ++i) ep.interaction_starts.push_back(i);
  }
  ep.seed = j.value("seed", std::uint64_t{0});
  if (ep.frames.size() != ep.actions.size() + 1) throw Error("episode frame/action count mismatch");
  return ep;
}

void write_episodes(const std::vector<Episode>& episodes, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const Episode& ep : episodes) out << ep.to_json().dump() << '\n';
}

std::vector<Episode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(Episode::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// ----- rendering -----

namespace {

constexpr Rgb kTable{236, 232, 222};
constexpr Rgb kRopeColor{40, 90, 200};
constexpr Rgb kBeanColor{110, 70, 40};
constexpr Rgb kTColor{240, 130, 30};
constexpr std::array<Rgb, 6> kCubeColors{{{230, 200, 30}, {40, 160, 60}, {130, 60, 170},
                                          {30, 170, 190}, {200, 90, 150}, {90, 90, 90}}};

template <typename Paint>
void rasterize_objects(const WorldState& s, const Camera& cam, Paint&& paint) {
  const double ppm = 1.0 / cam.meters_per_pixel();
  switch (s.material.kind) {
    case MaterialKind::rope:
      for (std::size_t i = 0; i < s.particles.size(); ++i) {
        const Vec2 a = cam.to_pixel(s.particles[i]);
        paint.circle(0, a, kRopeRadius * ppm);
        if (i + 1 < s.particles.size()) paint.line(0, a, cam.to_pixel(s.particles[i + 1]), kRopeRadius * ppm);
      }
      break;
    case MaterialKind::granular:
      for (const Vec2& p : s.particles) paint.circle(0, cam.to_pixel(p), s.material.radius * ppm);
      break;
    case MaterialKind::cubes:
      for (int c = 0; c < s.object_count(); ++c) {
        const Pose2D pose = s.cube_pose(c);
        const double h = kCubeSide / 2;
        std::array<Vec2, 4> poly{cam.to_pixel(pose.apply({-h, -h})), cam.to_pixel(pose.apply({h, -h})),
                                 cam.to_pixel(pose.apply({h, h})), cam.to_pixel(pose.apply({-h, h}))};
        paint.polygon(c, poly);
      }
      break;
    case MaterialKind::t_block:
      for (const auto& rect : TBlockGeometry::rectangles()) {
        std::array<Vec2, 4> poly;
        for (int i = 0; i < 4; ++i) poly[i] = cam.to_pixel(s.block.apply(rect[i]));
        paint.polygon(0, poly);
      }
      break;
  }
}

Rgb object_color(const WorldState& s, int id) {
  switch (s.material.kind) {
    case MaterialKind::rope: return kRopeColor;
    case MaterialKind::granular: return kBeanColor;
    case MaterialKind::cubes: return kCubeColors[id % kCubeColors.size()];
    case MaterialKind::t_block: return kTColor;
  }
  return {};
}

struct ColorPainter {
  Image& img;
  const WorldState& s;
  void circle(int id, const Vec2& c, double r) { fill_circle(img, c.x(), c.y(), r, object_color(s, id)); }
  void line(int id, const Vec2& a, const Vec2& b, double hw) {
    draw_line(img, a.x(), a.y(), b.x(), b.y(), hw, object_color(s, id));
  }
  void polygon(int id, std::span<const Vec2> poly) { fill_convex_polygon(img, poly, object_color(s, id)); }
};

// Encodes object id + 1 in the red/green channels.
struct IdPainter {
  Image& img;
  static Rgb code(int id) {
    return {static_cast<std::uint8_t>((id + 1) & 0xff), static_cast<std::uint8_t>(((id + 1) >> 8) & 0xff), 0};
  }
  void circle(int id, const Vec2& c, double r) { fill_circle(img, c.x(), c.y(), r, code(id)); }
  void line(int id, const Vec2& a, const Vec2& b, double hw) { draw_line(img, a.x(), a.y(), b.x(), b.y(), hw, code(id)); }
  void polygon(int id, std::span<const Vec2> poly) { fill_convex_polygon(img, poly, code(id)); }
};

void draw_marker(Image& img, const Camera& cam, const Marker& m) {
  const double ppm = 1.0 / cam.meters_per_pixel();
  const Pose2D pose(m.center.x(), m.center.y(), m.rotation);
  const double h = m.size / 2;
  const double hw = 0.003 * ppm;
  auto seg = [&](Vec2 a, Vec2 b) {
    const Vec2 pa = cam.to_pixel(pose.apply(a));
    const Vec2 pb = cam.to_pixel(pose.apply(b));
    draw_line(img, pa.x(), pa.y(), pb.x(), pb.y(), hw, m.color);
  };
  if (m.shape == MarkerShape::cross) {
    seg({-h, 0}, {h, 0});
    seg({0, -h}, {0, h});
  } else {
    seg({-h, -h}, {h, -h});
    seg({h, -h}, {h, h});
    seg({h, h}, {-h, h});
    seg({-h, h}, {-h, -h});
  }
}

}  // namespace

Image render_topdown(const WorldState& state, int resolution) {
  if (resolution < 64) throw Error("resolution must be at least 64");
  const Camera cam{resolution};
  Image img(resolution, resolution, kTable);
  for (const Marker& m : state.markers) draw_marker(img, cam, m);
  ColorPainter painter{img, state};
  rasterize_objects(state, cam, painter);
  return img;
}

std::size_t ObjectMask::pixel_count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<ObjectMask> ground_truth_masks(const WorldState& state, int resolution) {
  if (resolution < 64) throw Error("resolution must be at least 64");
  const Camera cam{resolution};
  Image ids(resolution, resolution, Rgb{0, 0, 0});
  IdPainter painter{ids};
  rasterize_objects(state, cam, painter);
  const int n = state.object_count();
  std::vector<ObjectMask> masks(n);
  for (int id = 0; id < n; ++id) {
    masks[id].object_id = id;
    masks[id].width = resolution;
    masks[id].height = resolution;
    masks[id].bits.assign(static_cast<std::size_t>(resolution) * resolution, 0);
    masks[id].surface_z = state.material.surface_z();
  }
  for (int v = 0; v < resolution; ++v)
    for (int u = 0; u < resolution; ++u) {
      const Rgb c = ids.at(u, v);
      const int id = (c.r | (c.g << 8)) - 1;
      if (id >= 0 && id < n) masks[id].bits[static_cast<std::size_t>(v) * resolution + u] = 1;
    }
  std::erase_if(masks, [](const ObjectMask& m) { return m.pixel_count() == 0; });
  return masks;
}

PointCloud object_point_cloud(const WorldState& state) {
  PointCloud cloud;
  const double z = state.material.surface_z();
  if (state.material.kind == MaterialKind::t_block) {
    const auto& samples = TBlockGeometry::samples();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Vec2 w = state.block.apply(samples[i]);
      cloud.add({w.x(), w.y(), z}, 0, static_cast<int>(i));
    }
    return cloud;
  }
  for (std::size_t i = 0; i < state.particles.size(); ++i) {
    const Vec2& p = state.particles[i];
    cloud.add({p.x(), p.y(), z}, state.particle_object[i], static_cast<int>(i));
  }
  return cloud;
}

std::vector<Point3> track_sources(const WorldState& state, const std::vector<int>& source_ids) {
  const PointCloud cloud = object_point_cloud(state);
  std::vector<Point3> out;
  out.reserve(source_ids.size());
  for (int id : source_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cloud.size()) throw Error("unknown source id");
    out.push_back(cloud.points[id]);
  }
  return out;
}

}  // namespace keydyn::sim
