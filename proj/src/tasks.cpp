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

#include "keydyn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace keydyn::tasks {

using sim::MaterialKind;
using sim::WorldState;

namespace {

constexpr std::array<std::pair<TaskKind, const char*>, 6> kNames{{
    {TaskKind::rope_straighten, "rope_straighten"},
    {TaskKind::cube_collect, "cube_collect"},
    {TaskKind::cube_move, "cube_move"},
    {TaskKind::granular_collect, "granular_collect"},
    {TaskKind::granular_move, "granular_move"},
    {TaskKind::t_move, "t_move"},
}};

constexpr Rgb kPink{255, 150, 200};
constexpr Rgb kRed{220, 30, 30};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::vector<Point3> lift(std::span<const Vec2> pts, double z) {
  std::vector<Point3> out;
  out.reserve(pts.size());
  for (const Vec2& p : pts) out.push_back({p.x(), p.y(), z});
  return out;
}

std::vector<Vec2> cube_points(const Vec2& c) {
  std::vector<Vec2> out;
  for (int j = -1; j <= 1; ++j)
    for (int i = -1; i <= 1; ++i) out.push_back(c + Vec2(0.01 * i, 0.01 * j));
  return out;
}

/// `n` hex-packed disk centers of radius r, nearest to `c` first.
std::vector<Vec2> packed_disk(const Vec2& c, int n, double r) {
  std::vector<Vec2> cand;
  const int span = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))) + 2;
  const double dx = 2 * r, dy = std::sqrt(3.0) * r;
  for (int j = -span; j <= span; ++j)
    for (int i = -span; i <= span; ++i) cand.push_back(c + Vec2(dx * i + (j & 1 ? r : 0.0), dy * j));
  std::stable_sort(cand.begin(), cand.end(),
                   [&](const Vec2& a, const Vec2& b) { return (a - c).squaredNorm() < (b - c).squaredNorm(); });
  cand.resize(static_cast<std::size_t>(n));
  return cand;
}

std::vector<Vec2> rope_centerline(std::mt19937_64& rng, int count, double spacing) {
  const double amplitude = uniform(rng, 0.07, 0.14);
  const double freq = uniform(rng, 0.6, 1.2);
  const double phase = uniform(rng, 0.0, 2 * M_PI);
  std::vector<Vec2> pts{Vec2::Zero()};
  double heading = 0.0;
  for (int i = 1; i < count; ++i) {
    heading += amplitude * std::sin(2 * M_PI * freq * i / count + phase);
    pts.push_back(pts.back() + spacing * Vec2(std::cos(heading), std::sin(heading)));
  }
  Vec2 c = Vec2::Zero();
  for (const Vec2& p : pts) c += p;
  c /= count;
  const Vec2 chord = pts.back() - pts.front();
  const double tilt = uniform(rng, -0.5, 0.5) - std::atan2(chord.y(), chord.x());
  const Pose2D place(uniform(rng, -0.04, 0.04), uniform(rng, -0.04, 0.04), tilt);
  for (Vec2& p : pts) p = place.apply(p - c);
  return pts;
}

sim::Marker marker(sim::MarkerShape shape, const Vec2& c, double rotation, Rgb color, double size) {
  sim::Marker m;
  m.shape = shape;
  m.center = c;
  m.rotation = rotation;
  m.color = color;
  m.size = size;
  return m;
}

std::vector<Pose2D> spaced_cubes(std::mt19937_64& rng, int count, const Vec2& avoid) {
  std::vector<Pose2D> poses;
  while (static_cast<int>(poses.size()) < count) {
    const Pose2D p(uniform(rng, -0.12, 0.12), uniform(rng, -0.12, 0.12), uniform(rng, -M_PI, M_PI));
    bool ok = (p.translation() - avoid).norm() > 0.08;
    for (const Pose2D& q : poses) ok = ok && (p.translation() - q.translation()).norm() > 0.05;
    if (ok) poses.push_back(p);
  }
  return poses;
}

std::vector<Vec2> gaussian_cluster(std::mt19937_64& rng, const Vec2& c, int n, double sigma) {
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<Vec2> out;
  for (int i = 0; i < n; ++i) out.push_back(c + Vec2(g(rng), g(rng)));
  return out;
}

}  // namespace

std::string to_string(TaskKind kind) {
  for (const auto& [k, n] : kNames)
    if (k == kind) return n;
  throw Error("unknown task");
}

TaskKind task_from_string(const std::string& name) {
  for (const auto& [k, n] : kNames)
    if (name == n) return k;
  throw Error("unknown task: " + name);
}

std::vector<TaskKind> all_tasks() {
  std::vector<TaskKind> out;
  for (const auto& kv : kNames) out.push_back(kv.first);
  return out;
}

std::string default_instruction(TaskKind kind) {
  switch (kind) {
    case TaskKind::rope_straighten: return "Straighten the rope.";
    case TaskKind::cube_collect: return "Move all the cubes to the pink cross.";
    case TaskKind::cube_move: return "Move the yellow cube to the red cross.";
    case TaskKind::granular_collect: return "Collect all the coffee beans together.";
    case TaskKind::granular_move: return "Move all the coffee beans to the red cross.";
    case TaskKind::t_move: return "Move the orange T into the pink square.";
  }
  throw Error("unknown task");
}

MaterialKind material_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::rope_straighten: return MaterialKind::rope;
    case TaskKind::cube_collect:
    case TaskKind::cube_move: return MaterialKind::cubes;
    case TaskKind::granular_collect:
    case TaskKind::granular_move: return MaterialKind::granular;
    case TaskKind::t_move: return MaterialKind::t_block;
  }
  throw Error("unknown task");
}

nlohmann::json SceneOptions::to_json() const {
  return {{"rope_length", rope_length},       {"rope_stiffness", rope_stiffness},
          {"cube_count", cube_count},         {"granular_count", granular_count},
          {"granular_radius", granular_radius}, {"satellite_fraction", satellite_fraction}};
}

SceneOptions SceneOptions::from_json(const nlohmann::json& j) {
  SceneOptions o;
  o.rope_length = j.value("rope_length", o.rope_length);
  o.rope_stiffness = j.value("rope_stiffness", o.rope_stiffness);
  o.cube_count = j.value("cube_count", o.cube_count);
  o.granular_count = j.value("granular_count", o.granular_count);
  o.granular_radius = j.value("granular_radius", o.granular_radius);
  o.satellite_fraction = j.value("satellite_fraction", o.satellite_fraction);
  return o;
}

namespace {

WorldState sample_scene(TaskKind kind, std::mt19937_64& rng, const SceneOptions& o) {
  switch (kind) {
    case TaskKind::rope_straighten: {
      const sim::Material m = sim::Material::rope(o.rope_length, o.rope_stiffness);
      return sim::make_rope(m.length, m.stiffness, rope_centerline(rng, m.count, m.segment_rest_length()));
    }
    case TaskKind::cube_collect:
    case TaskKind::cube_move: {
      const Vec2 goal(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1));
      WorldState s = sim::make_cubes(spaced_cubes(rng, o.cube_count, goal));
      const bool collect = kind == TaskKind::cube_collect;
      s.markers.push_back(marker(sim::MarkerShape::cross, goal, 0.0, collect ? kPink : kRed, 0.05));
      return s;
    }
    case TaskKind::granular_collect: {
      const int n_sat = static_cast<int>(std::lround(o.satellite_fraction * o.granular_count));
      const int n_main = o.granular_count - n_sat;
      const Vec2 c(uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05));
      const double sigma = o.granular_radius * 0.8;
      auto pts = gaussian_cluster(rng, c, n_main, sigma * std::sqrt(static_cast<double>(n_main)));
      // Three satellite clusters roughly 120 degrees apart around the main pile.
      const double a0 = uniform(rng, -M_PI, M_PI);
      for (int k = 0; k < 3; ++k) {
        const int n = n_sat / 3 + (k < n_sat % 3 ? 1 : 0);
        const double a = a0 + k * 2.0 * M_PI / 3.0 + uniform(rng, -0.3, 0.3);
        const Vec2 sc = c + uniform(rng, 0.20, 0.24) * Vec2(std::cos(a), std::sin(a));
        auto sp = gaussian_cluster(rng, sc, n, sigma * std::sqrt(static_cast<double>(std::max(n, 1))));
        pts.insert(pts.end(), sp.begin(), sp.end());
      }
      WorldState s = sim::make_granular(pts, o.granular_radius);
      sim::settle(s);
      return s;
    }
    case TaskKind::granular_move: {
      const Vec2 c(uniform(rng, -0.08, 0.08), uniform(rng, -0.08, 0.08));
      const double a = uniform(rng, -M_PI, M_PI);
      const Vec2 goal = c + uniform(rng, 0.12, 0.18) * Vec2(std::cos(a), std::sin(a));
      const double sigma = o.granular_radius * 0.8 * std::sqrt(static_cast<double>(o.granular_count));
      WorldState s = sim::make_granular(gaussian_cluster(rng, c, o.granular_count, sigma), o.granular_radius);
      sim::settle(s);
      s.markers.push_back(marker(sim::MarkerShape::cross, goal, 0.0, kRed, 0.05));
      return s;
    }
    case TaskKind::t_move: {
      const Pose2D goal(uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, -M_PI, M_PI));
      const double a = uniform(rng, -M_PI, M_PI);
      const Vec2 start = goal.translation() + uniform(rng, 0.08, 0.14) * Vec2(std::cos(a), std::sin(a));
      const Pose2D pose(start.x(), start.y(), goal.theta() + uniform(rng, -M_PI / 3, M_PI / 3));
      WorldState s = sim::make_t_block(pose);
      s.markers.push_back(marker(sim::MarkerShape::square, goal.translation(), goal.theta(), kPink, 0.12));
      return s;
    }
  }
  throw Error("unknown task");
}

}  // namespace

WorldState make_scene(TaskKind kind, std::uint64_t seed, const SceneOptions& o) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(kind) + 1);
  // Redraw scenes that would start out (nearly) solved.
  for (int attempt = 0;; ++attempt) {
    WorldState s = sample_scene(kind, rng, o);
    if (attempt == 19 || task_chamfer(kind, s) >= kMinStartChamfer) return s;
  }
}

Vec2 granular_gather_center(const WorldState& s) {
  if (s.particles.empty()) throw Error("no particles");
  std::vector<double> xs, ys;
  for (const Vec2& p : s.particles) {
    xs.push_back(p.x());
    ys.push_back(p.y());
  }
  const auto mid = xs.size() / 2;
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
  std::nth_element(ys.begin(), ys.begin() + static_cast<std::ptrdiff_t>(mid), ys.end());
  return {xs[mid], ys[mid]};
}

Pose2D t_goal_pose(const WorldState& s) {
  if (s.markers.empty()) throw Error("t_move scene has no goal marker");
  return {s.markers[0].center.x(), s.markers[0].center.y(), s.markers[0].rotation};
}

std::vector<Vec2> collect_slots(const Vec2& goal, int count) {
  const double pitch = 0.035;
  std::vector<Vec2> slots;
  if (count <= 4) {
    // A 2x2 block centered on the goal.
    const double h = pitch / 2;
    slots = {goal + Vec2(-h, -h), goal + Vec2(h, -h), goal + Vec2(-h, h), goal + Vec2(h, h)};
  } else {
    for (int j = -2; j <= 2; ++j)
      for (int i = -2; i <= 2; ++i) slots.push_back(goal + Vec2(pitch * i, pitch * j));
    std::stable_sort(slots.begin(), slots.end(), [&](const Vec2& a, const Vec2& b) {
      return (a - goal).squaredNorm() < (b - goal).squaredNorm() - 1e-12;
    });
  }
  slots.resize(static_cast<std::size_t>(std::min<int>(count, static_cast<int>(slots.size()))));
  return slots;
}

std::vector<Vec2> evaluated_points(TaskKind kind, const WorldState& s) {
  if (sim::MaterialKind mk = material_for(kind); mk != s.material.kind)
    throw Error("scene material does not match task " + to_string(kind));
  if (kind == TaskKind::t_move) {
    std::vector<Vec2> out;
    for (const Vec2& p : sim::TBlockGeometry::samples()) out.push_back(s.block.apply(p));
    return out;
  }
  if (kind == TaskKind::cube_move) {
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < s.particles.size(); ++i)
      if (s.particle_object[i] == 0) out.push_back(s.particles[i]);
    return out;
  }
  return s.particles;
}

std::vector<Vec2> evaluation_target(TaskKind kind, const WorldState& s) {
  switch (kind) {
    case TaskKind::rope_straighten: {
      const int n = static_cast<int>(s.particles.size());
      const double spacing = s.material.segment_rest_length();
      std::vector<Vec2> out;
      for (int i = 0; i < n; ++i) out.emplace_back(-0.5 * spacing * (n - 1) + spacing * i, 0.0);
      return out;
    }
    case TaskKind::cube_collect: {
      std::vector<Vec2> out;
      for (const Vec2& c : collect_slots(s.markers.at(0).center, s.material.count)) {
        const auto pts = cube_points(c);
        out.insert(out.end(), pts.begin(), pts.end());
      }
      return out;
    }
    case TaskKind::cube_move:
      return cube_points(s.markers.at(0).center);
    case TaskKind::granular_collect:
      return packed_disk(granular_gather_center(s), static_cast<int>(s.particles.size()), s.material.radius);
    case TaskKind::granular_move:
      return packed_disk(s.markers.at(0).center, static_cast<int>(s.particles.size()), s.material.radius);
    case TaskKind::t_move: {
      const Pose2D goal = t_goal_pose(s);
      std::vector<Vec2> out;
      for (const Vec2& p : sim::TBlockGeometry::samples()) out.push_back(goal.apply(p));
      return out;
    }
  }
  throw Error("unknown task");
}

double task_chamfer(TaskKind kind, const WorldState& s) {
  const double z = s.material.surface_z();
  return chamfer_distance(lift(evaluated_points(kind, s), z), lift(evaluation_target(kind, s), z));
}

}  // namespace keydyn::tasks
