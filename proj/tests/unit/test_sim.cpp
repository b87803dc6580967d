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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "keydyn/sim.hpp"

using namespace keydyn;
using namespace keydyn::sim;

namespace {

std::vector<Vec2> straight_rope(int n, const Vec2& start, const Vec2& dir, double spacing = 0.01) {
  std::vector<Vec2> pts;
  for (int i = 0; i < n; ++i) pts.push_back(start + i * spacing * dir);
  return pts;
}

double hull_area(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a - o).x() * (b - o).y() - (a - o).y() * (b - o).x();
  };
  std::vector<Vec2> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  double a = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const Vec2& p = h[i];
    const Vec2& q = h[(i + 1) % h.size()];
    a += p.x() * q.y() - p.y() * q.x();
  }
  return 0.5 * std::abs(a);
}

std::vector<Vec2> t_keypoints(const WorldState& s) {
  std::vector<Vec2> out;
  for (const Vec2& k : TBlockGeometry::keypoints()) out.push_back(s.block.apply(k));
  return out;
}

}  // namespace

TEST_CASE("material validation") {
  CHECK_THROWS_AS(Material::rope(0.4, 0.0).validate(), Error);
  CHECK_THROWS_AS(Material::rope(0.4, 1.5).validate(), Error);
  CHECK_THROWS_AS(Material::granular(10, 0.0).validate(), Error);
  CHECK_THROWS_AS(Material::cubes(0).validate(), Error);
  CHECK_NOTHROW(Material::rope(0.4, 1.0).validate());
  CHECK(Material::rope(0.4, 0.7).count == 41);
  CHECK(Material::from_json(Material::granular(12, 0.005).to_json()).radius == 0.005);
}

TEST_CASE("action validation") {
  CHECK_THROWS_WITH(PushAction({0.5, 0.0, 0.0, 0.1}).validate(), "action out of workspace");
  CHECK_THROWS_AS(PushAction({0.0, 0.0, 0.0, 0.25}).validate(), Error);
  CHECK_THROWS_AS(PushAction({0.0, 0.0, 0.0, 0.0}).validate(), Error);
  const WorldState s = make_t_block(Pose2D());
  CHECK_THROWS_WITH(step(s, {0.0, -0.41, 0.0, 0.1}), "action out of workspace");
}

TEST_CASE("pusher particle counts") {
  CHECK(Pusher::particle_count(PusherKind::cylinder) == 1);
  CHECK(Pusher::particle_count(PusherKind::board) == 5);
  Pusher p{PusherKind::board, Pose2D(0.1, 0.0, 0.0)};
  CHECK(p.particles().size() == 5);
  CHECK((p.particles().front() - p.particles().back()).norm() == doctest::Approx(0.1));
}

TEST_CASE("push far from objects changes only the pusher") {
  const WorldState rope = make_rope(0.3, 0.8, straight_rope(31, {-0.15, 0.0}, {1, 0}));
  const auto r = step(rope, {-0.3, 0.3, 0.0, 0.2});
  CHECK(r.state.particles == rope.particles);
  CHECK((r.state.pusher.pose.translation() - Vec2(-0.1, 0.3)).norm() < 1e-12);

  const WorldState t = make_t_block(Pose2D(0.05, 0.0, 0.3));
  const auto rt = step(t, {-0.3, -0.3, 0.0, 0.2});
  CHECK(rt.state.block.x() == t.block.x());
  CHECK(rt.state.block.theta() == t.block.theta());

  const WorldState c = make_cubes({Pose2D(0.0, 0.0, 0.2), Pose2D(0.1, 0.0, 0.0)});
  CHECK(step(c, {-0.3, 0.3, 0.0, 0.2}).state.particles == c.particles);
}

TEST_CASE("symmetric T push barely rotates") {
  const WorldState t = make_t_block(Pose2D());
  const auto r = step(t, {0.0, -0.09, std::numbers::pi / 2, 0.1});
  CHECK(r.state.block.y() > 0.05);
  CHECK(std::abs(r.state.block.theta()) < 0.02);

  const WorldState t2 = make_t_block(Pose2D(0.05, 0.02, 0.7));
  const Vec2 dir = t2.block.rotate(Vec2(0.0, 1.0));
  const Vec2 start = t2.block.apply(Vec2(0.0, -0.075));
  const auto r2 = step(t2, {start.x(), start.y(), std::atan2(dir.y(), dir.x()), 0.15});
  CHECK(std::abs(normalize_angle(r2.state.block.theta() - 0.7)) < 0.02);
}

TEST_CASE("off-center T push rotates the block") {
  const WorldState t = make_t_block(Pose2D());
  const auto r = step(t, {0.05, 0.09, -std::numbers::pi / 2, 0.1});
  CHECK(std::abs(r.state.block.theta()) > 0.05);
  // Pusher never ends up inside the block.
  const Vec2 local = r.state.block.inverse().apply(r.state.pusher.pose.translation());
  CHECK(TBlockGeometry::signed_distance(local) >= Pusher::kCylinderRadius - 1e-6);
}

TEST_CASE("T keypoints stay rigid over a random rollout") {
  const Episode ep = generate_episode(Material::t_block(), 40, 3);
  std::vector<double> ref;
  const auto& f0 = ep.frames.front();
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) ref.push_back(distance(f0[i], f0[j]));
  bool moved = false;
  for (const auto& f : ep.frames) {
    int k = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) CHECK(std::abs(distance(f[i], f[j]) - ref[k++]) < 1e-9);
    moved = moved || distance(f[0], f0[0]) > 0.01;
  }
  CHECK(moved);
}

TEST_CASE("rope stays within 5 percent of rest length after pushes") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Episode ep = generate_episode(Material::rope(0.4, 0.8), 5, seed);
    const double rest = ep.material.segment_rest_length();
    for (const auto& f : ep.frames)
      for (std::size_t i = 0; i + 1 < f.size(); ++i)
        CHECK(std::abs(distance(f[i], f[i + 1]) - rest) <= 0.05 * rest);
  }
  WorldState rope = make_rope(0.3, 0.6, straight_rope(31, {-0.15, 0.0}, {1, 0}));
  const auto r = step(rope, {0.0, -0.05, std::numbers::pi / 2, 0.15});
  CHECK(max_rope_strain(r.state) <= 0.05);
  CHECK(r.state.particles[15].y() > 0.05);
}

TEST_CASE("granular disks do not interpenetrate at frame boundaries") {
  WorldState s = random_scene(Material::granular(30, 0.006), 4);
  CHECK(max_granular_overlap(s) <= 1e-4);
  Vec2 c = Vec2::Zero();
  for (const Vec2& p : s.particles) c += p;
  c /= s.particles.size();
  const auto r = step(s, {c.x() - 0.1, c.y(), 0.0, 0.15}, 0.02);
  CHECK(r.frames.size() >= 7);
  for (const auto& f : r.frames) CHECK(max_granular_overlap(f) <= 1e-4);
  Vec2 c2 = Vec2::Zero();
  for (const Vec2& p : r.state.particles) c2 += p;
  CHECK((c2 / s.particles.size()).x() > c.x());
}

TEST_CASE("cubes get pushed and stay rigid") {
  const WorldState s = make_cubes({Pose2D(0.0, 0.0, 0.0), Pose2D(0.05, 0.0, 0.4)});
  const auto r = step(s, {-0.06, 0.0, 0.0, 0.12});
  CHECK(r.state.cube_pose(1).x() > 0.06);
  for (int c = 0; c < 2; ++c) {
    const Pose2D pose = r.state.cube_pose(c);
    for (int i = 0; i < 9; ++i) {
      const Vec2 local = pose.inverse().apply(r.state.particles[9 * c + i]);
      CHECK(std::abs(local.x()) <= 0.0100001);
      CHECK(std::abs(local.y()) <= 0.0100001);
    }
  }
}

TEST_CASE("step is deterministic") {
  const WorldState s = random_scene(Material::rope(0.4, 0.8), 9);
  const PushAction a{s.particles[10].x() - 0.03, s.particles[10].y(), 0.0, 0.1};
  const auto r1 = step(s, a), r2 = step(s, a);
  CHECK(r1.state.particles == r2.state.particles);
}

TEST_CASE("physics is translation equivariant") {
  const Vec2 t(0.07, -0.04);
  auto shifted_rope = [&](const Vec2& off) {
    return make_rope(0.3, 0.7, straight_rope(31, Vec2(-0.15, 0.0) + off, Vec2(1, 0)));
  };
  const auto a = step(shifted_rope(Vec2::Zero()), {0.0, -0.05, 1.4, 0.12});
  const auto b = step(shifted_rope(t), {t.x(), -0.05 + t.y(), 1.4, 0.12});
  for (std::size_t i = 0; i < a.state.particles.size(); ++i)
    CHECK((b.state.particles[i] - a.state.particles[i] - t).norm() < 1e-9);

  const auto ta = step(make_t_block(Pose2D(0.0, 0.0, 0.2)), {0.03, -0.1, 1.5, 0.12});
  const auto tb = step(make_t_block(Pose2D(t.x(), t.y(), 0.2)), {0.03 + t.x(), -0.1 + t.y(), 1.5, 0.12});
  CHECK(std::abs(tb.state.block.x() - ta.state.block.x() - t.x()) < 1e-9);
  CHECK(std::abs(tb.state.block.y() - ta.state.block.y() - t.y()) < 1e-9);
  CHECK(std::abs(tb.state.block.theta() - ta.state.block.theta()) < 1e-9);
}

TEST_CASE("episodes are deterministic and well formed") {
  const Episode a = generate_episode(Material::rope(0.4, 0.8), 5, 7);
  const Episode b = generate_episode(Material::rope(0.4, 0.8), 5, 7);
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.frames.size() == a.actions.size() + 1);
  CHECK(a.interaction_starts.size() == 5);
  const Episode c = Episode::from_json(nlohmann::json::parse(a.to_json().dump()));
  CHECK(c.to_json() == a.to_json());
}

TEST_CASE("t_block episode of 300 interactions") {
  const Episode ep = generate_episode(Material::t_block(), 300, 1);
  CHECK(ep.frames.size() == 301);
  for (const auto& f : ep.frames)
    for (const Point3& p : f) {
      CHECK(std::abs(p.x) <= kWorkspaceHalf);
      CHECK(std::abs(p.y) <= kWorkspaceHalf);
    }
}

TEST_CASE("granular radius randomization spans the interval") {
  const EpisodeOptions opts;
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double r = random_scene(Material::granular(5, 0.006), seed).material.radius;
    CHECK(r >= opts.granular_radius_min);
    CHECK(r <= opts.granular_radius_max);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  const double span = opts.granular_radius_max - opts.granular_radius_min;
  CHECK(lo < opts.granular_radius_min + 0.1 * span);
  CHECK(hi > opts.granular_radius_max - 0.1 * span);
}

TEST_CASE("rendering") {
  WorldState empty;
  empty.material = Material::cubes(1);
  const Image e = render_topdown(empty, 128);
  for (int v = 0; v < 128; ++v)
    for (int u = 0; u < 128; ++u) REQUIRE(e.at(u, v) == e.at(0, 0));
  CHECK(ground_truth_masks(empty, 128).empty());
  CHECK_THROWS_AS(render_topdown(empty, 32), Error);

  const WorldState cube = make_cubes({Pose2D()});
  const Image img = render_topdown(cube, 256);
  int umin = 1000, umax = -1, vmin = 1000, vmax = -1;
  for (int v = 0; v < 256; ++v)
    for (int u = 0; u < 256; ++u)
      if (!(img.at(u, v) == e.at(0, 0))) {
        umin = std::min(umin, u), umax = std::max(umax, u);
        vmin = std::min(vmin, v), vmax = std::max(vmax, v);
      }
  CHECK(umax - umin + 1 >= 9);
  CHECK(umax - umin + 1 <= 10);
  CHECK(vmax - vmin + 1 >= 9);
  CHECK(vmax - vmin + 1 <= 10);
  CHECK(std::abs(0.5 * (umin + umax + 1) - 128.0) <= 1.0);
  CHECK(std::abs(0.5 * (vmin + vmax + 1) - 128.0) <= 1.0);
  CHECK(render_topdown(cube, 256) == img);

  const auto masks = ground_truth_masks(cube, 256);
  REQUIRE(masks.size() == 1);
  const double expected = std::pow(kCubeSide * 256 / 0.8, 2);
  CHECK(std::abs(masks[0].pixel_count() - expected) <= 0.15 * expected);
}

TEST_CASE("y axis points to the image top") {
  const WorldState s = make_cubes({Pose2D(0.0, 0.2, 0.0)});
  const auto masks = ground_truth_masks(s, 256);
  REQUIRE(masks.size() == 1);
  CHECK(masks[0].at(128, 64));
  const Camera cam{256};
  CHECK((cam.to_world(cam.to_pixel(Vec2(0.13, -0.21))) - Vec2(0.13, -0.21)).norm() < 1e-12);
}

TEST_CASE("masks are disjoint and cover the rendered object pixels") {
  const WorldState s = make_cubes({Pose2D(-0.1, 0.0, 0.3), Pose2D(0.1, 0.05, 0.0)});
  const auto masks = ground_truth_masks(s, 256);
  REQUIRE(masks.size() == 2);
  WorldState none;
  none.material = Material::cubes(1);
  const Image bg = render_topdown(none, 256);
  const Image img = render_topdown(s, 256);
  for (int v = 0; v < 256; ++v)
    for (int u = 0; u < 256; ++u) {
      const int n = masks[0].at(u, v) + masks[1].at(u, v);
      CHECK(n <= 1);
      REQUIRE((n == 1) == !(img.at(u, v) == bg.at(u, v)));
    }
}

TEST_CASE("markers are drawn but are not objects") {
  WorldState s = make_t_block(Pose2D(-0.1, 0.0, 0.0));
  s.markers.push_back({MarkerShape::square, Vec2(0.15, 0.1), 0.12, 0.3});
  CHECK(ground_truth_masks(s, 256).size() == 1);
  const Image with = render_topdown(s, 256);
  s.markers.clear();
  CHECK(!(render_topdown(s, 256) == with));
}

TEST_CASE("object point clouds") {
  const WorldState rope = make_rope(0.19, 0.8, straight_rope(20, {0, 0}, {1, 0}));
  CHECK(object_point_cloud(rope).size() == 20);

  const PointCloud tc = object_point_cloud(make_t_block(Pose2D(0.05, 0.0, 0.4)));
  std::vector<Vec2> xy;
  for (const Point3& p : tc.points) xy.push_back(p.xy());
  // Convex hull of the T outline.
  const std::vector<Vec2> outline{{-0.06, 0.06}, {0.06, 0.06}, {0.06, 0.03}, {0.015, -0.06},
                                  {-0.015, -0.06}, {-0.06, 0.03}};
  const double expected = hull_area(outline);
  CHECK(std::abs(hull_area(xy) - expected) <= 0.1 * expected);

  const PointCloud cc = object_point_cloud(make_cubes({Pose2D(-0.1, 0, 0), Pose2D(0, 0, 0), Pose2D(0.1, 0, 0)}));
  CHECK(std::set<int>(cc.object_ids.begin(), cc.object_ids.end()).size() == 3);
}

TEST_CASE("tracking sources follows particles") {
  const WorldState s = make_rope(0.3, 0.8, straight_rope(31, {-0.15, 0.0}, {1, 0}));
  const auto r = step(s, {0.0, -0.05, std::numbers::pi / 2, 0.1});
  const auto tracked = track_sources(r.state, {0, 15, 30});
  CHECK(tracked[1].y == doctest::Approx(r.state.particles[15].y()));
  CHECK_THROWS_AS(track_sources(r.state, {99}), Error);
}

TEST_CASE("episode file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "keydyn_eps.jsonl";
  std::vector<Episode> eps{generate_episode(Material::cubes(3), 2, 1),
                           generate_episode(Material::granular(20, 0.005), 2, 2)};
  write_episodes(eps, path);
  const auto back = read_episodes(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].to_json() == eps[1].to_json());
  std::filesystem::remove(path);
}
