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

#include <cmath>
#include <numbers>
#include <random>

#include "keydyn/perception.hpp"
#include "keydyn/tracking.hpp"

using namespace keydyn;
using namespace keydyn::perception;

namespace {

sim::WorldState rope_scene(int n = 41) {
  std::vector<Vec2> pts;
  for (int i = 0; i < n; ++i) pts.push_back({-0.2 + 0.01 * i, 0.05 * std::sin(0.15 * i)});
  return sim::make_rope(0.01 * (n - 1), 0.8, pts);
}

AnnotatedImage annotate(const sim::WorldState& s, int res = 256, ProposalOptions opts = {}) {
  return propose_keypoints(sim::render_topdown(s, res), sim::ground_truth_masks(s, res), opts);
}

}  // namespace

TEST_CASE("no masks gives only the center reference") {
  const Image img(128, 128, Rgb{200, 200, 200});
  const AnnotatedImage a = propose_keypoints(img, {});
  CHECK(a.keypoints.empty());
  CHECK(a.center.is_reference());
  CHECK(a.center.world.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(a.center.world.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(a.image.at(64, 64) == Rgb{20, 180, 40});
}

TEST_CASE("tiny mask collapses to one keypoint") {
  sim::ObjectMask m{0, 128, 128, std::vector<std::uint8_t>(128 * 128, 0), 0.01};
  m.bits[60 * 128 + 60] = m.bits[60 * 128 + 61] = m.bits[61 * 128 + 60] = 1;
  const AnnotatedImage a = propose_keypoints(Image(128, 128), {m});
  REQUIRE(a.keypoints.size() == 1);
  CHECK(a.keypoints[0].index == 1);
  CHECK(a.keypoints[0].object_id == 0);
}

TEST_CASE("rope mask yields at most nine keypoints") {
  const AnnotatedImage a = annotate(rope_scene());
  CHECK(a.keypoints.size() >= 3);
  CHECK(a.keypoints.size() <= 9);
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) CHECK(a.keypoints[i].index == static_cast<int>(i) + 1);
}

TEST_CASE("kept keypoints respect the global radius in pixels") {
  for (int seed = 0; seed < 10; ++seed) {
    const sim::WorldState s = sim::random_scene(sim::Material::cubes(3), seed);
    const int res = 256;
    ProposalOptions opts;
    opts.global_radius = 0.03;
    const AnnotatedImage a = annotate(s, res, opts);
    const double min_px = opts.global_radius * res / 0.8;
    for (std::size_t i = 0; i < a.keypoints.size(); ++i)
      for (std::size_t j = i + 1; j < a.keypoints.size(); ++j)
        CHECK((a.keypoints[i].pixel - a.keypoints[j].pixel).norm() >= min_px - 1e-9);
  }
}

TEST_CASE("keypoints are deterministic and sit on their masks") {
  const sim::WorldState s = sim::random_scene(sim::Material::cubes(3), 2);
  const AnnotatedImage a = annotate(s), b = annotate(s);
  REQUIRE(a.keypoints.size() == b.keypoints.size());
  CHECK(a.image == b.image);
  const auto masks = sim::ground_truth_masks(s, 256);
  const sim::Camera cam{256};
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) {
    CHECK(a.keypoints[i].world == b.keypoints[i].world);
    const Keypoint& k = a.keypoints[i];
    const int u = static_cast<int>(k.pixel.x()), v = static_cast<int>(k.pixel.y());
    bool on = false;
    for (const auto& m : masks) on = on || (m.object_id == k.object_id && m.at(u, v));
    CHECK(on);
    const Vec2 back = cam.to_world(cam.to_pixel(k.world.xy()));
    CHECK((back - k.world.xy()).norm() <= cam.meters_per_pixel());
  }
}

TEST_CASE("masks are labeled in row-major centroid order") {
  const sim::WorldState s = sim::make_cubes({Pose2D(0.1, -0.2, 0), Pose2D(-0.1, 0.2, 0), Pose2D(0.15, 0.2, 0)});
  const AnnotatedImage a = annotate(s);
  REQUIRE(!a.keypoints.empty());
  CHECK(a.keypoints.front().object_id == 1);
  CHECK(a.keypoints.back().object_id == 0);
}

TEST_CASE("sidecar json") {
  const AnnotatedImage a = annotate(rope_scene());
  const auto j = a.sidecar();
  REQUIRE(j.size() == a.keypoints.size());
  CHECK(j[0]["index"] == 1);
  CHECK(j[0].contains("object_id"));
}

TEST_CASE("discard largest mask") {
  const sim::WorldState s = sim::make_cubes({Pose2D(0.1, -0.2, 0), Pose2D(-0.1, 0.2, 0)});
  auto masks = sim::ground_truth_masks(s, 128);
  sim::ObjectMask table{99, 128, 128, std::vector<std::uint8_t>(128 * 128, 1), 0.0};
  masks.push_back(table);
  const auto kept = discard_largest(masks);
  CHECK(kept.size() == 2);
  for (const auto& m : kept) CHECK(m.object_id != 99);
}

TEST_CASE("icp recovers T poses") {
  const PointCloud tmpl = t_template();
  const Pose2D id = estimate_t_pose(tmpl, tmpl);
  CHECK(std::abs(id.x()) < 1e-9);
  CHECK(std::abs(id.y()) < 1e-9);
  CHECK(std::abs(id.theta()) < 1e-9);

  const Pose2D truth(0.1, -0.05, 30.0 * std::numbers::pi / 180.0);
  PointCloud moved;
  for (const Point3& p : tmpl.points) {
    const Vec2 w = truth.apply(p.xy());
    moved.add({w.x(), w.y(), p.z}, 0);
  }
  const Pose2D est = estimate_t_pose(moved, tmpl);
  CHECK((est.translation() - truth.translation()).norm() < 1e-3);
  CHECK(std::abs(normalize_angle(est.theta() - truth.theta())) < 0.5 * std::numbers::pi / 180.0);

  PointCloud few;
  for (int i = 0; i < 9; ++i) few.add(tmpl.points[i], 0);
  CHECK_THROWS_WITH(estimate_t_pose(few, tmpl), "insufficient points");
}

TEST_CASE("icp under 1 mm noise") {
  const PointCloud tmpl = t_template();
  std::vector<double> pos_err, ang_err;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.2, 0.2), a(-std::numbers::pi, std::numbers::pi);
    std::normal_distribution<double> n(0.0, 0.001);
    const Pose2D truth(u(rng), u(rng), a(rng));
    PointCloud cloud;
    for (const Point3& p : tmpl.points) {
      const Vec2 w = truth.apply(p.xy());
      cloud.add({w.x() + n(rng), w.y() + n(rng), p.z}, 0);
    }
    const Pose2D est = estimate_t_pose(cloud, tmpl);
    pos_err.push_back((est.translation() - truth.translation()).norm());
    ang_err.push_back(std::abs(normalize_angle(est.theta() - truth.theta())));
  }
  std::sort(pos_err.begin(), pos_err.end());
  std::sort(ang_err.begin(), ang_err.end());
  CHECK(pos_err[94] < 0.005);
  CHECK(ang_err[94] < 2.0 * std::numbers::pi / 180.0);
}

TEST_CASE("icp residual does not increase for fixed correspondences") {
  // One closed-form fit can only lower the residual of the pairs it was fit on.
  const PointCloud tmpl = t_template();
  const Pose2D truth(0.02, 0.01, 0.3);
  std::vector<Vec2> from, to;
  for (const Point3& p : tmpl.points) {
    from.push_back(p.xy());
    to.push_back(truth.apply(p.xy()) + Vec2(0.001 * std::sin(p.x * 300), 0.0));
  }
  auto residual = [&](const Pose2D& pose) {
    double s = 0;
    for (std::size_t i = 0; i < from.size(); ++i) s += (pose.apply(from[i]) - to[i]).squaredNorm();
    return s;
  };
  const Pose2D fit = fit_rigid_transform(from, to);
  CHECK(residual(fit) <= residual(Pose2D(0.0, 0.0, 0.2)));
  CHECK(residual(fit) <= residual(truth));
}

TEST_CASE("T keypoints from pose") {
  const auto k = t_keypoints_from_pose(Pose2D());
  CHECK(k[0].xy().isApprox(Vec2(0, 0.06)));
  CHECK(k[1].xy().isApprox(Vec2(0.06, 0.06)));
  CHECK(k[2].xy().isApprox(Vec2(-0.06, 0.06)));
  CHECK(k[3].xy().isApprox(Vec2(0, -0.06)));
  const auto r = t_keypoints_from_pose(Pose2D(0, 0, std::numbers::pi));
  CHECK((r[1].xy() - k[2].xy().cwiseProduct(Vec2(1, -1))).norm() < 1e-12);
  CHECK((r[2].xy() - k[1].xy().cwiseProduct(Vec2(1, -1))).norm() < 1e-12);
  const auto t = t_keypoints_from_pose(Pose2D(0.1, -0.2, 0));
  for (int i = 0; i < 4; ++i) CHECK((t[i].xy() - k[i].xy() - Vec2(0.1, -0.2)).norm() < 1e-15);

  // Extremes of the rendered mask agree with the keypoints.
  const auto masks = sim::ground_truth_masks(sim::make_t_block(Pose2D()), 400);
  int vmin = 1000, vmax = -1, umin = 1000, umax = -1;
  for (int v = 0; v < 400; ++v)
    for (int u = 0; u < 400; ++u)
      if (masks[0].at(u, v)) vmin = std::min(vmin, v), vmax = std::max(vmax, v), umin = std::min(umin, u), umax = std::max(umax, u);
  const sim::Camera cam{400};
  CHECK(std::abs(cam.to_world({0, vmin}).y() - 0.06) <= 0.002);
  CHECK(std::abs(cam.to_world({0, vmax + 1.0}).y() + 0.06) <= 0.002);
  CHECK(std::abs(cam.to_world({umax + 1.0, 0}).x() - 0.06) <= 0.002);
}

namespace {

dsl::TargetSpec bind_all(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  dsl::TargetSpec spec;
  for (std::size_t i : idx) {
    dsl::TargetPair p;
    p.kp = static_cast<int>(i) + 1;
    p.bound_index = i;
    p.source_id = cloud.source_ids[i];
    p.bound = cloud.points[i];
    p.target = {0.0, 0.0, 0.0};
    spec.pairs.push_back(p);
  }
  return spec;
}

}  // namespace

TEST_CASE("retrack identity and rigid shift") {
  const sim::WorldState s = rope_scene();
  const PointCloud cloud = sim::object_point_cloud(s);
  const dsl::TargetSpec spec = bind_all(cloud, {0, 7, 20, 40});
  std::mt19937_64 rng(1);
  const dsl::TargetSpec same = retrack(spec, cloud, 0.0, rng);
  CHECK(same.to_json() == spec.to_json());

  const PointCloud shifted = cloud.transformed(0.03, -0.02);
  const dsl::TargetSpec moved = retrack(spec, shifted, 0.0, rng);
  for (std::size_t k = 0; k < spec.pairs.size(); ++k) {
    CHECK(moved.pairs[k].bound.x == doctest::Approx(spec.pairs[k].bound.x + 0.03));
    CHECK(moved.pairs[k].bound.y == doctest::Approx(spec.pairs[k].bound.y - 0.02));
    CHECK(moved.pairs[k].target == spec.pairs[k].target);
  }
}

TEST_CASE("retrack under 5 mm noise on a 2 cm rope") {
  std::vector<Vec2> pts;
  for (int i = 0; i < 21; ++i) pts.push_back({-0.2 + 0.02 * i, 0.0});
  sim::WorldState s = sim::make_rope(0.4, 0.8, pts);
  const PointCloud cloud = sim::object_point_cloud(s);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cloud.size(); ++i) idx.push_back(i);
  const dsl::TargetSpec spec = bind_all(cloud, idx);
  std::mt19937_64 rng(2024);
  const TrackFn track = [&](const std::vector<int>& ids) { return sim::track_sources(s, ids); };
  int correct = 0, total = 0;
  while (total < 1000) {
    const dsl::TargetSpec r = retrack(spec, cloud, 0.005, rng, track);
    for (std::size_t k = 0; k < r.pairs.size() && total < 1000; ++k, ++total)
      correct += r.pairs[k].source_id == spec.pairs[k].source_id;
  }
  CHECK(correct >= 950);
}
