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
#include <random>

#include "keydyn/specdsl.hpp"

using namespace keydyn;
using namespace keydyn::dsl;

TEST_CASE("parse the three assignment forms") {
  const Verdict a = parse("p_3 = p_7 + [5, 0, 0]");
  REQUIRE(a.assignments.size() == 1);
  CHECK(a.assignments[0] == Assignment{3, Reference::keypoint, 7, {5, 0, 0}});
  const Verdict b = parse("p_2 = [0, 7, 0]");
  CHECK(b.assignments[0] == Assignment{2, Reference::absolute, 0, {0, 7, 0}});
  const Verdict c = parse("p_4 = C + [-20, 0.5, 0]");
  CHECK(c.assignments[0] == Assignment{4, Reference::center, 0, {-20, 0.5, 0}});
}

TEST_CASE("parse done") {
  CHECK(parse("Done.").done);
  CHECK(parse("  Done.\n").done);
  CHECK(parse("```\nDone.\n```").done);
  CHECK_THROWS_WITH(parse("hello world"), "unparsable specification");
  CHECK_THROWS_AS(parse(""), Error);
}

TEST_CASE("parse a fenced function body") {
  const std::string code = R"(```python
def keypoint_targets():
    # move the right end
    p_1 = C + [-20, 0, 0]  # left
    p_5 = C + [20.0, 0, 0]
    p_6 = p_1 + [.5, -3, 1e1]
    return [p_1, p_5, p_6]
```)";
  const Verdict v = parse(code);
  REQUIRE(v.assignments.size() == 3);
  CHECK(v.assignments[2] == Assignment{6, Reference::keypoint, 1, {0.5, -3, 10}});
}

TEST_CASE("variables inside vectors are rejected") {
  CHECK_THROWS_AS(parse("p_1 = p_2 + [dx, 0, 0]"), Error);
  CHECK_THROWS_AS(parse("p_1 = p_2"), Error);
  CHECK_THROWS_AS(parse("p_1 = [1, 2]"), Error);
}

TEST_CASE("duplicate targets keep the last one with a warning") {
  const Verdict v = parse("p_1 = [1, 0, 0]\np_2 = [0, 0, 0]\np_1 = [2, 0, 0]");
  REQUIRE(v.assignments.size() == 2);
  CHECK(v.assignments[0].offset_cm[0] == 2.0);
  CHECK(v.warnings.size() == 1);
}

TEST_CASE("format then parse is the identity") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50, 50);
  std::uniform_int_distribution<int> idx(1, 30), kind(0, 2);
  for (int i = 0; i < 500; ++i) {
    Assignment a{idx(rng), static_cast<Reference>(kind(rng)), 0, {u(rng), u(rng), i % 3 == 0 ? 0.0 : u(rng)}};
    if (a.reference == Reference::keypoint) a.ref_index = idx(rng);
    const Verdict v = parse(format(a));
    REQUIRE(v.assignments.size() == 1);
    CHECK(v.assignments[0] == a);
  }
}

namespace {

perception::AnnotatedImage fake_annotation() {
  perception::AnnotatedImage a;
  a.keypoints.push_back({1, Vec2(0, 0), Point3{0.1, 0.1, 0.0}, 0});
  a.keypoints.push_back({2, Vec2(0, 0), Point3{-0.1, 0.05, 0.0}, 0});
  a.center = {0, Vec2(128, 128), Point3{0, 0, 0}, perception::kReferenceObject};
  return a;
}

}  // namespace

TEST_CASE("resolve converts centimeters and binds to the nearest object point") {
  PointCloud cloud;
  cloud.add({0.1, 0.1, 0.0}, 0, 10);
  cloud.add({-0.1, 0.052, 0.0}, 0, 11);
  cloud.add({0.3, 0.3, 0.0}, 0, 12);
  const auto ann = fake_annotation();
  const std::vector<Assignment> as{{1, Reference::keypoint, 1, {5, 0, 0}}, {2, Reference::absolute, 0, {0, 0, 0}}};
  const TargetSpec spec = resolve(as, ann, cloud);
  REQUIRE(spec.pairs.size() == 2);
  CHECK(spec.pairs[0].target.x == doctest::Approx(0.15).epsilon(1e-12));
  CHECK(spec.pairs[0].target.y == doctest::Approx(0.10).epsilon(1e-12));
  CHECK(spec.pairs[1].target == Point3{0, 0, 0});
  CHECK(spec.pairs[1].bound_index == 1);
  CHECK(spec.pairs[1].source_id == 11);

  const std::vector<Assignment> bad{{1, Reference::keypoint, 9, {0, 0, 0}}};
  CHECK_THROWS_WITH(resolve(bad, ann, cloud), "unknown keypoint index 9");
  const std::vector<Assignment> bad_target{{5, Reference::absolute, 0, {0, 0, 0}}};
  CHECK_THROWS_AS(resolve(bad_target, ann, cloud), Error);
}

TEST_CASE("resolve binds a keypoint one pixel off a rope particle") {
  std::vector<Vec2> pts;
  for (int i = 0; i < 41; ++i) pts.push_back({-0.2 + 0.01 * i, 0.0});
  const auto s = sim::make_rope(0.4, 0.8, pts);
  const PointCloud cloud = sim::object_point_cloud(s);
  perception::AnnotatedImage ann;
  const double px = 0.8 / 256;
  ann.keypoints.push_back({1, Vec2(0, 0), Point3{0.05 + px, px, 0.005}, 0});
  const std::vector<Assignment> as{{1, Reference::center, 0, {0, 0, 0}}};
  const TargetSpec spec = resolve(as, ann, cloud);
  std::size_t brute = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (distance(cloud.points[i], ann.keypoints[0].world) < distance(cloud.points[brute], ann.keypoints[0].world)) brute = i;
  CHECK(spec.pairs[0].bound_index == brute);
  CHECK(brute == 25);
}

TEST_CASE("cost") {
  PointCloud state;
  state.add({0, 0, 0}, 0, 0);
  state.add({0.03, 0.04, 0}, 0, 1);
  TargetSpec spec;
  spec.pairs.push_back({1, 0, 0, {0, 0, 0}, {0, 0, 0}});
  CHECK(cost(state, spec) == 0.0);
  spec.pairs.push_back({2, 1, 1, {0.03, 0.04, 0}, {0, 0, 0}});
  CHECK(cost(state, spec) == doctest::Approx(0.05).epsilon(1e-12));
  spec.pairs.push_back({3, 7, 7, {}, {}});
  CHECK_THROWS_WITH(cost(state, spec), "missing bound point");
}

TEST_CASE("cost matches a brute-force sum and is permutation and translation invariant") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    PointCloud state;
    for (int i = 0; i < 12; ++i) state.add({u(rng), u(rng), 0.01}, 0, 100 + i);
    TargetSpec spec;
    double brute = 0.0;
    for (int k = 0; k < 7; ++k) {
      const std::size_t i = static_cast<std::size_t>(k * 3 % 12);
      TargetPair p{k + 1, i, state.source_ids[i], state.points[i], {u(rng), u(rng), u(rng) * 0.1}};
      spec.pairs.push_back(p);
      const Point3& o = state.points[i];
      brute += std::sqrt((o.x - p.target.x) * (o.x - p.target.x) + (o.y - p.target.y) * (o.y - p.target.y) +
                         (o.z - p.target.z) * (o.z - p.target.z));
    }
    CHECK(std::abs(cost(state, spec) - brute) < 1e-12);
    TargetSpec rev = spec;
    std::reverse(rev.pairs.begin(), rev.pairs.end());
    CHECK(std::abs(cost(state, rev) - cost(state, spec)) < 1e-12);
    TargetSpec moved = spec;
    for (auto& p : moved.pairs) p.target.x += 0.2, p.target.y -= 0.1;
    CHECK(std::abs(cost(state.transformed(0.2, -0.1), moved) - cost(state, spec)) < 1e-9);

    std::vector<Vec2> xy;
    for (const Point3& p : state.points) xy.push_back(p.xy());
    CHECK(std::abs(cost_at(xy, spec) - brute) < 1e-12);
  }
}

TEST_CASE("target spec json") {
  TargetSpec spec;
  spec.pairs.push_back({3, 0, 0, {0.1, 0.2, 0.0}, {0.3, 0.4, 0.0}});
  const auto j = spec.to_json();
  CHECK(j["pairs"][0]["kp"] == 3);
  CHECK(j["pairs"][0]["target"][1] == 0.4);
  CHECK(TargetSpec::from_json(j).pairs[0].bound == spec.pairs[0].bound);
}
