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
#include <chrono>
#include <cmath>
#include <random>

#include "keydyn/perception.hpp"
#include "keydyn/planner.hpp"
#include "toy_push.hpp"

using namespace keydyn;
using namespace keydyn::planner;
using keydyn::testing::random_toy;

namespace {

dynamics::Model random_t_model() {
  dynamics::Model m;
  m.arch = dynamics::Arch::t_mlp;
  m.material = sim::MaterialKind::t_block;
  m.t = dynamics::TModel(16, 3);
  return m;
}

}  // namespace

TEST_CASE("clipping always yields valid pushes") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const sim::PushAction a = clip_action({g(rng), g(rng), 10 * g(rng), g(rng)});
    CHECK(a.valid());
    CHECK(std::abs(a.end().x()) <= sim::kWorkspaceHalf + 1e-9);
    CHECK(std::abs(a.end().y()) <= sim::kWorkspaceHalf + 1e-9);
  }
  CHECK(clip_action({0.0, 0.0, 0.0, std::nan("")}).valid());
  const sim::PushAction ok{0.01, 0.02, 0.3, 0.1};
  CHECK(clip_action(ok) == ok);
}

TEST_CASE("weights follow the exponential formula and are monotone") {
  const std::vector<double> c{0.3, 0.1, 0.2, std::nan(""), 0.1};
  const auto w = mppi_weights(c, 0.05);
  CHECK(w[1] == 1.0);
  CHECK(w[4] == 1.0);
  CHECK(w[3] == 0.0);
  CHECK(w[0] == doctest::Approx(std::exp(-0.2 / 0.05)).epsilon(1e-15));
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j)
      if (std::isfinite(c[i]) && std::isfinite(c[j]) && c[i] < c[j]) CHECK(w[i] >= w[j]);
  CHECK_THROWS_AS(mppi_weights(c, 0.0), Error);
}

TEST_CASE("no noise and one sample returns the nominal") {
  MppiParams p;
  p.samples = 1;
  p.sigma = {0.0, 0.0, 0.0, 0.0};
  const Sequence nominal{{0.05, -0.02, 1.0, 0.1}};
  const auto toy = random_toy(3);
  const PlanResult r = mppi_plan(toy.batch(), nominal, p, 0.1);
  CHECK(r.actions == nominal);
}

TEST_CASE("mppi is deterministic per seed") {
  const auto toy = random_toy(4);
  const Sequence nominal{{toy.p0.x(), toy.p0.y(), 0.0, 0.1}};
  MppiParams p;
  p.seed = 17;
  const auto a = mppi_plan(toy.batch(), nominal, p, 0.09);
  const auto b = mppi_plan(toy.batch(), nominal, p, 0.09);
  CHECK(a.actions == b.actions);
  CHECK(a.cost == b.cost);
  p.seed = 18;
  CHECK(mppi_plan(toy.batch(), nominal, p, 0.09).actions != a.actions);
}

TEST_CASE("mppi matches an exhaustive grid search on a toy push") {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_ratio = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto toy = random_toy(seed);
    const double grid = toy.grid_search();
    MppiParams p;
    p.seed = seed;
    const Sequence nominal{{toy.p0.x(), toy.p0.y(), 0.0, sim::kMaxPushLength}};
    const PlanResult r = mppi_plan(toy.batch(), nominal, p, (toy.goal - toy.p0).squaredNorm());
    CHECK(r.cost == doctest::Approx(toy(r.actions.front())).epsilon(1e-15));
    worst_ratio = std::max(worst_ratio, r.cost / grid);
    CHECK(r.cost <= 1.05 * grid);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("worst mppi/grid ratio " << worst_ratio << ", " << secs << " s");
  CHECK(secs < 5.0);
}

TEST_CASE("mppi beats the median random push") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto toy = random_toy(100 + seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-sim::kWorkspaceHalf, sim::kWorkspaceHalf), ang(-M_PI, M_PI),
        len(0.005, sim::kMaxPushLength);
    std::vector<double> random_costs;
    for (int i = 0; i < 100; ++i) random_costs.push_back(toy(clip_action({u(rng), u(rng), ang(rng), len(rng)})));
    std::nth_element(random_costs.begin(), random_costs.begin() + 50, random_costs.end());
    MppiParams p;
    p.seed = seed;
    const Sequence nominal{{toy.p0.x(), toy.p0.y(), 0.0, 0.1}};
    CHECK(mppi_plan(toy.batch(), nominal, p, 0.09).cost <= random_costs[50]);
  }
}

TEST_CASE("longer horizons and candidates") {
  const auto toy = random_toy(7);
  MppiParams p;
  p.horizon = 3;
  const BatchCost last = [&](const std::vector<Sequence>& b) {
    std::vector<double> out;
    for (const auto& s : b) {
      CHECK(s.size() == 3);
      for (const auto& a : s) CHECK(a.valid());
      out.push_back(toy(s.front()));
    }
    return out;
  };
  const Vec2 d = toy.goal - toy.p0;
  const Sequence exact{{toy.p0.x(), toy.p0.y(), std::atan2(d.y(), d.x()), 0.2}};
  const PlanResult r = mppi_plan(last, {{0.0, 0.0, 0.0, 0.1}}, p, 0.09, {exact});
  CHECK(r.actions.size() == 3);
  CHECK(r.cost <= toy(exact.front()) + 1e-12);
}

TEST_CASE("non-finite costs everywhere mean divergence") {
  const BatchCost nan = [](const std::vector<Sequence>& b) {
    return std::vector<double>(b.size(), std::nan(""));
  };
  CHECK_THROWS_WITH_AS(mppi_plan(nan, {{0.0, 0.0, 0.0, 0.1}}, MppiParams{}, 1.0), "dynamics diverged", Error);
  MppiParams bad;
  bad.samples = 0;
  CHECK_THROWS_AS(mppi_plan(nan, {{0.0, 0.0, 0.0, 0.1}}, bad, 1.0), Error);
}

TEST_CASE("model state and heuristic pushes") {
  const auto rope = tasks::make_scene(tasks::TaskKind::rope_straighten, 1);
  const auto ms = model_state(rope);
  CHECK(ms.points.size() < rope.particles.size());
  CHECK(ms.points.size() >= 10);
  const auto t = tasks::make_scene(tasks::TaskKind::t_move, 1);
  CHECK(model_state(t).points.size() == sim::TBlockGeometry::samples().size());

  const auto ann = perception::annotate_scene(t);
  const auto spec = dsl::resolve(dsl::parse(vlm::oracle_respond(tasks::TaskKind::t_move, t, ann)).assignments, ann,
                                 sim::object_point_cloud(t));
  const auto cands = heuristic_candidates(t, spec, 2);
  REQUIRE(!cands.empty());
  for (const auto& s : cands) {
    CHECK(s.size() == 2);
    for (const auto& a : s) CHECK(a.valid());
    // Starts outside the block.
    CHECK(sim::TBlockGeometry::signed_distance(t.block.inverse().apply(s.front().start())) > 0.0);
  }
}

TEST_CASE("satisfied specification executes nothing") {
  const auto s = tasks::make_scene(tasks::TaskKind::t_move, 2);
  const auto cloud = sim::object_point_cloud(s);
  dsl::TargetSpec spec;
  spec.pairs.push_back({1, 5, cloud.source_ids[5], cloud.points[5], cloud.points[5]});
  std::mt19937_64 rng(0);
  const auto r = low_level_loop(s, random_t_model(), spec, LoopConfig{}, MppiParams{}, rng);
  CHECK(r.actions.empty());
  CHECK(r.cost_trace.size() == 1);
  CHECK_THROWS_AS(low_level_loop(s, random_t_model(), dsl::TargetSpec{}, LoopConfig{}, MppiParams{}, rng), Error);
}

TEST_CASE("low-level loop keeps bound points on the object") {
  const auto s0 = tasks::make_scene(tasks::TaskKind::t_move, 3);
  const auto ann = perception::annotate_scene(s0);
  auto spec = dsl::resolve(dsl::parse(vlm::oracle_respond(tasks::TaskKind::t_move, s0, ann)).assignments, ann,
                           sim::object_point_cloud(s0));
  LoopConfig cfg;
  cfg.n_actions = 1;
  cfg.track_noise = 0.003;
  MppiParams p;
  p.samples = 16;
  p.iterations = 1;
  std::mt19937_64 rng(4);
  sim::WorldState s = s0;
  for (int it = 0; it < 4; ++it) {
    auto r = low_level_loop(s, random_t_model(), spec, cfg, p, rng);
    CHECK(r.actions.size() == 1);
    CHECK(r.cost_trace.size() == 2);
    s = r.state;
    spec = r.spec;
    const auto cloud = sim::object_point_cloud(s);
    for (const auto& pair : spec.pairs) {
      CHECK(cloud.points.at(pair.bound_index) == pair.bound);
      CHECK(cloud.source_ids.at(pair.bound_index) == pair.source_id);
    }
  }
}

TEST_CASE("high-level loop with a scripted Done") {
  const auto s = tasks::make_scene(tasks::TaskKind::t_move, 2);
  const auto model = random_t_model();
  vlm::ScriptedBackend backend({"Done."});
  RunContext ctx;
  ctx.model = &model;
  ctx.backend = &backend;
  const RunReport rep = high_level_loop(s, tasks::TaskKind::t_move, "Move the orange T into the pink square.", ctx,
                                        LoopConfig{}, MppiParams{});
  REQUIRE(rep.iterations.size() == 1);
  CHECK(rep.iterations[0].done);
  CHECK(rep.pushes == 0);
  CHECK(!rep.success);  // the block never moved
  CHECK(rep.to_json().at("iterations").size() == 1);
}

TEST_CASE("high-level loop respects the push budget") {
  const auto s = tasks::make_scene(tasks::TaskKind::t_move, 6);
  const auto model = random_t_model();
  vlm::OracleBackend backend(tasks::TaskKind::t_move);
  RunContext ctx;
  ctx.model = &model;
  ctx.backend = &backend;
  LoopConfig cfg;
  cfg.outer_iterations = 2;
  cfg.n_actions = 3;
  cfg.spec_threshold = 0.0;  // never exit early
  MppiParams p;
  p.samples = 8;
  p.iterations = 1;
  const RunReport rep = high_level_loop(s, tasks::TaskKind::t_move, "Move the orange T into the pink square.", ctx,
                                        cfg, p);
  CHECK(rep.pushes <= 6);
  CHECK(rep.pushes == 6);
  CHECK(!rep.infra_failure);
}

TEST_CASE("high-level loop failure modes") {
  const auto s = tasks::make_scene(tasks::TaskKind::t_move, 2);
  const auto model = random_t_model();
  RunContext ctx;
  ctx.model = &model;

  SUBCASE("unparsable twice") {
    vlm::ScriptedBackend backend({"no idea", "still no idea"});
    ctx.backend = &backend;
    const RunReport rep = high_level_loop(s, tasks::TaskKind::t_move, "x", ctx, LoopConfig{}, MppiParams{});
    REQUIRE(rep.iterations.size() == 1);
    CHECK(rep.iterations[0].parse_failed);
    CHECK(backend.cursor() == 2);
    CHECK(!rep.success);
    CHECK(!rep.infra_failure);
  }
  SUBCASE("re-query recovers") {
    vlm::ScriptedBackend backend({"no idea", "Done."});
    ctx.backend = &backend;
    const RunReport rep = high_level_loop(s, tasks::TaskKind::t_move, "x", ctx, LoopConfig{}, MppiParams{});
    CHECK(rep.iterations.at(0).done);
  }
  SUBCASE("unavailable backend is an infrastructure failure") {
    vlm::HttpConfig cfg;
    cfg.token_env = "KEYDYN_TOKEN_THAT_IS_NOT_SET";
    vlm::HttpBackend backend(cfg);
    ctx.backend = &backend;
    const RunReport rep = high_level_loop(s, tasks::TaskKind::t_move, "x", ctx, LoopConfig{}, MppiParams{});
    CHECK(rep.infra_failure);
    CHECK(!rep.success);
    CHECK(rep.error.find("vlm unavailable") != std::string::npos);
  }
  SUBCASE("wrong model material") {
    dynamics::Model rope;
    rope.material = sim::MaterialKind::rope;
    ctx.model = &rope;
    vlm::ScriptedBackend backend({"Done."});
    ctx.backend = &backend;
    CHECK_THROWS_AS(high_level_loop(s, tasks::TaskKind::t_move, "x", ctx, LoopConfig{}, MppiParams{}), Error);
  }
}

TEST_CASE("config json round trips") {
  MppiParams p;
  p.samples = 64;
  p.sigma[2] = 0.3;
  const auto q = MppiParams::from_json(p.to_json());
  CHECK(q.samples == 64);
  CHECK(q.sigma[2] == 0.3);
  LoopConfig c;
  c.n_actions = 4;
  c.frames_dir = "/tmp/x";
  const auto d = LoopConfig::from_json(c.to_json());
  CHECK(d.n_actions == 4);
  CHECK(d.frames_dir->string() == "/tmp/x");
  CHECK_THROWS_AS(LoopConfig::from_json({{"n_actions", 0}}), Error);
}
