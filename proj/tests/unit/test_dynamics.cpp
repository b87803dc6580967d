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
#include <filesystem>
#include <numeric>
#include <random>

#include "keydyn/dynamics.hpp"

using namespace keydyn;
using namespace keydyn::dynamics;

namespace {

/// Max relative error between analytic gradients and central differences
/// over `samples` entries per tensor.
template <typename LossFn>
double gradient_check(std::vector<nn::Param*> params, LossFn&& loss, std::mt19937_64& rng, int samples) {
  loss(true);
  std::vector<nn::Mat> analytic;
  for (nn::Param* p : params) analytic.push_back(p->grad);
  double worst = 0.0;
  const double eps = 1e-5;
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Param& p = *params[k];
    std::uniform_int_distribution<Eigen::Index> pick(0, p.value.size() - 1);
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index i = pick(rng);
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + eps;
      const double up = loss(false);
      p.value.data()[i] = keep - eps;
      const double down = loss(false);
      p.value.data()[i] = keep;
      const double fd = (up - down) / (2 * eps);
      const double an = analytic[k].data()[i];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, std::abs(fd - an) / scale);
    }
  }
  return worst;
}

GraphSample random_sample(std::mt19937_64& rng, int n, sim::MaterialKind material = sim::MaterialKind::rope) {
  std::uniform_real_distribution<double> pos(-0.08, 0.08), vel(-0.01, 0.01);
  std::vector<Vec2> p, v;
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) {
    p.emplace_back(pos(rng), pos(rng));
    v.emplace_back(vel(rng), vel(rng));
    ids.push_back(i % 2);
  }
  const std::vector<Vec2> pusher{{pos(rng), pos(rng)}};
  GraphSample s;
  s.graph = make_graph(material, p, v, ids, pusher, {vel(rng), vel(rng)});
  s.target = nn::Mat::Random(n, 2) * 0.01;
  return s;
}

std::array<Vec2, 4> posed_t(const Pose2D& pose) {
  auto k = sim::TBlockGeometry::keypoints();
  for (auto& p : k) p = pose.apply(p);
  return k;
}

sim::Episode small_rope_episode(std::uint64_t seed, int pushes = 1) {
  return sim::generate_episode(sim::Material::rope(0.3, 0.8), pushes, seed);
}

}  // namespace

TEST_CASE("graph edges follow the distance threshold") {
  const std::vector<int> ids{0, 0};
  const std::vector<Vec2> zero{Vec2::Zero(), Vec2::Zero()};
  const std::vector<Vec2> near{{0.0, 0.0}, {0.05, 0.0}};
  const std::vector<Vec2> far{{0.0, 0.0}, {0.07, 0.0}};
  const DynGraph a = make_graph(sim::MaterialKind::rope, near, zero, ids, {}, Vec2::Zero(), 0.06);
  CHECK(a.edge_count() == 2);
  CHECK(a.edge_types[0] == EdgeType::same_object);
  const DynGraph b = make_graph(sim::MaterialKind::rope, far, zero, ids, {}, Vec2::Zero(), 0.06);
  CHECK(b.edge_count() == 0);

  const std::vector<int> other{0, 1};
  const DynGraph c = make_graph(sim::MaterialKind::cubes, near, zero, other, {}, Vec2::Zero(), 0.06);
  CHECK(c.edge_types[0] == EdgeType::other_object);

  const std::vector<Vec2> pusher{{0.0, 0.03}};
  const DynGraph d = make_graph(sim::MaterialKind::rope, far, zero, ids, pusher, {0.01, 0.0}, 0.06);
  REQUIRE(d.edge_count() == 1);
  CHECK(d.edge_types[0] == EdgeType::pusher);
  CHECK(d.receivers[0] == 0);
  CHECK(d.senders[0] == 2);
  CHECK(d.pusher_count() == 1);
  CHECK(d.object_rows == std::vector<int>{0, 1});
}

TEST_CASE("build_graph samples vertices and pusher particles") {
  PointCloud cloud, prev, pusher;
  for (int i = 0; i < 31; ++i) {
    cloud.points.push_back({-0.15 + 0.01 * i, 0.0, 0.005});
    prev.points.push_back({-0.15 + 0.01 * i - 0.001, 0.0, 0.005});
  }
  sim::Pusher cyl{sim::PusherKind::cylinder, {}};
  for (const Vec2& p : cyl.particles()) pusher.points.push_back({p.x(), p.y(), 0.0});
  const DynGraph g = build_graph(sim::MaterialKind::rope, cloud, pusher, prev, Vec2::Zero());
  CHECK(g.pusher_count() == 1);
  CHECK(g.object_rows.size() == farthest_point_sample(cloud, cloud.size(), 0.02).size());
  for (int r : g.object_rows) CHECK(g.velocities[r].x() == doctest::Approx(0.001));

  sim::Pusher board{sim::PusherKind::board, {}};
  CHECK(board.particles().size() == 5);

  PointCloud bad = prev;
  bad.points.pop_back();
  CHECK_THROWS_AS(build_graph(sim::MaterialKind::rope, cloud, pusher, bad, Vec2::Zero()), Error);
}

TEST_CASE("gnn output has one row per object vertex") {
  std::mt19937_64 rng(1);
  GnnModel model({16, 2}, 3);
  const GraphSample s = random_sample(rng, 7);
  CHECK(model.forward(s.graph).size() == 7);
  CHECK(model.predict_deltas(s.graph).rows() == 7);
}

TEST_CASE("gnn gradients match finite differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    GnnModel model({12, 2}, 100 + trial);
    const GraphSample a = random_sample(rng, 6), b = random_sample(rng, 4, sim::MaterialKind::cubes);
    const std::vector<const GraphSample*> batch{&a, &b};
    const double err = gradient_check(
        model.params(), [&](bool bw) { return gnn_batch_loss(model, batch, bw); }, rng, 4);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("t model gradients match finite differences") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-0.1, 0.1), th(-M_PI, M_PI);
  for (int trial = 0; trial < 5; ++trial) {
    TModel model(16, 200 + trial);
    std::vector<TSample> samples(3);
    for (TSample& s : samples) {
      s.state.keypoints = posed_t({u(rng), u(rng), th(rng)});
      s.state.pusher = {u(rng), u(rng)};
      s.action = {0.1 * u(rng), 0.1 * u(rng)};
      s.next.keypoints = posed_t({u(rng), u(rng), th(rng)});
      s.next.pusher = s.state.pusher + s.action;
    }
    std::vector<const TSample*> batch;
    for (const TSample& s : samples) batch.push_back(&s);
    const double err = gradient_check(
        model.params(), [&](bool bw) { return t_batch_loss(model, batch, bw); }, rng, 4);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gnn is translation equivariant") {
  std::mt19937_64 rng(5);
  GnnModel model({16, 3}, 9);
  std::uniform_real_distribution<double> t(-0.2, 0.2);
  for (int trial = 0; trial < 10; ++trial) {
    const GraphSample s = random_sample(rng, 8);
    DynGraph moved = s.graph;
    const Vec2 shift(t(rng), t(rng));
    for (Vec2& p : moved.positions) p += shift;
    const auto a = model.forward(s.graph);
    const auto b = model.forward(moved);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK((b[i] - (a[i] + shift)).norm() < 1e-9);
  }
}

TEST_CASE("gnn is permutation consistent") {
  std::mt19937_64 rng(6);
  GnnModel model({16, 3}, 10);
  std::uniform_real_distribution<double> pos(-0.08, 0.08), vel(-0.01, 0.01);
  std::vector<Vec2> p, v;
  std::vector<int> ids;
  for (int i = 0; i < 9; ++i) {
    p.emplace_back(pos(rng), pos(rng));
    v.emplace_back(vel(rng), vel(rng));
    ids.push_back(i / 3);
  }
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Vec2> pp, pv;
  std::vector<int> pids;
  for (int i : perm) {
    pp.push_back(p[i]);
    pv.push_back(v[i]);
    pids.push_back(ids[i]);
  }
  const std::vector<Vec2> pusher{{0.0, 0.0}};
  const auto a = model.forward(make_graph(sim::MaterialKind::cubes, p, v, ids, pusher, {0.01, 0.0}));
  const auto b = model.forward(make_graph(sim::MaterialKind::cubes, pp, pv, pids, pusher, {0.01, 0.0}));
  for (int i = 0; i < 9; ++i) CHECK((b[i] - a[perm[i]]).norm() < 1e-12);
}

TEST_CASE("t model is SE(2) equivariant") {
  std::mt19937_64 rng(7);
  TModel model(32, 4);
  std::uniform_real_distribution<double> u(-0.1, 0.1), th(-M_PI, M_PI);
  for (int trial = 0; trial < 10; ++trial) {
    TState s{posed_t({u(rng), u(rng), th(rng)}), {u(rng), u(rng)}};
    const Vec2 action(0.2 * u(rng), 0.2 * u(rng));
    const Pose2D g(u(rng), u(rng), th(rng));
    TState gs;
    for (int i = 0; i < 4; ++i) gs.keypoints[i] = g.apply(s.keypoints[i]);
    gs.pusher = g.apply(s.pusher);
    const TState a = model.forward(s, action);
    const TState b = model.forward(gs, g.rotate(action));
    for (int i = 0; i < 4; ++i) CHECK((b.keypoints[i] - g.apply(a.keypoints[i])).norm() < 1e-9);
    CHECK((b.pusher - g.apply(a.pusher)).norm() < 1e-9);
  }
}

TEST_CASE("t model rejects non-rigid keypoints") {
  TModel model(8, 1);
  TState s{posed_t({}), Vec2::Zero()};
  s.keypoints[0] += Vec2(0.02, 0.0);
  CHECK_THROWS_AS(model.forward(s, Vec2::Zero()), Error);
  std::array<Vec2, 4> degenerate;
  degenerate.fill(Vec2::Zero());
  CHECK_THROWS_WITH(t_local_frame(degenerate), "degenerate keypoints");
}

TEST_CASE("episode split is by episode and deterministic") {
  std::vector<std::size_t> tr, va, tr2, va2;
  split_episodes(20, 0.1, 3, tr, va);
  split_episodes(20, 0.1, 3, tr2, va2);
  CHECK(tr == tr2);
  CHECK(va == va2);
  CHECK(va.size() == 2);
  CHECK(tr.size() == 18);
  for (std::size_t v : va) CHECK(std::find(tr.begin(), tr.end(), v) == tr.end());
}

TEST_CASE("graph samples match episode frames") {
  const sim::Episode ep = small_rope_episode(4);
  const auto samples = graph_samples(ep);
  REQUIRE(samples.size() == ep.actions.size());
  for (const GraphSample& s : samples) {
    CHECK(s.target.rows() == static_cast<Eigen::Index>(s.graph.object_rows.size()));
    CHECK(s.graph.pusher_count() == 1);
  }
  // The first step of a push starts at rest.
  for (int r : samples[0].graph.object_rows) CHECK(samples[0].graph.velocities[r].norm() == 0.0);
}

TEST_CASE("training overfits a single episode") {
  const std::vector<sim::Episode> eps{small_rope_episode(21)};
  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.val_fraction = 0.0;
  cfg.seed = 1;
  const TrainResult r = train(eps, cfg);
  REQUIRE(!r.loss_history.empty());
  MESSAGE("final loss " << r.loss_history.back() << " first " << r.loss_history.front());
  CHECK(r.loss_history.back() < 1e-5);
}

TEST_CASE("training is deterministic per seed") {
  const std::vector<sim::Episode> eps{small_rope_episode(22), small_rope_episode(23)};
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.hidden = 16;
  cfg.seed = 5;
  const TrainResult a = train(eps, cfg);
  const TrainResult b = train(eps, cfg);
  CHECK(a.loss_history == b.loss_history);
  const auto pa = a.model.gnn.params();
  const auto pb = b.model.gnn.params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("shuffled labels do not beat the no-motion baseline") {
  std::vector<sim::Episode> eps;
  for (int i = 0; i < 10; ++i) eps.push_back(small_rope_episode(40 + i, 2));
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.hidden = 32;
  cfg.val_fraction = 0.3;
  cfg.seed = 2;
  const TrainResult real = train(eps, cfg);
  cfg.shuffle_labels = true;
  const TrainResult r = train(eps, cfg);
  MESSAGE("shuffled val " << r.val_error << " real val " << real.val_error << " baseline " << r.val_baseline);
  // Shuffling leaves only the label mean to learn.
  CHECK(r.val_error >= 0.9 * r.val_baseline);
  CHECK(real.val_error < 0.5 * real.val_baseline);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "keydyn_ckpt_test";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(8);

  Model g;
  g.arch = Arch::gnn;
  g.material = sim::MaterialKind::granular;
  g.seed = 77;
  g.gnn = GnnModel({24, 2}, 77);
  g.gnn.norm = {0.004, 0.06, 0.003};
  g.quantize();
  g.save(dir / "g.bin");
  const Model gl = Model::load(dir / "g.bin");
  CHECK(gl.material == sim::MaterialKind::granular);
  CHECK(gl.gnn.config().hidden == 24);
  const GraphSample s = random_sample(rng, 10, sim::MaterialKind::granular);
  CHECK((g.gnn.predict_deltas(s.graph) - gl.gnn.predict_deltas(s.graph)).cwiseAbs().maxCoeff() <= 1e-12);

  Model t;
  t.arch = Arch::t_mlp;
  t.material = sim::MaterialKind::t_block;
  t.t = TModel(16, 5);
  t.t.output_scale = 0.004;
  t.quantize();
  t.save(dir / "t.bin");
  const Model tl = Model::load(dir / "t.bin");
  const TState st{posed_t({0.01, 0.02, 0.3}), {0.05, 0.0}};
  const TState a = t.t.forward(st, {-0.01, 0.0});
  const TState b = tl.t.forward(st, {-0.01, 0.0});
  for (int i = 0; i < 4; ++i) CHECK((a.keypoints[i] - b.keypoints[i]).norm() <= 1e-12);

  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  CHECK_THROWS_AS(Model::load(dir / "junk.bin"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("rollout basics") {
  Model m;
  m.arch = Arch::gnn;
  m.material = sim::MaterialKind::rope;
  m.gnn = GnnModel({16, 2}, 3);
  std::vector<Vec2> pts;
  for (int i = 0; i < 10; ++i) pts.emplace_back(-0.1 + 0.02 * i, 0.0);
  const ModelState init =
      ModelState::particles(sim::MaterialKind::rope, sim::PusherKind::cylinder, pts, std::vector<int>(10, 0));
  CHECK(rollout(m, init, {}).size() == 1);

  const sim::PushAction push{0.0, -0.05, M_PI / 2, 0.015};
  const auto traj = rollout(m, init, std::span(&push, 1));
  REQUIRE(traj.size() == 2);
  const std::vector<Vec2> pusher = sim::Pusher{sim::PusherKind::cylinder, {0.0, -0.05, 0.0}}.particles();
  const auto direct =
      m.gnn.forward(make_graph(sim::MaterialKind::rope, pts, init.velocities, init.object_ids, pusher,
                               {0.0, 0.015}));
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK((traj[1].points[i] - direct[i]).norm() < 1e-12);

  const auto finals = rollout_final(m, init, {{push}, {}, {push, push}});
  REQUIRE(finals.size() == 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK((finals[0][i] - traj[1].points[i]).norm() < 1e-12);
    CHECK(finals[1][i] == pts[i]);
  }
  const auto two = rollout(m, init, std::vector<sim::PushAction>{push, push});
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK((finals[2][i] - two[2].points[i]).norm() < 1e-12);

  CHECK(split_push({0, 0, 0, 0.05}).size() == 3);
  CHECK(split_push({0, 0, 0, 0.02}).size() == 1);
}

TEST_CASE("t rollout keeps the block rigid") {
  Model m;
  m.arch = Arch::t_mlp;
  m.material = sim::MaterialKind::t_block;
  m.t = TModel(16, 9);
  const Pose2D pose(0.01, -0.02, 0.4);
  std::vector<Vec2> pts;
  for (const Vec2& p : sim::TBlockGeometry::samples()) pts.push_back(pose.apply(p));
  const ModelState init = ModelState::t_block(pose, pts);
  const std::vector<sim::PushAction> pushes{{0.0, -0.15, M_PI / 2, 0.05}, {0.1, 0.0, M_PI, 0.03}};
  const auto traj = rollout(m, init, pushes);
  REQUIRE(traj.size() == 3);
  const auto canon = sim::TBlockGeometry::keypoints();
  for (const ModelState& s : traj)
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        CHECK(std::abs((s.keypoints[i] - s.keypoints[j]).norm() - (canon[i] - canon[j]).norm()) < 1e-9);
}
