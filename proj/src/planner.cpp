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

#include "keydyn/planner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "keydyn/perception.hpp"
#include "keydyn/tracking.hpp"

namespace keydyn::planner {

namespace {

constexpr double kMinPushLength = 0.005;
constexpr double kInf = std::numeric_limits<double>::infinity();

double wrap_angle(double a) { return std::remainder(a, 2.0 * M_PI); }

}  // namespace

void MppiParams::validate() const {
  if (samples < 1) throw Error("mppi needs at least one sample");
  if (horizon < 1) throw Error("mppi horizon must be at least 1");
  if (iterations < 1) throw Error("mppi needs at least one iteration");
  for (double s : sigma)
    if (!(s >= 0.0) || !std::isfinite(s)) throw Error("mppi sigmas must be finite and non-negative");
  if (!(temperature_fraction > 0.0) && !(temperature > 0.0)) throw Error("mppi temperature must be positive");
  if (explore_fraction < 0.0 || explore_fraction > 1.0) throw Error("explore_fraction must lie in [0, 1]");
}

nlohmann::json MppiParams::to_json() const {
  return {{"samples", samples},
          {"horizon", horizon},
          {"iterations", iterations},
          {"sigma", sigma},
          {"temperature_fraction", temperature_fraction},
          {"temperature", temperature},
          {"explore_fraction", explore_fraction},
          {"seed", seed}};
}

MppiParams MppiParams::from_json(const nlohmann::json& j) {
  MppiParams p;
  p.samples = j.value("samples", p.samples);
  p.horizon = j.value("horizon", p.horizon);
  p.iterations = j.value("iterations", p.iterations);
  p.sigma = j.value("sigma", p.sigma);
  p.temperature_fraction = j.value("temperature_fraction", p.temperature_fraction);
  p.temperature = j.value("temperature", p.temperature);
  p.explore_fraction = j.value("explore_fraction", p.explore_fraction);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

sim::PushAction clip_action(sim::PushAction a) {
  // Inset so that every direction leaves room for the shortest push.
  const double h = sim::kWorkspaceHalf - kMinPushLength;
  a.start_x = std::clamp(std::isfinite(a.start_x) ? a.start_x : 0.0, -h, h);
  a.start_y = std::clamp(std::isfinite(a.start_y) ? a.start_y : 0.0, -h, h);
  a.angle = std::isfinite(a.angle) ? wrap_angle(a.angle) : 0.0;
  double len = std::isfinite(a.length) ? a.length : kMinPushLength;
  // Longest travel that keeps the pusher on the table.
  const Vec2 d = a.direction();
  double reach = kInf;
  for (int k = 0; k < 2; ++k) {
    const double s = k == 0 ? a.start_x : a.start_y;
    if (d[k] > 1e-12) reach = std::min(reach, (sim::kWorkspaceHalf - s) / d[k]);
    if (d[k] < -1e-12) reach = std::min(reach, (-sim::kWorkspaceHalf - s) / d[k]);
  }
  a.length = std::clamp(std::min(len, reach), kMinPushLength, sim::kMaxPushLength);
  return a;
}

std::vector<double> mppi_weights(const std::vector<double>& costs, double beta) {
  if (!(beta > 0.0)) throw Error("mppi temperature must be positive");
  double lo = kInf;
  for (double c : costs)
    if (std::isfinite(c)) lo = std::min(lo, c);
  std::vector<double> w(costs.size(), 0.0);
  for (std::size_t j = 0; j < costs.size(); ++j)
    if (std::isfinite(costs[j])) w[j] = std::exp(-(costs[j] - lo) / beta);
  return w;
}

namespace {

Sequence clipped(Sequence s) {
  for (auto& a : s) a = clip_action(a);
  return s;
}

Sequence fit_horizon(Sequence s, int horizon) {
  if (s.empty()) throw Error("empty action sequence");
  while (static_cast<int>(s.size()) < horizon) {
    sim::PushAction next = s.back();
    const Vec2 e = next.end();
    next.start_x = e.x();
    next.start_y = e.y();
    s.push_back(next);
  }
  s.resize(static_cast<std::size_t>(horizon));
  return clipped(std::move(s));
}

Sequence weighted_mean(const std::vector<Sequence>& batch, const std::vector<double>& w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  Sequence out = batch.front();
  for (std::size_t t = 0; t < out.size(); ++t) {
    double x = 0.0, y = 0.0, len = 0.0, c = 0.0, s = 0.0;
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (w[j] == 0.0) continue;
      const auto& a = batch[j][t];
      x += w[j] * a.start_x;
      y += w[j] * a.start_y;
      len += w[j] * a.length;
      c += w[j] * std::cos(a.angle);
      s += w[j] * std::sin(a.angle);
    }
    // Circular mean; keep the previous heading if the directions cancel.
    const double angle = std::hypot(c, s) > 1e-12 ? std::atan2(s, c) : out[t].angle;
    out[t] = clip_action({x / total, y / total, angle, len / total});
  }
  return out;
}

}  // namespace

PlanResult mppi_plan(const BatchCost& cost, Sequence nominal, const MppiParams& params, double reference_cost,
                     const std::vector<Sequence>& candidates) {
  params.validate();
  nominal = fit_horizon(std::move(nominal), params.horizon);
  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> any_angle(-M_PI, M_PI);

  PlanResult best{nominal, kInf, 0};
  auto consider = [&](const std::vector<Sequence>& batch, const std::vector<double>& costs) {
    if (costs.size() != batch.size()) throw Error("cost function returned the wrong number of values");
    best.evaluations += static_cast<int>(batch.size());
    for (std::size_t j = 0; j < batch.size(); ++j)
      if (std::isfinite(costs[j]) && costs[j] < best.cost) {
        best.cost = costs[j];
        best.actions = batch[j];
      }
  };

  for (int it = 0; it < params.iterations; ++it) {
    std::vector<Sequence> batch{nominal};
    if (it == 0)
      for (const Sequence& c : candidates) batch.push_back(fit_horizon(c, params.horizon));
    const int explore = it == 0 ? static_cast<int>(std::floor(params.explore_fraction * params.samples)) : 0;
    for (int j = 1; j < params.samples; ++j) {
      // After the first batch, half of the samples perturb the best sequence so
      // far; the weighted mean alone can drift off a narrow basin.
      Sequence s = it > 0 && j % 2 == 1 ? best.actions : nominal;
      for (auto& a : s) {
        a.start_x += params.sigma[0] * gauss(rng);
        a.start_y += params.sigma[1] * gauss(rng);
        a.angle = j <= explore ? any_angle(rng) : a.angle + params.sigma[2] * gauss(rng);
        a.length += params.sigma[3] * gauss(rng);
        a = clip_action(a);
      }
      batch.push_back(std::move(s));
    }
    const std::vector<double> costs = cost(batch);
    if (std::none_of(costs.begin(), costs.end(), [](double c) { return std::isfinite(c); }))
      throw Error("dynamics diverged");
    consider(batch, costs);
    double beta = params.temperature > 0.0 ? params.temperature : params.temperature_fraction * reference_cost;
    if (!(beta > 0.0) || !std::isfinite(beta)) beta = params.temperature_fraction * std::max(best.cost, 1e-9);
    nominal = weighted_mean(batch, mppi_weights(costs, beta));
  }
  // The averaged plan is only kept when it beats every sample.
  const std::vector<Sequence> last{nominal};
  consider(last, cost(last));
  if (!std::isfinite(best.cost)) throw Error("dynamics diverged");
  return best;
}

dynamics::ModelState model_state(const sim::WorldState& state, double vertex_radius) {
  const PointCloud cloud = sim::object_point_cloud(state);
  if (state.material.kind == sim::MaterialKind::t_block) {
    std::vector<Vec2> pts;
    for (const Point3& p : cloud.points) pts.push_back(p.xy());
    return dynamics::ModelState::t_block(state.block, std::move(pts));
  }
  const auto idx = farthest_point_sample(cloud, cloud.size(), vertex_radius);
  std::vector<Vec2> pts;
  std::vector<int> ids;
  for (std::size_t i : idx) {
    pts.push_back(cloud.points[i].xy());
    ids.push_back(cloud.object_ids[i]);
  }
  return dynamics::ModelState::particles(state.material.kind, state.pusher.kind, std::move(pts), std::move(ids));
}

BatchCost model_cost(const dynamics::Model& model, const dynamics::ModelState& init, const dsl::TargetSpec& spec) {
  if (spec.empty()) throw Error("empty specification");
  struct Binding {
    std::size_t vertex;
    Vec2 offset;
    Vec2 target;
    double dz2;
  };
  std::vector<Binding> bind;
  for (const dsl::TargetPair& p : spec.pairs) {
    const Vec2 b = p.bound.xy();
    std::size_t v = 0;
    double bd = kInf;
    for (std::size_t i = 0; i < init.points.size(); ++i) {
      const double d = (init.points[i] - b).squaredNorm();
      if (d < bd) {
        bd = d;
        v = i;
      }
    }
    const double dz = p.bound.z - p.target.z;
    bind.push_back({v, b - init.points[v], p.target.xy(), dz * dz});
  }
  const dynamics::Model* m = &model;
  return [m, init, bind](const std::vector<Sequence>& batch) {
    const auto finals = dynamics::rollout_final(*m, init, batch);
    std::vector<double> out;
    out.reserve(finals.size());
    for (const auto& pts : finals) {
      double total = 0.0;
      for (const Binding& b : bind) total += std::sqrt((pts[b.vertex] + b.offset - b.target).squaredNorm() + b.dz2);
      out.push_back(std::isfinite(total) ? total : std::numeric_limits<double>::quiet_NaN());
    }
    return out;
  };
}

std::vector<Sequence> heuristic_candidates(const sim::WorldState& state, const dsl::TargetSpec& spec, int horizon) {
  std::vector<std::size_t> order(spec.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  auto err = [&](std::size_t i) { return (spec.pairs[i].target.xy() - spec.pairs[i].bound.xy()).norm(); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err(a) > err(b); });
  const bool board = state.pusher.kind == sim::PusherKind::board;
  const bool block = state.material.kind == sim::MaterialKind::t_block;
  const Pose2D inv = state.block.inverse();
  std::vector<Sequence> out;
  for (std::size_t i : order) {
    const Vec2 b = spec.pairs[i].bound.xy();
    const Vec2 d = spec.pairs[i].target.xy() - b;
    const double dist = d.norm();
    if (dist < 1e-4) continue;
    const Vec2 dir = d / dist;
    double back = board ? 0.04 : 0.03;
    if (block) {
      back = 0.02;
      while (back < 0.15 &&
             sim::TBlockGeometry::signed_distance(inv.apply(b - back * dir)) < sim::Pusher::kCylinderRadius + 0.003)
        back += 0.005;
    }
    const double angle = std::atan2(dir.y(), dir.x());
    const Vec2 s = b - back * dir;
    Sequence seq{clip_action({s.x(), s.y(), angle, back - 0.01 + dist})};
    double remaining = back - 0.01 + dist - seq.back().length;
    while (static_cast<int>(seq.size()) < horizon) {
      const Vec2 e = seq.back().end();
      seq.push_back(clip_action({e.x(), e.y(), angle, std::max(remaining, kMinPushLength)}));
      remaining -= seq.back().length;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void LoopConfig::validate() const {
  if (outer_iterations < 1) throw Error("outer_iterations must be at least 1");
  if (n_actions < 1) throw Error("n_actions must be at least 1");
  if (!(success_threshold > 0.0)) throw Error("success threshold must be positive");
  if (!(track_noise >= 0.0)) throw Error("track noise must be non-negative");
}

nlohmann::json LoopConfig::to_json() const {
  nlohmann::json j{{"outer_iterations", outer_iterations}, {"n_actions", n_actions},
                   {"success_threshold", success_threshold}, {"spec_threshold", spec_threshold},
                   {"track_noise", track_noise}, {"k", k}, {"lambda", lambda}, {"seed", seed},
                   {"frame_resolution", frame_resolution}};
  if (frames_dir) j["frames_dir"] = frames_dir->string();
  return j;
}

LoopConfig LoopConfig::from_json(const nlohmann::json& j) {
  LoopConfig c;
  c.outer_iterations = j.value("outer_iterations", c.outer_iterations);
  c.n_actions = j.value("n_actions", c.n_actions);
  c.success_threshold = j.value("success_threshold", c.success_threshold);
  c.spec_threshold = j.value("spec_threshold", c.spec_threshold);
  c.track_noise = j.value("track_noise", c.track_noise);
  c.k = j.value("k", c.k);
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  c.frame_resolution = j.value("frame_resolution", c.frame_resolution);
  if (j.contains("frames_dir")) c.frames_dir = j.at("frames_dir").get<std::string>();
  c.validate();
  return c;
}

LowLevelResult low_level_loop(const sim::WorldState& env, const dynamics::Model& model, dsl::TargetSpec spec,
                              const LoopConfig& config, const MppiParams& params, std::mt19937_64& rng,
                              const PushCallback& on_push) {
  config.validate();
  if (spec.empty()) throw Error("empty specification");
  LowLevelResult out;
  out.state = env;
  out.spec = std::move(spec);
  out.cost_trace.push_back(dsl::cost(sim::object_point_cloud(out.state), out.spec));
  for (int t = 0; t < config.n_actions; ++t) {
    if (out.cost_trace.back() < config.spec_threshold) break;
    try {
      const BatchCost f = model_cost(model, model_state(out.state), out.spec);
      const auto cands = heuristic_candidates(out.state, out.spec, params.horizon);
      Sequence nominal = cands.empty() ? Sequence{clip_action({0.0, 0.0, 0.0, 0.05})} : cands.front();
      MppiParams p = params;
      p.seed = rng();
      const PlanResult plan = mppi_plan(f, std::move(nominal), p, out.cost_trace.back(), cands);
      const sim::PushAction& a = plan.actions.front();
      out.state = sim::step(out.state, a).state;
      out.actions.push_back(a);
      out.predicted_costs.push_back(plan.cost);
      if (on_push) on_push(out.state);
      const PointCloud cloud = sim::object_point_cloud(out.state);
      const sim::WorldState& now = out.state;
      out.spec = perception::retrack(out.spec, cloud, config.track_noise, rng,
                                     [&now](const std::vector<int>& ids) { return sim::track_sources(now, ids); });
      out.cost_trace.push_back(dsl::cost(cloud, out.spec));
    } catch (const Error& e) {
      throw Error("low-level iteration " + std::to_string(t) + ": " + e.what());
    }
  }
  return out;
}

namespace {

nlohmann::json actions_json(const std::vector<sim::PushAction>& actions) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : actions) a.push_back({x.start_x, x.start_y, x.angle, x.length});
  return a;
}

}  // namespace

nlohmann::json RunReport::to_json() const {
  nlohmann::json its = nlohmann::json::array();
  for (const IterationRecord& r : iterations) {
    its.push_back({{"index", r.index},
                   {"response", r.response},
                   {"done", r.done},
                   {"parse_failed", r.parse_failed},
                   {"error", r.error},
                   {"examples", r.examples},
                   {"spec", r.spec.to_json()},
                   {"actions", actions_json(r.actions)},
                   {"cost_trace", r.cost_trace},
                   {"predicted_costs", r.predicted_costs},
                   {"chamfer_after", r.chamfer_after}});
  }
  return {{"task", task},
          {"instruction", instruction},
          {"backend", backend},
          {"config", config},
          {"iterations", its},
          {"initial_chamfer", initial_chamfer},
          {"final_chamfer", final_chamfer},
          {"success", success},
          {"infra_failure", infra_failure},
          {"error", error},
          {"pushes", pushes},
          {"wall_time_s", wall_time_s}};
}

RunReport high_level_loop(const sim::WorldState& env, tasks::TaskKind task, const std::string& instruction,
                          const RunContext& ctx, const LoopConfig& config, const MppiParams& params) {
  config.validate();
  params.validate();
  if (ctx.model == nullptr) throw Error("no dynamics model");
  if (ctx.backend == nullptr) throw Error("no vlm backend");
  if (ctx.model->material != env.material.kind)
    throw Error("model was trained for " + sim::to_string(ctx.model->material) + ", scene is " +
                sim::to_string(env.material.kind));
  if (instruction.empty()) throw Error("empty instruction");
  const auto t0 = std::chrono::steady_clock::now();

  RunReport rep;
  rep.task = tasks::to_string(task);
  rep.instruction = instruction;
  rep.backend = ctx.backend->name();
  rep.config = {{"loop", config.to_json()}, {"mppi", params.to_json()}};
  sim::WorldState s = env;
  rep.initial_chamfer = tasks::task_chamfer(task, s);
  std::mt19937_64 rng(config.seed ^ params.seed);

  int frame = 0;
  auto dump = [&](const sim::WorldState& w) {
    if (!config.frames_dir) return;
    std::filesystem::create_directories(*config.frames_dir);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.ppm", frame++);
    write_ppm(sim::render_topdown(w, config.frame_resolution), *config.frames_dir / name);
  };
  dump(s);

  for (int r = 0; r < config.outer_iterations; ++r) {
    IterationRecord rec;
    rec.index = r;
    const auto ann = perception::annotate_scene(s);
    ctx.backend->observe(s, ann);
    std::vector<const promptlib::PromptExample*> shots;
    if (ctx.library != nullptr && ctx.embedder != nullptr && config.k > 0) {
      const auto q = promptlib::embed_query(*ctx.embedder, ann.image, instruction);
      for (const auto& sc : promptlib::retrieve_topk(*ctx.library, q, config.k, config.lambda, ctx.exclude_categories)) {
        shots.push_back(&ctx.library->examples[sc.index]);
        rec.examples.push_back(ctx.library->examples[sc.index].name);
      }
    }
    rec.retrieved = static_cast<int>(shots.size());
    const vlm::PromptRequest req = vlm::assemble_prompt(ann, instruction, shots, config.k);

    std::optional<dsl::Verdict> verdict;
    for (int attempt = 0; attempt < 2 && !verdict; ++attempt) {
      try {
        rec.response = ctx.backend->query(req);
      } catch (const vlm::Unavailable& e) {
        rep.infra_failure = true;
        rep.error = e.what();
        break;
      }
      if (ctx.transcript != nullptr)
        ctx.transcript->log({{"iteration", r}, {"attempt", attempt}, {"request", req.summary()},
                             {"response", rec.response}});
      try {
        verdict = dsl::parse(rec.response);
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
    if (rep.infra_failure) {
      rec.error = rep.error;
      rep.iterations.push_back(std::move(rec));
      break;
    }
    if (!verdict) {
      rec.parse_failed = true;
      rep.error = "unparsable response at iteration " + std::to_string(r) + ": " + rec.error;
      rec.chamfer_after = tasks::task_chamfer(task, s);
      rep.iterations.push_back(std::move(rec));
      break;
    }
    rec.error.clear();
    if (verdict->done) {
      rec.done = true;
      rec.chamfer_after = tasks::task_chamfer(task, s);
      rep.iterations.push_back(std::move(rec));
      break;
    }
    try {
      rec.spec = dsl::resolve(verdict->assignments, ann, sim::object_point_cloud(s));
    } catch (const Error& e) {
      rec.error = e.what();
      rep.error = "unusable specification at iteration " + std::to_string(r) + ": " + e.what();
      rec.chamfer_after = tasks::task_chamfer(task, s);
      rep.iterations.push_back(std::move(rec));
      break;
    }
    MppiParams p = params;
    p.seed = params.seed + static_cast<std::uint64_t>(r) * 1000003ULL;
    LowLevelResult ll = low_level_loop(s, *ctx.model, rec.spec, config, p, rng, dump);
    s = std::move(ll.state);
    rec.actions = std::move(ll.actions);
    rec.cost_trace = std::move(ll.cost_trace);
    rec.predicted_costs = std::move(ll.predicted_costs);
    rec.chamfer_after = tasks::task_chamfer(task, s);
    rep.pushes += static_cast<int>(rec.actions.size());
    rep.iterations.push_back(std::move(rec));
  }

  rep.final_state = s;
  rep.final_chamfer = tasks::task_chamfer(task, s);
  rep.success = !rep.infra_failure && rep.final_chamfer < config.success_threshold;
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace keydyn::planner
