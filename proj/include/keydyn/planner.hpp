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

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/dynamics.hpp"
#include "keydyn/promptlib.hpp"
#include "keydyn/sim.hpp"
#include "keydyn/specdsl.hpp"
#include "keydyn/tasks.hpp"
#include "keydyn/vlm.hpp"

namespace keydyn::planner {

using Sequence = std::vector<sim::PushAction>;

/// Cost of every sequence in a batch; non-finite entries mark failed rollouts.
using BatchCost = std::function<std::vector<double>(const std::vector<Sequence>&)>;

struct MppiParams {
  int samples = 128;
  int horizon = 1;
  int iterations = 3;
  /// Noise on (start_x, start_y, angle, length).
  std::array<double, 4> sigma{0.05, 0.05, 0.6, 0.05};
  /// Temperature as a fraction of the reference cost; `temperature` > 0 overrides it.
  double temperature_fraction = 0.1;
  double temperature = 0.0;
  /// Share of first-iteration samples whose angle is drawn uniformly.
  double explore_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MppiParams from_json(const nlohmann::json& j);
};

/// Keeps a push valid: start inside the workspace, length in (0, 0.2] m and
/// the end point on the table.
sim::PushAction clip_action(sim::PushAction a);

/// exp(-(S_j - min S) / beta), zero for non-finite costs.
std::vector<double> mppi_weights(const std::vector<double>& costs, double beta);

struct PlanResult {
  Sequence actions;
  double cost = 0.0;
  int evaluations = 0;
};

/// Sampling-based refinement of `nominal`. `candidates` are scored together
/// with the first batch; `reference_cost` sets the temperature.
PlanResult mppi_plan(const BatchCost& cost, Sequence nominal, const MppiParams& params, double reference_cost,
                     const std::vector<Sequence>& candidates = {});

/// Planner view of a scene: FPS vertices for particle materials, the sampled
/// outline for the T block.
dynamics::ModelState model_state(const sim::WorldState& state, double vertex_radius = dynamics::kVertexRadius);

/// Specification cost after each sequence, predicted by the model. Each bound
/// point follows the displacement of its nearest model point.
BatchCost model_cost(const dynamics::Model& model, const dynamics::ModelState& init, const dsl::TargetSpec& spec);

/// Pushes that carry each bound point straight toward its target, worst pair first.
std::vector<Sequence> heuristic_candidates(const sim::WorldState& state, const dsl::TargetSpec& spec, int horizon);

struct LoopConfig {
  int outer_iterations = 2;
  int n_actions = 10;
  double success_threshold = tasks::kSuccessThreshold;
  /// Early exit of the inner loop once the specification cost drops below this.
  double spec_threshold = tasks::kSuccessThreshold;
  double track_noise = 0.0;
  std::size_t k = promptlib::kDefaultK;
  double lambda = promptlib::kDefaultLambda;
  std::uint64_t seed = 0;
  /// Numbered PPM renders after every push when set.
  std::optional<std::filesystem::path> frames_dir;
  int frame_resolution = 256;

  void validate() const;
  nlohmann::json to_json() const;
  static LoopConfig from_json(const nlohmann::json& j);
};

struct LowLevelResult {
  sim::WorldState state;
  std::vector<sim::PushAction> actions;
  /// Measured specification cost before the first push and after each push.
  std::vector<double> cost_trace;
  /// Model prediction for each executed push.
  std::vector<double> predicted_costs;
  dsl::TargetSpec spec;
};

using PushCallback = std::function<void(const sim::WorldState&)>;

LowLevelResult low_level_loop(const sim::WorldState& env, const dynamics::Model& model, dsl::TargetSpec spec,
                              const LoopConfig& config, const MppiParams& params, std::mt19937_64& rng,
                              const PushCallback& on_push = {});

struct IterationRecord {
  int index = 0;
  std::string response;
  bool done = false;
  bool parse_failed = false;
  std::string error;
  int retrieved = 0;
  std::vector<std::string> examples;
  dsl::TargetSpec spec;
  std::vector<sim::PushAction> actions;
  std::vector<double> cost_trace;
  std::vector<double> predicted_costs;
  double chamfer_after = 0.0;
};

struct RunReport {
  std::string task;
  std::string instruction;
  std::string backend;
  nlohmann::json config;
  std::vector<IterationRecord> iterations;
  double initial_chamfer = 0.0;
  double final_chamfer = 0.0;
  bool success = false;
  /// Stopped because the VLM backend was unavailable (not a task failure).
  bool infra_failure = false;
  std::string error;
  int pushes = 0;
  double wall_time_s = 0.0;
  sim::WorldState final_state;

  nlohmann::json to_json() const;
};

struct RunContext {
  const dynamics::Model* model = nullptr;
  vlm::Backend* backend = nullptr;
  const promptlib::Library* library = nullptr;
  const promptlib::Embedder* embedder = nullptr;
  /// Categories hidden from retrieval.
  std::vector<std::string> exclude_categories;
  vlm::Transcript* transcript = nullptr;
};

RunReport high_level_loop(const sim::WorldState& env, tasks::TaskKind task, const std::string& instruction,
                          const RunContext& context, const LoopConfig& config, const MppiParams& params);

}  // namespace keydyn::planner
