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

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/sim.hpp"

namespace keydyn::tasks {

enum class TaskKind { rope_straighten, cube_collect, cube_move, granular_collect, granular_move, t_move };

inline constexpr double kSuccessThreshold = 0.03;
/// Generated scenes start at least this far from their goal.
inline constexpr double kMinStartChamfer = 0.04;

std::string to_string(TaskKind kind);
TaskKind task_from_string(const std::string& name);
std::vector<TaskKind> all_tasks();
std::string default_instruction(TaskKind kind);
sim::MaterialKind material_for(TaskKind kind);

/// Scene parameters. The goal marker, when the task has one, is markers[0].
struct SceneOptions {
  double rope_length = 0.4;
  double rope_stiffness = 0.8;
  int cube_count = 3;
  int granular_count = 40;
  double granular_radius = 0.006;
  /// granular_collect: fraction of beans placed in two satellite clusters.
  double satellite_fraction = 0.5;

  nlohmann::json to_json() const;
  static SceneOptions from_json(const nlohmann::json& j);
};

sim::WorldState make_scene(TaskKind kind, std::uint64_t seed, const SceneOptions& options = {});

/// Points the task is judged on: all particles, cube 0 for cube_move, or
/// the sampled T outline.
std::vector<Vec2> evaluated_points(TaskKind kind, const sim::WorldState& state);
/// Goal configuration of the evaluated points.
std::vector<Vec2> evaluation_target(TaskKind kind, const sim::WorldState& state);
double task_chamfer(TaskKind kind, const sim::WorldState& state);

/// Center the granular_collect target is built around (coordinate-wise median).
Vec2 granular_gather_center(const sim::WorldState& state);
/// Goal pose of the T block (the square marker).
Pose2D t_goal_pose(const sim::WorldState& state);
/// Cube slots around the goal used by cube_collect, nearest first.
std::vector<Vec2> collect_slots(const Vec2& goal, int count);

}  // namespace keydyn::tasks
