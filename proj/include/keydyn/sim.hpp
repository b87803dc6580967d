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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/geometry.hpp"
#include "keydyn/image.hpp"

namespace keydyn::sim {

/// Square workspace centered at the origin.
inline constexpr double kWorkspaceHalf = 0.4;
inline constexpr double kMaxPushLength = 0.20;
/// Pusher travel per physics substep.
inline constexpr double kSubstep = 0.002;
inline constexpr int kSolverIterations = 10;
inline constexpr double kCubeSide = 0.03;
inline constexpr double kRopeSpacing = 0.01;
inline constexpr double kRopeRadius = 0.005;
inline constexpr double kCubeParticleRadius = 0.005;

enum class MaterialKind { rope, cubes, granular, t_block };

std::string to_string(MaterialKind kind);
MaterialKind material_kind_from_string(const std::string& name);

struct Material {
  MaterialKind kind = MaterialKind::rope;
  /// Rope particles, cube count or granular disk count. Always 1 for t_block.
  int count = 41;
  /// Total rope length.
  double length = 0.4;
  /// Rope bending stiffness in (0, 1].
  double stiffness = 0.8;
  /// Granular disk radius.
  double radius = 0.006;

  static Material rope(double length, double stiffness);
  static Material granular(int count, double radius);
  static Material cubes(int count);
  static Material t_block();

  void validate() const;
  double segment_rest_length() const;
  /// Fixed z of the object surface in the planar world.
  double surface_z() const;
  double particle_radius() const;

  nlohmann::json to_json() const;
  static Material from_json(const nlohmann::json& j);
};

struct TBlockGeometry {
  static constexpr double height = 0.12;
  static constexpr double width = 0.12;
  static constexpr double stem_width = 0.03;
  static constexpr double bar_width = 0.03;

  /// Center of mass in the block frame (origin at the bounding-box center).
  static Vec2 center_of_mass();
  /// Canonical keypoints tc, tr, tl, bt in the block frame.
  static std::array<Vec2, 4> keypoints();
  /// Signed distance from a block-frame point to the T outline and the
  /// outward normal of the closest feature.
  static double signed_distance(const Vec2& p, Vec2* normal = nullptr);
  /// Outline polygons (bar, stem) in the block frame.
  static std::array<std::array<Vec2, 4>, 2> rectangles();
  /// Sample grid (5 mm, boundary inclusive) covering the T in the block frame.
  static const std::vector<Vec2>& samples();
  static double area();
};

enum class PusherKind { cylinder, board };

std::string to_string(PusherKind kind);
PusherKind pusher_kind_from_string(const std::string& name);

struct Pusher {
  static constexpr double kCylinderRadius = 0.005;
  static constexpr double kBoardLength = 0.10;
  static constexpr double kBoardThickness = 0.005;

  PusherKind kind = PusherKind::cylinder;
  /// Center and, for the board, the orientation of its long axis.
  Pose2D pose;

  /// Model particles: 1 for the cylinder, 5 spread along the board.
  std::vector<Vec2> particles() const;
  static int particle_count(PusherKind kind) { return kind == PusherKind::cylinder ? 1 : 5; }
  static PusherKind default_for(MaterialKind kind);
};

struct PushAction {
  double start_x = 0.0;
  double start_y = 0.0;
  double angle = 0.0;
  double length = 0.0;

  Vec2 start() const { return {start_x, start_y}; }
  Vec2 direction() const;
  Vec2 end() const { return start() + length * direction(); }
  void validate() const;
  bool valid() const;
  friend bool operator==(const PushAction&, const PushAction&) = default;
};

enum class MarkerShape { cross, square };

/// Table decoration that shows up in renders but is not an object.
struct Marker {
  MarkerShape shape = MarkerShape::cross;
  Vec2 center = Vec2::Zero();
  double size = 0.06;
  double rotation = 0.0;
  Rgb color{255, 150, 200};
};

struct WorldState {
  Material material;
  /// Particles for rope, granular and cubes.
  std::vector<Vec2> particles;
  std::vector<int> particle_object;
  /// Bounding-box-center pose of the T block.
  Pose2D block;
  Pusher pusher;
  std::vector<Marker> markers;

  int object_count() const;
  /// Rigid pose of cube `id` fitted to its particles.
  Pose2D cube_pose(int id) const;
};

/// Orthographic top-down camera over the workspace.
struct Camera {
  int resolution = 256;

  double meters_per_pixel() const { return 2.0 * kWorkspaceHalf / resolution; }
  Vec2 to_pixel(const Vec2& world) const;
  Vec2 to_world(const Vec2& pixel) const;
  Vec2 pixel_center(int u, int v) const { return to_world({u + 0.5, v + 0.5}); }
};

struct StepResult {
  WorldState state;
  /// Snapshots every `frame_stride` meters of pusher travel; the last entry
  /// equals `state`.
  std::vector<WorldState> frames;
};

WorldState make_rope(double length, double stiffness, const std::vector<Vec2>& centerline);
WorldState make_granular(const std::vector<Vec2>& centers, double radius);
WorldState make_cubes(const std::vector<Pose2D>& poses);
WorldState make_t_block(const Pose2D& pose);

/// Sweeps the pusher along `action`. Throws on an invalid action.
StepResult step(const WorldState& state, const PushAction& action,
                double frame_stride = 0.0);

/// Moves particles out of any interpenetration without moving the pusher.
void settle(WorldState& state);

/// Maximum constraint residuals used by tests and the frame-boundary solver.
double max_granular_overlap(const WorldState& state);
double max_rope_strain(const WorldState& state);

struct EpisodeOptions {
  double segment_length = 0.02;
  bool randomize_params = true;
  double rope_length_min = 0.3, rope_length_max = 0.5;
  double rope_stiffness_min = 0.5, rope_stiffness_max = 1.0;
  double granular_radius_min = 0.004, granular_radius_max = 0.008;
};

struct Episode {
  Material material;
  PusherKind pusher = PusherKind::cylinder;
  /// Per frame: object points (t_block: the four keypoints tc, tr, tl, bt).
  std::vector<std::vector<Point3>> frames;
  /// Model-step actions; frames.size() == actions.size() + 1.
  std::vector<PushAction> actions;
  /// Indices into `actions` where a new push begins (the pusher relocated).
  std::vector<std::size_t> interaction_starts;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static Episode from_json(const nlohmann::json& j);
};

/// Random initial scene for `material` (parameters randomized per options).
WorldState random_scene(const Material& material, std::uint64_t seed,
                        const EpisodeOptions& options = {});

Episode generate_episode(const Material& material, int n_interactions,
                         std::uint64_t seed, const EpisodeOptions& options = {});

void write_episodes(const std::vector<Episode>& episodes, const std::filesystem::path& path);
std::vector<Episode> read_episodes(const std::filesystem::path& path);

/// Frame content recorded for a state (see Episode::frames).
std::vector<Point3> frame_points(const WorldState& state);

Image render_topdown(const WorldState& state, int resolution);

struct ObjectMask {
  int object_id = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;
  double surface_z = 0.0;

  bool at(int u, int v) const { return bits[static_cast<std::size_t>(v) * width + u] != 0; }
  std::size_t pixel_count() const;
};

std::vector<ObjectMask> ground_truth_masks(const WorldState& state, int resolution);

/// Object sample points labeled by object id, with source ids for tracking.
PointCloud object_point_cloud(const WorldState& state);

/// Current positions of the object samples named by `source_ids`.
std::vector<Point3> track_sources(const WorldState& state, const std::vector<int>& source_ids);

}  // namespace keydyn::sim
