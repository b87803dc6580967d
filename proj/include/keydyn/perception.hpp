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
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/geometry.hpp"
#include "keydyn/image.hpp"
#include "keydyn/sim.hpp"

namespace keydyn::perception {

/// object_id used for the "C" reference marker.
inline constexpr int kReferenceObject = -1;

struct Keypoint {
  /// Label drawn next to the dot; 1-based for object keypoints.
  int index = 0;
  /// Sub-pixel image position (pixel centers sit at +0.5).
  Vec2 pixel = Vec2::Zero();
  Point3 world;
  int object_id = kReferenceObject;

  bool is_reference() const { return object_id == kReferenceObject; }
};

struct AnnotatedImage {
  Image image;
  std::vector<Keypoint> keypoints;
  /// The green "C" dot at the image center; world origin.
  Keypoint center;

  const Keypoint* find(int index) const;
  nlohmann::json sidecar() const;
  void save(const std::filesystem::path& ppm_path) const;
};

struct ProposalOptions {
  double per_mask_radius = 0.02;
  double global_radius = 0.03;
  int max_per_mask = 8;
  bool draw = true;
};

/// Keypoints per mask (centroid plus up to `max_per_mask` FPS points), thinned
/// by a global FPS pass and drawn as labeled red dots; "C" marks the center.
/// Masks must already exclude the background.
AnnotatedImage propose_keypoints(const Image& image, const std::vector<sim::ObjectMask>& masks,
                                 const ProposalOptions& options = {});

/// Renders the scene and annotates it using the simulator's object masks.
AnnotatedImage annotate_scene(const sim::WorldState& state, int resolution = 256,
                              const ProposalOptions& options = {});

/// Removes the largest mask (the table in a real segmentation).
std::vector<sim::ObjectMask> discard_largest(std::vector<sim::ObjectMask> masks);

/// Canonical T sampling in the block frame at the block surface height.
PointCloud t_template();

struct IcpResult {
  Pose2D pose;
  double residual = 0.0;
  int iterations = 0;
};

/// Planar ICP from `template_cloud` onto `cloud`, restarted from 8 rotations.
IcpResult icp_t_pose(const PointCloud& cloud, const PointCloud& template_cloud);
Pose2D estimate_t_pose(const PointCloud& cloud, const PointCloud& template_cloud);

/// tc, tr, tl, bt at the block surface height.
std::array<Point3, 4> t_keypoints_from_pose(const Pose2D& pose);

}  // namespace keydyn::perception
