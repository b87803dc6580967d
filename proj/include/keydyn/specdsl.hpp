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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/geometry.hpp"
#include "keydyn/perception.hpp"

namespace keydyn::dsl {

enum class Reference { keypoint, center, absolute };

/// p_target = <reference> + [dx, dy, dz], offsets in centimeters.
struct Assignment {
  int target = 0;
  Reference reference = Reference::absolute;
  /// Keypoint label when reference == keypoint.
  int ref_index = 0;
  std::array<double, 3> offset_cm{0.0, 0.0, 0.0};

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct Verdict {
  bool done = false;
  std::vector<Assignment> assignments;
  std::vector<std::string> warnings;
};

/// Extracts assignments from model output without executing it. Accepts
/// `p_i = p_a + [..]`, `p_i = C + [..]` and `p_i = [..]`; "Done." (optionally
/// fenced) yields a done verdict. Throws on malformed assignment lines and on
/// text with nothing to extract.
Verdict parse(std::string_view code);

/// Shortest text that parses back to the same value.
std::string format_number(double v);
std::string format(const Assignment& a);
std::string format(std::span<const Assignment> assignments);

struct TargetPair {
  int kp = 0;
  /// Index of the bound point in the cloud it was resolved or retracked against.
  std::size_t bound_index = 0;
  /// Source id of the bound point (its index when the cloud has none).
  int source_id = -1;
  Point3 bound;
  Point3 target;
};

struct TargetSpec {
  std::vector<TargetPair> pairs;

  bool empty() const { return pairs.empty(); }
  nlohmann::json to_json() const;
  static TargetSpec from_json(const nlohmann::json& j);
};

/// Converts offsets to meters, adds them to the reference position and binds
/// every target keypoint to its nearest object point.
TargetSpec resolve(std::span<const Assignment> assignments,
                   const perception::AnnotatedImage& annotation, const PointCloud& object_cloud);

/// Sum over pairs of |o_i - p_i|, where o_i is looked up by source id in
/// `state` (by bound_index when `state` carries no source ids).
double cost(const PointCloud& state, const TargetSpec& spec);

/// Same sum with o_i = positions[bound_index] (planar, z from the targets'
/// bound points).
double cost_at(std::span<const Vec2> positions, const TargetSpec& spec);

}  // namespace keydyn::dsl
