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

#include <functional>
#include <random>
#include <vector>

#include "keydyn/geometry.hpp"
#include "keydyn/specdsl.hpp"

namespace keydyn::perception {

/// Ground-truth current positions of the given source ids (stand-in for a
/// point tracker).
using TrackFn = std::function<std::vector<Point3>(const std::vector<int>& source_ids)>;

/// Moves every bound keypoint to its tracked position plus Gaussian noise,
/// then snaps it to the nearest point of the freshly sampled `new_cloud`.
/// Targets are left untouched. Without `track`, positions are looked up by
/// source id in `new_cloud` and fall back to the previous bound point.
dsl::TargetSpec retrack(const dsl::TargetSpec& prev, const PointCloud& new_cloud,
                        double noise_sigma, std::mt19937_64& rng, const TrackFn& track = {});

}  // namespace keydyn::perception
