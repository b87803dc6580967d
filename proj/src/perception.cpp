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

#include "keydyn/perception.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "keydyn/tracking.hpp"

namespace keydyn::perception {
namespace {

constexpr Rgb kDotColor{220, 20, 20};
constexpr Rgb kCenterColor{20, 180, 40};
constexpr Rgb kLabelColor{0, 0, 0};

struct MaskPixels {
  std::vector<Point3> world;
  std::vector<Vec2> pixel;
  Vec2 centroid_pixel = Vec2::Zero();
};

MaskPixels collect(const sim::ObjectMask& mask, const sim::Camera& cam) {
  MaskPixels out;
  for (int v = 0; v < mask.height; ++v)
    for (int u = 0; u < mask.width; ++u)
      if (mask.at(u, v)) {
        const Vec2 px(u + 0.5, v + 0.5);
        const Vec2 w = cam.to_world(px);
        out.pixel.push_back(px);
        out.world.push_back({w.x(), w.y(), mask.surface_z});
        out.centroid_pixel += px;
      }
  if (!out.pixel.empty()) out.centroid_pixel /= static_cast<double>(out.pixel.size());
  return out;
}

void draw_keypoint(Image& img, const Keypoint& k, Rgb dot, const std::string& label) {
  const int scale = std::max(1, img.width() / 256);
  const double r = 2.5 * scale;
  fill_circle(img, k.pixel.x(), k.pixel.y(), r, dot);
  draw_label(img, static_cast<int>(k.pixel.x() + r + 1), static_cast<int>(k.pixel.y() - 2.5 * scale),
             label, kLabelColor, scale);
}

}  // namespace

const Keypoint* AnnotatedImage::find(int index) const {
  for (const Keypoint& k : keypoints)
    if (k.index == index) return &k;
  return nullptr;
}

nlohmann::json AnnotatedImage::sidecar() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const Keypoint& k : keypoints) {
    arr.push_back({{"index", k.index}, {"u", k.pixel.x()}, {"v", k.pixel.y()}, {"x", k.world.x},
                   {"y", k.world.y}, {"z", k.world.z}, {"object_id", k.object_id}});
  }
  return arr;
}

void AnnotatedImage::save(const std::filesystem::path& ppm_path) const {
  write_ppm(image, ppm_path);
  std::filesystem::path json_path = ppm_path;
  json_path.replace_extension(".json");
  std::ofstream out(json_path);
  if (!out) throw Error("cannot write " + json_path.string());
  out << sidecar().dump(2) << '\n';
}

AnnotatedImage propose_keypoints(const Image& image, const std::vector<sim::ObjectMask>& masks,
                                 const ProposalOptions& options) {
  const sim::Camera cam{image.width()};
  AnnotatedImage out;
  out.image = image;

  // Masks ordered by centroid, top row first.
  std::vector<MaskPixels> pixels;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].width != image.width() || masks[i].height != image.height())
      throw Error("mask size does not match the image");
    pixels.push_back(collect(masks[i], cam));
    if (!pixels.back().pixel.empty()) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Vec2& ca = pixels[a].centroid_pixel;
    const Vec2& cb = pixels[b].centroid_pixel;
    const double ra = std::floor(ca.y()), rb = std::floor(cb.y());
    return ra != rb ? ra < rb : ca.x() < cb.x();
  });

  std::vector<Keypoint> candidates;
  for (std::size_t i : order) {
    const MaskPixels& mp = pixels[i];
    // The centroid itself may fall off a curved mask; use the closest pixel.
    const Vec2 cw = cam.to_world(mp.centroid_pixel);
    const std::size_t seed = nearest_neighbor(Point3{cw.x(), cw.y(), masks[i].surface_z}, mp.world);
    const auto picks = farthest_point_sample(mp.world, static_cast<std::size_t>(options.max_per_mask) + 1,
                                             options.per_mask_radius, seed);
    for (std::size_t p : picks)
      candidates.push_back({0, mp.pixel[p], mp.world[p], masks[i].object_id});
  }

  if (!candidates.empty()) {
    std::vector<Point3> pts;
    for (const Keypoint& k : candidates) pts.push_back(k.world);
    auto keep = farthest_point_sample(pts, pts.size(), options.global_radius, 0);
    std::sort(keep.begin(), keep.end());
    int label = 1;
    for (std::size_t k : keep) {
      Keypoint kp = candidates[k];
      kp.index = label++;
      out.keypoints.push_back(kp);
    }
  }

  out.center.index = 0;
  out.center.object_id = kReferenceObject;
  out.center.pixel = Vec2(0.5 * image.width(), 0.5 * image.height());
  const Vec2 cw = cam.to_world(out.center.pixel);
  // The reference sits at the objects' surface height so planar targets
  // relative to C carry no vertical offset.
  out.center.world = {cw.x(), cw.y(), masks.empty() ? 0.0 : masks.front().surface_z};

  if (options.draw) {
    for (const Keypoint& k : out.keypoints) draw_keypoint(out.image, k, kDotColor, std::to_string(k.index));
    draw_keypoint(out.image, out.center, kCenterColor, "C");
  }
  return out;
}

AnnotatedImage annotate_scene(const sim::WorldState& state, int resolution, const ProposalOptions& options) {
  return propose_keypoints(sim::render_topdown(state, resolution), sim::ground_truth_masks(state, resolution),
                           options);
}

std::vector<sim::ObjectMask> discard_largest(std::vector<sim::ObjectMask> masks) {
  if (masks.empty()) return masks;
  std::size_t largest = 0;
  for (std::size_t i = 1; i < masks.size(); ++i)
    if (masks[i].pixel_count() > masks[largest].pixel_count()) largest = i;
  masks.erase(masks.begin() + static_cast<std::ptrdiff_t>(largest));
  return masks;
}

PointCloud t_template() {
  const double z = sim::Material::t_block().surface_z();
  PointCloud cloud;
  const auto& samples = sim::TBlockGeometry::samples();
  for (std::size_t i = 0; i < samples.size(); ++i)
    cloud.add({samples[i].x(), samples[i].y(), z}, 0, static_cast<int>(i));
  return cloud;
}

namespace {

/// Bucket grid for nearest-neighbor queries over a fixed 2D point set.
class GridIndex {
 public:
  GridIndex(const std::vector<Vec2>& pts, double cell) : pts_(pts), cell_(cell) {
    lo_ = hi_ = pts.front();
    for (const Vec2& p : pts) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    nx_ = static_cast<int>((hi_.x() - lo_.x()) / cell_) + 1;
    ny_ = static_cast<int>((hi_.y() - lo_.y()) / cell_) + 1;
    start_.assign(static_cast<std::size_t>(nx_) * ny_ + 1, 0);
    std::vector<std::size_t> cell_of(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      cell_of[i] = cell_index(pts[i]);
      ++start_[cell_of[i] + 1];
    }
    for (std::size_t c = 1; c < start_.size(); ++c) start_[c] += start_[c - 1];
    items_.resize(pts.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < pts.size(); ++i) items_[fill[cell_of[i]]++] = i;
  }

  /// Lowest index among the nearest points.
  std::size_t nearest(const Vec2& q) const {
    const int cx = std::clamp(static_cast<int>(std::floor((q.x() - lo_.x()) / cell_)), 0, nx_ - 1);
    const int cy = std::clamp(static_cast<int>(std::floor((q.y() - lo_.y()) / cell_)), 0, ny_ - 1);
    // Distance from q to the clamped cell, so rings are measured from there.
    const double ox = std::max({0.0, lo_.x() - q.x(), q.x() - hi_.x()});
    const double oy = std::max({0.0, lo_.y() - q.y(), q.y() - hi_.y()});
    const double outside = std::hypot(ox, oy);
    std::size_t best = pts_.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (int ring = 0;; ++ring) {
      if (best < pts_.size()) {
        const double reach = outside + (ring - 1) * cell_;
        if (reach > 0.0 && reach * reach > best_d) break;
      }
      if (ring > nx_ + ny_) break;
      for (int y = cy - ring; y <= cy + ring; ++y) {
        if (y < 0 || y >= ny_) continue;
        for (int x = cx - ring; x <= cx + ring; ++x) {
          if (x < 0 || x >= nx_) continue;
          if (std::max(std::abs(x - cx), std::abs(y - cy)) != ring) continue;
          const std::size_t c = static_cast<std::size_t>(y) * nx_ + x;
          for (std::size_t k = start_[c]; k < start_[c + 1]; ++k) {
            const std::size_t i = items_[k];
            const double d = (pts_[i] - q).squaredNorm();
            if (d < best_d || (d == best_d && i < best)) {
              best_d = d;
              best = i;
            }
          }
        }
      }
    }
    return best;
  }

 private:
  std::size_t cell_index(const Vec2& p) const {
    const int x = std::clamp(static_cast<int>(std::floor((p.x() - lo_.x()) / cell_)), 0, nx_ - 1);
    const int y = std::clamp(static_cast<int>(std::floor((p.y() - lo_.y()) / cell_)), 0, ny_ - 1);
    return static_cast<std::size_t>(y) * nx_ + x;
  }

  const std::vector<Vec2>& pts_;
  double cell_;
  Vec2 lo_, hi_;
  int nx_ = 1, ny_ = 1;
  std::vector<std::size_t> start_;
  std::vector<std::size_t> items_;
};

IcpResult icp_from(const std::vector<Vec2>& cloud, const GridIndex& cloud_index,
                   const std::vector<Vec2>& tmpl, Pose2D pose) {
  // Correspondences run in both directions so the fit cannot shrink onto part
  // of the cloud.
  IcpResult res;
  const std::size_t n = cloud.size() + tmpl.size();
  std::vector<std::size_t> corr(n, std::numeric_limits<std::size_t>::max());
  std::vector<Vec2> from(n), to(n);
  for (int it = 0; it < 50; ++it) {
    std::vector<Vec2> moved(tmpl.size());
    for (std::size_t j = 0; j < tmpl.size(); ++j) moved[j] = pose.apply(tmpl[j]);
    const GridIndex tmpl_index(moved, 0.01);
    bool changed = false;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const std::size_t c = tmpl_index.nearest(cloud[i]);
      changed = changed || c != corr[i];
      corr[i] = c;
      from[i] = tmpl[c];
      to[i] = cloud[i];
    }
    for (std::size_t j = 0; j < tmpl.size(); ++j) {
      const std::size_t c = cloud_index.nearest(moved[j]);
      const std::size_t k = cloud.size() + j;
      changed = changed || c != corr[k];
      corr[k] = c;
      from[k] = tmpl[j];
      to[k] = cloud[c];
    }
    res.iterations = it + 1;
    if (!changed) break;
    pose = fit_rigid_transform(from, to);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += (pose.apply(from[i]) - to[i]).squaredNorm();
  res.pose = pose;
  res.residual = std::sqrt(sum / static_cast<double>(n));
  return res;
}

}  // namespace

IcpResult icp_t_pose(const PointCloud& cloud, const PointCloud& template_cloud) {
  if (cloud.size() < 10) throw Error("insufficient points");
  if (template_cloud.empty()) throw Error("empty template");
  std::vector<Vec2> c, t;
  Vec2 cc = Vec2::Zero(), tc = Vec2::Zero();
  for (const Point3& p : cloud.points) {
    c.push_back(p.xy());
    cc += p.xy();
  }
  for (const Point3& p : template_cloud.points) {
    t.push_back(p.xy());
    tc += p.xy();
  }
  cc /= static_cast<double>(c.size());
  tc /= static_cast<double>(t.size());
  const GridIndex cloud_index(c, 0.01);
  IcpResult best;
  best.residual = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 8; ++k) {
    const double theta = k * std::numbers::pi / 4;
    const Pose2D rot(0.0, 0.0, theta);
    const Vec2 trans = cc - rot.rotate(tc);
    const IcpResult r = icp_from(c, cloud_index, t, Pose2D(trans.x(), trans.y(), theta));
    if (r.residual < best.residual) best = r;
  }
  // Area samples on a regular grid leave local minima one sample spacing
  // away from the optimum; restart from shifted poses until none improves.
  const double step = 0.005;
  for (int round = 0; round < 4; ++round) {
    bool improved = false;
    const IcpResult base = best;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        if (dx == 0 && dy == 0) continue;
        const Vec2 shift = base.pose.rotate(Vec2(dx * step, dy * step));
        const Pose2D start(base.pose.x() + shift.x(), base.pose.y() + shift.y(), base.pose.theta());
        const IcpResult r = icp_from(c, cloud_index, t, start);
        if (r.residual < best.residual - 1e-12) {
          best = r;
          improved = true;
        }
      }
    if (!improved) break;
  }
  return best;
}

Pose2D estimate_t_pose(const PointCloud& cloud, const PointCloud& template_cloud) {
  return icp_t_pose(cloud, template_cloud).pose;
}

std::array<Point3, 4> t_keypoints_from_pose(const Pose2D& pose) {
  const double z = sim::Material::t_block().surface_z();
  std::array<Point3, 4> out;
  const auto kps = sim::TBlockGeometry::keypoints();
  for (int i = 0; i < 4; ++i) {
    const Vec2 w = pose.apply(kps[i]);
    out[i] = {w.x(), w.y(), z};
  }
  return out;
}

dsl::TargetSpec retrack(const dsl::TargetSpec& prev, const PointCloud& new_cloud, double noise_sigma,
                        std::mt19937_64& rng, const TrackFn& track) {
  if (new_cloud.empty()) throw Error("empty point cloud");
  std::vector<Point3> tracked;
  if (track) {
    std::vector<int> ids;
    for (const auto& p : prev.pairs) ids.push_back(p.source_id);
    tracked = track(ids);
    if (tracked.size() != prev.pairs.size()) throw Error("tracker returned the wrong number of points");
  } else {
    for (const auto& p : prev.pairs) {
      Point3 pos = p.bound;
      for (std::size_t i = 0; i < new_cloud.source_ids.size(); ++i)
        if (new_cloud.source_ids[i] == p.source_id) {
          pos = new_cloud.points[i];
          break;
        }
      tracked.push_back(pos);
    }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  dsl::TargetSpec out = prev;
  for (std::size_t k = 0; k < out.pairs.size(); ++k) {
    Point3 q = tracked[k];
    if (noise_sigma > 0.0) {
      q.x += noise_sigma * noise(rng);
      q.y += noise_sigma * noise(rng);
    }
    auto& pair = out.pairs[k];
    pair.bound_index = nearest_neighbor(q, new_cloud);
    pair.bound = new_cloud.points[pair.bound_index];
    pair.source_id = new_cloud.source_ids.empty() ? static_cast<int>(pair.bound_index)
                                                  : new_cloud.source_ids[pair.bound_index];
  }
  return out;
}

}  // namespace keydyn::perception
