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
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/geometry.hpp"
#include "keydyn/sim.hpp"
#include "keydyn/tape.hpp"

namespace keydyn::dynamics {

inline constexpr double kVertexRadius = 0.02;
inline constexpr double kEdgeRadius = 0.06;
/// Pusher travel covered by one model step.
inline constexpr double kModelStep = 0.02;

inline constexpr int kVertexFeatures = 8;
inline constexpr int kEdgeFeatures = 6;

enum class EdgeType { same_object = 0, other_object = 1, pusher = 2 };

/// One graph, or several graphs batched as a disjoint union. Object vertices
/// have object_ids >= 0, pusher vertices -1.
struct DynGraph {
  sim::MaterialKind material = sim::MaterialKind::rope;
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
  std::vector<int> object_ids;
  std::vector<int> receivers;
  std::vector<int> senders;
  std::vector<EdgeType> edge_types;
  /// Rows of object vertices, in vertex order.
  std::vector<int> object_rows;

  std::size_t vertex_count() const { return positions.size(); }
  std::size_t edge_count() const { return receivers.size(); }
  std::size_t pusher_count() const { return positions.size() - object_rows.size(); }
  void append(const DynGraph& other);
};

/// Graph over given object vertices and pusher particles; edges connect
/// vertices closer than `d` (objects both ways, pusher to object one way).
DynGraph make_graph(sim::MaterialKind material, std::span<const Vec2> positions,
                    std::span<const Vec2> velocities, std::span<const int> object_ids,
                    std::span<const Vec2> pusher, const Vec2& pusher_velocity, double d = kEdgeRadius);

/// Samples object vertices with FPS (radius r) and builds the graph.
/// Velocities are cloud - prev_cloud (same indexing).
DynGraph build_graph(sim::MaterialKind material, const PointCloud& cloud, const PointCloud& pusher_particles,
                     const PointCloud& prev_cloud, const Vec2& pusher_velocity, double r = kVertexRadius,
                     double d = kEdgeRadius);

/// Per-quantity scales used to standardize features and outputs.
struct Normalizer {
  double velocity = 0.01;
  double displacement = kEdgeRadius;
  double delta = 0.01;

  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

struct GnnConfig {
  int hidden = 64;
  int layers = 3;
};

/// Message-passing dynamics: encoders for vertices and relations, `layers`
/// rounds of shared-weight propagation, decoder to per-vertex displacement.
class GnnModel {
 public:
  GnnModel() = default;
  GnnModel(const GnnConfig& config, std::uint64_t seed);

  /// Predicted next positions of the object vertices (in object_rows order).
  std::vector<Vec2> forward(const DynGraph& graph) const;
  /// Predicted displacement per object vertex, in meters.
  nn::Mat predict_deltas(const DynGraph& graph) const;
  /// Recorded forward pass returning the object-vertex displacement node.
  nn::Tape::Id record(nn::Tape& tape, const DynGraph& graph);

  std::vector<nn::Param*> params();
  std::vector<const nn::Param*> params() const;
  const GnnConfig& config() const { return config_; }

  Normalizer norm;

 private:
  nn::Mat vertex_features(const DynGraph& g) const;
  nn::Mat edge_features(const DynGraph& g) const;

  GnnConfig config_;
  nn::Mlp vertex_encoder_;
  nn::Mlp edge_encoder_;
  // First relation-propagation layer split by input block.
  nn::Param prop_edge_w_, prop_recv_w_, prop_send_w_, prop_b_;
  nn::Linear prop_out_;
  nn::Mlp vertex_prop_;
  nn::Mlp decoder_;
};

/// T-block keypoints tc, tr, tl, bt plus the pusher position.
struct TState {
  std::array<Vec2, 4> keypoints;
  Vec2 pusher = Vec2::Zero();
};

/// Block-local frame: origin at the keypoint centroid, x along tl -> tr.
Pose2D t_local_frame(const std::array<Vec2, 4>& keypoints);

class TModel {
 public:
  TModel() = default;
  TModel(int hidden, std::uint64_t seed);

  /// Next state for a pusher displacement `action`; the pusher itself moves
  /// kinematically.
  TState forward(const TState& state, const Vec2& action) const;
  /// 12 local-frame inputs (4 keypoints, pusher, action), unscaled.
  static Eigen::RowVectorXd local_inputs(const TState& state, const Vec2& action);
  /// Batched local-frame prediction: rows of 10 displacements in meters.
  nn::Mat predict_local(const nn::Mat& inputs) const;
  nn::Tape::Id record(nn::Tape& tape, const nn::Mat& inputs);

  std::vector<nn::Param*> params();
  std::vector<const nn::Param*> params() const;
  int hidden() const { return hidden_; }

  /// Scale of the local-frame positions and of the predicted displacements.
  double input_scale = 0.06;
  double output_scale = 0.01;

 private:
  int hidden_ = 64;
  nn::Mlp net_;
};

enum class Arch { gnn, t_mlp };

struct Model {
  Arch arch = Arch::gnn;
  sim::MaterialKind material = sim::MaterialKind::rope;
  std::uint64_t seed = 0;
  GnnModel gnn;
  TModel t;

  /// Rounds every weight to float precision (the checkpoint precision).
  void quantize();
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);
};

struct TrainConfig {
  int steps = 20000;
  int batch = 16;
  double lr = 1e-3;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  int hidden = 64;
  int layers = 3;
  double vertex_radius = kVertexRadius;
  double edge_radius = kEdgeRadius;
  /// Negative control: pair inputs with targets of other samples.
  bool shuffle_labels = false;
  int log_every = 100;
  std::function<void(int step, double loss)> progress;
};

struct TrainResult {
  Model model;
  /// Mean training loss (m^2) per log window.
  std::vector<double> loss_history;
  /// Validation position MSE (m^2) and the predict-no-motion MSE.
  double val_error = 0.0;
  double val_baseline = 0.0;
  std::vector<std::size_t> train_episodes;
  std::vector<std::size_t> val_episodes;
};

/// Splits episodes by index into train/validation (deterministic per seed).
void split_episodes(std::size_t count, double val_fraction, std::uint64_t seed,
                    std::vector<std::size_t>& train, std::vector<std::size_t>& val);

/// One supervised transition.
struct GraphSample {
  DynGraph graph;
  /// True displacement per object vertex (rows follow graph.object_rows).
  nn::Mat target;
};

struct TSample {
  TState state;
  Vec2 action = Vec2::Zero();
  TState next;
};

std::vector<GraphSample> graph_samples(const sim::Episode& ep, double r = kVertexRadius, double d = kEdgeRadius);
std::vector<TSample> t_samples(const sim::Episode& ep);

TrainResult train(const std::vector<sim::Episode>& episodes, const TrainConfig& config);

/// Loss of one batch in m^2 (used by gradient checks).
double gnn_batch_loss(GnnModel& model, std::span<const GraphSample* const> batch, bool backward);
double t_batch_loss(TModel& model, std::span<const TSample* const> batch, bool backward);

/// One-step keypoint RMSE (m) of a T model over samples.
double t_keypoint_rmse(const TModel& model, std::span<const TSample> samples);

/// Object state as seen by the planner.
struct ModelState {
  sim::MaterialKind material = sim::MaterialKind::rope;
  sim::PusherKind pusher = sim::PusherKind::cylinder;
  /// Tracked object points (graph vertices, or T sample points).
  std::vector<Vec2> points;
  std::vector<int> object_ids;
  std::vector<Vec2> velocities;
  /// T block only: keypoints and the points in the block frame.
  std::array<Vec2, 4> keypoints{};
  std::vector<Vec2> body_points;

  /// Builds a state from points; for t_block the pose fixes keypoints and body points.
  static ModelState particles(sim::MaterialKind material, sim::PusherKind pusher, std::vector<Vec2> points,
                              std::vector<int> object_ids);
  static ModelState t_block(const Pose2D& pose, std::vector<Vec2> points);
};

/// Model steps of at most `step` along a push.
std::vector<sim::PushAction> split_push(const sim::PushAction& push, double step = kModelStep);

/// Applies the model step by step; returns the initial state followed by the
/// state after every push.
std::vector<ModelState> rollout(const Model& model, const ModelState& init,
                                std::span<const sim::PushAction> pushes);

/// Final object points after each push sequence, evaluated in batches.
std::vector<std::vector<Vec2>> rollout_final(const Model& model, const ModelState& init,
                                             const std::vector<std::vector<sim::PushAction>>& sequences);

}  // namespace keydyn::dynamics
