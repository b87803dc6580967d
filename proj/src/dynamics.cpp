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

#include "keydyn/dynamics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace keydyn::dynamics {

using nn::Mat;
using nn::Tape;

// ----- graphs -----

void DynGraph::append(const DynGraph& other) {
  const int offset = static_cast<int>(positions.size());
  positions.insert(positions.end(), other.positions.begin(), other.positions.end());
  velocities.insert(velocities.end(), other.velocities.begin(), other.velocities.end());
  object_ids.insert(object_ids.end(), other.object_ids.begin(), other.object_ids.end());
  for (int r : other.receivers) receivers.push_back(r + offset);
  for (int s : other.senders) senders.push_back(s + offset);
  edge_types.insert(edge_types.end(), other.edge_types.begin(), other.edge_types.end());
  for (int r : other.object_rows) object_rows.push_back(r + offset);
  material = other.material;
}

DynGraph make_graph(sim::MaterialKind material, std::span<const Vec2> positions,
                    std::span<const Vec2> velocities, std::span<const int> object_ids,
                    std::span<const Vec2> pusher, const Vec2& pusher_velocity, double d) {
  if (positions.size() != velocities.size() || positions.size() != object_ids.size())
    throw Error("graph inputs are misaligned");
  if (!(d > 0.0)) throw Error("edge radius must be positive");
  DynGraph g;
  g.material = material;
  const int n = static_cast<int>(positions.size());
  for (int i = 0; i < n; ++i) {
    g.positions.push_back(positions[i]);
    g.velocities.push_back(velocities[i]);
    g.object_ids.push_back(object_ids[i]);
    g.object_rows.push_back(i);
  }
  for (const Vec2& p : pusher) {
    g.positions.push_back(p);
    g.velocities.push_back(pusher_velocity);
    g.object_ids.push_back(-1);
  }
  const double d2 = d * d;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if ((positions[i] - positions[j]).squaredNorm() >= d2) continue;
      const EdgeType t = object_ids[i] == object_ids[j] ? EdgeType::same_object : EdgeType::other_object;
      g.receivers.push_back(i);
      g.senders.push_back(j);
      g.edge_types.push_back(t);
      g.receivers.push_back(j);
      g.senders.push_back(i);
      g.edge_types.push_back(t);
    }
  for (std::size_t k = 0; k < pusher.size(); ++k)
    for (int i = 0; i < n; ++i)
      if ((pusher[k] - positions[i]).squaredNorm() < d2) {
        g.receivers.push_back(i);
        g.senders.push_back(n + static_cast<int>(k));
        g.edge_types.push_back(EdgeType::pusher);
      }
  return g;
}

DynGraph build_graph(sim::MaterialKind material, const PointCloud& cloud, const PointCloud& pusher_particles,
                     const PointCloud& prev_cloud, const Vec2& pusher_velocity, double r, double d) {
  if (cloud.empty()) throw Error("empty point set");
  if (prev_cloud.size() != cloud.size()) throw Error("prev_cloud is not aligned with cloud");
  if (!(r > 0.0)) throw Error("vertex radius must be positive");
  const auto idx = farthest_point_sample(cloud, cloud.size(), r);
  std::vector<Vec2> pos, vel, pusher;
  std::vector<int> ids;
  for (std::size_t i : idx) {
    pos.push_back(cloud.points[i].xy());
    vel.push_back(cloud.points[i].xy() - prev_cloud.points[i].xy());
    ids.push_back(cloud.object_ids.empty() ? 0 : cloud.object_ids[i]);
  }
  for (const Point3& p : pusher_particles.points) pusher.push_back(p.xy());
  return make_graph(material, pos, vel, ids, pusher, pusher_velocity, d);
}

nlohmann::json Normalizer::to_json() const {
  return {{"velocity", velocity}, {"displacement", displacement}, {"delta", delta}};
}

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  return {j.at("velocity").get<double>(), j.at("displacement").get<double>(), j.at("delta").get<double>()};
}

// ----- GNN -----

namespace {

Mat random_matrix(int rows, int cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / rows);
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

}  // namespace

GnnModel::GnnModel(const GnnConfig& config, std::uint64_t seed) : config_(config) {
  if (config.layers < 1) throw Error("layers must be at least 1");
  if (config.hidden < 1) throw Error("hidden size must be positive");
  std::mt19937_64 rng(seed);
  const int h = config.hidden;
  const std::array<int, 3> venc{kVertexFeatures, h, h};
  const std::array<int, 3> eenc{kEdgeFeatures, h, h};
  const std::array<int, 3> vprop{3 * h, h, h};
  const std::array<int, 3> dec{h, h, 2};
  vertex_encoder_ = nn::Mlp(venc, true, rng);
  edge_encoder_ = nn::Mlp(eenc, true, rng);
  // Fan-in of the split layer is the concatenated width.
  prop_edge_w_ = nn::Param(random_matrix(3 * h, h, rng).topRows(h));
  prop_recv_w_ = nn::Param(random_matrix(3 * h, h, rng).topRows(h));
  prop_send_w_ = nn::Param(random_matrix(3 * h, h, rng).topRows(h));
  prop_b_ = nn::Param(Mat::Zero(1, h));
  prop_out_ = nn::Linear(h, h, rng);
  vertex_prop_ = nn::Mlp(vprop, true, rng);
  decoder_ = nn::Mlp(dec, false, rng);
}

Mat GnnModel::vertex_features(const DynGraph& g) const {
  Mat x = Mat::Zero(static_cast<Eigen::Index>(g.vertex_count()), kVertexFeatures);
  const int material = static_cast<int>(g.material);
  for (std::size_t i = 0; i < g.vertex_count(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = g.velocities[i].x() / norm.velocity;
    x(r, 1) = g.velocities[i].y() / norm.velocity;
    x(r, g.object_ids[i] < 0 ? 2 : 3) = 1.0;
    x(r, 4 + material) = 1.0;
  }
  return x;
}

Mat GnnModel::edge_features(const DynGraph& g) const {
  Mat e = Mat::Zero(static_cast<Eigen::Index>(g.edge_count()), kEdgeFeatures);
  for (std::size_t k = 0; k < g.edge_count(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    const Vec2 d = (g.positions[g.senders[k]] - g.positions[g.receivers[k]]) / norm.displacement;
    e(r, 0) = d.x();
    e(r, 1) = d.y();
    e(r, 2) = d.norm();
    e(r, 3 + static_cast<int>(g.edge_types[k])) = 1.0;
  }
  return e;
}

Tape::Id GnnModel::record(Tape& tape, const DynGraph& g) {
  if (g.velocities.size() != g.vertex_count() || g.object_ids.size() != g.vertex_count() ||
      g.senders.size() != g.receivers.size() || g.edge_types.size() != g.receivers.size()) {
    throw Error("dimension mismatch in graph");
  }
  const int n = static_cast<int>(g.vertex_count());
  const Tape::Id x = tape.constant(vertex_features(g));
  const Tape::Id e = tape.constant(edge_features(g));
  const Tape::Id h0 = vertex_encoder_.forward(tape, x);
  const Tape::Id r0 = edge_encoder_.forward(tape, e);
  // The relation-encoding term is the same in every round.
  const Tape::Id edge_term = tape.matmul(r0, tape.param(prop_edge_w_));
  const Tape::Id w_recv = tape.param(prop_recv_w_);
  const Tape::Id w_send = tape.param(prop_send_w_);
  const Tape::Id bias = tape.param(prop_b_);
  Tape::Id h = h0;
  for (int l = 0; l < config_.layers; ++l) {
    const Tape::Id recv = tape.gather_rows(tape.matmul(h, w_recv), g.receivers);
    const Tape::Id send = tape.gather_rows(tape.matmul(h, w_send), g.senders);
    Tape::Id m = tape.add(tape.add(edge_term, recv), send);
    m = tape.relu(tape.add_row(m, bias));
    const Tape::Id rel = tape.relu(prop_out_.forward(tape, m));
    const Tape::Id agg = tape.scatter_add_rows(rel, g.receivers, n);
    const std::array<Tape::Id, 3> parts{h0, h, agg};
    h = vertex_prop_.forward(tape, tape.concat_cols(parts));
  }
  const Tape::Id obj = tape.gather_rows(h, g.object_rows);
  return tape.scale(decoder_.forward(tape, obj), norm.delta);
}

Mat GnnModel::predict_deltas(const DynGraph& graph) const {
  Tape tape;
  const Tape::Id out = const_cast<GnnModel*>(this)->record(tape, graph);
  return tape.value(out);
}

std::vector<Vec2> GnnModel::forward(const DynGraph& graph) const {
  const Mat d = predict_deltas(graph);
  std::vector<Vec2> out;
  out.reserve(graph.object_rows.size());
  for (std::size_t i = 0; i < graph.object_rows.size(); ++i)
    out.push_back(graph.positions[graph.object_rows[i]] + Vec2(d(static_cast<Eigen::Index>(i), 0),
                                                               d(static_cast<Eigen::Index>(i), 1)));
  return out;
}

std::vector<nn::Param*> GnnModel::params() {
  std::vector<nn::Param*> p;
  vertex_encoder_.collect(p);
  edge_encoder_.collect(p);
  p.push_back(&prop_edge_w_);
  p.push_back(&prop_recv_w_);
  p.push_back(&prop_send_w_);
  p.push_back(&prop_b_);
  p.push_back(&prop_out_.w);
  p.push_back(&prop_out_.b);
  vertex_prop_.collect(p);
  decoder_.collect(p);
  return p;
}

std::vector<const nn::Param*> GnnModel::params() const {
  auto mut = const_cast<GnnModel*>(this)->params();
  return {mut.begin(), mut.end()};
}

// ----- T model -----

Pose2D t_local_frame(const std::array<Vec2, 4>& k) {
  const Vec2 axis = k[1] - k[2];
  if (axis.norm() < 1e-9) throw Error("degenerate keypoints");
  const Vec2 c = 0.25 * (k[0] + k[1] + k[2] + k[3]);
  return {c.x(), c.y(), std::atan2(axis.y(), axis.x())};
}

namespace {

void check_rigid_t(const std::array<Vec2, 4>& k) {
  static const auto canon = sim::TBlockGeometry::keypoints();
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) {
      const double ref = (canon[i] - canon[j]).norm();
      if (std::abs((k[i] - k[j]).norm() - ref) > 0.05 * ref) throw Error("keypoints are not a rigid T");
    }
}

}  // namespace

TModel::TModel(int hidden, std::uint64_t seed) : hidden_(hidden) {
  if (hidden < 1) throw Error("hidden size must be positive");
  std::mt19937_64 rng(seed);
  const std::array<int, 4> dims{12, hidden, hidden, 10};
  net_ = nn::Mlp(dims, false, rng);
}

Eigen::RowVectorXd TModel::local_inputs(const TState& s, const Vec2& action) {
  const Pose2D inv = t_local_frame(s.keypoints).inverse();
  Eigen::RowVectorXd x(12);
  for (int i = 0; i < 4; ++i) {
    const Vec2 p = inv.apply(s.keypoints[i]);
    x(2 * i) = p.x();
    x(2 * i + 1) = p.y();
  }
  const Vec2 p = inv.apply(s.pusher);
  const Vec2 a = inv.rotate(action);
  x(8) = p.x();
  x(9) = p.y();
  x(10) = a.x();
  x(11) = a.y();
  return x;
}

Mat TModel::predict_local(const Mat& inputs) const {
  return net_.eval(inputs / input_scale) * output_scale;
}

Tape::Id TModel::record(Tape& tape, const Mat& inputs) {
  const Tape::Id x = tape.constant(inputs / input_scale);
  return tape.scale(net_.forward(tape, x), output_scale);
}

TState TModel::forward(const TState& s, const Vec2& action) const {
  check_rigid_t(s.keypoints);
  const Pose2D frame = t_local_frame(s.keypoints);
  const Eigen::RowVectorXd x = local_inputs(s, action);
  const Mat d = predict_local(x);
  TState next;
  for (int i = 0; i < 4; ++i)
    next.keypoints[i] = frame.apply(Vec2(x(2 * i) + d(0, 2 * i), x(2 * i + 1) + d(0, 2 * i + 1)));
  next.pusher = s.pusher + action;
  return next;
}

std::vector<nn::Param*> TModel::params() {
  std::vector<nn::Param*> p;
  net_.collect(p);
  return p;
}

std::vector<const nn::Param*> TModel::params() const {
  auto mut = const_cast<TModel*>(this)->params();
  return {mut.begin(), mut.end()};
}

// ----- checkpoints -----

namespace {

constexpr char kMagic[] = "KUDA-DYN-1\n";

std::vector<nn::Param*> model_params(Model& m) {
  return m.arch == Arch::gnn ? m.gnn.params() : m.t.params();
}

void put_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw Error("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void put_f32(std::ostream& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(std::istream& in) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == EOF) throw Error("truncated checkpoint");
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

void Model::quantize() {
  for (nn::Param* p : model_params(*this))
    for (Eigen::Index i = 0; i < p->value.size(); ++i)
      p->value.data()[i] = static_cast<double>(static_cast<float>(p->value.data()[i]));
}

void Model::save(const std::filesystem::path& path) const {
  Model copy = *this;
  nlohmann::json header{{"arch", arch == Arch::gnn ? "gnn" : "t_mlp"},
                        {"material", sim::to_string(material)},
                        {"seed", seed}};
  if (arch == Arch::gnn) {
    header["dims"] = {{"hidden", gnn.config().hidden}, {"layers", gnn.config().layers},
                      {"vertex_features", kVertexFeatures}, {"edge_features", kEdgeFeatures}};
    header["norm"] = gnn.norm.to_json();
  } else {
    header["dims"] = {{"hidden", t.hidden()}, {"inputs", 12}, {"outputs", 10}};
    header["norm"] = {{"input_scale", t.input_scale}, {"output_scale", t.output_scale}};
  }
  nlohmann::json blocks = nlohmann::json::array();
  const auto params = model_params(copy);
  for (const nn::Param* p : params) blocks.push_back({p->value.rows(), p->value.cols()});
  header["blocks"] = blocks;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string h = header.dump();
  out.write(kMagic, sizeof(kMagic) - 1);
  put_u64(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const nn::Param* p : params)
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) put_f32(out, static_cast<float>(p->value(r, c)));
  if (!out) throw Error("failed writing " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::string magic(sizeof(kMagic) - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw Error("not a dynamics checkpoint: " + path.string());
  const std::uint64_t len = get_u64(in);
  if (len > (1u << 24)) throw Error("corrupt checkpoint header");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(h);
  Model m;
  m.arch = header.at("arch").get<std::string>() == "gnn" ? Arch::gnn : Arch::t_mlp;
  m.material = sim::material_kind_from_string(header.at("material").get<std::string>());
  m.seed = header.at("seed").get<std::uint64_t>();
  const auto& dims = header.at("dims");
  if (m.arch == Arch::gnn) {
    m.gnn = GnnModel({dims.at("hidden").get<int>(), dims.at("layers").get<int>()}, m.seed);
    m.gnn.norm = Normalizer::from_json(header.at("norm"));
  } else {
    m.t = TModel(dims.at("hidden").get<int>(), m.seed);
    m.t.input_scale = header.at("norm").at("input_scale").get<double>();
    m.t.output_scale = header.at("norm").at("output_scale").get<double>();
  }
  const auto params = model_params(m);
  const auto& blocks = header.at("blocks");
  if (blocks.size() != params.size()) throw Error("checkpoint block count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Param& p = *params[k];
    if (blocks[k].at(0).get<Eigen::Index>() != p.value.rows() || blocks[k].at(1).get<Eigen::Index>() != p.value.cols())
      throw Error("checkpoint block shape mismatch");
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = get_f32(in);
  }
  return m;
}

// ----- data -----

namespace {

std::vector<int> episode_object_ids(const sim::Episode& ep, std::size_t n) {
  std::vector<int> ids(n, 0);
  if (ep.material.kind == sim::MaterialKind::cubes)
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i / 9);
  return ids;
}

std::vector<bool> interaction_start_flags(const sim::Episode& ep) {
  std::vector<bool> start(ep.actions.size(), false);
  if (!ep.actions.empty()) start[0] = true;
  for (std::size_t s : ep.interaction_starts)
    if (s < start.size()) start[s] = true;
  return start;
}

sim::Pusher pusher_at(sim::PusherKind kind, const sim::PushAction& a) {
  sim::Pusher p;
  p.kind = kind;
  p.pose = Pose2D(a.start_x, a.start_y, kind == sim::PusherKind::board ? a.angle + M_PI / 2 : 0.0);
  return p;
}

}  // namespace

std::vector<GraphSample> graph_samples(const sim::Episode& ep, double r, double d) {
  std::vector<GraphSample> out;
  const auto start = interaction_start_flags(ep);
  for (std::size_t k = 0; k < ep.actions.size(); ++k) {
    const auto& cur = ep.frames[k];
    const auto& next = ep.frames[k + 1];
    const auto& prev = start[k] ? cur : ep.frames[k - 1];
    const auto ids = episode_object_ids(ep, cur.size());
    const auto idx = farthest_point_sample(cur, cur.size(), r);
    std::vector<Vec2> pos, vel, pusher;
    std::vector<int> vid;
    GraphSample s;
    s.target.resize(static_cast<Eigen::Index>(idx.size()), 2);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::size_t i = idx[j];
      pos.push_back(cur[i].xy());
      vel.push_back(cur[i].xy() - prev[i].xy());
      vid.push_back(ids[i]);
      const Vec2 delta = next[i].xy() - cur[i].xy();
      s.target(static_cast<Eigen::Index>(j), 0) = delta.x();
      s.target(static_cast<Eigen::Index>(j), 1) = delta.y();
    }
    const sim::PushAction& a = ep.actions[k];
    pusher = pusher_at(ep.pusher, a).particles();
    s.graph = make_graph(ep.material.kind, pos, vel, vid, pusher, a.length * a.direction(), d);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TSample> t_samples(const sim::Episode& ep) {
  if (ep.material.kind != sim::MaterialKind::t_block) throw Error("not a t_block episode");
  std::vector<TSample> out;
  for (std::size_t k = 0; k < ep.actions.size(); ++k) {
    TSample s;
    for (int i = 0; i < 4; ++i) {
      s.state.keypoints[i] = ep.frames[k].at(i).xy();
      s.next.keypoints[i] = ep.frames[k + 1].at(i).xy();
    }
    s.state.pusher = ep.actions[k].start();
    s.action = ep.actions[k].length * ep.actions[k].direction();
    s.next.pusher = s.state.pusher + s.action;
    out.push_back(s);
  }
  return out;
}

void split_episodes(std::size_t count, double val_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                    std::vector<std::size_t>& val) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(count)));
  if (count > 1 && val_fraction > 0.0) n_val = std::max<std::size_t>(n_val, 1);
  if (n_val >= count) n_val = count > 1 ? count - 1 : 0;
  val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
}

// ----- losses -----

namespace {

Mat t_targets(const TSample& s) {
  const Pose2D inv = t_local_frame(s.state.keypoints).inverse();
  Mat y(1, 10);
  for (int i = 0; i < 4; ++i) {
    const Vec2 d = inv.apply(s.next.keypoints[i]) - inv.apply(s.state.keypoints[i]);
    y(0, 2 * i) = d.x();
    y(0, 2 * i + 1) = d.y();
  }
  const Vec2 d = inv.rotate(s.next.pusher - s.state.pusher);
  y(0, 8) = d.x();
  y(0, 9) = d.y();
  return y;
}

void zero_grads(std::span<nn::Param* const> params) {
  for (nn::Param* p : params) p->zero_grad();
}

}  // namespace

double gnn_batch_loss(GnnModel& model, std::span<const GraphSample* const> batch, bool backward) {
  DynGraph g;
  Eigen::Index rows = 0;
  for (const GraphSample* s : batch) rows += s->target.rows();
  Mat target(rows, 2);
  Eigen::Index r = 0;
  for (const GraphSample* s : batch) {
    g.append(s->graph);
    target.middleRows(r, s->target.rows()) = s->target;
    r += s->target.rows();
  }
  Tape tape;
  const Tape::Id loss = tape.mse(model.record(tape, g), target);
  if (backward) {
    auto params = model.params();
    zero_grads(params);
    tape.backward(loss);
  }
  return tape.value(loss)(0, 0);
}

double t_batch_loss(TModel& model, std::span<const TSample* const> batch, bool backward) {
  Mat x(static_cast<Eigen::Index>(batch.size()), 12), y(static_cast<Eigen::Index>(batch.size()), 10);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = TModel::local_inputs(batch[i]->state, batch[i]->action);
    y.row(static_cast<Eigen::Index>(i)) = t_targets(*batch[i]);
  }
  Tape tape;
  const Tape::Id loss = tape.mse(model.record(tape, x), y);
  if (backward) {
    auto params = model.params();
    zero_grads(params);
    tape.backward(loss);
  }
  return tape.value(loss)(0, 0);
}

double t_keypoint_rmse(const TModel& model, std::span<const TSample> samples) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const TSample& s : samples) {
    const TState pred = model.forward(s.state, s.action);
    for (int i = 0; i < 4; ++i) sum += (pred.keypoints[i] - s.next.keypoints[i]).squaredNorm();
  }
  return std::sqrt(sum / (4.0 * static_cast<double>(samples.size())));
}

// ----- training -----

namespace {

double rms(const std::vector<double>& v, double fallback) {
  if (v.empty()) return fallback;
  double s = 0.0;
  for (double x : v) s += x * x;
  const double r = std::sqrt(s / static_cast<double>(v.size()));
  return r > 1e-9 ? r : fallback;
}

template <typename Sample, typename LossFn>
void run_training(std::vector<Sample>& train_set, std::vector<nn::Param*> params, const TrainConfig& cfg,
                  LossFn&& loss_fn, TrainResult& result) {
  if (train_set.empty()) throw Error("no training samples");
  std::mt19937_64 rng(cfg.seed ^ 0x7a11ULL);
  std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
  const nn::AdamConfig adam{cfg.lr};
  double window = 0.0;
  int window_n = 0;
  std::vector<const Sample*> batch(static_cast<std::size_t>(cfg.batch));
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& b : batch) b = &train_set[pick(rng)];
    const double loss = loss_fn(std::span<const Sample* const>(batch));
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite loss at step " << step;
      for (const nn::Param* p : params)
        if (!p->grad.allFinite() || !p->value.allFinite()) {
          msg << " (non-finite weights or gradients)";
          break;
        }
      throw Error(msg.str());
    }
    nn::adam_step(params, adam, step);
    window += loss;
    ++window_n;
    if (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps) {
      result.loss_history.push_back(window / window_n);
      if (cfg.progress) cfg.progress(step, window / window_n);
      window = 0.0;
      window_n = 0;
    }
  }
}

}  // namespace

TrainResult train(const std::vector<sim::Episode>& episodes, const TrainConfig& cfg) {
  if (episodes.empty()) throw Error("empty dataset");
  if (cfg.batch < 1 || cfg.steps < 0) throw Error("invalid training configuration");
  const sim::MaterialKind material = episodes.front().material.kind;
  for (const auto& ep : episodes)
    if (ep.material.kind != material) throw Error("dataset mixes materials");

  TrainResult result;
  split_episodes(episodes.size(), cfg.val_fraction, cfg.seed, result.train_episodes, result.val_episodes);
  result.model.material = material;
  result.model.seed = cfg.seed;

  if (material == sim::MaterialKind::t_block) {
    result.model.arch = Arch::t_mlp;
    std::vector<TSample> train_set, val_set;
    for (std::size_t i : result.train_episodes) {
      auto s = t_samples(episodes[i]);
      train_set.insert(train_set.end(), s.begin(), s.end());
    }
    for (std::size_t i : result.val_episodes) {
      auto s = t_samples(episodes[i]);
      val_set.insert(val_set.end(), s.begin(), s.end());
    }
    TModel model(cfg.hidden, cfg.seed);
    std::vector<double> xs, ys;
    for (const TSample& s : train_set) {
      const auto x = TModel::local_inputs(s.state, s.action);
      const Mat y = t_targets(s);
      for (Eigen::Index k = 0; k < 12; ++k) xs.push_back(x(k));
      for (Eigen::Index k = 0; k < 8; ++k) ys.push_back(y(0, k));
    }
    model.input_scale = rms(xs, 0.06);
    model.output_scale = rms(ys, 0.01);
    if (cfg.shuffle_labels) {
      std::mt19937_64 rng(cfg.seed ^ 0x5u);
      std::vector<TState> nexts;
      std::vector<std::size_t> perm(train_set.size());
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      // Keep each sample's own pusher motion but borrow another's block motion
      // expressed in its local frame.
      std::vector<TSample> shuffled = train_set;
      for (std::size_t i = 0; i < train_set.size(); ++i) {
        const TSample& src = train_set[perm[i]];
        const Pose2D src_frame = t_local_frame(src.state.keypoints);
        const Pose2D dst_frame = t_local_frame(train_set[i].state.keypoints);
        for (int k = 0; k < 4; ++k) {
          const Vec2 local_delta = src_frame.inverse().rotate(src.next.keypoints[k] - src.state.keypoints[k]);
          shuffled[i].next.keypoints[k] = train_set[i].state.keypoints[k] + dst_frame.rotate(local_delta);
        }
      }
      train_set = std::move(shuffled);
    }
    run_training(train_set, model.params(), cfg,
                 [&](std::span<const TSample* const> b) { return t_batch_loss(model, b, true); }, result);
    result.model.t = model;
    result.model.quantize();
    double err = 0.0, base = 0.0;
    for (const TSample& s : val_set) {
      const TState p = result.model.t.forward(s.state, s.action);
      for (int k = 0; k < 4; ++k) {
        err += (p.keypoints[k] - s.next.keypoints[k]).squaredNorm();
        base += (s.state.keypoints[k] - s.next.keypoints[k]).squaredNorm();
      }
    }
    const double n = std::max<double>(1.0, 8.0 * static_cast<double>(val_set.size()));
    result.val_error = err / n;
    result.val_baseline = base / n;
    return result;
  }

  result.model.arch = Arch::gnn;
  std::vector<GraphSample> train_set, val_set;
  for (std::size_t i : result.train_episodes) {
    auto s = graph_samples(episodes[i], cfg.vertex_radius, cfg.edge_radius);
    train_set.insert(train_set.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  for (std::size_t i : result.val_episodes) {
    auto s = graph_samples(episodes[i], cfg.vertex_radius, cfg.edge_radius);
    val_set.insert(val_set.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  GnnModel model({cfg.hidden, cfg.layers}, cfg.seed);
  std::vector<double> vs, ds;
  for (const GraphSample& s : train_set) {
    for (std::size_t i : std::vector<std::size_t>(s.graph.object_rows.begin(), s.graph.object_rows.end())) {
      const Vec2& v = s.graph.velocities[i];
      if (v.squaredNorm() > 0.0) {
        vs.push_back(v.x());
        vs.push_back(v.y());
      }
    }
    for (Eigen::Index k = 0; k < s.target.size(); ++k) ds.push_back(s.target.data()[k]);
  }
  model.norm.velocity = rms(vs, 0.01);
  model.norm.displacement = cfg.edge_radius;
  model.norm.delta = rms(ds, 0.01);
  if (cfg.shuffle_labels) {
    std::vector<Eigen::RowVector2d> rows;
    for (const GraphSample& s : train_set)
      for (Eigen::Index k = 0; k < s.target.rows(); ++k) rows.push_back(s.target.row(k));
    std::mt19937_64 rng(cfg.seed ^ 0x5u);
    std::shuffle(rows.begin(), rows.end(), rng);
    std::size_t c = 0;
    for (GraphSample& s : train_set)
      for (Eigen::Index k = 0; k < s.target.rows(); ++k) s.target.row(k) = rows[c++];
  }
  run_training(train_set, model.params(), cfg,
               [&](std::span<const GraphSample* const> b) { return gnn_batch_loss(model, b, true); }, result);
  result.model.gnn = model;
  result.model.quantize();
  double err = 0.0, base = 0.0, n = 0.0;
  for (const GraphSample& s : val_set) {
    const Mat d = result.model.gnn.predict_deltas(s.graph);
    err += (d - s.target).squaredNorm();
    base += s.target.squaredNorm();
    n += static_cast<double>(s.target.size());
  }
  result.val_error = n > 0 ? err / n : 0.0;
  result.val_baseline = n > 0 ? base / n : 0.0;
  return result;
}

// ----- rollout -----

ModelState ModelState::particles(sim::MaterialKind material, sim::PusherKind pusher, std::vector<Vec2> points,
                                 std::vector<int> object_ids) {
  if (points.size() != object_ids.size()) throw Error("object ids are misaligned with points");
  ModelState s;
  s.material = material;
  s.pusher = pusher;
  s.velocities.assign(points.size(), Vec2::Zero());
  s.points = std::move(points);
  s.object_ids = std::move(object_ids);
  return s;
}

ModelState ModelState::t_block(const Pose2D& pose, std::vector<Vec2> points) {
  ModelState s;
  s.material = sim::MaterialKind::t_block;
  s.pusher = sim::PusherKind::cylinder;
  const auto canon = sim::TBlockGeometry::keypoints();
  for (int i = 0; i < 4; ++i) s.keypoints[i] = pose.apply(canon[i]);
  const Pose2D inv = pose.inverse();
  for (const Vec2& p : points) s.body_points.push_back(inv.apply(p));
  s.object_ids.assign(points.size(), 0);
  s.velocities.assign(points.size(), Vec2::Zero());
  s.points = std::move(points);
  return s;
}

std::vector<sim::PushAction> split_push(const sim::PushAction& push, double step) {
  std::vector<sim::PushAction> out;
  const int n = std::max(1, static_cast<int>(std::ceil(push.length / step - 1e-9)));
  const double len = push.length / n;
  for (int k = 0; k < n; ++k) {
    const Vec2 s = push.start() + (k * len) * push.direction();
    out.push_back({s.x(), s.y(), push.angle, len});
  }
  return out;
}

namespace {

/// Pose fitted to predicted keypoints; keeps the block rigid.
Pose2D rigid_t_pose(const std::array<Vec2, 4>& k) {
  const auto canon = sim::TBlockGeometry::keypoints();
  return fit_rigid_transform(std::span<const Vec2>(canon.data(), 4), std::span<const Vec2>(k.data(), 4));
}

void set_t_pose(ModelState& s, const Pose2D& pose) {
  const auto canon = sim::TBlockGeometry::keypoints();
  for (int i = 0; i < 4; ++i) s.keypoints[i] = pose.apply(canon[i]);
  for (std::size_t i = 0; i < s.body_points.size(); ++i) s.points[i] = pose.apply(s.body_points[i]);
}

/// Advances every state in `states` by its own model step.
void batched_step(const Model& model, std::vector<ModelState*>& states, const std::vector<sim::PushAction>& steps,
                  const std::vector<bool>& push_start) {
  if (states.empty()) return;
  if (model.arch == Arch::t_mlp) {
    Mat x(static_cast<Eigen::Index>(states.size()), 12);
    std::vector<Pose2D> frames;
    for (std::size_t j = 0; j < states.size(); ++j) {
      const TState ts{states[j]->keypoints, steps[j].start()};
      x.row(static_cast<Eigen::Index>(j)) = TModel::local_inputs(ts, steps[j].length * steps[j].direction());
      frames.push_back(t_local_frame(states[j]->keypoints));
    }
    const Mat d = model.t.predict_local(x);
    for (std::size_t j = 0; j < states.size(); ++j) {
      const auto r = static_cast<Eigen::Index>(j);
      std::array<Vec2, 4> next;
      for (int i = 0; i < 4; ++i)
        next[i] = frames[j].apply(Vec2(x(r, 2 * i) + d(r, 2 * i), x(r, 2 * i + 1) + d(r, 2 * i + 1)));
      set_t_pose(*states[j], rigid_t_pose(next));
    }
    return;
  }
  DynGraph batch;
  std::vector<std::size_t> offsets;
  for (std::size_t j = 0; j < states.size(); ++j) {
    ModelState& s = *states[j];
    if (push_start[j]) std::fill(s.velocities.begin(), s.velocities.end(), Vec2::Zero());
    const auto pusher = pusher_at(s.pusher, steps[j]).particles();
    offsets.push_back(batch.object_rows.size());
    batch.append(make_graph(s.material, s.points, s.velocities, s.object_ids, pusher,
                            steps[j].length * steps[j].direction()));
  }
  const Mat d = model.gnn.predict_deltas(batch);
  for (std::size_t j = 0; j < states.size(); ++j) {
    ModelState& s = *states[j];
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(offsets[j] + i);
      const Vec2 delta(d(r, 0), d(r, 1));
      s.points[i] += delta;
      s.velocities[i] = delta;
    }
  }
}

void check_model(const Model& model, const ModelState& init) {
  const bool t_state = init.material == sim::MaterialKind::t_block;
  if (t_state != (model.arch == Arch::t_mlp)) throw Error("model does not match the state's material");
  if (!t_state && model.material != init.material) throw Error("model was trained for another material");
}

}  // namespace

std::vector<ModelState> rollout(const Model& model, const ModelState& init, std::span<const sim::PushAction> pushes) {
  check_model(model, init);
  std::vector<ModelState> out{init};
  ModelState cur = init;
  for (const sim::PushAction& push : pushes) {
    push.validate();
    const auto steps = split_push(push);
    for (std::size_t k = 0; k < steps.size(); ++k) {
      std::vector<ModelState*> one{&cur};
      batched_step(model, one, {steps[k]}, {k == 0});
    }
    out.push_back(cur);
  }
  return out;
}

std::vector<std::vector<Vec2>> rollout_final(const Model& model, const ModelState& init,
                                             const std::vector<std::vector<sim::PushAction>>& sequences) {
  check_model(model, init);
  std::vector<ModelState> states(sequences.size(), init);
  std::vector<std::vector<sim::PushAction>> steps(sequences.size());
  std::vector<std::vector<bool>> starts(sequences.size());
  std::size_t longest = 0;
  for (std::size_t j = 0; j < sequences.size(); ++j) {
    for (const sim::PushAction& push : sequences[j]) {
      const auto s = split_push(push);
      for (std::size_t k = 0; k < s.size(); ++k) {
        steps[j].push_back(s[k]);
        starts[j].push_back(k == 0);
      }
    }
    longest = std::max(longest, steps[j].size());
  }
  for (std::size_t k = 0; k < longest; ++k) {
    std::vector<ModelState*> active;
    std::vector<sim::PushAction> acts;
    std::vector<bool> first;
    for (std::size_t j = 0; j < sequences.size(); ++j)
      if (k < steps[j].size()) {
        active.push_back(&states[j]);
        acts.push_back(steps[j][k]);
        first.push_back(starts[j][k]);
      }
    batched_step(model, active, acts, first);
  }
  std::vector<std::vector<Vec2>> out;
  out.reserve(states.size());
  for (ModelState& s : states) out.push_back(std::move(s.points));
  return out;
}

}  // namespace keydyn::dynamics
