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

#include "keydyn/vlm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <httplib.h>

#include "keydyn/http.hpp"
#include "keydyn/specdsl.hpp"

namespace keydyn::vlm {

using perception::AnnotatedImage;
using perception::Keypoint;
using tasks::TaskKind;

const std::string& base_prompt() {
  static const std::string text = R"(You will see a top-down picture of a table and an instruction for a robot that can only push.
Red dots labeled P[i] mark candidate keypoints on objects. The green dot C marks the center of the table.

Write a Python function that gives the goal position of every keypoint you want to move. Each goal is
another keypoint (or C) plus a 3D offset:

def keypoint_specification():
    p_3 = p_8 + [5, 0, 0]
    p_4 = C + [0, -7, 0]
    return p_3, p_4

Conventions:
- Offsets are in centimeters. +x points right, +y points up in the image, +z points toward the camera.
- Write literal numbers inside the brackets, never variables.
- p_i = [dx, dy, dz] with no reference is an offset from C.
- The planner pushes each chosen keypoint toward its goal by minimizing squared distance.
- A few keypoints that pin down the final arrangement are enough.
- Only refer to keypoints that are labeled in the image.
- Sizes: a cube is 3 cm wide, the T block is 12 cm by 12 cm, the rope is 40 cm long.
- If the instruction is already satisfied, answer exactly: Done.

Examples follow.)";
  return text;
}

// ----- prompt -----

namespace {

Part text_part(std::string s) { return {Part::Kind::text, std::move(s), {}}; }
Part image_part(const Image& img) { return {Part::Kind::image, {}, img}; }

}  // namespace

PromptRequest assemble_prompt(const AnnotatedImage& annotation, const std::string& instruction,
                              std::span<const promptlib::PromptExample* const> examples, std::size_t max_examples) {
  PromptRequest r;
  r.instruction = instruction;
  r.messages.push_back({"system", {text_part(base_prompt())}});
  const std::size_t n = std::min(max_examples, examples.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = *examples[i];
    r.messages.push_back({"user", {text_part("Instruction: " + ex.query), image_part(ex.observation)}});
    r.messages.push_back({"assistant", {text_part(ex.response)}});
  }
  r.messages.push_back({"user", {text_part("Instruction: " + instruction), image_part(annotation.image)}});
  return r;
}

nlohmann::json PromptRequest::to_json(const std::string& model, double temperature) const {
  nlohmann::json msgs = nlohmann::json::array();
  for (const Message& m : messages) {
    if (m.role != "user") {
      std::string text;
      for (const Part& p : m.parts) text += p.text;
      msgs.push_back({{"role", m.role}, {"content", text}});
      continue;
    }
    nlohmann::json content = nlohmann::json::array();
    for (const Part& p : m.parts) {
      if (p.kind == Part::Kind::text) {
        content.push_back({{"type", "text"}, {"text", p.text}});
      } else {
        content.push_back({{"type", "image_url"},
                           {"image_url", {{"url", "data:image/png;base64," + base64_encode(encode_png(p.image))}}}});
      }
    }
    msgs.push_back({{"role", m.role}, {"content", content}});
  }
  return {{"model", model}, {"temperature", temperature}, {"messages", msgs}};
}

nlohmann::json PromptRequest::summary() const {
  nlohmann::json msgs = nlohmann::json::array();
  for (const Message& m : messages) {
    nlohmann::json parts = nlohmann::json::array();
    for (const Part& p : m.parts) {
      if (p.kind == Part::Kind::text)
        parts.push_back({{"text", p.text}});
      else
        parts.push_back({{"image", {p.image.width(), p.image.height()}}});
    }
    msgs.push_back({{"role", m.role}, {"parts", parts}});
  }
  return {{"instruction", instruction}, {"messages", msgs}};
}

// ----- http -----

nlohmann::json HttpConfig::to_json() const {
  return {{"endpoint", endpoint}, {"model", model}, {"token_env", token_env},
          {"timeout_s", timeout_s}, {"retries", retries}, {"temperature", temperature}};
}

HttpConfig HttpConfig::from_json(const nlohmann::json& j) {
  HttpConfig c;
  c.endpoint = j.value("endpoint", c.endpoint);
  c.model = j.value("model", c.model);
  c.token_env = j.value("token_env", c.token_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.retries = j.value("retries", c.retries);
  c.temperature = j.value("temperature", c.temperature);
  return c;
}

Transport default_transport() {
  return [](const std::string& url, const std::string& token, const std::string& body, int timeout_s,
            std::string& error) -> std::optional<HttpResponse> {
    const Url u = split_url(url);
    httplib::Client client(u.base);
    if (!client.is_valid()) {
      error = "unsupported endpoint " + u.base;
      return std::nullopt;
    }
    client.set_connection_timeout(timeout_s);
    client.set_read_timeout(timeout_s);
    client.set_write_timeout(timeout_s);
    const httplib::Headers headers{{"Authorization", "Bearer " + token}};
    auto res = client.Post(u.path, headers, body, "application/json");
    if (!res) {
      error = httplib::to_string(res.error());
      return std::nullopt;
    }
    return HttpResponse{res->status, res->body};
  };
}

HttpBackend::HttpBackend(HttpConfig config, Transport transport)
    : config_(std::move(config)), transport_(std::move(transport)) {}

std::string completion_text(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    std::string text;
    for (const auto& part : content)
      if (part.value("type", "") == "text") text += part.at("text").get<std::string>();
    return text;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed vlm response: ") + e.what());
  }
}

std::string HttpBackend::query(const PromptRequest& request) {
  const char* token = std::getenv(config_.token_env.c_str());
  if (token == nullptr || *token == '\0')
    throw Unavailable("vlm unavailable: environment variable " + config_.token_env + " is not set");
  const std::string body = request.to_json(config_.model, config_.temperature).dump();
  std::string error;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    const auto res = transport_(config_.endpoint, token, body, config_.timeout_s, error);
    if (!res) continue;
    if (res->status < 200 || res->status >= 300)
      throw Error("vlm request failed with http status " + std::to_string(res->status));
    return completion_text(res->body);
  }
  throw Unavailable("vlm unavailable: " + error);
}

// ----- scripted -----

ScriptedBackend ScriptedBackend::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read scripted responses " + path.string());
  const auto j = nlohmann::json::parse(in);
  if (!j.is_array()) throw Error("scripted responses must be a JSON array of strings");
  return ScriptedBackend(j.get<std::vector<std::string>>());
}

std::string ScriptedBackend::query(const PromptRequest&) {
  if (cursor_ >= responses_.size()) throw Error("scripted responses exhausted");
  return responses_[cursor_++];
}

// ----- oracle -----

namespace {

double round_cm(double meters) { return std::round(meters * 1e4) / 100.0; }

dsl::Assignment from_center(int target, const Vec2& goal, const AnnotatedImage& a) {
  const Vec2 c = a.center.world.xy();
  return {target, dsl::Reference::center, 0, {round_cm(goal.x() - c.x()), round_cm(goal.y() - c.y()), 0.0}};
}

std::vector<const Keypoint*> object_keypoints(const AnnotatedImage& a, int object_id = -2) {
  std::vector<const Keypoint*> out;
  for (const Keypoint& k : a.keypoints)
    if (!k.is_reference() && (object_id == -2 || k.object_id == object_id)) out.push_back(&k);
  return out;
}

const Keypoint* nearest_keypoint(const std::vector<const Keypoint*>& kps, const Vec2& p,
                                 const Keypoint* exclude = nullptr) {
  const Keypoint* best = nullptr;
  double bd = std::numeric_limits<double>::infinity();
  for (const Keypoint* k : kps) {
    if (k == exclude) continue;
    const double d = (k->world.xy() - p).squaredNorm();
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  return best;
}

std::string render(std::vector<dsl::Assignment> assignments) {
  if (assignments.empty()) return "Done.";
  std::sort(assignments.begin(), assignments.end(),
            [](const dsl::Assignment& a, const dsl::Assignment& b) { return a.target < b.target; });
  std::string out = "def keypoint_specification():\n";
  std::string ret;
  for (const auto& a : assignments) {
    out += "    " + dsl::format(a) + "\n";
    ret += (ret.empty() ? "" : ", ") + std::string("p_") + std::to_string(a.target);
  }
  return out + "    return " + ret + "\n";
}

std::vector<dsl::Assignment> rope_spec(const sim::WorldState& s, const AnnotatedImage& a) {
  const auto kps = object_keypoints(a);
  if (kps.empty()) throw Error("oracle: no rope keypoints");
  const int n = static_cast<int>(s.particles.size());
  const double spacing = s.material.segment_rest_length();
  // Every keypoint goes to where its particle lies on the straight rope, in
  // whichever orientation is closer.
  std::vector<double> fwd, rev;
  for (const Keypoint* k : kps) {
    std::size_t j = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double d = (s.particles[i] - k->world.xy()).squaredNorm();
      if (d < bd) {
        bd = d;
        j = static_cast<std::size_t>(i);
      }
    }
    fwd.push_back(-0.5 * spacing * (n - 1) + spacing * static_cast<double>(j));
    rev.push_back(-fwd.back());
  }
  double cf = 0.0, cr = 0.0;
  for (std::size_t i = 0; i < kps.size(); ++i) {
    cf += (kps[i]->world.xy() - Vec2(fwd[i], 0.0)).norm();
    cr += (kps[i]->world.xy() - Vec2(rev[i], 0.0)).norm();
  }
  const auto& xs = cf <= cr ? fwd : rev;
  std::vector<dsl::Assignment> out;
  for (std::size_t i = 0; i < kps.size(); ++i) out.push_back(from_center(kps[i]->index, {xs[i], 0.0}, a));
  return out;
}

Vec2 cube_center(const sim::WorldState& s, int id) { return s.cube_pose(id).translation(); }

std::vector<dsl::Assignment> cube_collect_spec(const sim::WorldState& s, const AnnotatedImage& a) {
  const int n = s.material.count;
  const auto slots = tasks::collect_slots(s.markers.at(0).center, n);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  if (n <= 7) {
    do {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += (cube_center(s, i) - slots[perm[i]]).norm();
      if (c < best_cost) {
        best_cost = c;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  std::vector<dsl::Assignment> out;
  for (int i = 0; i < n; ++i) {
    const Vec2 c = cube_center(s, i);
    const Keypoint* k = nearest_keypoint(object_keypoints(a, i), c);
    if (k == nullptr) continue;
    if ((c - slots[best[i]]).norm() < 0.01) continue;
    out.push_back(from_center(k->index, slots[best[i]] + (k->world.xy() - c), a));
  }
  return out;
}

std::vector<dsl::Assignment> cube_move_spec(const sim::WorldState& s, const AnnotatedImage& a) {
  const Vec2 c = cube_center(s, 0);
  const Keypoint* k = nearest_keypoint(object_keypoints(a, 0), c);
  if (k == nullptr) throw Error("oracle: the target cube has no keypoint");
  return {from_center(k->index, s.markers.at(0).center + (k->world.xy() - c), a)};
}

std::vector<dsl::Assignment> granular_collect_spec(const sim::WorldState& s, const AnnotatedImage& a, bool sparse) {
  const Vec2 g = tasks::granular_gather_center(s);
  // Radius of the packed pile plus some slack.
  const double pile = s.material.radius * std::sqrt(static_cast<double>(s.particles.size()) / 0.9) + 0.015;
  std::vector<const Keypoint*> strays;
  for (const Keypoint* k : object_keypoints(a))
    if ((k->world.xy() - g).norm() > pile) strays.push_back(k);
  if (strays.empty()) strays = object_keypoints(a);
  if (sparse && strays.size() > 1) {
    const Keypoint* far = *std::max_element(strays.begin(), strays.end(), [&](const Keypoint* x, const Keypoint* y) {
      return (x->world.xy() - g).norm() < (y->world.xy() - g).norm();
    });
    std::vector<const Keypoint*> group;
    for (const Keypoint* k : strays)
      if ((k->world.xy() - far->world.xy()).norm() < 0.06) group.push_back(k);
    strays = group;
  }
  std::vector<dsl::Assignment> out;
  for (const Keypoint* k : strays) {
    const Vec2 d = k->world.xy() - g;
    const double r = d.norm();
    const Vec2 goal = r > 1e-9 ? g + d * std::min(1.0, 0.5 * pile / r) : g;
    out.push_back(from_center(k->index, goal, a));
  }
  return out;
}

std::vector<dsl::Assignment> granular_move_spec(const sim::WorldState& s, const AnnotatedImage& a) {
  Vec2 m = Vec2::Zero();
  for (const Vec2& p : s.particles) m += p;
  m /= static_cast<double>(s.particles.size());
  const Vec2 goal = s.markers.at(0).center;
  std::vector<dsl::Assignment> out;
  for (const Keypoint* k : object_keypoints(a)) out.push_back(from_center(k->index, goal + 0.5 * (k->world.xy() - m), a));
  return out;
}

std::vector<dsl::Assignment> t_move_spec(const sim::WorldState& s, const AnnotatedImage& a) {
  const Pose2D to_goal = tasks::t_goal_pose(s) * s.block.inverse();
  auto kps = object_keypoints(a);
  if (kps.empty()) throw Error("oracle: no keypoints on the T block");
  std::sort(kps.begin(), kps.end(), [](const Keypoint* x, const Keypoint* y) { return x->index < y->index; });
  if (kps.size() > 4) kps.resize(4);
  std::vector<dsl::Assignment> out;
  for (const Keypoint* k : kps) out.push_back(from_center(k->index, to_goal.apply(k->world.xy()), a));
  return out;
}

}  // namespace

std::string oracle_respond(TaskKind task, const sim::WorldState& state, const AnnotatedImage& annotation, bool sparse,
                           double done_threshold) {
  if (tasks::task_chamfer(task, state) < done_threshold) return "Done.";
  switch (task) {
    case TaskKind::rope_straighten: return render(rope_spec(state, annotation));
    case TaskKind::cube_collect: return render(cube_collect_spec(state, annotation));
    case TaskKind::cube_move: return render(cube_move_spec(state, annotation));
    case TaskKind::granular_collect: return render(granular_collect_spec(state, annotation, sparse));
    case TaskKind::granular_move: return render(granular_move_spec(state, annotation));
    case TaskKind::t_move: return render(t_move_spec(state, annotation));
  }
  throw Error("unknown task");
}

void OracleBackend::observe(const sim::WorldState& state, const AnnotatedImage& annotation) {
  state_ = state;
  annotation_ = annotation;
}

std::string OracleBackend::query(const PromptRequest&) {
  if (!state_ || !annotation_) throw Error("oracle backend has no observation");
  const bool sparse = options_.sparse_first && answered_ == 0;
  ++answered_;
  return oracle_respond(task_, *state_, *annotation_, sparse, options_.done_threshold);
}

promptlib::Library make_oracle_library(int per_task, std::uint64_t first_seed) {
  promptlib::Library lib;
  for (TaskKind task : tasks::all_tasks())
    for (int i = 0; i < per_task; ++i) {
      const sim::WorldState s = tasks::make_scene(task, first_seed + static_cast<std::uint64_t>(i));
      const AnnotatedImage ann = perception::annotate_scene(s);
      promptlib::PromptExample ex;
      ex.name = tasks::to_string(task) + "_" + std::to_string(i);
      ex.category = tasks::to_string(task);
      ex.query = tasks::default_instruction(task);
      ex.observation = ann.image;
      ex.response = oracle_respond(task, s, ann);
      lib.add(std::move(ex));
    }
  return lib;
}

// ----- transcript -----

Transcript::Transcript(std::filesystem::path path) : path_(std::move(path)) {
  if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
  std::ofstream out(*path_, std::ios::trunc);
  if (!out) throw Error("cannot write transcript " + path_->string());
}

void Transcript::log(const nlohmann::json& record) {
  records_.push_back(record);
  if (!path_) return;
  std::ofstream out(*path_, std::ios::app);
  out << record.dump() << "\n";
}

}  // namespace keydyn::vlm
