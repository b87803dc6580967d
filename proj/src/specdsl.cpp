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

#include "keydyn/specdsl.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <regex>
#include <sstream>

namespace keydyn::dsl {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string strip_fences(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (trim(line).rfind("```", 0) == 0) continue;
    out += line;
    out += '\n';
  }
  return trim(out);
}

const std::regex& assignment_regex() {
  static const std::regex re(
      R"(^p_(\d+)\s*=\s*(?:(p_(\d+)|C)\s*\+\s*)?\[\s*([^,\]]+?)\s*,\s*([^,\]]+?)\s*,\s*([^,\]]+?)\s*\]\s*;?$)");
  return re;
}

const std::regex& number_regex() {
  static const std::regex re(R"(^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$)");
  return re;
}

double parse_number(const std::string& token, const std::string& line) {
  if (!std::regex_match(token, number_regex())) {
    throw Error("unparsable specification: non-numeric offset '" + token + "' in: " + line);
  }
  const double v = std::stod(token);
  if (!std::isfinite(v)) throw Error("unparsable specification: non-finite offset in: " + line);
  return v;
}

}  // namespace

Verdict parse(std::string_view code) {
  Verdict verdict;
  const std::string body = strip_fences(std::string(code));
  if (body == "Done.") {
    verdict.done = true;
    return verdict;
  }
  std::map<int, std::size_t> seen;
  std::istringstream in(body);
  std::string raw;
  static const std::regex assignment_like(R"(^p_\d+\s*=)");
  while (std::getline(in, raw)) {
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty() || !std::regex_search(line, assignment_like)) continue;
    std::smatch m;
    if (!std::regex_match(line, m, assignment_regex())) {
      throw Error("unparsable specification: malformed assignment: " + line);
    }
    Assignment a;
    a.target = std::stoi(m[1].str());
    if (m[2].matched) {
      if (m[2].str() == "C") {
        a.reference = Reference::center;
      } else {
        a.reference = Reference::keypoint;
        a.ref_index = std::stoi(m[3].str());
      }
    }
    for (int k = 0; k < 3; ++k) a.offset_cm[k] = parse_number(m[4 + k].str(), line);
    if (const auto it = seen.find(a.target); it != seen.end()) {
      verdict.warnings.push_back("keypoint " + std::to_string(a.target) +
                                 " assigned more than once; keeping the last assignment");
      verdict.assignments[it->second] = a;
    } else {
      seen[a.target] = verdict.assignments.size();
      verdict.assignments.push_back(a);
    }
  }
  if (verdict.assignments.empty()) throw Error("unparsable specification");
  return verdict;
}

std::string format_number(double v) {
  if (v == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format(const Assignment& a) {
  std::string out = "p_" + std::to_string(a.target) + " = ";
  if (a.reference == Reference::keypoint) out += "p_" + std::to_string(a.ref_index) + " + ";
  if (a.reference == Reference::center) out += "C + ";
  out += "[" + format_number(a.offset_cm[0]) + ", " + format_number(a.offset_cm[1]) + ", " +
         format_number(a.offset_cm[2]) + "]";
  return out;
}

std::string format(std::span<const Assignment> assignments) {
  std::string out;
  for (const Assignment& a : assignments) out += format(a) + "\n";
  return out;
}

nlohmann::json TargetSpec::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const TargetPair& p : pairs) {
    arr.push_back({{"kp", p.kp},
                   {"bound", {p.bound.x, p.bound.y, p.bound.z}},
                   {"target", {p.target.x, p.target.y, p.target.z}}});
  }
  return {{"pairs", arr}};
}

TargetSpec TargetSpec::from_json(const nlohmann::json& j) {
  TargetSpec spec;
  for (const auto& pj : j.at("pairs")) {
    TargetPair p;
    p.kp = pj.at("kp").get<int>();
    const auto& b = pj.at("bound");
    const auto& t = pj.at("target");
    p.bound = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>()};
    p.target = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
    p.bound_index = pj.value("bound_index", std::size_t{0});
    p.source_id = pj.value("source_id", -1);
    spec.pairs.push_back(p);
  }
  return spec;
}

TargetSpec resolve(std::span<const Assignment> assignments,
                   const perception::AnnotatedImage& annotation, const PointCloud& object_cloud) {
  if (object_cloud.empty()) throw Error("empty object cloud");
  TargetSpec spec;
  std::map<int, std::size_t> slot;
  for (const Assignment& a : assignments) {
    const perception::Keypoint* kp = annotation.find(a.target);
    if (!kp) throw Error("unknown keypoint index " + std::to_string(a.target));
    if (kp->is_reference()) throw Error("keypoint not on object");
    Point3 origin = annotation.center.world;
    if (a.reference == Reference::keypoint) {
      const perception::Keypoint* ref = annotation.find(a.ref_index);
      if (!ref) throw Error("unknown keypoint index " + std::to_string(a.ref_index));
      origin = ref->world;
    }
    TargetPair pair;
    pair.kp = a.target;
    pair.target = {origin.x + 0.01 * a.offset_cm[0], origin.y + 0.01 * a.offset_cm[1],
                   origin.z + 0.01 * a.offset_cm[2]};
    if (!pair.target.finite()) throw Error("non-finite target");
    pair.bound_index = nearest_neighbor(kp->world, object_cloud);
    pair.bound = object_cloud.points[pair.bound_index];
    pair.source_id = object_cloud.source_ids.empty()
                         ? static_cast<int>(pair.bound_index)
                         : object_cloud.source_ids[pair.bound_index];
    if (const auto it = slot.find(a.target); it != slot.end()) {
      spec.pairs[it->second] = pair;
    } else {
      slot[a.target] = spec.pairs.size();
      spec.pairs.push_back(pair);
    }
  }
  return spec;
}

double cost(const PointCloud& state, const TargetSpec& spec) {
  double total = 0.0;
  for (const TargetPair& pair : spec.pairs) {
    if (state.source_ids.empty()) {
      if (pair.bound_index >= state.size()) throw Error("missing bound point");
      total += distance(state.points[pair.bound_index], pair.target);
      continue;
    }
    std::size_t idx = state.size();
    if (pair.bound_index < state.size() && state.source_ids[pair.bound_index] == pair.source_id) {
      idx = pair.bound_index;
    } else {
      for (std::size_t i = 0; i < state.size(); ++i)
        if (state.source_ids[i] == pair.source_id) {
          idx = i;
          break;
        }
    }
    if (idx == state.size()) throw Error("missing bound point");
    total += distance(state.points[idx], pair.target);
  }
  return total;
}

double cost_at(std::span<const Vec2> positions, const TargetSpec& spec) {
  double total = 0.0;
  for (const TargetPair& pair : spec.pairs) {
    if (pair.bound_index >= positions.size()) throw Error("missing bound point");
    const Vec2& o = positions[pair.bound_index];
    const double dx = o.x() - pair.target.x;
    const double dy = o.y() - pair.target.y;
    const double dz = pair.bound.z - pair.target.z;
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return total;
}

}  // namespace keydyn::dsl
