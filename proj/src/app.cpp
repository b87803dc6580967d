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

#include "keydyn/app.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "keydyn/perception.hpp"

namespace keydyn::app {

namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json episode_options_json(const sim::EpisodeOptions& o) {
  return {{"segment_length", o.segment_length},
          {"randomize_params", o.randomize_params},
          {"rope_length", {o.rope_length_min, o.rope_length_max}},
          {"rope_stiffness", {o.rope_stiffness_min, o.rope_stiffness_max}},
          {"granular_radius", {o.granular_radius_min, o.granular_radius_max}}};
}

sim::EpisodeOptions episode_options_from(const nlohmann::json& j) {
  sim::EpisodeOptions o;
  o.segment_length = j.value("segment_length", o.segment_length);
  o.randomize_params = j.value("randomize_params", o.randomize_params);
  auto range = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    lo = j.at(key).at(0).get<double>();
    hi = j.at(key).at(1).get<double>();
  };
  range("rope_length", o.rope_length_min, o.rope_length_max);
  range("rope_stiffness", o.rope_stiffness_min, o.rope_stiffness_max);
  range("granular_radius", o.granular_radius_min, o.granular_radius_max);
  return o;
}

}  // namespace

std::pair<int, int> default_data_size(sim::MaterialKind material) {
  if (material == sim::MaterialKind::t_block) return {2000, 50};
  return {200, 5};
}

std::string Config::instruction_text() const {
  return instruction.empty() ? tasks::default_instruction(task) : instruction;
}

double Config::success_threshold() const {
  const auto it = success_thresholds.find(tasks::to_string(task));
  return it != success_thresholds.end() ? it->second : loop.success_threshold;
}

fs::path Config::checkpoint_for(sim::MaterialKind material) const {
  const auto it = checkpoints.find(sim::to_string(material));
  return it != checkpoints.end() ? it->second : models_dir / (sim::to_string(material) + ".kdm");
}

nlohmann::json train_config_to_json(const dynamics::TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch", c.batch},
          {"lr", c.lr},
          {"val_fraction", c.val_fraction},
          {"seed", c.seed},
          {"hidden", c.hidden},
          {"layers", c.layers},
          {"vertex_radius", c.vertex_radius},
          {"edge_radius", c.edge_radius},
          {"shuffle_labels", c.shuffle_labels},
          {"log_every", c.log_every}};
}

dynamics::TrainConfig train_config_from_json(const nlohmann::json& j, dynamics::TrainConfig c) {
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.vertex_radius = j.value("vertex_radius", c.vertex_radius);
  c.edge_radius = j.value("edge_radius", c.edge_radius);
  c.shuffle_labels = j.value("shuffle_labels", c.shuffle_labels);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

nlohmann::json Config::to_json() const {
  nlohmann::json j{{"task", tasks::to_string(task)},
                   {"instruction", instruction},
                   {"scene", scene.to_json()},
                   {"seed", seed},
                   {"out", out.string()},
                   {"backend", backend},
                   {"http", http.to_json()},
                   {"scripted", scripted.string()},
                   {"oracle", {{"done_threshold", oracle.done_threshold}, {"sparse_first", oracle.sparse_first}}},
                   {"loop", loop.to_json()},
                   {"mppi", mppi.to_json()},
                   {"success_thresholds", success_thresholds},
                   {"models_dir", models_dir.string()},
                   {"library", library.string()},
                   {"library_per_task", library_per_task},
                   {"embedder", embedder},
                   {"exclude_own_category", exclude_own_category},
                   {"data",
                    {{"episodes", data.episodes},
                     {"interactions", data.interactions},
                     {"seed", data.seed},
                     {"options", episode_options_json(data.options)}}},
                   {"train", train_config_to_json(train)},
                   {"eval_seeds", eval_seeds},
                   {"first_seed", first_seed},
                   {"k_values", k_values}};
  nlohmann::json cps = nlohmann::json::object();
  for (const auto& [k, v] : checkpoints) cps[k] = v.string();
  j["checkpoints"] = cps;
  if (goal) j["goal"] = {goal->x(), goal->y(), goal->theta()};
  return j;
}

Config Config::from_json(const nlohmann::json& j) {
  Config c;
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.contains("task")) c.task = tasks::task_from_string(j.at("task").get<std::string>());
    c.instruction = j.value("instruction", c.instruction);
    if (j.contains("scene")) c.scene = tasks::SceneOptions::from_json(j.at("scene"));
    if (j.contains("goal")) {
      const auto& g = j.at("goal");
      c.goal = Pose2D(g.at(0).get<double>(), g.at(1).get<double>(), g.size() > 2 ? g.at(2).get<double>() : 0.0);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    c.backend = j.value("backend", c.backend);
    if (j.contains("http")) c.http = vlm::HttpConfig::from_json(j.at("http"));
    if (j.contains("scripted")) c.scripted = j.at("scripted").get<std::string>();
    if (j.contains("oracle")) {
      c.oracle.done_threshold = j.at("oracle").value("done_threshold", c.oracle.done_threshold);
      c.oracle.sparse_first = j.at("oracle").value("sparse_first", c.oracle.sparse_first);
    }
    if (j.contains("loop")) c.loop = planner::LoopConfig::from_json(j.at("loop"));
    if (j.contains("k")) c.loop.k = j.at("k").get<std::size_t>();
    if (j.contains("mppi")) c.mppi = planner::MppiParams::from_json(j.at("mppi"));
    if (j.contains("success_thresholds"))
      c.success_thresholds = j.at("success_thresholds").get<std::map<std::string, double>>();
    if (j.contains("models_dir")) c.models_dir = j.at("models_dir").get<std::string>();
    if (j.contains("checkpoints"))
      for (const auto& [k, v] : j.at("checkpoints").items()) c.checkpoints[k] = v.get<std::string>();
    if (j.contains("library")) c.library = j.at("library").get<std::string>();
    c.library_per_task = j.value("library_per_task", c.library_per_task);
    c.embedder = j.value("embedder", c.embedder);
    c.exclude_own_category = j.value("exclude_own_category", c.exclude_own_category);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.episodes = d.value("episodes", c.data.episodes);
      c.data.interactions = d.value("interactions", c.data.interactions);
      c.data.seed = d.value("seed", c.data.seed);
      if (d.contains("options")) c.data.options = episode_options_from(d.at("options"));
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    c.eval_seeds = j.value("eval_seeds", c.eval_seeds);
    c.first_seed = j.value("first_seed", c.first_seed);
    if (j.contains("k_values")) c.k_values = j.at("k_values").get<std::vector<std::size_t>>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (c.backend != "oracle" && c.backend != "scripted" && c.backend != "http")
    throw ConfigError("unknown backend '" + c.backend + "' (expected oracle, scripted or http)");
  if (c.eval_seeds < 0) throw ConfigError("eval_seeds must be non-negative");
  if (c.goal && (std::abs(c.goal->x()) > sim::kWorkspaceHalf || std::abs(c.goal->y()) > sim::kWorkspaceHalf))
    throw ConfigError("goal lies outside the workspace");
  return c;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

DataSummary generate_data(sim::MaterialKind material, const DataConfig& data, const fs::path& path) {
  const auto [def_eps, def_int] = default_data_size(material);
  const int episodes = data.episodes > 0 ? data.episodes : def_eps;
  const int interactions = data.interactions > 0 ? data.interactions : def_int;
  sim::Material m;
  switch (material) {
    case sim::MaterialKind::rope: m = sim::Material::rope(0.4, 0.8); break;
    case sim::MaterialKind::granular: m = sim::Material::granular(40, 0.006); break;
    case sim::MaterialKind::cubes: m = sim::Material::cubes(3); break;
    case sim::MaterialKind::t_block: m = sim::Material::t_block(); break;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  DataSummary s;
  s.path = path;
  s.first_seed = data.seed * 1000003ULL;
  for (int i = 0; i < episodes; ++i) {
    const std::uint64_t seed = s.first_seed + static_cast<std::uint64_t>(i);
    const sim::Episode ep = sim::generate_episode(m, interactions, seed, data.options);
    out << ep.to_json().dump() << '\n';
    s.transitions += ep.actions.size();
    s.last_seed = seed;
  }
  if (!out) throw Error("failed writing " + path.string());
  s.episodes = episodes;
  return s;
}

TrainSummary train_model(const fs::path& data_path, const dynamics::TrainConfig& train, const fs::path& checkpoint,
                         const fs::path& loss_csv) {
  if (!fs::exists(data_path)) throw Error("dataset missing: " + data_path.string());
  const auto t0 = std::chrono::steady_clock::now();
  const auto episodes = sim::read_episodes(data_path);
  if (episodes.empty()) throw Error("dataset is empty: " + data_path.string());
  dynamics::TrainResult r = dynamics::train(episodes, train);
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  r.model.save(checkpoint);
  TrainSummary s;
  s.checkpoint = checkpoint;
  s.loss_csv = loss_csv;
  s.val_error = r.val_error;
  s.val_baseline = r.val_baseline;
  s.episodes = episodes.size();
  if (!loss_csv.empty()) {
    if (loss_csv.has_parent_path()) fs::create_directories(loss_csv.parent_path());
    std::ofstream csv(loss_csv);
    if (!csv) throw Error("cannot write " + loss_csv.string());
    csv << "step,loss\n";
    for (std::size_t i = 0; i < r.loss_history.size(); ++i)
      csv << (i + 1) * static_cast<std::size_t>(train.log_every) << ',' << r.loss_history[i] << '\n';
  }
  s.seconds = seconds_since(t0);
  return s;
}

std::unique_ptr<vlm::Backend> make_backend(const Config& config) {
  if (config.backend == "oracle") return std::make_unique<vlm::OracleBackend>(config.task, config.oracle);
  if (config.backend == "scripted") {
    if (config.scripted.empty()) throw ConfigError("scripted backend needs a \"scripted\" responses file");
    return std::make_unique<vlm::ScriptedBackend>(vlm::ScriptedBackend::from_file(config.scripted));
  }
  if (config.backend == "http") return std::make_unique<vlm::HttpBackend>(config.http);
  throw ConfigError("unknown backend '" + config.backend + "'");
}

sim::WorldState make_task_scene(const Config& config, std::uint64_t seed) {
  sim::WorldState s = tasks::make_scene(config.task, seed, config.scene);
  if (config.goal) {
    if (s.markers.empty()) throw ConfigError("task " + tasks::to_string(config.task) + " has no goal marker");
    s.markers[0].center = config.goal->translation();
    s.markers[0].rotation = config.goal->theta();
  }
  return s;
}

planner::RunReport run_task(const Config& config, std::uint64_t seed, const dynamics::Model& model,
                            const promptlib::Library* library, const promptlib::Embedder* embedder,
                            vlm::Backend& backend, const RunOutputs& outputs) {
  const sim::WorldState scene = make_task_scene(config, seed);
  planner::LoopConfig loop = config.loop;
  loop.success_threshold = config.success_threshold();
  loop.seed = seed;
  if (!outputs.dir.empty() && loop.frames_dir) loop.frames_dir = outputs.dir / *loop.frames_dir;
  planner::MppiParams mppi = config.mppi;
  mppi.seed = config.mppi.seed * 1000003ULL + seed;

  std::optional<vlm::Transcript> transcript;
  if (!outputs.dir.empty()) {
    fs::create_directories(outputs.dir);
    transcript.emplace(outputs.dir / "transcript.jsonl");
  }
  planner::RunContext ctx;
  ctx.model = &model;
  ctx.backend = &backend;
  ctx.library = library;
  ctx.embedder = embedder;
  if (config.exclude_own_category) ctx.exclude_categories.push_back(tasks::to_string(config.task));
  ctx.transcript = transcript ? &*transcript : nullptr;

  planner::RunReport rep = planner::high_level_loop(scene, config.task, config.instruction_text(), ctx, loop, mppi);
  rep.config = config.to_json();
  rep.config["seed"] = seed;
  rep.config["resolved_loop"] = loop.to_json();
  rep.config["resolved_mppi"] = mppi.to_json();
  if (!outputs.dir.empty()) {
    std::ofstream out(outputs.dir / "report.json");
    out << rep.to_json().dump(2) << '\n';
  }
  return rep;
}

int EvalResult::successes() const {
  int n = 0;
  for (const auto& s : seeds) n += s.success ? 1 : 0;
  return n;
}

double EvalResult::success_rate() const {
  return seeds.empty() ? 0.0 : static_cast<double>(successes()) / static_cast<double>(seeds.size());
}

bool EvalResult::any_infra_failure() const {
  for (const auto& s : seeds)
    if (s.infra_failure) return true;
  return false;
}

nlohmann::json EvalResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : seeds)
    rows.push_back({{"seed", s.seed},
                    {"success", s.success},
                    {"infra_failure", s.infra_failure},
                    {"initial_chamfer", s.initial_chamfer},
                    {"final_chamfer", s.final_chamfer},
                    {"pushes", s.pushes},
                    {"outer_iterations", s.outer_iterations},
                    {"seconds", s.seconds},
                    {"error", s.error}});
  return {{"task", task}, {"successes", successes()}, {"trials", seeds.size()},
          {"success_rate", success_rate()}, {"seeds", rows}};
}

std::string EvalResult::table() const {
  std::ostringstream s;
  s << "| task | success |\n|---|---|\n| " << task << " | " << successes() << "/" << seeds.size() << " |\n";
  return s.str();
}

EvalResult evaluate(const Config& config, int n_seeds, std::uint64_t first_seed, const dynamics::Model& model,
                    const promptlib::Library* library, const promptlib::Embedder* embedder, const fs::path& out_dir) {
  EvalResult res;
  res.task = tasks::to_string(config.task);
  for (int i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(i);
    const auto t0 = std::chrono::steady_clock::now();
    SeedResult r;
    r.seed = seed;
    // Fresh backend per seed so scripted cursors and oracle state do not leak.
    const auto backend = make_backend(config);
    RunOutputs outputs;
    if (!out_dir.empty()) outputs.dir = out_dir / ("seed_" + std::to_string(seed));
    const planner::RunReport rep = run_task(config, seed, model, library, embedder, *backend, outputs);
    r.success = rep.success;
    r.infra_failure = rep.infra_failure;
    r.initial_chamfer = rep.initial_chamfer;
    r.final_chamfer = rep.final_chamfer;
    r.pushes = rep.pushes;
    r.outer_iterations = static_cast<int>(rep.iterations.size());
    r.error = rep.error;
    r.seconds = seconds_since(t0);
    res.seeds.push_back(r);
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "eval.json") << res.to_json().dump(2) << '\n';
    std::ofstream(out_dir / "eval.md") << res.table();
  }
  return res;
}

std::vector<AblationRow> ablate_k(const promptlib::Library& library, const promptlib::Embedder& embedder,
                                  const std::vector<std::size_t>& k_values, int queries_per_task,
                                  std::uint64_t first_seed, double lambda) {
  struct Query {
    promptlib::QueryEmbedding emb;
    std::string category;
  };
  std::vector<Query> queries;
  for (tasks::TaskKind task : tasks::all_tasks())
    for (int i = 0; i < queries_per_task; ++i) {
      const auto s = tasks::make_scene(task, first_seed + static_cast<std::uint64_t>(i));
      const auto ann = perception::annotate_scene(s);
      queries.push_back({promptlib::embed_query(embedder, ann.image, tasks::default_instruction(task)),
                         tasks::to_string(task)});
    }
  std::vector<AblationRow> rows;
  for (std::size_t k : k_values) {
    AblationRow row;
    row.k = k;
    double retrieved = 0.0, relevant = 0.0;
    for (const Query& q : queries) {
      const auto top = promptlib::retrieve_topk(library, q.emb, k, lambda);
      retrieved += static_cast<double>(top.size());
      for (const auto& sc : top) relevant += library.examples[sc.index].category == q.category ? 1.0 : 0.0;
    }
    row.retrieved = queries.empty() ? 0.0 : retrieved / static_cast<double>(queries.size());
    row.relevance = retrieved > 0.0 ? relevant / retrieved : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace keydyn::app
