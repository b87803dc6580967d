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

// Command-line entry points: gen-data, train, run, eval, ablate-k, make-library.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "keydyn/app.hpp"

using namespace keydyn;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitTaskFailure = 1;
constexpr int kExitInfra = 2;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> backend;
  std::optional<std::size_t> k;
  std::optional<std::string> task;
  std::optional<std::string> checkpoint;
  std::optional<std::string> material;
  std::optional<std::string> library;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.seed, "Seed (overrides config)");
  cmd->add_option("--out", f.out, "Output directory");
}

void add_run_flags(CLI::App* cmd, Flags& f) {
  add_common(cmd, f);
  cmd->add_option("--backend", f.backend, "oracle, scripted or http");
  cmd->add_option("--k", f.k, "Number of retrieved examples");
  cmd->add_option("--task", f.task, "Task name");
  cmd->add_option("--checkpoint", f.checkpoint, "Dynamics checkpoint");
  cmd->add_option("--library", f.library, "Prompt library directory");
}

app::Config resolve_config(const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) j = app::Config::load(f.config).to_json();
  if (f.seed) j["seed"] = *f.seed;
  if (f.out) j["out"] = *f.out;
  if (f.backend) j["backend"] = *f.backend;
  if (f.k) j["k"] = *f.k;
  if (f.task) j["task"] = *f.task;
  if (f.library) j["library"] = *f.library;
  app::Config c = app::Config::from_json(j);
  if (f.checkpoint) {
    const auto material = tasks::material_for(c.task);
    c.checkpoints[sim::to_string(material)] = *f.checkpoint;
  }
  return c;
}

sim::MaterialKind material_of(const Flags& f, const app::Config& c) {
  return f.material ? sim::material_kind_from_string(*f.material) : tasks::material_for(c.task);
}

struct Resources {
  dynamics::Model model;
  promptlib::Library library;
  std::unique_ptr<promptlib::Embedder> embedder;
};

Resources load_resources(const app::Config& c) {
  Resources r;
  const fs::path cp = c.checkpoint_for(tasks::material_for(c.task));
  if (!fs::exists(cp)) throw app::ConfigError("checkpoint not found: " + cp.string() + " (run `keydyn train` first)");
  r.model = dynamics::Model::load(cp);
  if (c.embedder == "toy")
    r.embedder = std::make_unique<promptlib::ToyEmbedder>();
  else
    r.embedder = std::make_unique<promptlib::HttpEmbedder>(c.embedder);
  r.library = c.library.empty() ? vlm::make_oracle_library(c.library_per_task) : promptlib::Library::load(c.library);
  r.library.ensure_embeddings(*r.embedder);
  return r;
}

int cmd_gen_data(const Flags& f, int episodes, int interactions) {
  app::Config c = resolve_config(f);
  if (episodes > 0) c.data.episodes = episodes;
  if (interactions > 0) c.data.interactions = interactions;
  if (f.seed) c.data.seed = *f.seed;
  const auto material = material_of(f, c);
  const fs::path path = c.out / (sim::to_string(material) + ".jsonl");
  const auto s = app::generate_data(material, c.data, path);
  std::printf("wrote %d episodes (%zu transitions, seeds %llu..%llu) to %s\n", s.episodes, s.transitions,
              static_cast<unsigned long long>(s.first_seed), static_cast<unsigned long long>(s.last_seed),
              s.path.string().c_str());
  return kExitOk;
}

int cmd_train(const Flags& f, const std::string& data, int steps) {
  app::Config c = resolve_config(f);
  if (steps > 0) c.train.steps = steps;
  if (f.seed) c.train.seed = *f.seed;
  const auto material = material_of(f, c);
  const fs::path data_path = data.empty() ? c.out / (sim::to_string(material) + ".jsonl") : fs::path(data);
  const fs::path checkpoint = f.checkpoint ? fs::path(*f.checkpoint) : c.checkpoint_for(material);
  fs::path csv = checkpoint;
  csv.replace_extension(".loss.csv");
  c.train.progress = [&](int step, double loss) {
    std::fprintf(stderr, "step %d loss %.3e\n", step, loss);
  };
  const auto s = app::train_model(data_path, c.train, checkpoint, csv);
  std::printf("trained on %zu episodes in %.1f s: val mse %.3e m^2 (no-motion baseline %.3e)\n", s.episodes,
              s.seconds, s.val_error, s.val_baseline);
  std::printf("checkpoint %s, loss curve %s\n", s.checkpoint.string().c_str(), s.loss_csv.string().c_str());
  return kExitOk;
}

int cmd_run(const Flags& f) {
  const app::Config c = resolve_config(f);
  Resources r = load_resources(c);
  const auto backend = app::make_backend(c);
  const fs::path dir = c.out / (tasks::to_string(c.task) + "_seed" + std::to_string(c.seed));
  const auto rep = app::run_task(c, c.seed, r.model, &r.library, r.embedder.get(), *backend, {dir});
  std::printf("%s seed %llu: chamfer %.4f -> %.4f m, %d pushes, %zu outer iterations, %s\n",
              tasks::to_string(c.task).c_str(), static_cast<unsigned long long>(c.seed), rep.initial_chamfer,
              rep.final_chamfer, rep.pushes, rep.iterations.size(),
              rep.infra_failure ? "infra failure" : (rep.success ? "success" : "failure"));
  if (!rep.error.empty()) std::fprintf(stderr, "%s\n", rep.error.c_str());
  std::printf("report %s\n", (dir / "report.json").string().c_str());
  if (rep.infra_failure) return kExitInfra;
  return rep.success ? kExitOk : kExitTaskFailure;
}

int cmd_eval(const Flags& f, std::optional<int> n_seeds) {
  const app::Config c = resolve_config(f);
  const int n = n_seeds.value_or(c.eval_seeds);
  const fs::path dir = c.out / ("eval_" + tasks::to_string(c.task));
  if (n == 0) {
    app::EvalResult empty;
    empty.task = tasks::to_string(c.task);
    std::cout << empty.table();
    return kExitOk;
  }
  Resources r = load_resources(c);
  const auto res = app::evaluate(c, n, f.seed ? *f.seed : c.first_seed, r.model, &r.library, r.embedder.get(), dir);
  for (const auto& s : res.seeds)
    std::printf("seed %llu: %s chamfer %.4f -> %.4f, %d pushes, %.1f s\n", static_cast<unsigned long long>(s.seed),
                s.success ? "success" : "failure", s.initial_chamfer, s.final_chamfer, s.pushes, s.seconds);
  std::cout << res.table();
  return res.any_infra_failure() ? kExitInfra : kExitOk;
}

int cmd_ablate_k(const Flags& f, std::vector<std::size_t> k_values, int queries) {
  const app::Config c = resolve_config(f);
  if (k_values.empty()) k_values = c.k_values;
  promptlib::ToyEmbedder toy;
  std::unique_ptr<promptlib::Embedder> http;
  const promptlib::Embedder* e = &toy;
  if (c.embedder != "toy") {
    http = std::make_unique<promptlib::HttpEmbedder>(c.embedder);
    e = http.get();
  }
  promptlib::Library lib = c.library.empty() ? vlm::make_oracle_library(c.library_per_task)
                                             : promptlib::Library::load(c.library);
  lib.ensure_embeddings(*e);
  // Queries come from seeds outside the library's range.
  const auto rows = app::ablate_k(lib, *e, k_values, queries, c.first_seed, c.loop.lambda);
  nlohmann::json out = nlohmann::json::array();
  std::printf("| K | retrieved | same-task fraction |\n|---|---|---|\n");
  for (const auto& r : rows) {
    std::printf("| %zu | %.2f | %.3f |\n", r.k, r.retrieved, r.relevance);
    out.push_back({{"k", r.k}, {"retrieved", r.retrieved}, {"relevance", r.relevance}});
  }
  fs::create_directories(c.out);
  std::ofstream(c.out / "ablate_k.json") << out.dump(2) << '\n';
  return kExitOk;
}

int cmd_make_library(const Flags& f) {
  const app::Config c = resolve_config(f);
  promptlib::Library lib = vlm::make_oracle_library(c.library_per_task);
  promptlib::ToyEmbedder toy;
  lib.ensure_embeddings(toy);
  const fs::path dir = c.out / "library";
  lib.save(dir);
  std::printf("wrote %zu examples to %s\n", lib.size(), dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Keypoint-specified push manipulation with learned dynamics"};
  cli.require_subcommand(1);
  Flags f;

  auto* gen = cli.add_subcommand("gen-data", "Generate simulated interaction episodes");
  add_common(gen, f);
  gen->add_option("--material", f.material, "rope, granular, cubes or t_block");
  int episodes = 0, interactions = 0;
  gen->add_option("--episodes", episodes, "Episode count (0 = desk default)");
  gen->add_option("--interactions", interactions, "Interactions per episode (0 = desk default)");

  auto* train = cli.add_subcommand("train", "Train a dynamics model");
  add_common(train, f);
  train->add_option("--material", f.material, "Material of the dataset");
  std::string data;
  int steps = 0;
  train->add_option("--data", data, "Episodes file (default <out>/<material>.jsonl)");
  train->add_option("--steps", steps, "Training steps");
  train->add_option("--checkpoint", f.checkpoint, "Checkpoint path");

  auto* run = cli.add_subcommand("run", "Run one task episode");
  add_run_flags(run, f);

  auto* eval = cli.add_subcommand("eval", "Run a task over several seeds");
  add_run_flags(eval, f);
  std::optional<int> n_seeds;
  eval->add_option("--n-seeds", n_seeds, "Number of seeds");

  auto* ablate = cli.add_subcommand("ablate-k", "Retrieval relevance for several K");
  add_common(ablate, f);
  ablate->add_option("--library", f.library, "Prompt library directory");
  std::vector<std::size_t> k_values;
  int queries = 5;
  ablate->add_option("--k-values", k_values, "K values")->delimiter(',');
  ablate->add_option("--queries", queries, "Queries per task");

  auto* lib = cli.add_subcommand("make-library", "Write the simulated few-shot library");
  add_common(lib, f);

  CLI11_PARSE(cli, argc, argv);
  try {
    if (*gen) return cmd_gen_data(f, episodes, interactions);
    if (*train) return cmd_train(f, data, steps);
    if (*run) return cmd_run(f);
    if (*eval) return cmd_eval(f, n_seeds);
    if (*ablate) return cmd_ablate_k(f, k_values, queries);
    if (*lib) return cmd_make_library(f);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInfra;
  }
  return kExitInfra;
}
