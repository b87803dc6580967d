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

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/dynamics.hpp"
#include "keydyn/planner.hpp"
#include "keydyn/promptlib.hpp"
#include "keydyn/sim.hpp"
#include "keydyn/tasks.hpp"
#include "keydyn/vlm.hpp"

namespace keydyn::app {

/// Configuration problems; the CLI maps them to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct DataConfig {
  /// Episodes and interactions per episode; 0 picks the material default.
  int episodes = 0;
  int interactions = 0;
  std::uint64_t seed = 0;
  sim::EpisodeOptions options;
};

/// Episodes x interactions used when the config leaves them at 0.
std::pair<int, int> default_data_size(sim::MaterialKind material);

struct Config {
  tasks::TaskKind task = tasks::TaskKind::t_move;
  /// Empty means the task's default instruction.
  std::string instruction;
  tasks::SceneOptions scene;
  /// Overrides the goal marker (x, y, rotation) of tasks that have one.
  std::optional<Pose2D> goal;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs";

  std::string backend = "oracle";
  vlm::HttpConfig http;
  std::filesystem::path scripted;
  vlm::OracleOptions oracle;

  planner::LoopConfig loop;
  planner::MppiParams mppi;
  /// Per-task success thresholds overriding loop.success_threshold.
  std::map<std::string, double> success_thresholds;

  std::filesystem::path models_dir = "models";
  /// Checkpoint per material name; defaults to <models_dir>/<material>.kdm.
  std::map<std::string, std::filesystem::path> checkpoints;

  /// Few-shot library directory; empty builds the oracle library in memory.
  std::filesystem::path library;
  int library_per_task = 4;
  /// "toy" or the URL of an embedding service.
  std::string embedder = "toy";
  /// Hide examples of the task being run from retrieval.
  bool exclude_own_category = false;

  DataConfig data;
  dynamics::TrainConfig train;

  int eval_seeds = 10;
  std::uint64_t first_seed = 0;
  std::vector<std::size_t> k_values{0, 1, 2, 3, 5, 8};

  std::string instruction_text() const;
  double success_threshold() const;
  std::filesystem::path checkpoint_for(sim::MaterialKind material) const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; top-level "k" sets loop.k.
  static Config from_json(const nlohmann::json& j);
  static Config load(const std::filesystem::path& path);
};

nlohmann::json train_config_to_json(const dynamics::TrainConfig& c);
dynamics::TrainConfig train_config_from_json(const nlohmann::json& j, dynamics::TrainConfig c = {});

struct DataSummary {
  std::filesystem::path path;
  int episodes = 0;
  std::size_t transitions = 0;
  std::uint64_t first_seed = 0;
  std::uint64_t last_seed = 0;
};

/// Episode i uses seed data.seed * 1000003 + i.
DataSummary generate_data(sim::MaterialKind material, const DataConfig& data, const std::filesystem::path& path);

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
  double val_error = 0.0;
  double val_baseline = 0.0;
  double seconds = 0.0;
  std::size_t episodes = 0;
};

TrainSummary train_model(const std::filesystem::path& data_path, const dynamics::TrainConfig& train,
                         const std::filesystem::path& checkpoint, const std::filesystem::path& loss_csv);

/// Builds the configured backend. Scripted and http backends are created
/// once per run.
std::unique_ptr<vlm::Backend> make_backend(const Config& config);

sim::WorldState make_task_scene(const Config& config, std::uint64_t seed);

struct RunOutputs {
  /// Where report.json, transcript.jsonl and frames go; empty writes nothing.
  std::filesystem::path dir;
};

planner::RunReport run_task(const Config& config, std::uint64_t seed, const dynamics::Model& model,
                            const promptlib::Library* library, const promptlib::Embedder* embedder,
                            vlm::Backend& backend, const RunOutputs& outputs = {});

struct SeedResult {
  std::uint64_t seed = 0;
  bool success = false;
  bool infra_failure = false;
  double initial_chamfer = 0.0;
  double final_chamfer = 0.0;
  int pushes = 0;
  int outer_iterations = 0;
  double seconds = 0.0;
  std::string error;
};

struct EvalResult {
  std::string task;
  std::vector<SeedResult> seeds;

  int successes() const;
  double success_rate() const;
  bool any_infra_failure() const;
  nlohmann::json to_json() const;
  /// One-row table in the "successes/trials" layout.
  std::string table() const;
};

EvalResult evaluate(const Config& config, int n_seeds, std::uint64_t first_seed, const dynamics::Model& model,
                    const promptlib::Library* library, const promptlib::Embedder* embedder,
                    const std::filesystem::path& out_dir = {});

struct AblationRow {
  std::size_t k = 0;
  /// Mean number of retrieved examples and the fraction from the query's task.
  double retrieved = 0.0;
  double relevance = 0.0;
};

/// Retrieval relevance per K over queries from every task.
std::vector<AblationRow> ablate_k(const promptlib::Library& library, const promptlib::Embedder& embedder,
                                  const std::vector<std::size_t>& k_values, int queries_per_task,
                                  std::uint64_t first_seed, double lambda = promptlib::kDefaultLambda);

}  // namespace keydyn::app
