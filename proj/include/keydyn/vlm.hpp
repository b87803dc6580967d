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

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "keydyn/image.hpp"
#include "keydyn/perception.hpp"
#include "keydyn/promptlib.hpp"
#include "keydyn/sim.hpp"
#include "keydyn/tasks.hpp"

namespace keydyn::vlm {

/// Infrastructure failure (unreachable service, missing credentials); not a
/// task failure.
class Unavailable : public Error {
 public:
  using Error::Error;
};

struct Part {
  enum class Kind { text, image };
  Kind kind = Kind::text;
  std::string text;
  Image image;
};

struct Message {
  std::string role;
  std::vector<Part> parts;
};

struct PromptRequest {
  /// System prompt, then a (user, assistant) pair per example, then the
  /// current observation with the instruction.
  std::vector<Message> messages;
  std::string instruction;

  /// Chat-completions body with images as base64 PNG data URLs.
  nlohmann::json to_json(const std::string& model, double temperature) const;
  /// Text-only summary for transcripts.
  nlohmann::json summary() const;
};

const std::string& base_prompt();

/// Adds at most `max_examples` examples in the given order.
PromptRequest assemble_prompt(const perception::AnnotatedImage& annotation, const std::string& instruction,
                              std::span<const promptlib::PromptExample* const> examples,
                              std::size_t max_examples = promptlib::kDefaultK);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string query(const PromptRequest& request) = 0;
  /// Ground-truth view of the scene; only the oracle uses it.
  virtual void observe(const sim::WorldState&, const perception::AnnotatedImage&) {}
  virtual std::string name() const = 0;
};

struct HttpConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  /// Name of the environment variable holding the bearer token.
  std::string token_env = "OPENAI_API_KEY";
  int timeout_s = 60;
  int retries = 1;
  double temperature = 0.0;

  nlohmann::json to_json() const;
  static HttpConfig from_json(const nlohmann::json& j);
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// POST transport; returns nullopt on transport failure and sets `error`.
using Transport = std::function<std::optional<HttpResponse>(
    const std::string& url, const std::string& token, const std::string& body, int timeout_s, std::string& error)>;

Transport default_transport();

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpConfig config, Transport transport = default_transport());
  std::string query(const PromptRequest& request) override;
  std::string name() const override { return "http"; }

 private:
  HttpConfig config_;
  Transport transport_;
};

/// Extracts the assistant text from a chat-completions response body.
std::string completion_text(const std::string& body);

class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(std::vector<std::string> responses) : responses_(std::move(responses)) {}
  /// Reads a JSON array of strings.
  static ScriptedBackend from_file(const std::filesystem::path& path);
  std::string query(const PromptRequest& request) override;
  std::string name() const override { return "scripted"; }
  std::size_t cursor() const { return cursor_; }
  std::size_t size() const { return responses_.size(); }

 private:
  std::vector<std::string> responses_;
  std::size_t cursor_ = 0;
};

struct OracleOptions {
  double done_threshold = tasks::kSuccessThreshold;
  /// First answer names only part of the work (one straggler cluster).
  bool sparse_first = false;
};

/// Target specification computed from ground truth, or "Done." once the
/// task criterion holds. `sparse` limits the answer to one group of keypoints.
std::string oracle_respond(tasks::TaskKind task, const sim::WorldState& state,
                           const perception::AnnotatedImage& annotation, bool sparse = false,
                           double done_threshold = tasks::kSuccessThreshold);

class OracleBackend : public Backend {
 public:
  explicit OracleBackend(tasks::TaskKind task, OracleOptions options = {}) : task_(task), options_(options) {}
  std::string query(const PromptRequest& request) override;
  void observe(const sim::WorldState& state, const perception::AnnotatedImage& annotation) override;
  std::string name() const override { return "oracle"; }

 private:
  tasks::TaskKind task_;
  OracleOptions options_;
  std::optional<sim::WorldState> state_;
  std::optional<perception::AnnotatedImage> annotation_;
  int answered_ = 0;
};

/// Few-shot library of simulated scenes answered by the oracle, `per_task`
/// examples per task drawn from seeds starting at `first_seed`.
promptlib::Library make_oracle_library(int per_task, std::uint64_t first_seed = 10000);

/// JSON-lines log of every request and response.
class Transcript {
 public:
  Transcript() = default;
  explicit Transcript(std::filesystem::path path);
  void log(const nlohmann::json& record);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::optional<std::filesystem::path> path_;
  std::vector<nlohmann::json> records_;
};

}  // namespace keydyn::vlm
