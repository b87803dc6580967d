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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "keydyn/image.hpp"

namespace keydyn::promptlib {

using Vector = std::vector<double>;

inline constexpr double kDefaultLambda = 0.6;
inline constexpr std::size_t kDefaultK = 3;
inline constexpr int kHistogramDim = 64;
inline constexpr int kTextDim = 128;

/// 4x4x4 RGB histogram, L2-normalized. An empty image gives the zero vector.
Vector embed_image_histogram(const Image& image);
/// Lowercased alphanumeric tokens hashed into 128 signed bins, L2-normalized.
/// Text without tokens gives the zero vector.
Vector embed_text_hashed(const std::string& text);

double dot(const Vector& a, const Vector& b);
/// Unit-length copy; the zero vector stays zero.
Vector normalized(Vector v);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Vector embed_image(const Image& image) const = 0;
  virtual Vector embed_text(const std::string& text) const = 0;
  /// Identifies cached embeddings produced by this embedder.
  virtual std::string name() const = 0;
};

/// Offline default: color histogram and hashed bag of words.
class ToyEmbedder : public Embedder {
 public:
  Vector embed_image(const Image& image) const override { return embed_image_histogram(image); }
  Vector embed_text(const std::string& text) const override { return embed_text_hashed(text); }
  std::string name() const override { return "toy-v1"; }
};

/// External embedding service: POST {"text": ...} or {"image_b64": <png>}
/// to `url`, expecting {"vector": [...]}.
class HttpEmbedder : public Embedder {
 public:
  explicit HttpEmbedder(std::string url, int timeout_s = 30);
  Vector embed_image(const Image& image) const override;
  Vector embed_text(const std::string& text) const override;
  std::string name() const override { return "http:" + url_; }

 private:
  Vector post(const std::string& body) const;
  std::string url_;
  int timeout_s_;
};

struct PromptExample {
  std::string name;
  /// Task category used by the retrieval-quality sweep; may be empty.
  std::string category;
  std::string query;
  Image observation;
  std::string response;
  std::optional<Vector> image_embedding;
  std::optional<Vector> text_embedding;
  std::string embedder;

  /// Computes and caches unit embeddings unless cached by the same embedder.
  void ensure_embeddings(const Embedder& e);
};

/// Unit embeddings of the current observation and instruction.
struct QueryEmbedding {
  Vector image;
  Vector text;
};

QueryEmbedding embed_query(const Embedder& e, const Image& observation, const std::string& instruction);

/// <img, obs_i> + lambda <text, q_i> over unit vectors (cached embeddings).
double matching_score(const PromptExample& example, const QueryEmbedding& query, double lambda = kDefaultLambda);
/// Same score with every embedding computed fresh.
double matching_score(const PromptExample& example, const Embedder& e, const Image& observation,
                      const std::string& instruction, double lambda = kDefaultLambda);

class Library {
 public:
  std::vector<PromptExample> examples;

  std::size_t size() const { return examples.size(); }
  void add(PromptExample ex) { examples.push_back(std::move(ex)); }
  void ensure_embeddings(const Embedder& e);

  /// One subdirectory per example with query.txt, obs.ppm, response.txt and
  /// optionally category.txt and emb.json. Subdirectories load in name order.
  static Library load(const std::filesystem::path& dir);
  /// Writes every example, including cached embeddings.
  void save(const std::filesystem::path& dir) const;
};

struct Scored {
  std::size_t index = 0;
  double score = 0.0;
};

/// Indices of the K best examples, descending score, ties by insertion
/// order. Examples whose category is in `exclude_categories` are skipped.
std::vector<Scored> retrieve_topk(const Library& library, const QueryEmbedding& query, std::size_t k,
                                  double lambda = kDefaultLambda,
                                  const std::vector<std::string>& exclude_categories = {});

}  // namespace keydyn::promptlib
