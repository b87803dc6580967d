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

#include "keydyn/promptlib.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "keydyn/http.hpp"

namespace keydyn::promptlib {

namespace fs = std::filesystem;

Vector normalized(Vector v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
  return v;
}

double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw Error("embedding dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vector embed_image_histogram(const Image& image) {
  Vector h(kHistogramDim, 0.0);
  for (int v = 0; v < image.height(); ++v)
    for (int u = 0; u < image.width(); ++u) {
      const Rgb c = image.at(u, v);
      h[(c.r >> 6) * 16 + (c.g >> 6) * 4 + (c.b >> 6)] += 1.0;
    }
  return normalized(std::move(h));
}

namespace {

// FNV-1a, so bins do not depend on the standard library's std::hash.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

Vector embed_text_hashed(const std::string& text) {
  Vector v(kTextDim, 0.0);
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t h = fnv1a(token);
    v[h % kTextDim] += (h >> 63) ? -1.0 : 1.0;
    token.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c))
      token.push_back(static_cast<char>(std::tolower(c)));
    else
      flush();
  }
  flush();
  return normalized(std::move(v));
}

HttpEmbedder::HttpEmbedder(std::string url, int timeout_s) : url_(std::move(url)), timeout_s_(timeout_s) {}

Vector HttpEmbedder::post(const std::string& body) const {
  const Url u = split_url(url_);
  httplib::Client client(u.base);
  client.set_connection_timeout(timeout_s_);
  client.set_read_timeout(timeout_s_);
  auto res = client.Post(u.path, body, "application/json");
  if (!res) throw Error("embedding service unavailable: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw Error("embedding service returned status " + std::to_string(res->status));
  const auto j = nlohmann::json::parse(res->body);
  return normalized(j.at("vector").get<Vector>());
}

Vector HttpEmbedder::embed_image(const Image& image) const {
  return post(nlohmann::json{{"image_b64", base64_encode(encode_png(image))}}.dump());
}

Vector HttpEmbedder::embed_text(const std::string& text) const {
  return post(nlohmann::json{{"text", text}}.dump());
}

void PromptExample::ensure_embeddings(const Embedder& e) {
  if (image_embedding && text_embedding && embedder == e.name()) return;
  image_embedding = normalized(e.embed_image(observation));
  text_embedding = normalized(e.embed_text(query));
  embedder = e.name();
}

QueryEmbedding embed_query(const Embedder& e, const Image& observation, const std::string& instruction) {
  return {normalized(e.embed_image(observation)), normalized(e.embed_text(instruction))};
}

namespace {

// Unit vectors: identical ones score exactly 1 and round-off never leaves [-1, 1].
double cosine(const Vector& a, const Vector& b) {
  const double d = dot(a, b);
  if (a == b && d > 0.0) return 1.0;
  return std::clamp(d, -1.0, 1.0);
}

}  // namespace

double matching_score(const PromptExample& example, const QueryEmbedding& query, double lambda) {
  if (!example.image_embedding || !example.text_embedding) throw Error("example has no cached embeddings");
  return cosine(query.image, *example.image_embedding) + lambda * cosine(query.text, *example.text_embedding);
}

double matching_score(const PromptExample& example, const Embedder& e, const Image& observation,
                      const std::string& instruction, double lambda) {
  const QueryEmbedding q = embed_query(e, observation, instruction);
  return cosine(q.image, normalized(e.embed_image(example.observation))) +
         lambda * cosine(q.text, normalized(e.embed_text(example.query)));
}

void Library::ensure_embeddings(const Embedder& e) {
  for (PromptExample& ex : examples) ex.ensure_embeddings(e);
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

std::string trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

}  // namespace

Library Library::load(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("prompt library not found: " + dir.string());
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  Library lib;
  for (const fs::path& p : entries) {
    PromptExample ex;
    ex.name = p.filename().string();
    ex.query = trim(read_text(p / "query.txt"));
    ex.response = read_text(p / "response.txt");
    ex.observation = read_ppm(p / "obs.ppm");
    if (fs::exists(p / "category.txt")) ex.category = trim(read_text(p / "category.txt"));
    if (fs::exists(p / "emb.json")) {
      const auto j = nlohmann::json::parse(read_text(p / "emb.json"));
      ex.embedder = j.at("embedder").get<std::string>();
      ex.image_embedding = j.at("image").get<Vector>();
      ex.text_embedding = j.at("text").get<Vector>();
    }
    lib.add(std::move(ex));
  }
  return lib;
}

void Library::save(const fs::path& dir) const {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const PromptExample& ex = examples[i];
    const fs::path p = dir / (ex.name.empty() ? "example_" + std::to_string(i) : ex.name);
    fs::create_directories(p);
    write_text(p / "query.txt", ex.query + "\n");
    write_text(p / "response.txt", ex.response);
    write_ppm(ex.observation, p / "obs.ppm");
    if (!ex.category.empty()) write_text(p / "category.txt", ex.category + "\n");
    if (ex.image_embedding && ex.text_embedding) {
      const nlohmann::json j{{"embedder", ex.embedder}, {"image", *ex.image_embedding}, {"text", *ex.text_embedding}};
      write_text(p / "emb.json", j.dump());
    }
  }
}

std::vector<Scored> retrieve_topk(const Library& library, const QueryEmbedding& query, std::size_t k, double lambda,
                                  const std::vector<std::string>& exclude_categories) {
  std::vector<Scored> all;
  for (std::size_t i = 0; i < library.examples.size(); ++i) {
    const PromptExample& ex = library.examples[i];
    if (std::find(exclude_categories.begin(), exclude_categories.end(), ex.category) != exclude_categories.end())
      continue;
    all.push_back({i, matching_score(ex, query, lambda)});
  }
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                    [](const Scored& a, const Scored& b) {
                      return a.score != b.score ? a.score > b.score : a.index < b.index;
                    });
  all.resize(n);
  return all;
}

}  // namespace keydyn::promptlib
