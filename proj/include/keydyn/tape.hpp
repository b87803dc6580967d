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
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "keydyn/geometry.hpp"

namespace keydyn::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Row = Eigen::RowVectorXd;

/// Trainable tensor with its gradient accumulator and Adam moments.
struct Param {
  Mat value;
  Mat grad;
  Mat m;
  Mat v;

  Param() = default;
  explicit Param(Mat init);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(std::span<Param* const> params, const AdamConfig& cfg, std::int64_t t);

/// Reverse-mode recorder over row-batched matrices. Values are computed
/// eagerly; backward() walks the records in reverse.
class Tape {
 public:
  using Id = int;

  Id constant(Mat value);
  Id param(Param& p);
  /// x * W + b (b broadcast over rows).
  Id affine(Id x, Id w, Id b);
  Id matmul(Id x, Id w);
  Id add(Id a, Id b);
  /// Adds a 1 x cols row to every row of a.
  Id add_row(Id a, Id row);
  Id relu(Id a);
  Id concat_cols(std::span<const Id> parts);
  /// out[i] = a[index[i]]
  Id gather_rows(Id a, std::vector<int> index);
  /// out[index[i]] += a[i], with `rows` output rows.
  Id scatter_add_rows(Id a, std::vector<int> index, int rows);
  /// Scales every element by a constant.
  Id scale(Id a, double s);
  /// mean((a - target)^2) as a 1 x 1 node.
  Id mse(Id a, const Mat& target);

  const Mat& value(Id id) const { return nodes_[id].value; }
  /// Seeds d(out)/d(out) = 1 for a 1 x 1 node and accumulates into params.
  void backward(Id out);
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op { constant, param, affine, matmul, add, add_row, relu, concat, gather, scatter, scale, mse };
  struct Node {
    Op op = Op::constant;
    Mat value;
    Mat grad;
    std::vector<Id> in;
    Param* param = nullptr;
    std::vector<int> index;
    std::vector<Eigen::Index> widths;
    double s = 0.0;
    Mat aux;
  };
  Id push(Node n);

  std::vector<Node> nodes_;
};

/// Dense layer y = x W + b.
struct Linear {
  Param w;
  Param b;

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng);
  Tape::Id forward(Tape& tape, Tape::Id x);
  Mat eval(const Mat& x) const;
  int in_dim() const { return static_cast<int>(w.value.rows()); }
  int out_dim() const { return static_cast<int>(w.value.cols()); }
};

/// Linear-ReLU stacks; `relu_out` adds a final ReLU.
struct Mlp {
  std::vector<Linear> layers;
  bool relu_out = false;

  Mlp() = default;
  Mlp(std::span<const int> dims, bool relu_out, std::mt19937_64& rng);
  Tape::Id forward(Tape& tape, Tape::Id x);
  Mat eval(const Mat& x) const;
  void collect(std::vector<Param*>& out);
  int in_dim() const { return layers.front().in_dim(); }
  int out_dim() const { return layers.back().out_dim(); }
};

}  // namespace keydyn::nn
