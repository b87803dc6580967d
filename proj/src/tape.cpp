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

#include "keydyn/tape.hpp"

#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace keydyn::nn {

namespace {

// Tape matrices are freed and reallocated every step; keep them off mmap so
// the allocator can reuse pages.
[[maybe_unused]] const bool kAllocTuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  return true;
}();

}  // namespace

Param::Param(Mat init) : value(std::move(init)) {
  grad = Mat::Zero(value.rows(), value.cols());
  m = Mat::Zero(value.rows(), value.cols());
  v = Mat::Zero(value.rows(), value.cols());
}

void adam_step(std::span<Param* const> params, const AdamConfig& cfg, std::int64_t t) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (Param* p : params) {
    p->m = cfg.beta1 * p->m + (1.0 - cfg.beta1) * p->grad;
    p->v = cfg.beta2 * p->v + (1.0 - cfg.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= cfg.lr * (p->m.array() / c1) / ((p->v.array() / c2).sqrt() + cfg.eps);
  }
}

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::constant(Mat value) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::Id Tape::param(Param& p) {
  Node n;
  n.op = Op::param;
  n.value = p.value;
  n.param = &p;
  return push(std::move(n));
}

Tape::Id Tape::affine(Id x, Id w, Id b) {
  const Mat& X = value(x);
  const Mat& W = value(w);
  const Mat& B = value(b);
  if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) throw Error("affine dimension mismatch");
  Node n;
  n.op = Op::affine;
  n.value = X * W;
  n.value.rowwise() += B.row(0);
  n.in = {x, w, b};
  return push(std::move(n));
}

Tape::Id Tape::matmul(Id x, Id w) {
  if (value(x).cols() != value(w).rows()) throw Error("matmul dimension mismatch");
  Node n;
  n.op = Op::matmul;
  n.value = value(x) * value(w);
  n.in = {x, w};
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    throw Error("add dimension mismatch");
  Node n;
  n.op = Op::add;
  n.value = value(a) + value(b);
  n.in = {a, b};
  return push(std::move(n));
}

Tape::Id Tape::add_row(Id a, Id row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw Error("add_row dimension mismatch");
  Node n;
  n.op = Op::add_row;
  n.value = value(a);
  n.value.rowwise() += value(row).row(0);
  n.in = {a, row};
  return push(std::move(n));
}

Tape::Id Tape::relu(Id a) {
  Node n;
  n.op = Op::relu;
  n.value = value(a).cwiseMax(0.0);
  n.in = {a};
  return push(std::move(n));
}

Tape::Id Tape::concat_cols(std::span<const Id> parts) {
  if (parts.empty()) throw Error("concat of nothing");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  Node n;
  n.op = Op::concat;
  for (Id p : parts) {
    if (value(p).rows() != rows) throw Error("concat row mismatch");
    cols += value(p).cols();
    n.widths.push_back(value(p).cols());
    n.in.push_back(p);
  }
  n.value.resize(rows, cols);
  Eigen::Index c = 0;
  for (Id p : parts) {
    n.value.middleCols(c, value(p).cols()) = value(p);
    c += value(p).cols();
  }
  return push(std::move(n));
}

Tape::Id Tape::gather_rows(Id a, std::vector<int> index) {
  const Mat& A = value(a);
  Node n;
  n.op = Op::gather;
  n.value.resize(static_cast<Eigen::Index>(index.size()), A.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= A.rows()) throw Error("gather index out of range");
    n.value.row(static_cast<Eigen::Index>(i)) = A.row(index[i]);
  }
  n.in = {a};
  n.index = std::move(index);
  return push(std::move(n));
}

Tape::Id Tape::scatter_add_rows(Id a, std::vector<int> index, int rows) {
  const Mat& A = value(a);
  if (static_cast<Eigen::Index>(index.size()) != A.rows()) throw Error("scatter index size mismatch");
  Node n;
  n.op = Op::scatter;
  n.value = Mat::Zero(rows, A.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw Error("scatter index out of range");
    n.value.row(index[i]) += A.row(static_cast<Eigen::Index>(i));
  }
  n.in = {a};
  n.index = std::move(index);
  return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double s) {
  Node n;
  n.op = Op::scale;
  n.value = s * value(a);
  n.s = s;
  n.in = {a};
  return push(std::move(n));
}

Tape::Id Tape::mse(Id a, const Mat& target) {
  const Mat& A = value(a);
  if (A.rows() != target.rows() || A.cols() != target.cols()) throw Error("mse dimension mismatch");
  Node n;
  n.op = Op::mse;
  n.aux = A - target;
  n.value = Mat::Constant(1, 1, n.aux.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, A.size())));
  n.in = {a};
  return push(std::move(n));
}

void Tape::backward(Id out) {
  if (value(out).size() != 1) throw Error("backward needs a scalar output");
  for (Node& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
  nodes_[out].grad(0, 0) = 1.0;
  for (Id id = out; id >= 0; --id) {
    Node& n = nodes_[id];
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::constant:
        break;
      case Op::param:
        n.param->grad += g;
        break;
      case Op::affine:
        nodes_[n.in[0]].grad.noalias() += g * nodes_[n.in[1]].value.transpose();
        nodes_[n.in[1]].grad.noalias() += nodes_[n.in[0]].value.transpose() * g;
        nodes_[n.in[2]].grad += g.colwise().sum();
        break;
      case Op::matmul:
        nodes_[n.in[0]].grad.noalias() += g * nodes_[n.in[1]].value.transpose();
        nodes_[n.in[1]].grad.noalias() += nodes_[n.in[0]].value.transpose() * g;
        break;
      case Op::add:
        nodes_[n.in[0]].grad += g;
        nodes_[n.in[1]].grad += g;
        break;
      case Op::add_row:
        nodes_[n.in[0]].grad += g;
        nodes_[n.in[1]].grad += g.colwise().sum();
        break;
      case Op::relu:
        nodes_[n.in[0]].grad.array() += (n.value.array() > 0.0).cast<double>() * g.array();
        break;
      case Op::concat: {
        Eigen::Index c = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
          nodes_[n.in[k]].grad += g.middleCols(c, n.widths[k]);
          c += n.widths[k];
        }
        break;
      }
      case Op::gather: {
        Mat& ga = nodes_[n.in[0]].grad;
        for (std::size_t i = 0; i < n.index.size(); ++i) ga.row(n.index[i]) += g.row(static_cast<Eigen::Index>(i));
        break;
      }
      case Op::scatter: {
        Mat& ga = nodes_[n.in[0]].grad;
        for (std::size_t i = 0; i < n.index.size(); ++i) ga.row(static_cast<Eigen::Index>(i)) += g.row(n.index[i]);
        break;
      }
      case Op::scale:
        nodes_[n.in[0]].grad += n.s * g;
        break;
      case Op::mse:
        nodes_[n.in[0]].grad += (2.0 * g(0, 0) / static_cast<double>(std::max<Eigen::Index>(1, n.aux.size()))) * n.aux;
        break;
    }
  }
}

Linear::Linear(int in, int out, std::mt19937_64& rng) {
  // He-uniform initialization.
  const double bound = std::sqrt(6.0 / in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  this->w = Param(std::move(w));
  b = Param(Mat::Zero(1, out));
}

Tape::Id Linear::forward(Tape& tape, Tape::Id x) {
  return tape.affine(x, tape.param(w), tape.param(b));
}

Mat Linear::eval(const Mat& x) const {
  Mat y = x * w.value;
  y.rowwise() += b.value.row(0);
  return y;
}

Mlp::Mlp(std::span<const int> dims, bool relu_out, std::mt19937_64& rng) : relu_out(relu_out) {
  if (dims.size() < 2) throw Error("an MLP needs at least two sizes");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) layers.emplace_back(dims[i], dims[i + 1], rng);
}

Tape::Id Mlp::forward(Tape& tape, Tape::Id x) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(tape, x);
    if (i + 1 < layers.size() || relu_out) x = tape.relu(x);
  }
  return x;
}

Mat Mlp::eval(const Mat& x) const {
  Mat h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].eval(h);
    if (i + 1 < layers.size() || relu_out) h = h.cwiseMax(0.0);
  }
  return h;
}

void Mlp::collect(std::vector<Param*>& out) {
  for (Linear& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
}

}  // namespace keydyn::nn
