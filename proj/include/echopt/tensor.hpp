// Copyright 2026 The EchoPT Workbench Authors
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

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Every op returns a new Tensor whose node remembers its parents and a closure
// that pushes the node's gradient into them. backward() orders the reachable
// nodes topologically and replays the closures in reverse. Leaves created with
// Tensor::parameter() accumulate gradients across calls; interior gradients are
// reset at the start of each backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace echopt::ad {

using Shape = std::vector<int>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline Eigen::Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Eigen::Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
  out << ']';
  return out.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  Vec<T> value;
  Vec<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Vec<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Vec<T>::Zero(value.size());
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor constant(Shape shape, Vec<T> value) { return make(std::move(shape), std::move(value), false); }
  static Tensor parameter(Shape shape, Vec<T> value) { return make(std::move(shape), std::move(value), true); }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return make(std::move(shape), Vec<T>::Zero(n), requires_grad);
  }
  static Tensor scalar(T v) { return constant({1}, Vec<T>::Constant(1, v)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index size() const { return node_->value.size(); }

  Vec<T>& value() { return node_->value; }
  const Vec<T>& value() const { return node_->value; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }
  Vec<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.setZero(node_->value.size()); }

  // Views the flat buffer as a row-major matrix with the given leading dimension.
  MatMap<T> mat(Eigen::Index rows, Eigen::Index cols) { return MatMap<T>(node_->value.data(), rows, cols); }
  ConstMatMap<T> mat(Eigen::Index rows, Eigen::Index cols) const {
    return ConstMatMap<T>(node_->value.data(), rows, cols);
  }

  Tensor detach() const { return constant(shape(), value()); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Builds an op result. The closure receives the result node and must add its
  // gradient into any parent that requires one.
  static Tensor from_op(const char* op, Shape shape, Vec<T> value, std::vector<Tensor> parents,
                        std::function<void(Node<T>&)> fn) {
    Tensor out = make(std::move(shape), std::move(value), false);
    out.node_->is_leaf = false;
    out.node_->op = op;
    for (auto& p : parents) {
      if (p.requires_grad()) out.node_->requires_grad = true;
      out.node_->parents.push_back(p.node_);
    }
    if (out.node_->requires_grad) out.node_->backward_fn = std::move(fn);
    return out;
  }

 private:
  static Tensor make(Shape shape, Vec<T> value, bool requires_grad) {
    if (numel(shape) != value.size()) {
      throw ShapeError("tensor data length " + std::to_string(value.size()) + " does not match shape " +
                       shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(value);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  std::shared_ptr<Node<T>> node_;
};

// Gradient of `parent` if it participates in the backward pass, else nullptr.
template <typename T>
Vec<T>* grad_of(Node<T>& node, std::size_t parent) {
  Node<T>& p = *node.parents[parent];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the reachable graph.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad = Vec<T>::Zero(n->value.size());
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  // Free interior buffers; the graph may be kept alive by the caller.
  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad.resize(0);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  return Tensor<T>::from_op("add", a.shape(), a.value() + b.value(), {a, b}, [](Node<T>& n) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = grad_of(n, i)) *g += n.grad;
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  return Tensor<T>::from_op("sub", a.shape(), a.value() - b.value(), {a, b}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
    if (auto* g = grad_of(n, 1)) *g -= n.grad;
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  return Tensor<T>::from_op("mul", a.shape(), a.value().cwiseProduct(b.value()), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (auto* g = grad_of(n, 0)) *g += n.grad.cwiseProduct(bv);
    if (auto* g = grad_of(n, 1)) *g += n.grad.cwiseProduct(av);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return Tensor<T>::from_op("scale", a.shape(), a.value() * c, {a}, [c](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += c * n.grad;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return Tensor<T>::from_op("relu", a.shape(), a.value().cwiseMax(T(0)), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      const auto& x = n.parents[0]->value;
      *g += (x.array() > T(0)).select(n.grad, T(0));
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  return Tensor<T>::from_op("sum", {1}, Vec<T>::Constant(1, a.value().sum()), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) g->array() += n.grad[0];
  });
}

// Mean squared error against a target treated as constant.
template <typename T>
Tensor<T> mean_sq_error(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape("mean_sq_error", pred, target);
  const Vec<T> diff = pred.value() - target.value();
  const T n = static_cast<T>(diff.size());
  return Tensor<T>::from_op("mse", {1}, Vec<T>::Constant(1, diff.squaredNorm() / n), {pred},
                            [diff, n](Node<T>& node) {
                              if (auto* g = grad_of(node, 0)) *g += (T(2) * node.grad[0] / n) * diff;
                            });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return Tensor<T>::from_op("reshape", std::move(shape), a.value(), {a}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
  });
}

namespace detail {
struct AxisSplit {
  Eigen::Index outer = 1;
  Eigen::Index inner = 1;
};
inline AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
inline int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}
}  // namespace detail

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  axis = detail::normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[static_cast<std::size_t>(axis)] = b[static_cast<std::size_t>(axis)] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  const auto split = detail::split_at(first, axis);
  const Eigen::Index out_row = out_shape[static_cast<std::size_t>(axis)] * split.inner;
  Vec<T> out(numel(out_shape));
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    const Eigen::Index w = p.dim(axis) * split.inner;
    widths.push_back(w);
    for (Eigen::Index o = 0; o < split.outer; ++o) out.segment(o * out_row + offset, w) = p.value().segment(o * w, w);
    offset += w;
  }
  return Tensor<T>::from_op("concat", out_shape, std::move(out), parts, [widths, split, out_row](Node<T>& n) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const Eigen::Index w = widths[i];
      if (auto* g = grad_of(n, i)) {
        for (Eigen::Index o = 0; o < split.outer; ++o) g->segment(o * w, w) += n.grad.segment(o * out_row + off, w);
      }
      off += w;
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length) {
  axis = detail::normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length <= 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const auto split = detail::split_at(a.shape(), axis);
  const Eigen::Index in_row = a.dim(axis) * split.inner;
  const Eigen::Index w = length * split.inner;
  const Eigen::Index off = start * split.inner;
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Vec<T> out(numel(out_shape));
  for (Eigen::Index o = 0; o < split.outer; ++o) out.segment(o * w, w) = a.value().segment(o * in_row + off, w);
  return Tensor<T>::from_op("slice", out_shape, std::move(out), {a}, [split, in_row, w, off](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      for (Eigen::Index o = 0; o < split.outer; ++o) g->segment(o * in_row + off, w) += n.grad.segment(o * w, w);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const int m = a.dim(0), k = a.dim(1);
  Vec<T> out(a.size());
  MatMap<T>(out.data(), k, m) = a.mat(m, k).transpose();
  return Tensor<T>::from_op("transpose", {k, m}, std::move(out), {a}, [m, k](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) MatMap<T>(g->data(), m, k) += ConstMatMap<T>(n.grad.data(), k, m).transpose();
  });
}

// [N, D] -> [N * times, D]; row n * times + t is a copy of row n.
template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& a, int times) {
  if (a.rank() != 2) throw ShapeError("repeat_rows: expected rank 2, got " + shape_str(a.shape()));
  const int rows = a.dim(0), d = a.dim(1);
  Vec<T> out(static_cast<Eigen::Index>(rows) * times * d);
  for (int r = 0; r < rows; ++r)
    for (int t = 0; t < times; ++t) out.segment((static_cast<Eigen::Index>(r) * times + t) * d, d) = a.value().segment(r * d, d);
  return Tensor<T>::from_op("repeat_rows", {rows * times, d}, std::move(out), {a}, [rows, times, d](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      for (int r = 0; r < rows; ++r)
        for (int t = 0; t < times; ++t) g->segment(r * d, d) += n.grad.segment((static_cast<Eigen::Index>(r) * times + t) * d, d);
    }
  });
}

namespace detail {
// Gathers out[i] = in[index[i]]; gradient scatters back. Permutations only.
template <typename T>
Tensor<T> gather(const char* op, const Tensor<T>& a, Shape shape, std::shared_ptr<const std::vector<Eigen::Index>> index) {
  Vec<T> out(static_cast<Eigen::Index>(index->size()));
  for (std::size_t i = 0; i < index->size(); ++i) out[static_cast<Eigen::Index>(i)] = a.value()[(*index)[i]];
  return Tensor<T>::from_op(op, std::move(shape), std::move(out), {a}, [index](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < index->size(); ++i) (*g)[(*index)[i]] += n.grad[static_cast<Eigen::Index>(i)];
    }
  });
}

inline std::vector<Eigen::Index> patch_index(int batch, int channels, int h, int w, int ph, int pw) {
  const int pr = h / ph, pc = w / pw;
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(batch) * channels * h * w);
  for (int n = 0; n < batch; ++n)
    for (int p = 0; p < pr * pc; ++p)
      for (int c = 0; c < channels; ++c)
        for (int i = 0; i < ph; ++i)
          for (int j = 0; j < pw; ++j) {
            const int row = (p / pc) * ph + i, col = (p % pc) * pw + j;
            idx.push_back(((static_cast<Eigen::Index>(n) * channels + c) * h + row) * w + col);
          }
  return idx;
}
}  // namespace detail

// [N, C, H, W] -> [N * P, C * ph * pw], patches in row-major patch-grid order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int ph, int pw) {
  if (x.rank() != 4) throw ShapeError("patchify: expected NCHW, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % ph != 0 || w % pw != 0) {
    throw ShapeError("patchify: grid " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(ph) +
                     "x" + std::to_string(pw));
  }
  auto idx = std::make_shared<const std::vector<Eigen::Index>>(detail::patch_index(n, c, h, w, ph, pw));
  return detail::gather("patchify", x, {n * (h / ph) * (w / pw), c * ph * pw}, idx);
}

// Inverse of patchify.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& p, int n, int c, int h, int w, int ph, int pw) {
  const Eigen::Index total = static_cast<Eigen::Index>(n) * c * h * w;
  if (p.size() != total || h % ph != 0 || w % pw != 0) {
    throw ShapeError("unpatchify: " + shape_str(p.shape()) + " cannot form " + shape_str({n, c, h, w}));
  }
  const auto fwd = detail::patch_index(n, c, h, w, ph, pw);
  auto inv = std::make_shared<std::vector<Eigen::Index>>(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) (*inv)[static_cast<std::size_t>(fwd[i])] = static_cast<Eigen::Index>(i);
  return detail::gather<T>("unpatchify", p, {n, c, h, w}, inv);
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<T> out(static_cast<Eigen::Index>(m) * n);
  MatMap<T>(out.data(), m, n).noalias() = a.mat(m, k) * b.mat(k, n);
  return Tensor<T>::from_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    const ConstMatMap<T> go(node.grad.data(), m, n);
    if (auto* g = grad_of(node, 0))
      MatMap<T>(g->data(), m, k).noalias() += go * ConstMatMap<T>(node.parents[1]->value.data(), k, n).transpose();
    if (auto* g = grad_of(node, 1))
      MatMap<T>(g->data(), k, n).noalias() += ConstMatMap<T>(node.parents[0]->value.data(), m, k).transpose() * go;
  });
}

// x [M, D] + b [D] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.size() != x.dim(1)) {
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const int m = x.dim(0), d = x.dim(1);
  Vec<T> out = x.value();
  MatMap<T>(out.data(), m, d).rowwise() += b.value().transpose();
  return Tensor<T>::from_op("add_bias", x.shape(), std::move(out), {x, b}, [m, d](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
    if (auto* g = grad_of(n, 1)) *g += ConstMatMap<T>(n.grad.data(), m, d).colwise().sum().transpose();
  });
}

// ---------------------------------------------------------------- normalisation

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const int d = x.dim(-1);
  const Eigen::Index rows = x.size() / d;
  Vec<T> out(x.size());
  MatMap<T> y(out.data(), rows, d);
  y = x.mat(rows, d);
  y.colwise() -= y.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return Tensor<T>::from_op("softmax", x.shape(), std::move(out), {x}, [rows, d](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) {
      const ConstMatMap<T> yv(n.value.data(), rows, d);
      const ConstMatMap<T> gy(n.grad.data(), rows, d);
      const Vec<T> dot = yv.cwiseProduct(gy).rowwise().sum();
      MatMap<T>(g->data(), rows, d).array() += yv.array() * (gy.colwise() - dot).array();
    }
  });
}

namespace detail {
// Shared backward for normalisers: given xhat, inv_std and dxhat over groups.
template <typename T>
void norm_backward(Eigen::Ref<const Vec<T>> xhat, Eigen::Ref<const Vec<T>> dxhat, T inv_std, Eigen::Ref<Vec<T>> dx) {
  const T m = static_cast<T>(xhat.size());
  const T mean_d = dxhat.sum() / m;
  const T mean_dx = dxhat.dot(xhat) / m;
  dx.array() += inv_std * (dxhat.array() - mean_d - xhat.array() * mean_dx);
}
}  // namespace detail

// Normalises each row of x [..., D] and applies per-feature gamma, beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const int d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: feature size " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()));
  }
  const Eigen::Index rows = x.size() / d;
  RowMat<T> xhat(rows, d);
  Vec<T> inv_std(rows);
  const auto xv = x.mat(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  Vec<T> out(x.size());
  MatMap<T> y(out.data(), rows, d);
  y = (xhat.array().rowwise() * gamma.value().transpose().array()).rowwise() + beta.value().transpose().array();
  return Tensor<T>::from_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                            [xhat = std::move(xhat), inv_std, rows, d](Node<T>& n) {
                              const ConstMatMap<T> gy(n.grad.data(), rows, d);
                              const Vec<T>& gam = n.parents[1]->value;
                              if (auto* g = grad_of(n, 0)) {
                                MatMap<T> gx(g->data(), rows, d);
                                for (Eigen::Index r = 0; r < rows; ++r) {
                                  const Vec<T> xr = xhat.row(r).transpose();
                                  const Vec<T> dxhat = gy.row(r).transpose().cwiseProduct(gam);
                                  Vec<T> acc = Vec<T>::Zero(d);
                                  detail::norm_backward<T>(xr, dxhat, inv_std[r], acc);
                                  gx.row(r) += acc.transpose();
                                }
                              }
                              if (auto* g = grad_of(n, 1)) *g += gy.cwiseProduct(xhat).colwise().sum().transpose();
                              if (auto* g = grad_of(n, 2)) *g += gy.colwise().sum().transpose();
                            });
}

// Layer norm over all of C*H*W per sample of x [N, C, H, W], per-channel affine.
template <typename T>
Tensor<T> layer_norm_chw(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 4 || gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw ShapeError("layer_norm_chw: " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index hw = x.size() / (static_cast<Eigen::Index>(n) * c);
  const Eigen::Index per = c * hw;
  Vec<T> xhat(x.size());
  Vec<T> inv_std(n);
  for (int s = 0; s < n; ++s) {
    const auto seg = x.value().segment(s * per, per);
    const T mu = seg.mean();
    const T var = (seg.array() - mu).square().mean();
    inv_std[s] = T(1) / std::sqrt(var + eps);
    xhat.segment(s * per, per) = (seg.array() - mu) * inv_std[s];
  }
  Vec<T> out(x.size());
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const Eigen::Index off = s * per + ch * hw;
      out.segment(off, hw) = xhat.segment(off, hw).array() * gamma.value()[ch] + beta.value()[ch];
    }
  return Tensor<T>::from_op("layer_norm_chw", x.shape(), std::move(out), {x, gamma, beta},
                            [xhat = std::move(xhat), inv_std, n, c, hw, per](Node<T>& node) {
                              const Vec<T>& gam = node.parents[1]->value;
                              if (auto* g = grad_of(node, 0)) {
                                Vec<T> dxhat(per);
                                for (int s = 0; s < n; ++s) {
                                  for (int ch = 0; ch < c; ++ch)
                                    dxhat.segment(ch * hw, hw) = node.grad.segment(s * per + ch * hw, hw) * gam[ch];
                                  detail::norm_backward<T>(xhat.segment(s * per, per), dxhat, inv_std[s],
                                                           g->segment(s * per, per));
                                }
                              }
                              auto* gg = grad_of(node, 1);
                              auto* gb = grad_of(node, 2);
                              for (int s = 0; s < n; ++s)
                                for (int ch = 0; ch < c; ++ch) {
                                  const Eigen::Index off = s * per + ch * hw;
                                  if (gg) (*gg)[ch] += node.grad.segment(off, hw).dot(xhat.segment(off, hw));
                                  if (gb) (*gb)[ch] += node.grad.segment(off, hw).sum();
                                }
                            });
}

// Non-learnable batch-norm statistics.
template <typename T>
struct BatchNormStats {
  Vec<T> running_mean;
  Vec<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormStats() = default;
  explicit BatchNormStats(int features)
      : running_mean(Vec<T>::Zero(features)), running_var(Vec<T>::Ones(features)) {}
};

// Batch norm over the rows of x [M, D]. Training mode normalises with the batch
// statistics and updates the running estimates; inference uses the running ones.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training) {
  if (x.rank() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1) ||
      stats.running_mean.size() != x.dim(1)) {
    throw ShapeError("batch_norm: " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  const int m = x.dim(0), d = x.dim(1);
  const auto xv = x.mat(m, d);
  Vec<T> mean(d), inv_std(d);
  if (training) {
    if (m < 2) throw ShapeError("batch_norm: training mode needs at least two rows");
    mean = xv.colwise().mean().transpose();
    const Vec<T> var = (xv.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
    inv_std = (var.array() + stats.eps).rsqrt();
    const T unbias = static_cast<T>(m) / static_cast<T>(m - 1);
    stats.running_mean = (T(1) - stats.momentum) * stats.running_mean + stats.momentum * mean;
    stats.running_var = (T(1) - stats.momentum) * stats.running_var + stats.momentum * unbias * var;
  } else {
    mean = stats.running_mean;
    inv_std = (stats.running_var.array() + stats.eps).rsqrt();
  }
  RowMat<T> xhat = (xv.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
  Vec<T> out(x.size());
  MatMap<T>(out.data(), m, d) =
      (xhat.array().rowwise() * gamma.value().transpose().array()).rowwise() + beta.value().transpose().array();
  return Tensor<T>::from_op("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                            [xhat = std::move(xhat), inv_std, m, d, training](Node<T>& n) {
                              const ConstMatMap<T> gy(n.grad.data(), m, d);
                              const Vec<T>& gam = n.parents[1]->value;
                              if (auto* g = grad_of(n, 0)) {
                                MatMap<T> gx(g->data(), m, d);
                                for (int c = 0; c < d; ++c) {
                                  const Vec<T> dxhat = gy.col(c) * gam[c];
                                  if (training) {
                                    Vec<T> acc = Vec<T>::Zero(m);
                                    detail::norm_backward<T>(xhat.col(c), dxhat, inv_std[c], acc);
                                    gx.col(c) += acc;
                                  } else {
                                    gx.col(c) += dxhat * inv_std[c];
                                  }
                                }
                              }
                              if (auto* g = grad_of(n, 1)) *g += gy.cwiseProduct(xhat).colwise().sum().transpose();
                              if (auto* g = grad_of(n, 2)) *g += gy.colwise().sum().transpose();
                            });
}

// ---------------------------------------------------------------- convolution

struct Conv2dOptions {
  int stride = 1;
  // Negative padding selects "same" padding: output = ceil(input / stride).
  int pad_h = -1;
  int pad_w = -1;
};

namespace detail {

struct ConvGeometry {
  int channels = 0, h = 0, w = 0;  // image side
  int kh = 0, kw = 0, stride = 1;
  int pad_top = 0, pad_left = 0;
  int out_h = 0, out_w = 0;        // column side

  static ConvGeometry make(int channels, int h, int w, int kh, int kw, const Conv2dOptions& opt) {
    ConvGeometry g{channels, h, w, kh, kw, opt.stride, 0, 0, 0, 0};
    if (opt.stride <= 0) throw ShapeError("conv2d: stride must be positive");
    if (opt.pad_h < 0) {
      g.out_h = (h + opt.stride - 1) / opt.stride;
      g.pad_top = std::max((g.out_h - 1) * opt.stride + kh - h, 0) / 2;
    } else {
      g.pad_top = opt.pad_h;
      g.out_h = (h + 2 * opt.pad_h - kh) / opt.stride + 1;
    }
    if (opt.pad_w < 0) {
      g.out_w = (w + opt.stride - 1) / opt.stride;
      g.pad_left = std::max((g.out_w - 1) * opt.stride + kw - w, 0) / 2;
    } else {
      g.pad_left = opt.pad_w;
      g.out_w = (w + 2 * opt.pad_w - kw) / opt.stride + 1;
    }
    if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");
    return g;
  }
  // Output columns [lo, hi) whose kernel tap kj lands inside the image.
  std::pair<int, int> valid_cols(int kj) const {
    const int off = kj - pad_left;
    const int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    const int hi = w - off <= 0 ? 0 : std::min(out_w, (w - off + stride - 1) / stride);
    return {std::min(lo, out_w), hi};
  }
  Eigen::Index col_rows() const { return static_cast<Eigen::Index>(channels) * kh * kw; }
  Eigen::Index col_cols() const { return static_cast<Eigen::Index>(out_h) * out_w; }
};

// image [C, H, W] -> col [C*kh*kw, out_h*out_w]
template <typename T>
void im2col(const T* image, const ConvGeometry& g, RowMat<T>& col) {
  col.resize(g.col_rows(), g.col_cols());
  for (int c = 0; c < g.channels; ++c)
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj) {
        T* row = col.row((static_cast<Eigen::Index>(c) * g.kh + ki) * g.kw + kj).data();
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad_top + ki;
          T* dst = row + static_cast<Eigen::Index>(oh) * g.out_w;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = image + (static_cast<Eigen::Index>(c) * g.h + ih) * g.w;
          const int off = kj - g.pad_left;
          const auto [lo, hi] = g.valid_cols(kj);
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow + off];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + off];
          }
          std::fill(dst + std::max(lo, hi), dst + g.out_w, T(0));
        }
      }
}

// Adjoint of im2col: accumulates col entries back into image.
template <typename T>
void col2im(const RowMat<T>& col, const ConvGeometry& g, T* image) {
  for (int c = 0; c < g.channels; ++c)
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* row = col.row((static_cast<Eigen::Index>(c) * g.kh + ki) * g.kw + kj).data();
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad_top + ki;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = image + (static_cast<Eigen::Index>(c) * g.h + ih) * g.w;
          const T* src = row + static_cast<Eigen::Index>(oh) * g.out_w;
          const int off = kj - g.pad_left;
          const auto [lo, hi] = g.valid_cols(kj);
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow + off] += src[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + off] += src[ow];
          }
        }
      }
}

}  // namespace detail

// x [N, C, H, W], weight [Co, C, kh, kw], bias [Co] (optional) -> [N, Co, Ho, Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != weight.dim(0)) throw ShapeError("conv2d: bias " + shape_str(bias.shape()));
  const int n = x.dim(0), co = weight.dim(0);
  const auto g = detail::ConvGeometry::make(x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), opt);
  const Eigen::Index in_per = static_cast<Eigen::Index>(g.channels) * g.h * g.w;
  const Eigen::Index out_per = co * g.col_cols();
  const auto wm = weight.mat(co, g.col_rows());
  Vec<T> out(n * out_per);
  RowMat<T> col;
  for (int s = 0; s < n; ++s) {
    detail::im2col(x.value().data() + s * in_per, g, col);
    MatMap<T> y(out.data() + s * out_per, co, g.col_cols());
    y.noalias() = wm * col;
    if (has_bias) y.colwise() += bias.value();
  }
  std::vector<Tensor<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor<T>::from_op(
      "conv2d", {n, co, g.out_h, g.out_w}, std::move(out), parents, [g, n, co, in_per, out_per, has_bias](Node<T>& node) {
        const ConstMatMap<T> wm(node.parents[1]->value.data(), co, g.col_rows());
        auto* gx = grad_of(node, 0);
        auto* gw = grad_of(node, 1);
        auto* gb = has_bias ? grad_of(node, 2) : nullptr;
        RowMat<T> col, dcol;
        for (int s = 0; s < n; ++s) {
          const ConstMatMap<T> gy(node.grad.data() + s * out_per, co, g.col_cols());
          if (gw) {
            detail::im2col(node.parents[0]->value.data() + s * in_per, g, col);
            MatMap<T>(gw->data(), co, g.col_rows()).noalias() += gy * col.transpose();
          }
          if (gb) *gb += gy.rowwise().sum();
          if (gx) {
            dcol.noalias() = wm.transpose() * gy;
            detail::col2im(dcol, g, gx->data() + s * in_per);
          }
        }
      });
}

// Adjoint of a strided "same" conv2d: x [N, Ci, H, W], weight [Ci, Co, kh, kw]
// -> [N, Co, H*stride, W*stride].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1)) {
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != weight.dim(1)) throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape()));
  const int n = x.dim(0), ci = x.dim(1), co = weight.dim(1);
  const int ho = x.dim(2) * stride, wo = x.dim(3) * stride;
  // Geometry of the forward conv that maps the output back onto x.
  const auto g = detail::ConvGeometry::make(co, ho, wo, weight.dim(2), weight.dim(3), {stride, -1, -1});
  if (g.out_h != x.dim(2) || g.out_w != x.dim(3)) throw ShapeError("conv_transpose2d: inconsistent geometry");
  const Eigen::Index in_per = static_cast<Eigen::Index>(ci) * g.col_cols();
  const Eigen::Index out_per = static_cast<Eigen::Index>(co) * ho * wo;
  const auto wm = weight.mat(ci, g.col_rows());
  Vec<T> out = Vec<T>::Zero(n * out_per);
  RowMat<T> col;
  for (int s = 0; s < n; ++s) {
    col.noalias() = wm.transpose() * x.mat(static_cast<Eigen::Index>(n) * ci, g.col_cols()).middleRows(s * ci, ci);
    detail::col2im(col, g, out.data() + s * out_per);
    if (has_bias) {
      MatMap<T>(out.data() + s * out_per, co, static_cast<Eigen::Index>(ho) * wo).colwise() += bias.value();
    }
  }
  std::vector<Tensor<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor<T>::from_op(
      "conv_transpose2d", {n, co, ho, wo}, std::move(out), parents,
      [g, n, ci, co, ho, wo, in_per, out_per, has_bias](Node<T>& node) {
        const ConstMatMap<T> wm(node.parents[1]->value.data(), ci, g.col_rows());
        auto* gx = grad_of(node, 0);
        auto* gw = grad_of(node, 1);
        auto* gb = has_bias ? grad_of(node, 2) : nullptr;
        RowMat<T> col;
        for (int s = 0; s < n; ++s) {
          detail::im2col(node.grad.data() + s * out_per, g, col);
          if (gx) MatMap<T>(gx->data() + s * in_per, ci, g.col_cols()).noalias() += wm * col;
          if (gw) {
            const ConstMatMap<T> xs(node.parents[0]->value.data() + s * in_per, ci, g.col_cols());
            MatMap<T>(gw->data(), ci, g.col_rows()).noalias() += xs * col.transpose();
          }
          if (gb) *gb += ConstMatMap<T>(node.grad.data() + s * out_per, co, static_cast<Eigen::Index>(ho) * wo).rowwise().sum();
        }
      });
}

// Bilinear resize of x [N, C, H, W] to [N, C, out_h, out_w] (half-pixel centres).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4 || out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  struct Tap {
    int i0, i1;
    T f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      const double src = std::clamp((o + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), static_cast<T>(src - i0)};
    }
    return t;
  };
  const auto th = taps(h, out_h), tw = taps(w, out_w);
  const Eigen::Index planes = static_cast<Eigen::Index>(n) * c;
  Vec<T> out(planes * out_h * out_w);
  for (Eigen::Index p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const Tap& a = th[static_cast<std::size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const Tap& b = tw[static_cast<std::size_t>(j)];
        dst[i * out_w + j] = (T(1) - a.f) * ((T(1) - b.f) * src[a.i0 * w + b.i0] + b.f * src[a.i0 * w + b.i1]) +
                             a.f * ((T(1) - b.f) * src[a.i1 * w + b.i0] + b.f * src[a.i1 * w + b.i1]);
      }
    }
  }
  return Tensor<T>::from_op("resize_bilinear", {n, c, out_h, out_w}, std::move(out), {x},
                            [th, tw, planes, h, w, out_h, out_w](Node<T>& node) {
                              auto* g = grad_of(node, 0);
                              if (!g) return;
                              for (Eigen::Index p = 0; p < planes; ++p) {
                                T* dx = g->data() + p * h * w;
                                const T* dy = node.grad.data() + p * out_h * out_w;
                                for (int i = 0; i < out_h; ++i) {
                                  const Tap& a = th[static_cast<std::size_t>(i)];
                                  for (int j = 0; j < out_w; ++j) {
                                    const Tap& b = tw[static_cast<std::size_t>(j)];
                                    const T v = dy[i * out_w + j];
                                    dx[a.i0 * w + b.i0] += (T(1) - a.f) * (T(1) - b.f) * v;
                                    dx[a.i0 * w + b.i1] += (T(1) - a.f) * b.f * v;
                                    dx[a.i1 * w + b.i0] += a.f * (T(1) - b.f) * v;
                                    dx[a.i1 * w + b.i1] += a.f * b.f * v;
                                  }
                                }
                              }
                            });
}

}  // namespace echopt::ad
