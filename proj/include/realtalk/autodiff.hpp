#pragma once

// Matrix-level reverse-mode automatic differentiation.
//
// Every value is a dense row-major matrix. A Var is a handle to a graph node;
// operations build the graph eagerly and `backward` walks it in reverse
// topological order. Leaf nodes created by a ParameterStore persist across
// steps and accumulate gradients; everything else is freed with the graph.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "realtalk/error.hpp"

namespace realtalk::ad {

using Index = Eigen::Index;

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Matrix<T>& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix<T>::Zero(value.rows(), value.cols());
    }
    return grad;
  }
  bool has_grad() const { return grad.rows() == value.rows() && grad.cols() == value.cols(); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  T item() const { return node_->value(0, 0); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

// While alive, operations record no graph (inference / evaluation).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
Var<T> constant(Matrix<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  return Var<T>(std::move(node));
}

template <class T>
Var<T> scalar_constant(T v) {
  Matrix<T> m(1, 1);
  m(0, 0) = v;
  return constant<T>(std::move(m));
}

template <class T>
Var<T> leaf(Matrix<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var<T>(std::move(node));
}

// Builds an op node. The backward closure receives the node and must add its
// contribution into each parent that requires a gradient.
template <class T>
Var<T> make_op(Matrix<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.shared());
    node->backward_fn = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <class T>
void backward(const Var<T>& root) {
  require(root.rows() == 1 && root.cols() == 1, ErrorCode::shape_mismatch, "backward needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Release intermediate gradients; leaves keep theirs.
  for (Node<T>* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

template <class T>
inline void accumulate(Node<T>& parent, const Matrix<T>& g) {
  if (parent.requires_grad) parent.grad_buffer() += g;
}

#define RT_PARENT(i) (*self.parents[i])

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch, "add");
  return make_op<T>(a.value() + b.value(), {a, b}, [](Node<T>& self) {
    accumulate(RT_PARENT(0), self.grad);
    accumulate(RT_PARENT(1), self.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch, "sub");
  return make_op<T>(a.value() - b.value(), {a, b}, [](Node<T>& self) {
    accumulate(RT_PARENT(0), self.grad);
    accumulate<T>(RT_PARENT(1), -self.grad);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& pb = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer() += self.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.grad_buffer() += self.grad.cwiseProduct(pa.value);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_op<T>(a.value() * s, {a}, [s](Node<T>& self) { accumulate<T>(RT_PARENT(0), self.grad * s); });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Matrix<T> out = a.value().array() + s;
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) { accumulate(RT_PARENT(0), self.grad); });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale<T>(a, T(-1));
}

// a (m x n) + row (1 x n), broadcast over rows.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::shape_mismatch, "add_row");
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return make_op<T>(std::move(out), {a, row}, [](Node<T>& self) {
    accumulate(RT_PARENT(0), self.grad);
    if (RT_PARENT(1).requires_grad) RT_PARENT(1).grad_buffer() += self.grad.colwise().sum();
  });
}

// a (m x n) * row (1 x n), broadcast over rows.
template <class T>
Var<T> mul_row(const Var<T>& a, const Var<T>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::shape_mismatch, "mul_row");
  Matrix<T> out = a.value().array().rowwise() * row.value().row(0).array();
  return make_op<T>(std::move(out), {a, row}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& pr = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer().array() += self.grad.array().rowwise() * pr.value.row(0).array();
    if (pr.requires_grad) pr.grad_buffer() += self.grad.cwiseProduct(pa.value).colwise().sum();
  });
}

// a (m x n) * col (m x 1), broadcast over columns.
template <class T>
Var<T> mul_col(const Var<T>& a, const Var<T>& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), ErrorCode::shape_mismatch, "mul_col");
  Matrix<T> out = a.value().array().colwise() * col.value().col(0).array();
  return make_op<T>(std::move(out), {a, col}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& pc = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer().array() += self.grad.array().colwise() * pc.value.col(0).array();
    if (pc.requires_grad) pc.grad_buffer() += self.grad.cwiseProduct(pa.value).rowwise().sum();
  });
}

// Multiplies every entry by the single value of a 1x1 var.
template <class T>
Var<T> mul_scalar_var(const Var<T>& a, const Var<T>& s) {
  require(s.rows() == 1 && s.cols() == 1, ErrorCode::shape_mismatch, "mul_scalar_var");
  Matrix<T> out = a.value() * s.item();
  return make_op<T>(std::move(out), {a, s}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& ps = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer() += self.grad * ps.value(0, 0);
    if (ps.requires_grad) ps.grad_buffer()(0, 0) += self.grad.cwiseProduct(pa.value).sum();
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.rows(), ErrorCode::shape_mismatch, "matmul");
  Matrix<T> out = a.value() * b.value();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& pb = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += self.grad * pb.value.transpose();
    if (pb.requires_grad) pb.grad_buffer().noalias() += pa.value.transpose() * self.grad;
  });
}

// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.cols() == b.cols(), ErrorCode::shape_mismatch, "matmul_nt");
  Matrix<T> out = a.value() * b.value().transpose();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    auto& pb = RT_PARENT(1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += self.grad * pb.value;
    if (pb.requires_grad) pb.grad_buffer().noalias() += self.grad.transpose() * pa.value;
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> out = a.value().transpose();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer() += self.grad.transpose();
  });
}

// log|det W| for a square matrix; gradient W^{-T}.
template <class T>
Var<T> log_abs_det(const Var<T>& w) {
  require(w.rows() == w.cols(), ErrorCode::shape_mismatch, "log_abs_det needs a square matrix");
  Eigen::PartialPivLU<Matrix<T>> lu(w.value());
  const auto& lu_mat = lu.matrixLU();
  T acc = 0;
  for (Index i = 0; i < lu_mat.rows(); ++i) acc += std::log(std::abs(lu_mat(i, i)));
  Matrix<T> out(1, 1);
  out(0, 0) = acc;
  return make_op<T>(std::move(out), {w}, [](Node<T>& self) {
    auto& pw = RT_PARENT(0);
    if (pw.requires_grad) {
      Matrix<T> inv_t = pw.value.inverse().transpose();
      pw.grad_buffer() += inv_t * self.grad(0, 0);
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class T, class F, class D>
Var<T> unary(const Var<T>& a, F f, D df) {
  Matrix<T> out = a.value().unaryExpr(f);
  return make_op<T>(std::move(out), {a}, [df](Node<T>& self) {
    auto& pa = RT_PARENT(0);
    if (!pa.requires_grad) return;
    auto& g = pa.grad_buffer();
    for (Index i = 0; i < g.size(); ++i) {
      g.data()[i] += self.grad.data()[i] * df(pa.value.data()[i], self.value.data()[i]);
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

// Exact (erf-based) GeLU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return unary<T>(
      a, [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) { return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
      [](T x, T) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> rsqrt(const Var<T>& a) {
  return unary<T>(a, [](T x) { return T(1) / std::sqrt(x); }, [](T, T y) { return T(-0.5) * y * y * y; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Clamps values into [lo, hi]; gradient passes only strictly inside.
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary<T>(
      a, [=](T x) { return std::min(hi, std::max(lo, x)); }, [=](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer().array() += self.grad(0, 0);
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale<T>(sum<T>(a), T(1) / static_cast<T>(a.size()));
}

// Column-wise sum: (m x n) -> (1 x n).
template <class T>
Var<T> sum_rows(const Var<T>& a) {
  Matrix<T> out = a.value().colwise().sum();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer().rowwise() += self.grad.row(0);
  });
}

// Row-wise sum: (m x n) -> (m x 1).
template <class T>
Var<T> sum_cols(const Var<T>& a) {
  Matrix<T> out = a.value().rowwise().sum();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer().colwise() += self.grad.col(0);
  });
}

// ---------------------------------------------------------------------------
// Structural ops

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::shape_mismatch, "concat_cols of nothing");
  Index rows = parts[0].rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, ErrorCode::shape_mismatch, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_op<T>(std::move(out), parts, [offsets](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.requires_grad) p.grad_buffer() += self.grad.middleCols(offsets[i], p.value.cols());
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorCode::shape_mismatch, "concat_rows of nothing");
  Index cols = parts[0].cols();
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorCode::shape_mismatch, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_op<T>(std::move(out), parts, [offsets](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = *self.parents[i];
      if (p.requires_grad) p.grad_buffer() += self.grad.middleRows(offsets[i], p.value.rows());
    }
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::shape_mismatch, "slice_cols");
  Matrix<T> out = a.value().middleCols(start, count);
  return make_op<T>(std::move(out), {a}, [start, count](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer().middleCols(start, count) += self.grad;
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::shape_mismatch, "slice_rows");
  Matrix<T> out = a.value().middleRows(start, count);
  return make_op<T>(std::move(out), {a}, [start, count](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer().middleRows(start, count) += self.grad;
  });
}

// Row-major reshape (data order unchanged).
template <class T>
Var<T> reshape(const Var<T>& a, Index rows, Index cols) {
  require(rows * cols == a.size(), ErrorCode::shape_mismatch, "reshape");
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  const Index r0 = a.rows();
  const Index c0 = a.cols();
  return make_op<T>(std::move(out), {a}, [r0, c0](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) {
      RT_PARENT(0).grad_buffer() += Eigen::Map<const Matrix<T>>(self.grad.data(), r0, c0);
    }
  });
}

// Selects rows of `table` by index (embedding lookup).
template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& idx) {
  Matrix<T> out(static_cast<Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < table.rows(), ErrorCode::invalid_argument, "gather_rows index out of range");
    out.row(static_cast<Index>(i)) = table.value().row(idx[i]);
  }
  return make_op<T>(std::move(out), {table}, [idx](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

// Repeats a (1 x n) row m times.
template <class T>
Var<T> repeat_row(const Var<T>& row, Index m) {
  require(row.rows() == 1, ErrorCode::shape_mismatch, "repeat_row");
  Matrix<T> out = row.value().replicate(m, 1);
  return make_op<T>(std::move(out), {row}, [](Node<T>& self) {
    if (RT_PARENT(0).requires_grad) RT_PARENT(0).grad_buffer() += self.grad.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Normalization & attention helpers

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  Matrix<T> out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    T m = a.value().row(i).maxCoeff();
    out.row(i) = (a.value().row(i).array() - m).exp();
    // Vectorized exp returns denormals instead of 0 for masked (-1e30) logits.
    out.row(i) = (out.row(i).array() < std::numeric_limits<T>::min()).select(T(0), out.row(i));
    out.row(i) /= out.row(i).sum();
  }
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (Index i = 0; i < self.value.rows(); ++i) {
      T dot = self.grad.row(i).dot(self.value.row(i));
      g.row(i).array() += self.value.row(i).array() * (self.grad.row(i).array() - dot);
    }
  });
}

// Per-row normalization followed by a learned affine (gamma, beta are 1 x n).
template <class T>
Var<T> layer_norm(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Index m = a.rows();
  const Index n = a.cols();
  Matrix<T> xhat(m, n);
  Matrix<T> inv_std(m, 1);
  for (Index i = 0; i < m; ++i) {
    T mu = a.value().row(i).mean();
    T var = (a.value().row(i).array() - mu).square().mean();
    inv_std(i, 0) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (a.value().row(i).array() - mu) * inv_std(i, 0);
  }
  Var<T> normed = make_op<T>(xhat, {a}, [inv_std](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const T n = static_cast<T>(self.value.cols());
    for (Index i = 0; i < self.value.rows(); ++i) {
      auto gy = self.grad.row(i).array();
      auto y = self.value.row(i).array();
      T mean_g = gy.sum() / n;
      T mean_gy = (gy * y).sum() / n;
      g.row(i).array() += inv_std(i, 0) * (gy - mean_g - y * mean_gy);
    }
  });
  return add_row<T>(mul_row<T>(normed, gamma), beta);
}

enum class BatchNormMode {
  train,         // batch statistics, running buffers updated
  batch_frozen,  // batch statistics, running buffers untouched
  eval,          // running statistics
};

// Batch normalization over rows (the batch axis); gamma/beta are 1 x n.
// Running buffers use the unbiased batch variance.
template <class T>
Var<T> batch_norm(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, Matrix<T>& running_mean,
                  Matrix<T>& running_var, BatchNormMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  const Index m = a.rows();
  if (mode == BatchNormMode::eval) {
    Matrix<T> inv_std = (running_var.array() + eps).rsqrt();
    Matrix<T> shift = -running_mean.cwiseProduct(inv_std);
    Var<T> normed = make_op<T>(
        (a.value().array().rowwise() * inv_std.row(0).array()).rowwise() + shift.row(0).array(), {a},
        [inv_std](Node<T>& self) {
          if (RT_PARENT(0).requires_grad)
            RT_PARENT(0).grad_buffer().array() += self.grad.array().rowwise() * inv_std.row(0).array();
        });
    return add_row<T>(mul_row<T>(normed, gamma), beta);
  }
  require(m >= 1, ErrorCode::shape_mismatch, "batch_norm on empty batch");
  Matrix<T> mu = a.value().colwise().mean();
  Matrix<T> centered = a.value().rowwise() - mu.row(0);
  Matrix<T> var = centered.array().square().colwise().mean();
  Matrix<T> inv_std = (var.array() + eps).rsqrt();
  Matrix<T> xhat = centered.array().rowwise() * inv_std.row(0).array();
  if (mode == BatchNormMode::train) {
    const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
    running_mean = (T(1) - momentum) * running_mean + momentum * mu;
    running_var = (T(1) - momentum) * running_var + momentum * unbias * var;
  }
  Var<T> normed = make_op<T>(std::move(xhat), {a}, [inv_std](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    const T mrows = static_cast<T>(self.value.rows());
    Matrix<T> mean_g = self.grad.colwise().sum() / mrows;
    Matrix<T> mean_gy = self.grad.cwiseProduct(self.value).colwise().sum() / mrows;
    Matrix<T> term = (self.grad.rowwise() - mean_g.row(0)) -
                     Matrix<T>(self.value.array().rowwise() * mean_gy.row(0).array());
    p.grad_buffer().array() += term.array().rowwise() * inv_std.row(0).array();
  });
  return add_row<T>(mul_row<T>(normed, gamma), beta);
}

// Inverted dropout. `rng` drives the mask; p in [0,1).
template <class T, class Rng>
Var<T> dropout(const Var<T>& a, T p, Rng& rng) {
  if (p <= T(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Matrix<T> mask(a.rows(), a.cols());
  const T s = T(1) / (T(1) - p);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : T(0);
  return mul<T>(a, constant<T>(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Convolution support

// Unfolds a (length x channels) sequence into (length x k*channels) rows with
// zero "same" padding; tap j of row t reads position t + (j - (k-1)/2) * dilation.
template <class T>
Var<T> im2col_1d(const Var<T>& x, int kernel, int dilation) {
  require(kernel >= 1 && kernel % 2 == 1 && dilation >= 1, ErrorCode::invalid_argument, "im2col_1d kernel");
  const Index len = x.rows();
  const Index ch = x.cols();
  const int half = (kernel - 1) / 2;
  Matrix<T> out = Matrix<T>::Zero(len, kernel * ch);
  for (Index t = 0; t < len; ++t) {
    for (int j = 0; j < kernel; ++j) {
      Index src = t + static_cast<Index>(j - half) * dilation;
      if (src >= 0 && src < len) out.block(t, j * ch, 1, ch) = x.value().row(src);
    }
  }
  return make_op<T>(std::move(out), {x}, [kernel, dilation, half, len, ch](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (Index t = 0; t < len; ++t) {
      for (int j = 0; j < kernel; ++j) {
        Index src = t + static_cast<Index>(j - half) * dilation;
        if (src >= 0 && src < len) g.row(src) += self.grad.block(t, j * ch, 1, ch);
      }
    }
  });
}

// Unfolds an image stored as (height*width x channels) into patches of
// (out_h*out_w x k*k*channels) with zero padding `pad` and stride.
template <class T>
Var<T> im2col_2d(const Var<T>& x, int height, int width, int kernel, int stride, int pad, int* out_h_ptr = nullptr,
                 int* out_w_ptr = nullptr) {
  require(x.rows() == static_cast<Index>(height) * width, ErrorCode::shape_mismatch, "im2col_2d image size");
  const Index ch = x.cols();
  const int out_h = (height + 2 * pad - kernel) / stride + 1;
  const int out_w = (width + 2 * pad - kernel) / stride + 1;
  require(out_h >= 1 && out_w >= 1, ErrorCode::shape_mismatch, "im2col_2d output empty");
  if (out_h_ptr) *out_h_ptr = out_h;
  if (out_w_ptr) *out_w_ptr = out_w;
  Matrix<T> out = Matrix<T>::Zero(static_cast<Index>(out_h) * out_w, kernel * kernel * ch);
  auto src_index = [=](int oy, int ox, int ky, int kx) -> Index {
    int y = oy * stride + ky - pad;
    int xx = ox * stride + kx - pad;
    if (y < 0 || y >= height || xx < 0 || xx >= width) return -1;
    return static_cast<Index>(y) * width + xx;
  };
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          Index s = src_index(oy, ox, ky, kx);
          if (s >= 0)
            out.block(static_cast<Index>(oy) * out_w + ox, (ky * kernel + kx) * ch, 1, ch) = x.value().row(s);
        }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& p = RT_PARENT(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox)
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            Index s = src_index(oy, ox, ky, kx);
            if (s >= 0) g.row(s) += self.grad.block(static_cast<Index>(oy) * out_w + ox, (ky * kernel + kx) * ch, 1, ch);
          }
  });
}

#undef RT_PARENT

// ---------------------------------------------------------------------------
// Convenience

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}

// Affine map x W + b (b broadcast over rows).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_row<T>(matmul<T>(x, w), b);
}

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

template <class T>
void check_finite(const Var<T>& v, const std::string& stage) {
  require(v.value().allFinite(), ErrorCode::non_finite, "at stage '" + stage + "'");
}

template <class To, class From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  return m.template cast<To>();
}

}  // namespace realtalk::ad
