#pragma once

// Parameter registry, Adam optimizer and finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "realtalk/autodiff.hpp"
#include "realtalk/error.hpp"

namespace realtalk {

using ad::Matrix;
using ad::Var;

// Named tensors. Trainable entries carry gradient buffers; non-trainable
// entries are state buffers (e.g. batch-norm running statistics) that are
// checkpointed but never optimized. Enumeration follows insertion order.
template <class T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable = true;
  };

  Var<T> add(const std::string& name, Matrix<T> init, bool trainable = true) {
    require(!index_.count(name), ErrorCode::duplicate_name, name);
    index_[name] = entries_.size();
    entries_.push_back({name, ad::leaf<T>(std::move(init), trainable), trainable});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::invalid_argument, "unknown parameter '" + name + "'");
    return entries_[it->second].var;
  }

  Matrix<T>& value(const std::string& name) { return get(name).node()->value; }
  const Matrix<T>& value(const std::string& name) const { return get(name).node()->value; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t size() const { return entries_.size(); }

  std::size_t num_trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += static_cast<std::size_t>(e.var.size());
    return n;
  }

  std::uint64_t step() const { return step_; }
  void advance_step() { ++step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  void zero_grad() {
    for (auto& e : entries_) e.var.node()->grad.resize(0, 0);
  }

  // Deep copy with a different scalar type (e.g. double copy for gradient checks).
  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.var.value().template cast<U>(), e.trainable);
    out.set_step(step_);
    return out;
  }

  // Copies values (not gradients) from a store with identical names/shapes.
  template <class U>
  void copy_values_from(const ParameterStore<U>& other) {
    for (auto& e : entries_) {
      const auto& src = other.value(e.name);
      require(src.rows() == e.var.rows() && src.cols() == e.var.cols(), ErrorCode::shape_mismatch,
              "copy_values_from '" + e.name + "'");
      e.var.node()->value = src.template cast<T>();
    }
  }

  ParameterStore clone() const { return cast<T>(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    require(cfg_.eps > 0, ErrorCode::invalid_argument, "adam eps must be > 0");
  }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // One bias-corrected update of every trainable parameter, then clears gradients.
  void step(ParameterStore<T>& store) {
    for (const auto& e : store.entries()) {
      if (!e.trainable) continue;
      require(e.var.node()->has_grad(), ErrorCode::missing_gradient, "parameter '" + e.name + "'");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(cfg_.lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(cfg_.eps);
    for (auto& e : store.entries()) {
      if (!e.trainable) continue;
      auto& node = *e.var.node();
      auto& [m, v] = moments_[e.name];
      if (m.rows() != node.value.rows() || m.cols() != node.value.cols()) {
        m = Matrix<T>::Zero(node.value.rows(), node.value.cols());
        v = Matrix<T>::Zero(node.value.rows(), node.value.cols());
      }
      const T* g = node.grad.data();
      T* w = node.value.data();
      T* mp = m.data();
      T* vp = v.data();
      const ad::Index n = node.value.size();
      for (ad::Index i = 0; i < n; ++i) {
        mp[i] = b1 * mp[i] + (T(1) - b1) * g[i];
        vp[i] = b2 * vp[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= step_size * mp[i] / (std::sqrt(vp[i]) * inv_sqrt_c2 + eps);
      }
    }
    store.zero_grad();
    store.advance_step();
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<Matrix<T>, Matrix<T>>> moments_;
};

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
  std::size_t min_coordinates = 100;
  double step = 1e-4;          // scaled by max(1, |w|)
  double abs_floor = 1e-6;     // denominator floor for the relative error
  std::uint64_t seed = 7;
  bool skip_nonsmooth = true;  // drop coordinates whose two-step estimates disagree (kinks)
  // Restricts the check to parameters whose name passes; empty = all trainable.
  std::function<bool(const std::string&)> include;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_coordinate;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
};

namespace detail {

struct Coord {
  std::size_t entry;
  ad::Index index;
};

template <class T>
std::vector<Coord> pick_coordinates(const ParameterStore<T>& store, const GradCheckOptions& opt) {
  std::vector<std::size_t> trainable;
  std::size_t total = 0;
  for (std::size_t i = 0; i < store.entries().size(); ++i) {
    if (store.entries()[i].trainable && (!opt.include || opt.include(store.entries()[i].name))) {
      trainable.push_back(i);
      total += static_cast<std::size_t>(store.entries()[i].var.size());
    }
  }
  std::mt19937_64 rng(opt.seed);
  std::vector<Coord> out;
  if (total <= opt.min_coordinates) {
    for (auto i : trainable)
      for (ad::Index k = 0; k < store.entries()[i].var.size(); ++k) out.push_back({i, k});
    return out;
  }
  // Every tensor gets a share so small tensors (biases, gains) are always covered.
  const std::size_t per_tensor = std::max<std::size_t>(4, (opt.min_coordinates + trainable.size() - 1) / trainable.size());
  for (auto i : trainable) {
    const auto n = static_cast<std::size_t>(store.entries()[i].var.size());
    if (n <= per_tensor) {
      for (std::size_t k = 0; k < n; ++k) out.push_back({i, static_cast<ad::Index>(k)});
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t k = 0; k < per_tensor; ++k) out.push_back({i, static_cast<ad::Index>(pick(rng))});
    }
  }
  return out;
}

}  // namespace detail

// Compares analytic gradients of `analytic_loss` over `analytic_store` against
// central finite differences of `fd_loss` evaluated on `fd_store`. The two
// stores must hold the same parameters; passing a higher-precision copy as the
// finite-difference side checks single-precision gradients against a
// rounding-free numerical oracle.
template <class T, class U>
GradCheckReport grad_check(ParameterStore<T>& analytic_store, const std::function<Var<T>()>& analytic_loss,
                           ParameterStore<U>& fd_store, const std::function<Var<U>()>& fd_loss,
                           const GradCheckOptions& opt = {}) {
  {
    ad::NoGradGuard guard;
    const U a = fd_loss().item();
    const U b = fd_loss().item();
    require(a == b, ErrorCode::non_deterministic, "two evaluations of the forward pass differ");
  }
  analytic_store.zero_grad();
  Var<T> loss = analytic_loss();
  ad::backward(loss);

  GradCheckReport report;
  const auto coords = detail::pick_coordinates(analytic_store, opt);
  auto eval = [&]() {
    ad::NoGradGuard guard;
    return static_cast<double>(fd_loss().item());
  };
  for (const auto& c : coords) {
    const auto& entry = analytic_store.entries()[c.entry];
    const auto* node = entry.var.node();
    const double analytic = node->has_grad() ? static_cast<double>(node->grad.data()[c.index]) : 0.0;
    U& w = fd_store.value(entry.name).data()[c.index];
    const U w0 = w;
    const double h = opt.step * std::max(1.0, std::abs(static_cast<double>(w0)));
    auto central = [&](double step) {
      w = static_cast<U>(static_cast<double>(w0) + step);
      const double fp = eval();
      w = static_cast<U>(static_cast<double>(w0) - step);
      const double fm = eval();
      w = w0;
      return (fp - fm) / (2.0 * step);
    };
    const double numeric = central(h);
    auto rel = [&](double x, double y) {
      return std::abs(x - y) / std::max({std::abs(x), std::abs(y), opt.abs_floor});
    };
    double err = rel(analytic, numeric);
    if (opt.skip_nonsmooth && err > 1e-6) {
      const double numeric_half = central(0.5 * h);
      if (rel(numeric, numeric_half) > 1e-3) {
        ++report.skipped_nonsmooth;
        continue;
      }
      err = std::min(err, rel(analytic, numeric_half));
    }
    ++report.checked;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coordinate = entry.name + "[" + std::to_string(c.index) + "]";
    }
  }
  analytic_store.zero_grad();
  return report;
}

template <class T>
GradCheckReport grad_check(ParameterStore<T>& store, const std::function<Var<T>()>& loss,
                           const GradCheckOptions& opt = {}) {
  return grad_check<T, T>(store, loss, store, loss, opt);
}

// ---------------------------------------------------------------------------
// Initialization helpers

template <class T>
Matrix<T> glorot(ad::Index fan_in, ad::Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix<T> m(fan_in, fan_out);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <class T>
Matrix<T> he_normal(ad::Index fan_in, ad::Index fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Matrix<T> m(fan_in, fan_out);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

template <class T>
Matrix<T> uniform(ad::Index rows, ad::Index cols, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<T> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <class T>
Matrix<T> zeros(ad::Index rows, ad::Index cols) {
  return Matrix<T>::Zero(rows, cols);
}

template <class T>
Matrix<T> ones(ad::Index rows, ad::Index cols) {
  return Matrix<T>::Ones(rows, cols);
}

// A dense layer registered under `prefix.w` / `prefix.b`.
template <class T>
struct Dense {
  std::string prefix;

  static Dense create(ParameterStore<T>& store, const std::string& prefix, ad::Index in, ad::Index out,
                      std::mt19937_64& rng, bool zero_init = false) {
    store.add(prefix + ".w", zero_init ? zeros<T>(in, out) : glorot<T>(in, out, rng));
    store.add(prefix + ".b", zeros<T>(1, out));
    return Dense{prefix};
  }

  Var<T> operator()(const ParameterStore<T>& store, const Var<T>& x) const {
    return ad::linear<T>(x, store.get(prefix + ".w"), store.get(prefix + ".b"));
  }
};

// 1-D convolution over time with "same" zero padding; weights are
// (kernel*in) x out in im2col tap order.
template <class T>
struct Conv1d {
  std::string prefix;
  int kernel = 3;
  int dilation = 1;

  static Conv1d create(ParameterStore<T>& store, const std::string& prefix, ad::Index in, ad::Index out, int kernel,
                       int dilation, std::mt19937_64& rng, bool zero_init = false) {
    store.add(prefix + ".w", zero_init ? zeros<T>(kernel * in, out) : glorot<T>(kernel * in, out, rng));
    store.add(prefix + ".b", zeros<T>(1, out));
    return Conv1d{prefix, kernel, dilation};
  }

  Var<T> operator()(const ParameterStore<T>& store, const Var<T>& x) const {
    return ad::linear<T>(ad::im2col_1d<T>(x, kernel, dilation), store.get(prefix + ".w"), store.get(prefix + ".b"));
  }
};

}  // namespace realtalk
