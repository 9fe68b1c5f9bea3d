#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Every op is define-by-run: when a Tape is active on the calling thread and
// at least one input requires a gradient, the op appends a backward closure
// to that tape. Without an active tape ops are plain value computations,
// which is how inference and finite-difference probing run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "esie/errors.hpp"

namespace esie {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Shared handle to a tensor node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_size(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng,
                      bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> d(shape_size(shape));
    for (auto& x : d) x = dist(rng);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  /// Matrix view: rank-1 tensors are one row, scalars are 1x1.
  std::size_t rows() const {
    const auto& s = node_->shape;
    return s.size() == 2 ? s[0] : 1;
  }
  std::size_t cols() const {
    const auto& s = node_->shape;
    return s.empty() ? 1 : s.back();
  }

  std::span<const double> data() const { return node_->data; }
  /// Parameter updates between tapes and finite-difference probes only.
  std::span<double> mutable_data() const { return node_->data; }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.clear(); }

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const { return from(shape(), node_->data, false); }
  Tensor clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

  TensorNode& node() const { return *node_; }
  const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded closures newest first.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!std::isfinite(loss.item())) throw NumericError("backward() from non-finite loss");
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<Backward> entries_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

inline Tape* active_tape() { return detail::active_tape; }

/// Makes `tape` the recording tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording, e.g. for evaluation inside a training loop.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline Tape* tape_for(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape;
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

inline Tape* tape_for(const std::vector<Tensor>& inputs) {
  Tape* tape = active_tape;
  if (!tape) return nullptr;
  for (const auto& t : inputs)
    if (t.requires_grad()) return tape;
  return nullptr;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
  }
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// C[m×n] += A[m×k]·B[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m×n] += A[m×k]·B[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[k×n] += A[m×k]ᵀ·B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}


}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor c = Tensor::matrix(m, n, std::move(out));
  if (Tape* tape = detail::tape_for({&a, &b})) {
    c.node().requires_grad = true;
    tape->record([an = a.node_ptr(), bn = b.node_ptr(), cn = c.node_ptr(), m, k, n] {
      if (cn->grad.empty()) return;
      if (an->requires_grad)
        detail::gemm_nt(cn->grad.data(), bn->data.data(), an->grad_buffer().data(), m, n, k);
      if (bn->requires_grad)
        detail::gemm_tn(an->data.data(), cn->grad.data(), bn->grad_buffer().data(), m, k, n);
    });
  }
  return c;
}

/// x[m×k]·wᵀ + b, with w stored as [n×k] and b (optional) as [n].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  detail::require_matrix(x, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
  if (w.rank() != 2 || w.cols() != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (b.defined() && b.size() != n) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " for weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (b.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  }
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), m, k, n);
  Tensor y = Tensor::matrix(m, n, std::move(out));
  if (Tape* tape = detail::tape_for({&x, &w, &b})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), wn = w.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr(), m,
                  k, n] {
      if (yn->grad.empty()) return;
      const double* dy = yn->grad.data();
      if (xn->requires_grad) detail::gemm_nn(dy, wn->data.data(), xn->grad_buffer().data(), m, n, k);
      if (wn->requires_grad) detail::gemm_tn(dy, xn->data.data(), wn->grad_buffer().data(), m, n, k);
      if (bn && bn->requires_grad) {
        auto& db = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
      }
    });
  }
  return y;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto d = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = d[i * n + j];
  Tensor t = Tensor::matrix(n, m, std::move(out));
  if (Tape* tape = detail::tape_for({&a})) {
    t.node().requires_grad = true;
    tape->record([an = a.node_ptr(), tn = t.node_ptr(), m, n] {
      if (tn->grad.empty()) return;
      auto& da = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += tn->grad[j * m + i];
    });
  }
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&a, &b})) {
    c.node().requires_grad = true;
    tape->record([an = a.node_ptr(), bn = b.node_ptr(), cn = c.node_ptr()] {
      if (cn->grad.empty()) return;
      for (auto* n : {an.get(), bn.get()}) {
        if (!n->requires_grad) continue;
        auto& g = n->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i];
      }
    });
  }
  return c;
}

/// x[m×n] + bias[n] on every row.
inline Tensor add_row(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&x, &bias})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), bn = bias.node_ptr(), yn = y.node_ptr(), m, n] {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += yn->grad[i * n + j];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&a, &b})) {
    c.node().requires_grad = true;
    tape->record([an = a.node_ptr(), bn = b.node_ptr(), cn = c.node_ptr()] {
      if (cn->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * an->data[i];
      }
    });
  }
  return c;
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  Tensor c = Tensor::from(a.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&a})) {
    c.node().requires_grad = true;
    tape->record([an = a.node_ptr(), cn = c.node_ptr(), factor] {
      if (cn->grad.empty()) return;
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * factor;
    });
  }
  return c;
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (Tape* tape = tape_for({&x})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), yn = y.node_ptr(), df] {
      if (yn->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * df(xn->data[i], yn->data[i]);
    });
  }
  return y;
}

}  // namespace detail

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

enum class Activation { tanh, gelu };

inline Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::gelu ? gelu(x) : tanh(x);
}

/// Inverted dropout. Identity when !train or p == 0; draws from `rng` otherwise.
inline Tensor dropout(const Tensor& x, double p, bool train, std::mt19937_64* rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  if (!rng) throw ConfigError("dropout in training mode needs a random generator");
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> m(x.size());
  for (auto& v : m) v = keep(*rng) ? s : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(m)));
}

/// Row-wise layer normalization with affine gain/bias of width cols.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12) {
  detail::require_matrix(x, "layernorm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layernorm: input " + shape_str(x.shape()) + " with gain " +
                         shape_str(gamma.shape()) + " and bias " + shape_str(beta.shape()));
  }
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xd[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xd[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xd[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&x, &gamma, &beta})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr(),
                  yn = y.node_ptr(), xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
      if (yn->grad.empty()) return;
      const auto& dy = yn->grad;
      if (gn->requires_grad) {
        auto& dg = gn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dg[j] += dy[i * n + j] * xhat[i * n + j];
      }
      if (bn->requires_grad) {
        auto& db = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
      }
      if (xn->requires_grad) {
        auto& dx = xn->grad_buffer();
        const double nn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dy[i * n + j] * gn->data[j];
            sum_d += dxh;
            sum_dx += dxh * xhat[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dy[i * n + j] * gn->data[j];
            dx[i * n + j] += inv_std[i] / nn * (nn * dxh - sum_d - xhat[i * n + j] * sum_dx);
          }
        }
      }
    });
  }
  return y;
}

/// Gathers rows of `table` [V×d]; the result is [ids.size()×d].
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                      std::to_string(i) + " outside table of " + std::to_string(vocab) + " rows");
    }
    const auto row = table.data().subspan(static_cast<std::size_t>(ids[i]) * d, d);
    std::copy(row.begin(), row.end(), out.begin() + i * d);
  }
  Tensor y = Tensor::matrix(ids.size(), d, std::move(out));
  if (Tape* tape = detail::tape_for({&table})) {
    y.node().requires_grad = true;
    tape->record([tn = table.node_ptr(), yn = y.node_ptr(), ids = std::vector<int>(ids.begin(), ids.end()), d] {
      if (yn->grad.empty()) return;
      auto& g = tn->grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += yn->grad[i * d + j];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization and loss

/// Additive value placed on masked-out logits before normalization.
inline constexpr double kMaskedLogit = -1e30;

/// Softmax over `axis` (0 or 1, -1 meaning the last) of a matrix.
///
/// `keep`, when non-empty, masks positions along the normalized axis: entry
/// j == 0 adds kMaskedLogit to position j of every slice. A slice whose every
/// position is masked has no distribution and raises NumericError.
inline Tensor softmax(const Tensor& x, int axis = -1, const Mask& keep = {}) {
  detail::require_matrix(x, "softmax");
  const std::size_t m = x.rows(), n = x.cols();
  const bool along_rows = (axis == -1 || axis == static_cast<int>(x.rank()) - 1 || x.rank() < 2);
  if (!along_rows && axis != 0) throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range");
  const std::size_t len = along_rows ? n : m;
  const std::size_t count = along_rows ? m : n;
  if (len == 0) throw DimensionError("softmax over an empty axis");
  if (!keep.empty()) {
    if (keep.size() != len) {
      throw DimensionError("softmax: mask of length " + std::to_string(keep.size()) +
                           " for axis of length " + std::to_string(len));
    }
    if (std::none_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k != 0; })) {
      throw NumericError("softmax: every position is masked, distribution is degenerate");
    }
  }
  auto index = [&](std::size_t slice, std::size_t j) { return along_rows ? slice * n + j : j * n + slice; };
  const auto xd = x.data();
  std::vector<double> out(m * n);
  std::vector<double> z(len);
  for (std::size_t s = 0; s < count; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) {
      z[j] = xd[index(s, j)] + ((keep.empty() || keep[j]) ? 0.0 : kMaskedLogit);
      mx = std::max(mx, z[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      z[j] = std::exp(z[j] - mx);
      total += z[j];
    }
    for (std::size_t j = 0; j < len; ++j) out[index(s, j)] = z[j] / total;
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (Tape* tape = detail::tape_for({&x})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), yn = y.node_ptr(), count, len, along_rows, n] {
      if (yn->grad.empty()) return;
      auto idx = [&](std::size_t slice, std::size_t j) { return along_rows ? slice * n + j : j * n + slice; };
      auto& dx = xn->grad_buffer();
      for (std::size_t s = 0; s < count; ++s) {
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += yn->grad[idx(s, j)] * yn->data[idx(s, j)];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = idx(s, j);
          dx[k] += yn->data[k] * (yn->grad[k] - dot);
        }
      }
    });
  }
  return y;
}

/// Targets below zero are skipped (ignore-index); they contribute no loss.
inline constexpr int kIgnoreIndex = -100;

/// Mean softmax cross-entropy over rows of logits [n×C] whose target is >= 0.
/// Returns a scalar; zero when every row is ignored.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  }
  std::vector<double> probs(m * c, 0.0);
  double loss = 0.0;
  std::size_t counted = 0;
  const auto ld = logits.data();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= c) {
      throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                      std::to_string(c) + " classes (row " + std::to_string(i) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, ld[i * c + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(ld[i * c + j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(ld[i * c + j] - lse);
    loss += lse - ld[i * c + static_cast<std::size_t>(targets[i])];
    ++counted;
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  Tensor y = Tensor::scalar(counted ? loss / denom : 0.0);
  if (Tape* tape = detail::tape_for({&logits})) {
    y.node().requires_grad = true;
    tape->record([ln = logits.node_ptr(), yn = y.node_ptr(), probs = std::move(probs),
                  t = std::vector<int>(targets.begin(), targets.end()), m, c, denom] {
      if (yn->grad.empty()) return;
      const double g = yn->grad[0] / denom;
      auto& dl = ln->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        if (t[i] < 0) continue;
        for (std::size_t j = 0; j < c; ++j) dl[i * c + j] += g * probs[i * c + j];
        dl[i * c + static_cast<std::size_t>(t[i])] -= g;
      }
    });
  }
  return y;
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (Tape* tape = detail::tape_for({&x})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), yn = y.node_ptr()] {
      if (yn->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (auto& v : g) v += yn->grad[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Slicing and assembly

/// Rows [begin, end) of a matrix.
inline Tensor rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "rows");
  const std::size_t n = x.cols();
  if (begin > end || end > x.rows()) {
    throw DimensionError("rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  Tensor y = Tensor::matrix(end - begin, n, std::move(out));
  if (Tape* tape = detail::tape_for({&x})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), yn = y.node_ptr(), off = begin * n] {
      if (yn->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) g[off + i] += yn->grad[i];
    });
  }
  return y;
}

inline Tensor row(const Tensor& x, std::size_t i) { return rows(x, i, i + 1); }

/// Columns [begin, end) of a matrix.
inline Tensor cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "cols");
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  if (begin > end || end > n) {
    throw DimensionError("cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().begin() + i * n + begin, w, out.begin() + i * w);
  Tensor y = Tensor::matrix(m, w, std::move(out));
  if (Tape* tape = detail::tape_for({&x})) {
    y.node().requires_grad = true;
    tape->record([xn = x.node_ptr(), yn = y.node_ptr(), m, n, w, begin] {
      if (yn->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += yn->grad[i * w + j];
    });
  }
  return y;
}

/// Stacks matrices with equal column counts vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor y = Tensor::matrix(m, n, std::move(out));
  if (Tape* tape = detail::tape_for(parts)) {
    y.node().requires_grad = true;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    tape->record([nodes = std::move(nodes), yn = y.node_ptr()] {
      if (yn->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        if (pn->requires_grad) {
          auto& g = pn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[off + i];
        }
        off += pn->data.size();
      }
    });
  }
  return y;
}

/// Places matrices with equal row counts side by side.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: " + shape_str(parts.front().shape()) + " vs " + shape_str(p.shape()));
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().begin() + i * w, w, out.begin() + i * n + off);
    off += w;
  }
  Tensor y = Tensor::matrix(m, n, std::move(out));
  if (Tape* tape = detail::tape_for(parts)) {
    y.node().requires_grad = true;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    tape->record([nodes = std::move(nodes), yn = y.node_ptr(), m, n] {
      if (yn->grad.empty()) return;
      std::size_t c0 = 0;
      for (const auto& pn : nodes) {
        const std::size_t w = pn->shape.empty() ? 1 : pn->shape.back();
        if (pn->requires_grad) {
          auto& g = pn->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += yn->grad[i * n + c0 + j];
        }
        c0 += w;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Named parameter sets and finite-difference checking

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

inline std::size_t count_elements(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.tensor.zero_grad();
}

struct GradCheckOptions {
  double eps = 1e-4;
  /// Coordinates probed per parameter; 0 probes every coordinate. When
  /// sampling, the coordinate with the largest analytic gradient is always
  /// among those probed.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares tape gradients of a scalar function against central differences.
/// `loss_fn` must be deterministic and build its graph from `params`.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, const ParamList& params,
                                  const GradCheckOptions& opts = {}) {
  zero_grads(params);
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
    tape.backward(loss);
  }
  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  NoGradScope no_grad;
  for (const auto& p : params) {
    const std::size_t n = p.tensor.size();
    std::vector<double> analytic(n, 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && n > opts.max_coords_per_param) {
      const auto worst = static_cast<std::size_t>(std::distance(
          analytic.begin(), std::max_element(analytic.begin(), analytic.end(),
                                             [](double a, double b) { return std::abs(a) < std::abs(b); })));
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      if (std::find(coords.begin(), coords.end(), worst) == coords.end()) coords.back() = worst;
    }

    GradCheckEntry entry{p.name};
    auto values = p.tensor.mutable_data();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + opts.eps;
      const double up = loss_fn().item();
      values[idx] = saved - opts.eps;
      const double down = loss_fn().item();
      values[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss while perturbing " + p.name + "[" +
                           std::to_string(idx) + "]");
      }
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = relative_error(analytic[idx], numeric);
      ++entry.checked;
      if (entry.checked == 1 || err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = idx;
        entry.analytic_at_worst = analytic[idx];
        entry.numeric_at_worst = numeric;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  zero_grads(params);
  return report;
}

}  // namespace esie
