#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vaps/error.hpp"

/// Dense 2-D reverse-mode differentiable arrays. Vectors are 1 x n rows and
/// scalars are 1 x 1. Every forward op records its parents and a backward
/// closure; `backward` walks the recorded graph once in reverse topological
/// order. Leaf gradients accumulate until `zero_grad`.
namespace vaps::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(Shape s) { return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]"; }

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) { return make(shape, std::move(values), false); }
  static Tensor parameter(Shape shape, std::vector<double> values) { return make(shape, std::move(values), true); }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(shape, std::vector<double>(shape.size(), 0.0), requires_grad);
  }
  static Tensor scalar(double v) { return constant({1, 1}, {v}); }
  static Tensor row(std::vector<double> v) {
    Shape s{1, v.size()};
    return constant(s, std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  Shape shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Mutable access to a leaf's values (optimizer updates, checkpoint load).
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return node_->requires_grad && node_->leaf && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Creates a non-leaf result that tracks `parents` when any of them needs
  /// gradients; otherwise the result is a plain constant.
  static Tensor derived(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn) {
    Tensor t = make(shape, std::move(values), false);
    bool track = detail::grad_mode() && std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    if (track) {
      t.node_->requires_grad = true;
      t.node_->leaf = false;
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

 private:
  static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                       to_string(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = shape;
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) t.node_->grad.assign(shape.size(), 0.0);
    return t;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

/// Gradient buffer of parent `i`, or nullptr when that parent is untracked.
inline double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  if (p.grad.empty()) p.grad.assign(p.value.size(), 0.0);
  return p.grad.data();
}

inline const double* pval(Node& self, std::size_t i) { return self.parents[i]->value.data(); }

}  // namespace detail

/// a [m x k] * b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* br = B + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return Tensor::derived({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* G = self.grad.data();
    const double* A = detail::pval(self, 0);
    const double* B = detail::pval(self, 1);
    if (double* gA = detail::pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          gA[i * k + p] += s;
        }
    }
    if (double* gB = detail::pgrad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

/// a [m x k] * b^T where b is [n x k].
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  return Tensor::derived({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* G = self.grad.data();
    const double* A = detail::pval(self, 0);
    const double* B = detail::pval(self, 1);
    if (double* gA = detail::pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gA[i * k + p] += g * B[j * k + p];
        }
    }
    if (double* gB = detail::pgrad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gB[j * k + p] += g * A[i * k + p];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return Tensor::derived({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::derived(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = detail::pgrad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::derived(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::derived(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double* A = detail::pval(self, 0);
    const double* B = detail::pval(self, 1);
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B[i];
    if (double* g = detail::pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A[i];
  });
}

/// Adds the 1 x n row `b` to every row of `a`.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_row: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.data()[j];
  return Tensor::derived(a.shape(), std::move(out), {a, b}, [m, n](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = detail::pgrad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return Tensor::derived(a.shape(), std::move(out), {a}, [s](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return Tensor::derived(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

/// Row-wise softmax over the last dimension.
inline Tensor softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return Tensor::derived(a.shape(), std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.value.data() + i * n;
        const double* dy = self.grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

/// Row-wise log-softmax, computed stably.
inline Tensor log_softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
  }
  return Tensor::derived(a.shape(), std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.value.data() + i * n;
        const double* dy = self.grad.data() + i * n;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += dy[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy[j] - std::exp(y[j]) * s;
      }
    }
  });
}

/// Rows `indices` of `table`, in order; repeated indices are allowed.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  const std::size_t n = table.cols();
  std::vector<double> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                       to_string(table.shape()));
    }
    std::copy_n(table.data().data() + indices[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::derived({indices.size(), n}, std::move(out), {table}, [idx = std::move(idx), n](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
  });
}

inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  return gather_rows(table, indices);
}

inline Tensor row_of(const Tensor& a, std::size_t r) {
  const std::size_t idx[] = {r};
  return gather_rows(a, idx);
}

/// Mean over rows: [m x n] -> [1 x n].
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw ShapeError("mean_rows of an empty tensor");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return Tensor::derived({1, n}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] / static_cast<double>(m);
  });
}

inline Tensor mean_pool(const Tensor& rows) { return mean_rows(rows); }

/// Mean of consecutive row ranges [offsets[i], offsets[i+1]) of `a`. An empty
/// range yields a zero row.
inline Tensor segment_mean(const Tensor& a, std::span<const std::size_t> offsets) {
  if (offsets.empty() || offsets.back() != a.rows()) throw ShapeError("segment_mean: offsets do not cover " + to_string(a.shape()));
  const std::size_t segs = offsets.size() - 1, n = a.cols();
  std::vector<double> out(segs * n, 0.0);
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    if (len == 0) continue;
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < n; ++j) out[s * n + j] += a.data()[r * n + j];
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= static_cast<double>(len);
  }
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  return Tensor::derived({segs, n}, std::move(out), {a}, [off = std::move(off), n](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t s = 0; s + 1 < off.size(); ++s) {
        const std::size_t len = off[s + 1] - off[s];
        for (std::size_t r = off[s]; r < off[s + 1]; ++r)
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[s * n + j] / static_cast<double>(len);
      }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::derived({1, 1}, {s}, {a}, [](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

inline Tensor l2_norm_sq(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return Tensor::derived({1, 1}, {s}, {a}, [](Node& self) {
    const double* A = detail::pval(self, 0);
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += 2.0 * A[i] * self.grad[0];
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return Tensor::derived({1, 1}, {s}, {a, b}, [](Node& self) {
    const double* A = detail::pval(self, 0);
    const double* B = detail::pval(self, 1);
    const double g0 = self.grad[0];
    const std::size_t n = self.parents[0]->value.size();
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += g0 * B[i];
    if (double* g = detail::pgrad(self, 1))
      for (std::size_t i = 0; i < n; ++i) g[i] += g0 * A[i];
  });
}

/// Stacks tensors with equal column counts vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw ShapeError("concat_rows: shape mismatch " + to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor::derived({m, n}, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = self.parents[p]->value.size();
      if (double* g = detail::pgrad(self, p))
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      off += len;
    }
  });
}

/// Elements of `a` at row-major flat positions `flat`, laid out as `shape`.
/// Repeated positions are allowed; their gradients accumulate.
inline Tensor pick(const Tensor& a, std::span<const std::size_t> flat, Shape shape) {
  if (flat.size() != shape.size()) throw ShapeError("pick: index count does not match " + to_string(shape));
  std::vector<double> out(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= a.size()) throw ShapeError("pick: position out of range for " + to_string(a.shape()));
    out[i] = a.data()[flat[i]];
  }
  std::vector<std::size_t> idx(flat.begin(), flat.end());
  return Tensor::derived(shape, std::move(out), {a}, [idx = std::move(idx)](Node& self) {
    if (double* g = detail::pgrad(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

/// out[i, j] = q[q_rows[i]] . k[k_rows[i * width + j]]: selected dot products
/// without materializing the full q k^T matrix.
inline Tensor gathered_dots(const Tensor& q, const Tensor& k, std::span<const std::size_t> q_rows,
                            std::span<const std::size_t> k_rows, std::size_t width) {
  if (q.cols() != k.cols()) throw ShapeError("gathered_dots: column mismatch");
  if (k_rows.size() != q_rows.size() * width) throw ShapeError("gathered_dots: index count mismatch");
  const std::size_t m = q_rows.size(), d = q.cols();
  for (auto r : q_rows)
    if (r >= q.rows()) throw ShapeError("gathered_dots: query row out of range");
  for (auto r : k_rows)
    if (r >= k.rows()) throw ShapeError("gathered_dots: key row out of range");
  std::vector<double> out(m * width);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const double* a = Q + q_rows[i] * d;
      const double* b = K + k_rows[i * width + j] * d;
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) s += a[p] * b[p];
      out[i * width + j] = s;
    }
  std::vector<std::size_t> qi(q_rows.begin(), q_rows.end()), ki(k_rows.begin(), k_rows.end());
  return Tensor::derived({m, width}, std::move(out), {q, k},
                         [qi = std::move(qi), ki = std::move(ki), m, width, d](Node& self) {
                           const double* G = self.grad.data();
                           const double* Q = detail::pval(self, 0);
                           const double* K = detail::pval(self, 1);
                           double* gQ = detail::pgrad(self, 0);
                           double* gK = detail::pgrad(self, 1);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < width; ++j) {
                               const double g = G[i * width + j];
                               if (g == 0.0) continue;
                               const std::size_t a = qi[i] * d, b = ki[i * width + j] * d;
                               if (gQ)
                                 for (std::size_t p = 0; p < d; ++p) gQ[a + p] += g * K[b + p];
                               if (gK)
                                 for (std::size_t p = 0; p < d; ++p) gK[b + p] += g * Q[a + p];
                             }
                         });
}

/// Scalar element (r, c) of `a`.
inline Tensor select(const Tensor& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) throw ShapeError("select: index out of range for " + to_string(a.shape()));
  const std::size_t pos = r * a.cols() + c;
  return Tensor::derived({1, 1}, {a.data()[pos]}, {a}, [pos](Node& self) {
    if (double* g = detail::pgrad(self, 0)) g[pos] += self.grad[0];
  });
}

/// Reverse-mode sweep from a scalar. A graph may be differentiated once.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + (loss.defined() ? to_string(loss.shape()) : "null"));
  }
  Node* root = loss.node();
  if (root->backward_done) throw ShapeError("backward called twice on the same graph");
  root->backward_done = true;
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order of tracked nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !p->leaf && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  if (root->leaf) {
    root->grad[0] += 1.0;
    return;
  }
  for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->backward_fn(*n);
  }
  // Intermediate gradients are not needed past this point.
  for (Node* n : order) std::vector<double>().swap(n->grad);
}

/// Adam with bias correction; moments are zero-initialized.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

inline void adam_step(std::span<Tensor> params, AdamState& st) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.size(), 0.0);
      st.v.emplace_back(p.size(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed between steps");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != w.size()) throw ShapeError("adam_step: parameter shape changed between steps");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= st.lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

/// Named parameter checkpoint: "VAPSCKPT" magic, u32 version, u64 count,
/// then per tensor: u64 name length, name bytes, u64 rows, u64 cols, doubles.
inline constexpr char kCheckpointMagic[8] = {'V', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {
template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("checkpoint truncated");
  return v;
}
}  // namespace detail

inline void save_checkpoint(std::ostream& out, const NamedTensors& params) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put(out, static_cast<std::uint64_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(out, static_cast<std::uint64_t>(t.rows()));
    detail::put(out, static_cast<std::uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

/// Loads values into existing tensors by name; names and shapes must match.
inline void load_checkpoint(std::istream& in, NamedTensors& params) {
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw DataError("not a checkpoint file");
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  auto count = detail::get<std::uint64_t>(in);
  if (count != params.size()) throw DataError("checkpoint tensor count mismatch");
  for (auto& [name, t] : params) {
    auto len = detail::get<std::uint64_t>(in);
    std::string stored(len, '\0');
    in.read(stored.data(), static_cast<std::streamsize>(len));
    if (stored != name) throw DataError("checkpoint tensor '" + stored + "' where '" + name + "' expected");
    Shape s{detail::get<std::uint64_t>(in), detail::get<std::uint64_t>(in)};
    if (s != t.shape()) throw DataError("checkpoint shape mismatch for '" + name + "'");
    auto w = t.mutable_data();
    in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(double)));
    if (!in) throw DataError("checkpoint truncated");
  }
}

}  // namespace vaps::ad
