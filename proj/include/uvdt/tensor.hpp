// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode automatic differentiation. Every op records
// its inputs and a backward rule on the produced node; backward() walks the
// recorded graph once in reverse topological order and accumulates gradients
// additively. Dense kernels (GEMM) are delegated to Eigen.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace uvdt {

#ifdef UVDT_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

// Additive mask sentinel standing in for -inf; large enough that masked
// softmax entries underflow to exactly 0 while staying finite.
inline constexpr real kMaskedOut = static_cast<real>(-1e9);

using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& msg) : Error(msg) {}
};
struct MaskError : Error {
  explicit MaskError(const std::string& msg) : Error(msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated on first use, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), real(0));
  }
};

// Thread-local switch: when disabled, ops compute values only (no parents, no
// backward rules), so inference holds no graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), real(0), requires_grad);
  }

  static Tensor filled(Shape shape, real v, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(shape_numel(n->shape)), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw ShapeError("tensor init: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(real v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::vector<real>& values() { return node_->value; }
  const std::vector<real>& values() const { return node_->value; }
  real* data() { return node_->value.data(); }
  const real* data() const { return node_->value.data(); }

  std::vector<real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), real(0)); }

  real item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  // Rows/cols of the matrix view: an N-d tensor is treated as
  // (numel/last_dim) x last_dim, row-major.
  int64_t rows() const {
    if (ndim() == 0) return 1;
    return numel() / cols();
  }
  int64_t cols() const {
    if (ndim() == 0) return 1;
    return node_->shape.back();
  }

  NodePtr node() const { return node_; }
  TensorNode& raw() { return *node_; }
  const TensorNode& raw() const { return *node_; }

 private:
  NodePtr node_;
};

namespace detail {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

inline ConstMatMap as_mat(const std::vector<real>& v, int64_t r, int64_t c) {
  return ConstMatMap(v.data(), r, c);
}
inline MatMap as_mat(std::vector<real>& v, int64_t r, int64_t c) {
  return MatMap(v.data(), r, c);
}

inline void check_finite(const std::vector<real>& v, const char* op) {
  for (real x : v) {
    if (!std::isfinite(x))
      throw ValueError(std::string(op) + ": non-finite value in forward result");
  }
}

inline bool want_grad(const std::vector<Tensor>& parents) {
  if (!grad_mode()) return false;
  for (const Tensor& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

}  // namespace detail

// Extension point used by all built-in ops (and by the ranking losses): the
// node keeps its parents alive and owns the backward rule.
inline Tensor make_op(Shape shape, std::vector<real> value, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn, const char* name) {
  detail::check_finite(value, name);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (detail::want_grad(parents)) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Tensor& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<real> out(a.values());
  for (int64_t i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] += b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   for (auto& p : self.parents) {
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
                   }
                 },
                 "add");
}

// a[... x d] + b[d], broadcasting b over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  const int64_t d = a.cols();
  if (b.numel() != d)
    throw ShapeError("add_rowvec: vector length " + std::to_string(b.numel()) +
                     " vs row width " + std::to_string(d));
  const int64_t r = a.rows();
  std::vector<real> out(a.values());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] += b.data()[j];
  return make_op(a.shape(), std::move(out), {a, b},
                 [r, d](TensorNode& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int64_t i = 0; i < r; ++i)
                       for (int64_t j = 0; j < d; ++j)
                         pb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * d + j)];
                   }
                 },
                 "add_rowvec");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<real> out(a.values());
  for (int64_t i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] *= b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](TensorNode& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pa->grad[i] += self.grad[i] * pb->value[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       pb->grad[i] += self.grad[i] * pa->value[i];
                   }
                 },
                 "mul");
}

inline Tensor scale(const Tensor& a, real c) {
  std::vector<real> out(a.values());
  for (real& x : out) x *= c;
  return make_op(a.shape(), std::move(out), {a},
                 [c](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += c * self.grad[i];
                 },
                 "scale");
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, real(-1))); }

inline Tensor gelu(const Tensor& a) {
  constexpr real inv_sqrt2 = real(0.70710678118654752440084436210485);
  constexpr real inv_sqrt2pi = real(0.39894228040143267793994605993438);
  std::vector<real> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const real x = a.values()[i];
    out[i] = real(0.5) * x * (real(1) + std::erf(x * inv_sqrt2));
  }
  return make_op(a.shape(), std::move(out), {a},
                 [inv_sqrt2, inv_sqrt2pi](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     const real x = p->value[i];
                     const real cdf = real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
                     const real pdf = inv_sqrt2pi * std::exp(real(-0.5) * x * x);
                     p->grad[i] += self.grad[i] * (cdf + x * pdf);
                   }
                 },
                 "gelu");
}

inline Tensor sum(const Tensor& a) {
  real s = 0;
  for (real x : a.values()) s += x;
  return make_op({1}, {s}, {a},
                 [](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   const real g = self.grad[0];
                   for (real& gi : p->grad) gi += g;
                 },
                 "sum");
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), real(1) / static_cast<real>(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expects 2-d operands");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<real> out(static_cast<size_t>(m * n));
  detail::as_mat(out, m, n).noalias() =
      detail::as_mat(a.values(), m, k) * detail::as_mat(b.values(), k, n);
  return make_op({m, n}, std::move(out), {a, b},
                 [m, k, n](TensorNode& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   auto dc = detail::as_mat(self.grad, m, n);
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     detail::as_mat(pa->grad, m, k).noalias() +=
                         dc * detail::as_mat(pb->value, k, n).transpose();
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     detail::as_mat(pb->grad, k, n).noalias() +=
                         detail::as_mat(pa->value, m, k).transpose() * dc;
                   }
                 },
                 "matmul");
}

// a[m x k] * b[n x k]^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul_nt: expects 2-d operands");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: inner dims " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  std::vector<real> out(static_cast<size_t>(m * n));
  detail::as_mat(out, m, n).noalias() =
      detail::as_mat(a.values(), m, k) * detail::as_mat(b.values(), n, k).transpose();
  return make_op({m, n}, std::move(out), {a, b},
                 [m, k, n](TensorNode& self) {
                   auto& pa = self.parents[0];
                   auto& pb = self.parents[1];
                   auto dc = detail::as_mat(self.grad, m, n);
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     detail::as_mat(pa->grad, m, k).noalias() +=
                         dc * detail::as_mat(pb->value, n, k);
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     detail::as_mat(pb->grad, n, k).noalias() +=
                         dc.transpose() * detail::as_mat(pa->value, m, k);
                   }
                 },
                 "matmul_nt");
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expects 2-d operand");
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<real> out(static_cast<size_t>(m * n));
  detail::as_mat(out, n, m).noalias() = detail::as_mat(a.values(), m, n).transpose();
  return make_op({n, m}, std::move(out), {a},
                 [m, n](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   detail::as_mat(p->grad, m, n).noalias() +=
                       detail::as_mat(self.grad, n, m).transpose();
                 },
                 "transpose");
}

// Out row r = table row ids[r]; backward scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, std::vector<int64_t> ids) {
  if (table.ndim() != 2) throw ShapeError("gather_rows: table must be 2-d");
  const int64_t n = table.dim(0), d = table.dim(1);
  const int64_t m = static_cast<int64_t>(ids.size());
  std::vector<real> out(static_cast<size_t>(m * d));
  for (int64_t r = 0; r < m; ++r) {
    const int64_t id = ids[static_cast<size_t>(r)];
    if (id < 0 || id >= n)
      throw ShapeError("gather_rows: index " + std::to_string(id) + " out of [0," +
                       std::to_string(n) + ")");
    std::copy_n(table.data() + id * d, d, out.begin() + r * d);
  }
  return make_op({m, d}, std::move(out), {table},
                 [ids = std::move(ids), d](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (size_t r = 0; r < ids.size(); ++r) {
                     real* dst = p->grad.data() + ids[r] * d;
                     const real* src = self.grad.data() + static_cast<int64_t>(r) * d;
                     for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 },
                 "gather_rows");
}

inline Tensor slice_cols(const Tensor& a, int64_t start, int64_t n) {
  if (a.ndim() != 2) throw ShapeError("slice_cols: expects 2-d operand");
  const int64_t r = a.dim(0), c = a.dim(1);
  if (start < 0 || n <= 0 || start + n > c) throw ShapeError("slice_cols: range out of bounds");
  std::vector<real> out(static_cast<size_t>(r * n));
  for (int64_t i = 0; i < r; ++i)
    std::copy_n(a.data() + i * c + start, n, out.begin() + i * n);
  return make_op({r, n}, std::move(out), {a},
                 [r, c, start, n](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t i = 0; i < r; ++i) {
                     real* dst = p->grad.data() + i * c + start;
                     const real* src = self.grad.data() + i * n;
                     for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
                   }
                 },
                 "slice_cols");
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t r = parts[0].dim(0);
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r) throw ShapeError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<real> out(static_cast<size_t>(r * total));
  std::vector<int64_t> offs;
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t c = p.dim(1);
    offs.push_back(off);
    for (int64_t i = 0; i < r; ++i)
      std::copy_n(p.data() + i * c, c, out.begin() + i * total + off);
    off += c;
  }
  return make_op({r, total}, std::move(out), std::vector<Tensor>(parts),
                 [r, total, offs = std::move(offs)](TensorNode& self) {
                   for (size_t k = 0; k < self.parents.size(); ++k) {
                     auto& p = self.parents[k];
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     const int64_t c = p->shape[1];
                     for (int64_t i = 0; i < r; ++i) {
                       real* dst = p->grad.data() + i * c;
                       const real* src = self.grad.data() + i * total + offs[k];
                       for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                     }
                   }
                 },
                 "concat_cols");
}

// Row i of the result comes from `rows[slot]` when (i, slot) is listed in
// `slots`, otherwise from base row i. Used to stitch vision rows into the
// embedded text sequence.
inline Tensor merge_rows(const Tensor& base, const Tensor& rows,
                         std::vector<std::pair<int64_t, int64_t>> slots) {
  if (base.ndim() != 2 || rows.ndim() != 2 || base.dim(1) != rows.dim(1))
    throw ShapeError("merge_rows: incompatible shapes");
  const int64_t n = base.dim(0), d = base.dim(1);
  std::vector<real> out(base.values());
  for (auto [pos, slot] : slots) {
    if (pos < 0 || pos >= n || slot < 0 || slot >= rows.dim(0))
      throw ShapeError("merge_rows: slot out of range");
    std::copy_n(rows.data() + slot * d, d, out.begin() + pos * d);
  }
  return make_op({n, d}, std::move(out), {base, rows},
                 [slots = std::move(slots), n, d](TensorNode& self) {
                   auto& pb = self.parents[0];
                   auto& pr = self.parents[1];
                   std::vector<char> taken(static_cast<size_t>(n), 0);
                   for (auto [pos, slot] : slots) taken[static_cast<size_t>(pos)] = 1;
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (int64_t i = 0; i < n; ++i) {
                       if (taken[static_cast<size_t>(i)]) continue;
                       for (int64_t j = 0; j < d; ++j)
                         pb->grad[static_cast<size_t>(i * d + j)] +=
                             self.grad[static_cast<size_t>(i * d + j)];
                     }
                   }
                   if (pr->requires_grad) {
                     pr->ensure_grad();
                     for (auto [pos, slot] : slots)
                       for (int64_t j = 0; j < d; ++j)
                         pr->grad[static_cast<size_t>(slot * d + j)] +=
                             self.grad[static_cast<size_t>(pos * d + j)];
                   }
                 },
                 "merge_rows");
}

// ---------------------------------------------------------------------------
// Softmax / normalization / losses
// ---------------------------------------------------------------------------

// Softmax over the last axis of (logits + mask). Mask entries must be 0 or
// the kMaskedOut sentinel; a row with every entry masked is an error. The
// mask is a constant: no gradient flows into it.
inline Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  if (logits.shape() != mask.shape())
    throw ShapeError("masked_softmax: mask shape " + shape_str(mask.shape()) +
                     " vs logits " + shape_str(logits.shape()));
  for (real m : mask.values())
    if (!(m == real(0) || m <= real(-1e8)))
      throw MaskError("masked_softmax: mask entries must be 0 or the -inf sentinel");
  const int64_t r = logits.rows(), c = logits.cols();
  std::vector<real> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i) {
    const real* z = logits.data() + i * c;
    const real* m = mask.data() + i * c;
    real mx = -std::numeric_limits<real>::infinity();
    bool any = false;
    for (int64_t j = 0; j < c; ++j) {
      if (m[j] == real(0)) {
        any = true;
        mx = std::max(mx, z[j]);
      }
    }
    if (!any) throw MaskError("masked_softmax: fully masked row " + std::to_string(i));
    real denom = 0;
    real* o = out.data() + i * c;
    for (int64_t j = 0; j < c; ++j) {
      o[j] = std::exp(z[j] + m[j] - mx);
      denom += o[j];
    }
    for (int64_t j = 0; j < c; ++j) o[j] /= denom;
  }
  return make_op(logits.shape(), std::move(out), {logits, mask},
                 [r, c](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (int64_t i = 0; i < r; ++i) {
                     const real* y = self.value.data() + i * c;
                     const real* dy = self.grad.data() + i * c;
                     real dot = 0;
                     for (int64_t j = 0; j < c; ++j) dot += dy[j] * y[j];
                     real* dz = p->grad.data() + i * c;
                     for (int64_t j = 0; j < c; ++j) dz[j] += y[j] * (dy[j] - dot);
                   }
                 },
                 "masked_softmax");
}

inline Tensor softmax(const Tensor& logits) {
  return masked_softmax(logits, Tensor::zeros(logits.shape()));
}

// Per-row standardization followed by the affine (gain, bias); variance is
// the population variance with epsilon added inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         real eps = real(1e-12)) {
  const int64_t d = x.cols(), r = x.rows();
  if (d < 2) throw ShapeError("layer_norm: needs at least 2 features per row");
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias length mismatch");
  std::vector<real> out(static_cast<size_t>(r * d));
  std::vector<real> inv_std(static_cast<size_t>(r));
  std::vector<real> xhat(static_cast<size_t>(r * d));
  for (int64_t i = 0; i < r; ++i) {
    const real* xi = x.data() + i * d;
    real mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<real>(d);
    real var = 0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<real>(d);
    const real is = real(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const real xh = (xi[j] - mu) * is;
      xhat[static_cast<size_t>(i * d + j)] = xh;
      out[static_cast<size_t>(i * d + j)] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [r, d, inv_std = std::move(inv_std), xhat = std::move(xhat)](TensorNode& self) {
                   auto& px = self.parents[0];
                   auto& pg = self.parents[1];
                   auto& pb = self.parents[2];
                   for (int64_t i = 0; i < r; ++i) {
                     const real* dy = self.grad.data() + i * d;
                     const real* xh = xhat.data() + i * d;
                     if (pg->requires_grad) {
                       pg->ensure_grad();
                       for (int64_t j = 0; j < d; ++j) pg->grad[static_cast<size_t>(j)] += dy[j] * xh[j];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t j = 0; j < d; ++j) pb->grad[static_cast<size_t>(j)] += dy[j];
                     }
                     if (px->requires_grad) {
                       px->ensure_grad();
                       real m1 = 0, m2 = 0;  // mean(g*dy), mean(g*dy*xhat)
                       for (int64_t j = 0; j < d; ++j) {
                         const real gdy = pg->value[static_cast<size_t>(j)] * dy[j];
                         m1 += gdy;
                         m2 += gdy * xh[j];
                       }
                       m1 /= static_cast<real>(d);
                       m2 /= static_cast<real>(d);
                       real* dx = px->grad.data() + i * d;
                       const real is = inv_std[static_cast<size_t>(i)];
                       for (int64_t j = 0; j < d; ++j) {
                         const real gdy = pg->value[static_cast<size_t>(j)] * dy[j];
                         dx[j] += is * (gdy - m1 - xh[j] * m2);
                       }
                     }
                   }
                 },
                 "layer_norm");
}

// -log softmax(logits)[target], averaged over rows for 2-d input.
// Log-sum-exp is max-shifted so saturated logits stay stable.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets) {
  const int64_t r = logits.rows(), c = logits.cols();
  if (static_cast<int64_t>(targets.size()) != r)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(r) + " rows");
  real total = 0;
  for (int64_t i = 0; i < r; ++i) {
    const int64_t t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= c)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of [0," +
                       std::to_string(c) + ")");
    const real* z = logits.data() + i * c;
    real mx = z[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    real lse = 0;
    for (int64_t j = 0; j < c; ++j) lse += std::exp(z[j] - mx);
    total += std::log(lse) + mx - z[t];
  }
  total /= static_cast<real>(r);
  return make_op({1}, {total}, {logits},
                 [r, c, targets](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   const real g = self.grad[0] / static_cast<real>(r);
                   for (int64_t i = 0; i < r; ++i) {
                     const real* z = p->value.data() + i * c;
                     real mx = z[0];
                     for (int64_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
                     real denom = 0;
                     for (int64_t j = 0; j < c; ++j) denom += std::exp(z[j] - mx);
                     real* dz = p->grad.data() + i * c;
                     for (int64_t j = 0; j < c; ++j) dz[j] += g * std::exp(z[j] - mx) / denom;
                     dz[targets[static_cast<size_t>(i)]] -= g;
                   }
                 },
                 "cross_entropy");
}

// Shape change only; values pass through untouched.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  return make_op(std::move(shape), std::vector<real>(a.values()), {a},
                 [](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
                 },
                 "reshape");
}

inline Tensor cross_entropy(const Tensor& logits, int64_t target) {
  if (logits.ndim() != 1) throw ShapeError("cross_entropy: expects a 1-d logit vector");
  return cross_entropy_rows(reshape(logits, {1, logits.numel()}), {target});
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

struct BackwardStats {
  int64_t nodes_visited = 0;
};

// Reverse-mode sweep from a scalar loss. Visits each reachable grad-requiring
// node exactly once, in reverse topological order; leaf grads accumulate
// across repeated calls until zero_grad().
inline BackwardStats backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.requires_grad())
    throw Error("backward: loss does not depend on any requires_grad tensor");

  // Iterative post-order DFS over parents -> topological order.
  std::vector<TensorNode*> order;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  std::unordered_set<const TensorNode*> seen;
  seen.insert(loss.node().get());
  stack.emplace_back(loss.node().get(), 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* parent = node->parents[idx++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += real(1);
  BackwardStats stats;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    ++stats.nodes_visited;
    if (n->backward_fn) n->backward_fn(*n);
  }
  return stats;
}

}  // namespace uvdt
