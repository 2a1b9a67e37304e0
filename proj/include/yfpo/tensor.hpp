#pragma once

// Dense fp64 tensors on a reverse-mode gradient tape.
//
// The op set is exactly what a small decoder-only transformer and its
// preference losses need; there is no general broadcasting engine beyond
// scalar-or-equal-shape elementwise ops. Every op checks that its output is
// finite and throws NumericsError otherwise. Tensors are immutable once
// created except for their grad buffers and explicit outside-of-tape
// mutation through mutable_data() (parameter init, optimizer updates,
// finite-difference probes).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "yfpo/errors.hpp"

namespace yfpo {

using Shape = std::vector<std::size_t>;
using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;
using BoolSeq = std::vector<bool>;

// Token id 0 is reserved as EOS/pad across the whole artifact.
inline constexpr Token kEosToken = 0;

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first touched by backward

  std::size_t size() const { return data.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

inline void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericsError(std::string(op) + " produced a non-finite value");
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    detail::validate_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(detail::shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  // Rank-0 tensor holding a single value.
  static Tensor scalar(double value, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = {};
    impl->data = {value};
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    detail::validate_shape(shape);
    if (values.size() != detail::shape_numel(shape)) {
      throw DimensionError("data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t dim) const { return impl_->shape.at(dim); }
  std::size_t size() const { return impl_->data.size(); }
  bool is_scalar() const { return impl_->data.size() == 1; }

  // Rank-2 helpers.
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.at(1); }

  double value() const {
    if (!is_scalar()) {
      throw ContractError("value() requires a scalar tensor, shape is " +
                          detail::shape_str(impl_->shape));
    }
    return impl_->data[0];
  }

  double operator[](std::size_t flat) const { return impl_->data.at(flat); }
  double at(std::size_t i, std::size_t j) const {
    return impl_->data.at(i * impl_->shape.at(1) + j);
  }

  std::span<const double> data() const { return impl_->data; }

  // Outside-of-tape mutation; never call on a tensor that already sits on a
  // live tape you intend to backpropagate through.
  std::span<double> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  bool grad_allocated() const { return !impl_->grad.empty(); }

  // Empty span when the grad buffer was never touched (treated as zeros).
  std::span<const double> grad() const { return impl_->grad; }

  void zero_grad() { impl_->grad.clear(); }

  Tensor detached_copy(bool requires_grad = false) const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  // Internal handle used by ops and the tape.
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed ops. Creation order is topological by
// construction since ops execute eagerly. backward() walks the record once,
// in reverse. Single-threaded per tape; distinct tapes are independent.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::vector<std::shared_ptr<detail::TensorImpl>> outputs;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  void record(Node node) { nodes_.push_back(std::move(node)); }

  void clear() { nodes_.clear(); }

  // Clears the grad buffer of every tensor the tape touches, inputs and
  // outputs alike. Lets a second backward pass start from a clean slate.
  void clear_grads() {
    for (auto& node : nodes_) {
      for (auto& in : node.inputs) in->grad.clear();
      for (auto& out : node.outputs) out->grad.clear();
    }
  }

  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_output(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (scalar-or-equal broadcasting only)
// ---------------------------------------------------------------------------

namespace detail {

// Shared implementation for add/sub/mul. Result shape is the non-scalar
// operand's shape; both-scalar is fine; anything else must match exactly.
template <typename Fwd, typename Bwd>
Tensor binary_elementwise(Tape& tape, const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const Tensor& shaped = a_scalar ? b : a;
  const std::size_t n = shaped.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double av = a_scalar ? a[0] : a[i];
    const double bv = b_scalar ? b[0] : b[i];
    out[i] = fwd(av, bv);
  }
  check_finite(name, out);
  const bool rg = any_requires_grad({&a, &b});
  Tensor result = make_output(shaped.shape(), std::move(out), rg);
  if (rg) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = result.impl();
    tape.record({{ai, bi},
                 {oi},
                 [ai, bi, oi, a_scalar, b_scalar, bwd]() {
                   const std::size_t n = oi->data.size();
                   for (std::size_t i = 0; i < n; ++i) {
                     const double g = oi->grad[i];
                     if (g == 0.0) continue;
                     const double av = a_scalar ? ai->data[0] : ai->data[i];
                     const double bv = b_scalar ? bi->data[0] : bi->data[i];
                     auto [da, db] = bwd(av, bv, g);
                     if (ai->requires_grad) {
                       ai->ensure_grad();
                       ai->grad[a_scalar ? 0 : i] += da;
                     }
                     if (bi->requires_grad) {
                       bi->ensure_grad();
                       bi->grad[b_scalar ? 0 : i] += db;
                     }
                   }
                 }});
  }
  return result;
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape& tape, const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  check_finite(name, out);
  const bool rg = x.requires_grad();
  Tensor result = make_output(x.shape(), std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi},
                 {oi},
                 [xi, oi, bwd]() {
                   xi->ensure_grad();
                   for (std::size_t i = 0; i < oi->data.size(); ++i) {
                     xi->grad[i] += bwd(xi->data[i], oi->data[i]) * oi->grad[i];
                   }
                 }});
  }
  return result;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair<double, double>{g, g}; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair<double, double>{g, -g}; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair<double, double>{g * y, g * x}; });
}

/// silu(x) = x * sigmoid(x); the gated-MLP activation.
inline Tensor silu(Tape& tape, const Tensor& x) {
  return detail::unary_elementwise(
      tape, "silu", x, [](double v) { return v * detail::sigmoid(v); },
      [](double v, double) {
        const double s = detail::sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Tensor abs(Tape& tape, const Tensor& x) {
  return detail::unary_elementwise(
      tape, "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// Numerically stable log(1 + e^x).
inline Tensor softplus(Tape& tape, const Tensor& x) {
  return detail::unary_elementwise(
      tape, "softplus", x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double v, double) { return detail::sigmoid(v); });
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  return detail::unary_elementwise(
      tape, "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor neg(Tape& tape, const Tensor& x) { return scale(tape, x, -1.0); }

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands");
  }
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions disagree, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ad[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = &bd[kk * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  detail::check_finite("matmul", out);
  const bool rg = detail::any_requires_grad({&a, &b});
  Tensor result = detail::make_output({m, n}, std::move(out), rg);
  if (rg) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = result.impl();
    tape.record({{ai, bi}, {oi}, [ai, bi, oi, m, k, n]() {
                   // dA = dC * B^T, dB = A^T * dC
                   if (ai->requires_grad) {
                     ai->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         double acc = 0.0;
                         const double* grow = &oi->grad[i * n];
                         const double* brow = &bi->data[kk * n];
                         for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                         ai->grad[i * k + kk] += acc;
                       }
                     }
                   }
                   if (bi->requires_grad) {
                     bi->ensure_grad();
                     for (std::size_t kk = 0; kk < k; ++kk) {
                       for (std::size_t i = 0; i < m; ++i) {
                         const double av = ai->data[i * k + kk];
                         if (av == 0.0) continue;
                         const double* grow = &oi->grad[i * n];
                         double* brow = &bi->grad[kk * n];
                         for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                       }
                     }
                   }
                 }});
  }
  return result;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.at(i, j);
  }
  const bool rg = x.requires_grad();
  Tensor result = detail::make_output({c, r}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi, r, c]() {
                   xi->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i) {
                     for (std::size_t j = 0; j < c; ++j) {
                       xi->grad[i * c + j] += oi->grad[j * r + i];
                     }
                   }
                 }});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Slicing / concatenation
// ---------------------------------------------------------------------------

inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() < 1) throw DimensionError("slice_rows expects rank >= 1");
  const std::size_t r = x.extent(0);
  if (count == 0 || start + count > r) {
    throw IndexError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of bounds for " +
                     std::to_string(r) + " rows");
  }
  const std::size_t row_size = x.size() / r;
  Shape out_shape = x.shape();
  out_shape[0] = count;
  std::vector<double> out(count * row_size);
  std::copy_n(x.data().data() + start * row_size, count * row_size, out.data());
  const bool rg = x.requires_grad();
  Tensor result = detail::make_output(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi, start, count, row_size]() {
                   xi->ensure_grad();
                   for (std::size_t i = 0; i < count * row_size; ++i) {
                     xi->grad[start * row_size + i] += oi->grad[i];
                   }
                 }});
  }
  return result;
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2) throw DimensionError("slice_cols expects a rank-2 tensor");
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || start + count > c) {
    throw IndexError("slice_cols: range out of bounds for " + std::to_string(c) + " columns");
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(x.data().data() + i * c + start, count, out.data() + i * count);
  }
  const bool rg = x.requires_grad();
  Tensor result = detail::make_output({r, count}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi, r, c, start, count]() {
                   xi->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i) {
                     for (std::size_t j = 0; j < count; ++j) {
                       xi->grad[i * c + start + j] += oi->grad[i * count + j];
                     }
                   }
                 }});
  }
  return result;
}

/// Extracts one column of a rank-2 tensor as a rank-1 tensor.
inline Tensor select_column(Tape& tape, const Tensor& x, std::size_t col) {
  if (x.rank() != 2) throw DimensionError("select_column expects a rank-2 tensor");
  const std::size_t r = x.rows(), c = x.cols();
  if (col >= c) {
    throw IndexError("select_column: column " + std::to_string(col) + " out of bounds");
  }
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = x.at(i, col);
  const bool rg = x.requires_grad();
  Tensor result = detail::make_output({r}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi, r, c, col]() {
                   xi->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i) xi->grad[i * c + col] += oi->grad[i];
                 }});
  }
  return result;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != r) {
      throw DimensionError("concat_cols: inputs must be rank-2 with matching rows");
    }
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t col_off = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    rg = rg || p.requires_grad();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(p.data().data() + i * p.cols(), p.cols(), out.data() + i * total + col_off);
    }
    col_off += p.cols();
  }
  Tensor result = detail::make_output({r, total}, std::move(out), rg);
  if (rg) {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& p : parts) inputs.push_back(p.impl());
    auto oi = result.impl();
    tape.record({inputs, {oi}, [inputs, oi, r, total]() {
                   std::size_t off = 0;
                   for (auto& pi : inputs) {
                     const std::size_t pc = pi->shape[1];
                     if (pi->requires_grad) {
                       pi->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i) {
                         for (std::size_t j = 0; j < pc; ++j) {
                           pi->grad[i * pc + j] += oi->grad[i * total + off + j];
                         }
                       }
                     }
                     off += pc;
                   }
                 }});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  detail::check_finite("sum", std::span<const double>(&acc, 1));
  const bool rg = x.requires_grad();
  Tensor result = Tensor::scalar(acc, rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi]() {
                   xi->ensure_grad();
                   const double g = oi->grad[0];
                   for (double& gv : xi->grad) gv += g;
                 }});
  }
  return result;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor s = sum(tape, x);
  return scale(tape, s, inv);
}

// ---------------------------------------------------------------------------
// Normalization / softmax
// ---------------------------------------------------------------------------

inline constexpr double kRmsNormEps = 1e-6;

/// Per-row RMS normalization with a learned elementwise weight.
inline Tensor rmsnorm(Tape& tape, const Tensor& x, const Tensor& weight) {
  if (x.rank() < 1) throw DimensionError("rmsnorm expects rank >= 1");
  const std::size_t n = x.shape().back();
  if (weight.rank() != 1 || weight.size() != n) {
    throw DimensionError("rmsnorm: weight must be rank-1 of size " + std::to_string(n));
  }
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.data()[r * n];
    double ms = 0.0;
    for (std::size_t i = 0; i < n; ++i) ms += xr[i] * xr[i];
    ms /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
    inv_rms[r] = inv;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = weight[i] * xr[i] * inv;
  }
  detail::check_finite("rmsnorm", out);
  const bool rg = detail::any_requires_grad({&x, &weight});
  Tensor result = detail::make_output(x.shape(), std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto wi = weight.impl();
    auto oi = result.impl();
    tape.record({{xi, wi}, {oi}, [xi, wi, oi, rows, n, inv_rms = std::move(inv_rms)]() {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* xr = &xi->data[r * n];
                     const double* gr = &oi->grad[r * n];
                     const double inv = inv_rms[r];
                     if (xi->requires_grad) {
                       xi->ensure_grad();
                       // dx_j = w_j*inv*g_j - x_j*inv^3/n * sum_i g_i*w_i*x_i
                       double dot = 0.0;
                       for (std::size_t i = 0; i < n; ++i) dot += gr[i] * wi->data[i] * xr[i];
                       const double coef = dot * inv * inv * inv / static_cast<double>(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         xi->grad[r * n + j] += wi->data[j] * inv * gr[j] - xr[j] * coef;
                       }
                     }
                     if (wi->requires_grad) {
                       wi->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                         wi->grad[i] += gr[i] * xr[i] * inv;
                       }
                     }
                   }
                 }});
  }
  return result;
}

inline Tensor softmax_lastdim(Tape& tape, const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() == 0) {
    throw DimensionError("softmax_lastdim expects a nonempty last dimension");
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.data()[r * n];
    double mx = xr[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = std::exp(xr[i] - mx);
      out[r * n + i] = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] *= inv;
  }
  detail::check_finite("softmax_lastdim", out);
  const bool rg = x.requires_grad();
  Tensor result = detail::make_output(x.shape(), std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto oi = result.impl();
    tape.record({{xi}, {oi}, [xi, oi, rows, n]() {
                   xi->ensure_grad();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* y = &oi->data[r * n];
                     const double* g = &oi->grad[r * n];
                     double dot = 0.0;
                     for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
                     for (std::size_t i = 0; i < n; ++i) {
                       xi->grad[r * n + i] += y[i] * (g[i] - dot);
                     }
                   }
                 }});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Embedding / sequence log-probability
// ---------------------------------------------------------------------------

/// Gathers rows of `table` (V x d) for each token id; scatter-add backward.
inline Tensor embed(Tape& tape, const Tensor& table, const TokenSeq& ids) {
  if (table.rank() != 2) throw DimensionError("embed expects a rank-2 table");
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw ContractError("embed: empty id sequence");
  for (Token id : ids) {
    if (id >= v) {
      throw IndexError("embed: token id " + std::to_string(id) + " out of range for vocab " +
                       std::to_string(v));
    }
  }
  const std::size_t t = ids.size();
  std::vector<double> out(t * d);
  for (std::size_t i = 0; i < t; ++i) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool rg = table.requires_grad();
  Tensor result = detail::make_output({t, d}, std::move(out), rg);
  if (rg) {
    auto ti = table.impl();
    auto oi = result.impl();
    tape.record({{ti}, {oi}, [ti, oi, ids, d]() {
                   ti->ensure_grad();
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     double* dst = &ti->grad[static_cast<std::size_t>(ids[i]) * d];
                     const double* src = &oi->grad[i * d];
                     for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 }});
  }
  return result;
}

/// Masked sum of per-position log-softmax probabilities of the target ids.
/// Returns sum over masked t of log softmax(logits[t])[targets[t]].
inline Tensor log_prob_of_sequence(Tape& tape, const Tensor& logits, const TokenSeq& targets,
                                   const BoolSeq& mask) {
  if (logits.rank() != 2) throw DimensionError("log_prob_of_sequence expects T x V logits");
  const std::size_t t_len = logits.rows(), v = logits.cols();
  if (targets.size() != t_len || mask.size() != t_len) {
    throw DimensionError("log_prob_of_sequence: targets/mask length must equal T");
  }
  std::size_t active = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    ++active;
    if (targets[t] >= v) {
      throw IndexError("log_prob_of_sequence: target id out of range at position " +
                       std::to_string(t));
    }
  }
  if (active == 0) throw EmptyResponseError("log_prob_of_sequence: mask selects no positions");

  const bool rg = logits.requires_grad();
  // Per masked row softmax probabilities, kept for the backward rule.
  std::vector<double> probs;
  if (rg) probs.assign(t_len * v, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    const double* row = &logits.data()[t * v];
    double mx = row[0];
    for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += std::exp(row[i] - mx);
    const double lse = mx + std::log(z);
    total += row[targets[t]] - lse;
    if (rg) {
      const double inv = 1.0 / z;
      for (std::size_t i = 0; i < v; ++i) probs[t * v + i] = std::exp(row[i] - mx) * inv;
    }
  }
  detail::check_finite("log_prob_of_sequence", std::span<const double>(&total, 1));
  Tensor result = Tensor::scalar(total, rg);
  if (rg) {
    auto li = logits.impl();
    auto oi = result.impl();
    tape.record({{li}, {oi},
                 [li, oi, targets, mask, v, t_len, probs = std::move(probs)]() {
                   li->ensure_grad();
                   const double g = oi->grad[0];
                   for (std::size_t t = 0; t < t_len; ++t) {
                     if (!mask[t]) continue;
                     for (std::size_t i = 0; i < v; ++i) {
                       const double indicator = (i == targets[t]) ? 1.0 : 0.0;
                       li->grad[t * v + i] += g * (indicator - probs[t * v + i]);
                     }
                   }
                 }});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Visits each recorded op exactly
/// once, newest first. Repeated calls accumulate unless the tape's grads are
/// cleared in between.
inline void backward(Tape& tape, const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ContractError("backward requires a scalar loss, shape is " +
                        detail::shape_str(loss.shape()));
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    bool live = false;
    for (const auto& out : it->outputs) {
      if (!out->grad.empty()) {
        live = true;
        break;
      }
    }
    if (live) it->backward();
  }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Central-difference check of analytic gradients.
///
/// `build_loss` must rebuild the full forward pass on a fresh tape from the
/// current parameter values. Relative error uses a floored denominator
/// max(|analytic|, |numeric|, denom_floor): finite differences at step h
/// carry ~h^2 absolute noise, so a pure ratio is meaningless for
/// near-zero gradient entries. Coordinates beyond `max_coords_per_tensor`
/// are subsampled deterministically from `coord_seed`.
inline GradCheckReport grad_check(
    const std::function<Tensor(Tape&)>& build_loss,
    const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-4,
    double tol = 1e-4, std::size_t max_coords_per_tensor = std::numeric_limits<std::size_t>::max(),
    std::uint64_t coord_seed = 0, double denom_floor = 1e-3) {
  GradCheckReport report;

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = build_loss(tape);
    backward(tape, loss);
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
      auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(p.size(), 0.0);
    }
    tape.clear_grads();
  }

  auto eval = [&]() {
    Tape tape;
    return build_loss(tape).value();
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    Tensor param = p;
    std::vector<std::size_t> coords;
    if (param.size() <= max_coords_per_tensor) {
      coords.resize(param.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
      std::vector<std::size_t> all(param.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::mt19937_64 rng(coord_seed ^ (0x9e3779b97f4a7c15ULL * (pi + 1)));
      for (std::size_t i = 0; i < max_coords_per_tensor; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
        std::swap(all[i], all[pick(rng)]);
      }
      coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords_per_tensor));
    }
    auto data = param.mutable_data();
    for (std::size_t idx : coords) {
      const double orig = data[idx];
      data[idx] = orig + h;
      const double f_plus = eval();
      data[idx] = orig - h;
      const double f_minus = eval();
      data[idx] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[pi][idx];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), denom_floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_tensor = name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_err <= tol;
  return report;
}

// ---------------------------------------------------------------------------
// Deterministic Gaussian sampling (Box-Muller over mt19937_64)
// ---------------------------------------------------------------------------

// std::normal_distribution's algorithm is implementation-defined, so bit
// reproducibility of parameter init rests on this hand-rolled sampler.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}

  double next(double stddev) {
    if (have_spare_) {
      have_spare_ = false;
      return spare_ * stddev;
    }
    const double u1 = (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;          // [0, 1)
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta) * stddev;
  }

 private:
  std::mt19937_64 rng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_bytes(const void* data, std::size_t len,
                                   std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace yfpo
