#pragma once

// Dense 64-bit tensors and a reverse-mode tape with exactly the primitive
// set the model needs. Every tensor is rank 2; vectors are 1 x n rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gmmr/error.hpp"

namespace gmmr {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match " +
                       shape_string());
    }
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values));
  }
  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string());
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("+= shape mismatch " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A named learnable tensor. Gradients live outside the parameter (see
/// GradStore) so several workers can share one set of values.
struct Parameter {
  std::string name;
  std::size_t index = 0;  // position in the owning registry
  Tensor value;
};

namespace kernel {

// C (+)= A * B
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (!accumulate) c.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.data() + i * m;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (+)= A * B^T
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) = accumulate ? c(i, j) + s : s;
    }
  }
}

// C (+)= A^T * B
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  if (!accumulate) c.fill(0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * n;
    const double* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace kernel

class Tape;

/// Handle to a tape node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Wengert list of primitive applications. Nodes are appended in evaluation
/// order, so reverse insertion order is a reverse topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf that reads `value` in place. On backward its gradient is added
  /// into `grad_sink` (same shape), when one is given.
  Var leaf(const Tensor& value, Tensor* grad_sink) {
    Node n;
    n.view = &value;
    n.sink = grad_sink;
    n.requires_grad = recording_ && grad_sink != nullptr;
    if (grad_sink && !grad_sink->same_shape(value)) {
      throw ShapeError("gradient sink " + grad_sink->shape_string() + " does not match " +
                       value.shape_string());
    }
    return push(std::move(n));
  }

  const Tensor& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.view ? *n.view : n.value;
  }
  const Tensor& value(Var v) const { return value(v.id()); }

  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  /// Gradient slot of a node, allocated on first use.
  Tensor& grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !value(id).empty()) {
      const Tensor& v = value(id);
      n.grad = Tensor(v.rows(), v.cols());
    }
    return n.grad;
  }
  const Tensor& grad_of(Var v) const { return nodes_[v.id()].grad; }

  /// Appends an op node. `inputs` decide whether the result needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record_span(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                       std::move(backward));
  }

  Var record_span(Tensor value, std::span<const Var> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    if (recording_) {
      for (const Var& v : inputs) {
        if (v.tape() != this) throw Error("tape mismatch: operand recorded on a different tape");
        n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
      }
      if (n.requires_grad) n.backward = std::move(backward);
    }
    return push(std::move(n));
  }

  /// Populates gradients of every leaf reachable from `root` (a 1x1 node).
  /// Node-local gradients are reset first; parameter sinks accumulate.
  void backward(Var root, double seed = 1.0) {
    if (root.tape() != this) throw Error("backward root belongs to a different tape");
    const Tensor& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) {
      throw ShapeError("backward needs a scalar root, got " + rv.shape_string());
    }
    if (!recording_) throw Error("backward on a tape that does not record gradients");
    for (auto& n : nodes_) n.grad = Tensor();
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())[0] = seed;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
      if (n.sink) *n.sink += n.grad;
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* view = nullptr;
    Tensor grad;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  bool recording_;
  std::deque<Node> nodes_;  // deque keeps element references stable
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

/// While installed for a thread, the non-smooth primitives (relu, clamp,
/// reciprocal_clamped, min_of) hash which piece of their definition each
/// element falls in. Finite differences use it to detect stencils that
/// straddle a kink.
struct BranchSignature {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  void note(std::uint64_t v) { hash = (hash ^ v) * 0x100000001b3ull; }
};

inline thread_local BranchSignature* active_branch_signature = nullptr;

class BranchSignatureScope {
 public:
  explicit BranchSignatureScope(BranchSignature& s) : prev_(active_branch_signature) {
    active_branch_signature = &s;
  }
  ~BranchSignatureScope() { active_branch_signature = prev_; }
  BranchSignatureScope(const BranchSignatureScope&) = delete;
  BranchSignatureScope& operator=(const BranchSignatureScope&) = delete;

 private:
  BranchSignature* prev_;
};

namespace detail {

template <typename Piece>
void note_pieces(const Tensor& x, Piece piece) {
  if (!active_branch_signature) return;
  for (double v : x.values()) active_branch_signature->note(piece(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return t.record(std::move(out), {x}, [x, df](Tape& tp, std::uint32_t self) {
    if (!tp.requires_grad(x)) return;
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(x);
    const Tensor& yv = tp.value(self);
    Tensor& gx = tp.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: shape mismatch " + av.shape_string() + " x " + bv.shape_string());
  }
  Tensor out(av.rows(), bv.cols());
  kernel::gemm_nn(av, bv, out, true);
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) kernel::gemm_nt(g, t.value(b), t.grad(a.id()), true);
    if (t.requires_grad(b)) kernel::gemm_tn(t.value(a), g, t.grad(b.id()), true);
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.cols(), av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(a)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a.id());
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(j, i);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id()) += g;
    if (t.requires_grad(b)) t.grad(b.id()) += g;
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) t.grad(a.id()) += g;
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// scale * x + shift, elementwise with constants.
inline Var affine(Var x, double scale, double shift = 0.0) {
  return detail::unary(
      x, [=](double v) { return scale * v + shift; }, [=](double, double) { return scale; });
}

inline Var scale(Var x, double s) { return affine(x, s, 0.0); }

/// Broadcasts a 1x1, 1xc or rx1 tensor to rows x cols.
inline Var expand(Var x, std::size_t rows, std::size_t cols) {
  const Tensor& xv = x.value();
  const bool row_ok = xv.rows() == 1 || xv.rows() == rows;
  const bool col_ok = xv.cols() == 1 || xv.cols() == cols;
  if (!row_ok || !col_ok) {
    throw ShapeError("expand: cannot broadcast " + xv.shape_string() + " to (" +
                     std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  Tensor out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out(i, j) = xv(xv.rows() == 1 ? 0 : i, xv.cols() == 1 ? 0 : j);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j)
        gx(gx.rows() == 1 ? 0 : i, gx.cols() == 1 ? 0 : j) += g(i, j);
  });
}

/// Repeats a row vector n times.
inline Var broadcast_row(Var v, std::size_t n) {
  if (v.rows() != 1) throw ShapeError("broadcast_row: expected a row vector, got " + v.value().shape_string());
  return expand(v, n, v.cols());
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + parts[0].value().shape_string() + " vs " +
                       p.value().shape_string());
    }
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->record_span(std::move(out), ins, [ins](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t c = t.value(p).cols();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad(p.id());
        for (std::size_t i = 0; i < gp.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + parts[0].value().shape_string() + " vs " +
                       p.value().shape_string());
    }
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data(), pv.data() + pv.size(), out.data() + off * cols);
    off += pv.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->record_span(std::move(out), ins, [ins](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (const Var& p : ins) {
      const std::size_t r = t.value(p).rows();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad(p.id());
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off * g.cols() + i];
      }
      off += r;
    }
  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + xv.shape_string());
  }
  Tensor out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  return x.tape()->record(std::move(out), {x}, [x, begin](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, begin + j) += g(i, j);
  });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + xv.shape_string());
  }
  Tensor out(count, xv.cols());
  std::copy(xv.data() + begin * xv.cols(), xv.data() + (begin + count) * xv.cols(), out.data());
  return x.tape()->record(std::move(out), {x}, [x, begin](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * g.cols() + i] += g[i];
  });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return kernel::sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(Var x) {
  detail::note_pieces(x.value(), [](double v) { return v > 0 ? 1u : 0u; });
  return detail::unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Var softplus(Var x) {
  return detail::unary(
      x, [](double v) { return kernel::softplus(v); }, [](double v, double) { return kernel::sigmoid(v); });
}

inline Var exp(Var x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Square root; the derivative at 0 is taken as 0.
inline Var sqrt(Var x) {
  return detail::unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

/// Clamp to [lo, hi]; gradient passes only inside the interval.
inline Var clamp(Var x, double lo, double hi) {
  detail::note_pieces(x.value(), [=](double v) { return v < lo ? 0u : v > hi ? 2u : 1u; });
  return detail::unary(
      x, [=](double v) { return std::clamp(v, lo, hi); },
      [=](double v, double) { return v >= lo && v <= hi ? 1.0 : 0.0; });
}

/// 1 / max(x, floor); zero gradient where the floor is active.
inline Var reciprocal_clamped(Var x, double floor) {
  detail::note_pieces(x.value(), [=](double v) { return v > floor ? 1u : 0u; });
  return detail::unary(
      x, [=](double v) { return 1.0 / std::max(v, floor); },
      [=](double v, double) { return v > floor ? -1.0 / (v * v) : 0.0; });
}

enum class Axis {
  rows,  // normalize each row (reduce over columns)
  cols,  // normalize each column (reduce over rows)
};

/// Shift-stabilized softmax along `axis`.
inline Var softmax(Var x, Axis axis = Axis::rows) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  const bool by_row = axis == Axis::rows;
  const std::size_t groups = by_row ? xv.rows() : xv.cols();
  const std::size_t len = by_row ? xv.cols() : xv.rows();
  auto at = [by_row](auto& m, std::size_t g, std::size_t i) -> decltype(auto) {
    return by_row ? m(g, i) : m(i, g);
  };
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, at(xv, g, i));
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += (at(out, g, i) = std::exp(at(xv, g, i) - mx));
    for (std::size_t i = 0; i < len; ++i) at(out, g, i) /= s;
  }
  return x.tape()->record(std::move(out), {x}, [x, by_row, groups, len, at](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(x.id());
    for (std::size_t k = 0; k < groups; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += at(g, k, i) * at(y, k, i);
      for (std::size_t i = 0; i < len; ++i) at(gx, k, i) += at(y, k, i) * (at(g, k, i) - dot);
    }
    (void)by_row;
  });
}

inline Var row_softmax(Var x) { return softmax(x, Axis::rows); }

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-row normalization to zero mean / unit variance, then gain and bias
/// (both 1 x cols).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEpsilon) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw ShapeError("layer_norm: gain/bias " + gain.value().shape_string() + "/" +
                     bias.value().shape_string() + " do not match " + xv.shape_string());
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(n, c);
  Tensor normalized(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normalized(i, j) = (xv(i, j) - mean) * inv_std[i];
      out(i, j) = normalized(i, j) * gv(0, j) + bv(0, j);
    }
  }
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gain);
        const std::size_t n = g.rows(), c = g.cols();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              if (t.requires_grad(gain)) t.grad(gain.id())(0, j) += g(i, j) * normalized(i, j);
              if (t.requires_grad(bias)) t.grad(bias.id())(0, j) += g(i, j);
            }
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad(x.id());
        std::vector<double> dn(c);
        for (std::size_t i = 0; i < n; ++i) {
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dn[j] = g(i, j) * gv(0, j);
            mean_dn += dn[j];
            mean_dn_n += dn[j] * normalized(i, j);
          }
          mean_dn /= static_cast<double>(c);
          mean_dn_n /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            gx(i, j) += inv_std[i] * (dn[j] - mean_dn - normalized(i, j) * mean_dn_n);
          }
        }
      });
}

/// Sum of all elements, as a 1x1 tensor.
inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x}, [x](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const double g = t.grad(self)[0];
    for (double& v : t.grad(x.id()).values()) v += g;
  });
}

/// Column sums as a 1 x cols row.
inline Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(0, j) += xv(i, j);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(x)) return;
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g(0, j);
  });
}

/// Rows of `table` selected by `index`.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
  const Tensor& tv = table.value();
  Tensor out(index.size(), tv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                       tv.shape_string());
    }
    std::copy(tv.data() + index[i] * tv.cols(), tv.data() + (index[i] + 1) * tv.cols(),
              out.data() + i * tv.cols());
  }
  return table.tape()->record(std::move(out), {table},
                              [table, index = std::move(index)](Tape& t, std::uint32_t self) {
                                if (!t.requires_grad(table)) return;
                                const Tensor& g = t.grad(self);
                                Tensor& gt = t.grad(table.id());
                                const std::size_t c = g.cols();
                                for (std::size_t i = 0; i < index.size(); ++i)
                                  for (std::size_t j = 0; j < c; ++j) gt(index[i], j) += g(i, j);
                              });
}

/// Elementwise minimum of same-shaped operands; the gradient goes to the
/// first operand attaining the minimum.
inline Var min_of(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("min_of: no operands");
  for (const Var& v : xs) detail::require_same_shape(xs[0].value(), v.value(), "min_of");
  const std::size_t n = xs[0].value().size();
  Tensor out = xs[0].value();
  std::vector<std::uint32_t> arg(n, 0);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const Tensor& v = xs[k].value();
    for (std::size_t i = 0; i < n; ++i) {
      if (v[i] < out[i]) {
        out[i] = v[i];
        arg[i] = static_cast<std::uint32_t>(k);
      }
    }
  }
  if (active_branch_signature) {
    for (std::uint32_t a : arg) active_branch_signature->note(a);
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return xs[0].tape()->record_span(std::move(out), ins,
                                   [ins, arg = std::move(arg)](Tape& t, std::uint32_t self) {
                                     const Tensor& g = t.grad(self);
                                     for (std::size_t i = 0; i < g.size(); ++i) {
                                       const Var& src = ins[arg[i]];
                                       if (t.requires_grad(src)) t.grad(src.id())[i] += g[i];
                                     }
                                   });
}

/// Smooth minimum -tau * log(sum_k exp(-x_k / tau)), elementwise.
inline Var soft_min(std::span<const Var> xs, double tau) {
  if (xs.empty()) throw ShapeError("soft_min: no operands");
  for (const Var& v : xs) detail::require_same_shape(xs[0].value(), v.value(), "soft_min");
  const std::size_t n = xs[0].value().size();
  Tensor out(xs[0].rows(), xs[0].cols());
  std::vector<double> weights(n * xs.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mn = std::numeric_limits<double>::infinity();
    for (const Var& v : xs) mn = std::min(mn, v.value()[i]);
    double s = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      weights[k * n + i] = std::exp(-(xs[k].value()[i] - mn) / tau);
      s += weights[k * n + i];
    }
    for (std::size_t k = 0; k < xs.size(); ++k) weights[k * n + i] /= s;
    out[i] = mn - tau * std::log(s);
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return xs[0].tape()->record_span(
      std::move(out), ins, [ins, n, weights = std::move(weights)](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ins.size(); ++k) {
          if (!t.requires_grad(ins[k])) continue;
          Tensor& gk = t.grad(ins[k].id());
          for (std::size_t i = 0; i < n; ++i) gk[i] += g[i] * weights[k * n + i];
        }
      });
}

/// Softmax across same-shaped operands at every position. Result is the
/// row-stack of the m weight tensors.
inline Var softmax_across(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("softmax_across: no operands");
  for (const Var& v : xs) detail::require_same_shape(xs[0].value(), v.value(), "softmax_across");
  const std::size_t n = xs[0].value().size();
  const std::size_t m = xs.size();
  Tensor out(m * xs[0].rows(), xs[0].cols());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const Var& v : xs) mx = std::max(mx, v.value()[i]);
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += (out[k * n + i] = std::exp(xs[k].value()[i] - mx));
    for (std::size_t k = 0; k < m; ++k) out[k * n + i] /= s;
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return xs[0].tape()->record_span(std::move(out), ins, [ins, n](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    const std::size_t m = ins.size();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < m; ++k) dot += g[k * n + i] * y[k * n + i];
      for (std::size_t k = 0; k < m; ++k) {
        if (t.requires_grad(ins[k])) t.grad(ins[k].id())[i] += y[k * n + i] * (g[k * n + i] - dot);
      }
    }
  });
}

/// Sum over `targets` of -log softmax(scores)[target], for a 1 x V score row.
inline Var nll_logsumexp(Var scores, std::vector<std::size_t> targets) {
  const Tensor& s = scores.value();
  if (s.rows() != 1) throw ShapeError("nll_logsumexp: scores must be a row, got " + s.shape_string());
  for (std::size_t tgt : targets) {
    if (tgt >= s.cols()) throw ShapeError("nll_logsumexp: target out of range");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : s.values()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : s.values()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  double loss = 0.0;
  for (std::size_t tgt : targets) loss += lse - s[tgt];
  return scores.tape()->record(
      Tensor::scalar(loss), {scores}, [scores, lse, targets = std::move(targets)](Tape& t, std::uint32_t self) {
        if (!t.requires_grad(scores)) return;
        const double g = t.grad(self)[0];
        const Tensor& s = t.value(scores);
        Tensor& gs = t.grad(scores.id());
        const double m = static_cast<double>(targets.size());
        for (std::size_t i = 0; i < s.size(); ++i) gs[i] += g * m * std::exp(s[i] - lse);
        for (std::size_t tgt : targets) gs[tgt] -= g;
      });
}

/// softmax(Q K^T / scale) V, softmax over keys for each query row.
inline Var attention(Var q, Var k, Var v, double scale_divisor) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention: incompatible Q" + q.value().shape_string() + " K" +
                     k.value().shape_string() + " V" + v.value().shape_string());
  }
  Var scores = scale(matmul(q, transpose(k)), 1.0 / scale_divisor);
  return matmul(row_softmax(scores), v);
}

// ---------------------------------------------------------------------------
// Gradient storage shared by training and gradient checks

/// One gradient tensor per registered parameter, indexed by Parameter::index.
class GradStore {
 public:
  GradStore() = default;
  explicit GradStore(std::span<const Parameter* const> params) {
    grads_.reserve(params.size());
    for (const Parameter* p : params) grads_.emplace_back(p->value.rows(), p->value.cols());
  }

  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }

  void zero() {
    for (auto& g : grads_) g.fill(0.0);
  }

  GradStore& operator+=(const GradStore& o) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += o.grads_[i];
    return *this;
  }

 private:
  std::vector<Tensor> grads_;
};

/// Maps parameters onto tape leaves, once per tape, with gradients routed
/// into an optional GradStore.
class Binder {
 public:
  Binder(Tape& tape, GradStore* grads) : tape_(tape), grads_(grads) {}

  Tape& tape() const { return tape_; }

  Var operator()(const Parameter& p) {
    if (p.index >= bound_.size()) bound_.resize(p.index + 1);
    Var& slot = bound_[p.index];
    if (!slot.valid()) {
      Tensor* sink = grads_ && tape_.recording() ? &(*grads_)[p.index] : nullptr;
      slot = tape_.leaf(p.value, sink);
    }
    return slot;
  }

  /// Routes `p` to an existing node instead of a fresh leaf.
  void bind(const Parameter& p, Var v) {
    if (p.index >= bound_.size()) bound_.resize(p.index + 1);
    bound_[p.index] = v;
  }

  Var constant(Tensor t) { return tape_.constant(std::move(t)); }

 private:
  Tape& tape_;
  GradStore* grads_;
  std::vector<Var> bound_;
};

}  // namespace gmmr
