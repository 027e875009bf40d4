#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bikd/error.hpp"

namespace bikd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << '}';
  return os.str();
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that recorded the producing op

  void accumulate(const std::vector<T>& g) {
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

// Shared low-level kernels. The tape ops and the plain (no-tape) forward
// paths both call these, so the two routes produce bitwise-equal values.
template <class T>
void kernel_matmul(const T* a, const T* b, T* out, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = T(0);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      T* orow = out + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// Row-wise log softmax of x / temperature with max subtraction.
template <class T>
void kernel_log_softmax(const T* x, T* out, std::size_t rows, std::size_t cols,
                        T temperature) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = out + r * cols;
    T mx = xr[0] / temperature;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c] / temperature);
    T sum = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = xr[c] / temperature - mx;
      sum += std::exp(yr[c]);
    }
    const T lse = std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) yr[c] -= lse;
  }
}

}  // namespace detail

// Dense n-dimensional array participating in reverse-mode differentiation.
// A Tensor is a cheap shared handle; copying it aliases the same storage.
template <class T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return leaf({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& mutable_values() { return node_->value; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item: tensor with shape " + shape_str(shape()) +
                          " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient values; zeros if backward never reached this tensor.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() const { node_->grad.clear(); }

  // Value copy with no graph history; gradients never flow through it.
  Tensor detach() const { return leaf(node_->shape, node_->value, false); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;

  template <class U>
  friend class Tape;
};

// Ordered record of primitive operations. Creation order is a topological
// order of the graph, so backward simply replays the record in reverse.
// While frozen (recording off) ops still compute values but record nothing,
// which detaches every tensor created in that region from its ancestors.
// Single-threaded: no two threads may record onto the same tape. Tensors
// without tape attachments are immutable values safe to share.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool flag) { recording_ = flag; }
  std::size_t num_ops() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Backpropagate from a scalar loss. Leaf gradients accumulate additively
  // across calls; interior gradients are rebuilt per call.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss has shape " + shape_str(loss.shape()) +
                          ", expected a scalar");
    if (loss.node_->producer == nullptr) {
      // Constant or leaf scalar: nothing upstream to visit.
      if (loss.requires_grad()) loss.node_->accumulate({T(1)});
      return;
    }
    if (loss.node_->producer != this)
      throw ContractError("backward: loss was not produced on this tape");
    for (auto& op : ops_) op.out->grad.clear();
    loss.node_->grad.assign(1, T(1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->backprop(it->out->grad);
    }
  }

  // ---- primitive operations ----

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    detail::kernel_matmul(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto an = a.node_, bn = b.node_;
    return record({m, n}, std::move(out), {a, b},
                  [an, bn, m, k, n](const std::vector<T>& g) {
                    if (an->requires_grad) {
                      // da = g . b^T
                      std::vector<T> da(m * k, T(0));
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                          T acc = T(0);
                          for (std::size_t j = 0; j < n; ++j)
                            acc += g[i * n + j] * bn->value[p * n + j];
                          da[i * k + p] = acc;
                        }
                      an->accumulate(da);
                    }
                    if (bn->requires_grad) {
                      // db = a^T . g
                      std::vector<T> db(k * n, T(0));
                      for (std::size_t p = 0; p < k; ++p)
                        for (std::size_t i = 0; i < m; ++i) {
                          const T av = an->value[i * k + p];
                          if (av == T(0)) continue;
                          for (std::size_t j = 0; j < n; ++j)
                            db[p * n + j] += av * g[i * n + j];
                        }
                      bn->accumulate(db);
                    }
                  });
  }

  // y = A^T x for A {rows, cols}, x {rows} -> y {cols}.
  Tensor<T> matvec_t(const Tensor<T>& a, const Tensor<T>& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(0) != x.dim(0))
      throw ShapeError("matvec_t: incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(x.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(cols, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const T xv = x.values()[r];
      if (xv == T(0)) continue;
      const T* arow = a.values().data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) out[c] += xv * arow[c];
    }
    auto an = a.node_, xn = x.node_;
    return record({cols}, std::move(out), {a, x},
                  [an, xn, rows, cols](const std::vector<T>& g) {
                    if (xn->requires_grad) {
                      std::vector<T> dx(rows, T(0));
                      for (std::size_t r = 0; r < rows; ++r) {
                        T acc = T(0);
                        const T* arow = an->value.data() + r * cols;
                        for (std::size_t c = 0; c < cols; ++c) acc += arow[c] * g[c];
                        dx[r] = acc;
                      }
                      xn->accumulate(dx);
                    }
                    if (an->requires_grad) {
                      std::vector<T> da(rows * cols);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                          da[r * cols + c] = xn->value[r] * g[c];
                      an->accumulate(da);
                    }
                  });
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise("add", a, b, [](T x, T y) { return x + y; },
                              [](const std::vector<T>& g, std::size_t i) { return g[i]; },
                              [](const std::vector<T>& g, std::size_t i) { return g[i]; });
  }

  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_elementwise("sub", a, b, [](T x, T y) { return x - y; },
                              [](const std::vector<T>& g, std::size_t i) { return g[i]; },
                              [](const std::vector<T>& g, std::size_t i) { return -g[i]; });
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
      throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = a.values()[i] * b.values()[i];
    auto an = a.node_, bn = b.node_;
    return record(a.shape(), std::move(out), {a, b},
                  [an, bn](const std::vector<T>& g) {
                    if (an->requires_grad) {
                      std::vector<T> da(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i)
                        da[i] = g[i] * bn->value[i];
                      an->accumulate(da);
                    }
                    if (bn->requires_grad) {
                      std::vector<T> db(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i)
                        db[i] = g[i] * an->value[i];
                      bn->accumulate(db);
                    }
                  });
  }

  Tensor<T> relu(const Tensor<T>& x) {
    return unary_elementwise(x, [](T v) { return v > T(0) ? v : T(0); },
                             [](T v, T /*y*/) { return v > T(0) ? T(1) : T(0); });
  }

  Tensor<T> tanh(const Tensor<T>& x) {
    return unary_elementwise(x, [](T v) { return std::tanh(v); },
                             [](T /*v*/, T y) { return T(1) - y * y; });
  }

  Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_elementwise(
        x,
        [](T v) {
          if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
          const T e = std::exp(v);
          return e / (T(1) + e);
        },
        [](T /*v*/, T y) { return y * (T(1) - y); });
  }

  Tensor<T> scale(const Tensor<T>& x, T c) {
    auto xn = x.node_;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * c;
    return record(x.shape(), std::move(out), {x},
                  [xn, c](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * c;
                    xn->accumulate(dx);
                  });
  }

  // Clamp with pass-through gradient strictly inside [lo, hi].
  Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    auto xn = x.node_;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::min(std::max(x.values()[i], lo), hi);
    return record(x.shape(), std::move(out), {x},
                  [xn, lo, hi](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const T v = xn->value[i];
                      dx[i] = (v > lo && v < hi) ? g[i] : T(0);
                    }
                    xn->accumulate(dx);
                  });
  }

  // x {B,C} + v {C}, v broadcast across rows.
  Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
      throw ShapeError("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                       " and " + shape_str(v.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = x.values()[r * cols + c] + v.values()[c];
    auto xn = x.node_, vn = v.node_;
    return record(x.shape(), std::move(out), {x, v},
                  [xn, vn, rows, cols](const std::vector<T>& g) {
                    if (xn->requires_grad) xn->accumulate(g);
                    if (vn->requires_grad) {
                      std::vector<T> dv(cols, T(0));
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                          dv[c] += g[r * cols + c];
                      vn->accumulate(dv);
                    }
                  });
  }

  // m {B,C} with row i scaled by w[i].
  Tensor<T> scale_rows(const Tensor<T>& m, const Tensor<T>& w) {
    if (m.rank() != 2 || w.rank() != 1 || m.dim(0) != w.dim(0))
      throw ShapeError("scale_rows: incompatible shapes " + shape_str(m.shape()) +
                       " and " + shape_str(w.shape()));
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = m.values()[r * cols + c] * w.values()[r];
    auto mn = m.node_, wn = w.node_;
    return record(m.shape(), std::move(out), {m, w},
                  [mn, wn, rows, cols](const std::vector<T>& g) {
                    if (mn->requires_grad) {
                      std::vector<T> dm(rows * cols);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                          dm[r * cols + c] = g[r * cols + c] * wn->value[r];
                      mn->accumulate(dm);
                    }
                    if (wn->requires_grad) {
                      std::vector<T> dw(rows, T(0));
                      for (std::size_t r = 0; r < rows; ++r) {
                        T acc = T(0);
                        for (std::size_t c = 0; c < cols; ++c)
                          acc += g[r * cols + c] * mn->value[r * cols + c];
                        dw[r] = acc;
                      }
                      wn->accumulate(dw);
                    }
                  });
  }

  // Row-wise log softmax of logits / temperature.
  Tensor<T> log_softmax(const Tensor<T>& logits, T temperature) {
    if (logits.rank() != 2)
      throw ShapeError("log_softmax: expected rank-2 logits, got " +
                       shape_str(logits.shape()));
    if (!(temperature > T(0)))
      throw ValueError("log_softmax: temperature must be positive, got " +
                       std::to_string(static_cast<double>(temperature)));
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<T> out(rows * cols);
    detail::kernel_log_softmax(logits.values().data(), out.data(), rows, cols,
                               temperature);
    auto xn = logits.node_;
    auto on = std::make_shared<std::vector<T>>(out);  // keep output for backward
    return record({rows, cols}, std::move(out), {logits},
                  [xn, on, rows, cols, temperature](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(rows * cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T gsum = T(0);
                      for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
                      for (std::size_t c = 0; c < cols; ++c) {
                        const T p = std::exp((*on)[r * cols + c]);
                        dx[r * cols + c] = (g[r * cols + c] - p * gsum) / temperature;
                      }
                    }
                    xn->accumulate(dx);
                  });
  }

  Tensor<T> row_sum(const Tensor<T>& x) {
    if (x.rank() != 2)
      throw ShapeError("row_sum: expected rank-2 input, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(rows, T(0));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r] += x.values()[r * cols + c];
    auto xn = x.node_;
    return record({rows}, std::move(out), {x},
                  [xn, rows, cols](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(rows * cols);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = g[r];
                    xn->accumulate(dx);
                  });
  }

  Tensor<T> col_sum(const Tensor<T>& x) {
    if (x.rank() != 2)
      throw ShapeError("col_sum: expected rank-2 input, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(cols, T(0));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[c] += x.values()[r * cols + c];
    auto xn = x.node_;
    return record({cols}, std::move(out), {x},
                  [xn, rows, cols](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(rows * cols);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = g[c];
                    xn->accumulate(dx);
                  });
  }

  // Sequential index-order reduction, fixed for reproducibility.
  Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    auto xn = x.node_;
    return record({1}, {acc}, {x}, [xn](const std::vector<T>& g) {
      if (!xn->requires_grad) return;
      xn->accumulate(std::vector<T>(xn->value.size(), g[0]));
    });
  }

  Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    return scale(sum(x), inv);
  }

  Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
      throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                       shape_str(new_shape));
    auto xn = x.node_;
    return record(std::move(new_shape), x.values(), {x},
                  [xn](const std::vector<T>& g) {
                    if (xn->requires_grad) xn->accumulate(g);
                  });
  }

  // Column j of a {B,C} matrix as a {B} vector.
  Tensor<T> column(const Tensor<T>& x, std::size_t j) {
    if (x.rank() != 2 || j >= x.dim(1))
      throw ShapeError("column: index " + std::to_string(j) + " out of range for " +
                       shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = x.values()[r * cols + j];
    auto xn = x.node_;
    return record({rows}, std::move(out), {x},
                  [xn, rows, cols, j](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(rows * cols, T(0));
                    for (std::size_t r = 0; r < rows; ++r) dx[r * cols + j] = g[r];
                    xn->accumulate(dx);
                  });
  }

  // Composite op with caller-supplied values and backward. `backprop`
  // receives the output gradient and must accumulate into the inputs.
  Tensor<T> custom(Shape shape, std::vector<T> values,
                   std::initializer_list<Tensor<T>> inputs,
                   std::function<void(const std::vector<T>&)> backprop) {
    return record(std::move(shape), std::move(values), inputs, std::move(backprop));
  }

  // 2D cross-correlation, stride 1, no padding.
  // x {B,Ci,H,W}, kernel {Co,Ci,kh,kw}, bias {Co} -> {B,Co,H-kh+1,W-kw+1}.
  Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    if (x.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1 ||
        x.dim(1) != kernel.dim(1) || kernel.dim(0) != bias.dim(0) ||
        kernel.dim(2) > x.dim(2) || kernel.dim(3) > x.dim(3))
      throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + ", " +
                       shape_str(kernel.shape()) + ", " + shape_str(bias.shape()));
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const std::size_t Ho = H - kh + 1, Wo = W - kw + 1;
    std::vector<T> out(B * Co * Ho * Wo);
    auto xat = [&](std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
      return x.values()[((b * Ci + c) * H + i) * W + j];
    };
    auto kat = [&](std::size_t o, std::size_t c, std::size_t u, std::size_t v) {
      return kernel.values()[((o * Ci + c) * kh + u) * kw + v];
    };
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            T acc = bias.values()[o];
            for (std::size_t c = 0; c < Ci; ++c)
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v)
                  acc += xat(b, c, i + u, j + v) * kat(o, c, u, v);
            out[((b * Co + o) * Ho + i) * Wo + j] = acc;
          }
    auto xn = x.node_, kn = kernel.node_, bn = bias.node_;
    return record(
        {B, Co, Ho, Wo}, std::move(out), {x, kernel, bias},
        [xn, kn, bn, B, Ci, H, W, Co, kh, kw, Ho, Wo](const std::vector<T>& g) {
          auto gat = [&](std::size_t b, std::size_t o, std::size_t i, std::size_t j) {
            return g[((b * Co + o) * Ho + i) * Wo + j];
          };
          if (xn->requires_grad) {
            std::vector<T> dx(B * Ci * H * W, T(0));
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t o = 0; o < Co; ++o)
                for (std::size_t i = 0; i < Ho; ++i)
                  for (std::size_t j = 0; j < Wo; ++j) {
                    const T gv = gat(b, o, i, j);
                    if (gv == T(0)) continue;
                    for (std::size_t c = 0; c < Ci; ++c)
                      for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v)
                          dx[((b * Ci + c) * H + i + u) * W + j + v] +=
                              gv * kn->value[((o * Ci + c) * kh + u) * kw + v];
                  }
            xn->accumulate(dx);
          }
          if (kn->requires_grad) {
            std::vector<T> dk(Co * Ci * kh * kw, T(0));
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t o = 0; o < Co; ++o)
                for (std::size_t i = 0; i < Ho; ++i)
                  for (std::size_t j = 0; j < Wo; ++j) {
                    const T gv = gat(b, o, i, j);
                    if (gv == T(0)) continue;
                    for (std::size_t c = 0; c < Ci; ++c)
                      for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v)
                          dk[((o * Ci + c) * kh + u) * kw + v] +=
                              gv * xn->value[((b * Ci + c) * H + i + u) * W + j + v];
                  }
            kn->accumulate(dk);
          }
          if (bn->requires_grad) {
            std::vector<T> db(Co, T(0));
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t o = 0; o < Co; ++o)
                for (std::size_t i = 0; i < Ho; ++i)
                  for (std::size_t j = 0; j < Wo; ++j) db[o] += gat(b, o, i, j);
            bn->accumulate(db);
          }
        });
  }

  // 2x2 max pooling, stride 2; H and W must be even. Ties resolve to the
  // first element in row-major scan order.
  Tensor<T> maxpool2(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
      throw ShapeError("maxpool2: expected {B,C,even,even}, got " +
                       shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(B * C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(B * C * Ho * Wo);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            std::size_t best = ((b * C + c) * H + 2 * i) * W + 2 * j;
            T best_v = x.values()[best];
            const std::size_t cand[3] = {
                ((b * C + c) * H + 2 * i) * W + 2 * j + 1,
                ((b * C + c) * H + 2 * i + 1) * W + 2 * j,
                ((b * C + c) * H + 2 * i + 1) * W + 2 * j + 1};
            for (std::size_t idx : cand)
              if (x.values()[idx] > best_v) {
                best = idx;
                best_v = x.values()[idx];
              }
            const std::size_t o = ((b * C + c) * Ho + i) * Wo + j;
            out[o] = best_v;
            (*argmax)[o] = best;
          }
    auto xn = x.node_;
    return record({B, C, Ho, Wo}, std::move(out), {x},
                  [xn, argmax](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(xn->value.size(), T(0));
                    for (std::size_t o = 0; o < g.size(); ++o)
                      dx[(*argmax)[o]] += g[o];
                    xn->accumulate(dx);
                  });
  }

 private:
  struct OpRecord {
    std::shared_ptr<detail::TensorNode<T>> out;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> inputs;  // keeps graph alive
    std::function<void(const std::vector<T>&)> backprop;
  };

  template <class Backprop>
  Tensor<T> record(Shape shape, std::vector<T> values,
                   std::initializer_list<Tensor<T>> inputs, Backprop backprop) {
    Tensor<T> out = Tensor<T>::leaf(std::move(shape), std::move(values), false);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (recording_ && needs) {
      out.node_->requires_grad = true;
      out.node_->producer = this;
      OpRecord rec;
      rec.out = out.node_;
      for (const auto& in : inputs) rec.inputs.push_back(in.node_);
      rec.backprop = std::move(backprop);
      ops_.push_back(std::move(rec));
    }
    return out;
  }

  template <class Fwd, class DA, class DB>
  Tensor<T> binary_elementwise(const char* name, const Tensor<T>& a,
                               const Tensor<T>& b, Fwd fwd, DA da_of, DB db_of) {
    if (a.shape() != b.shape())
      throw ShapeError(std::string(name) + ": shape mismatch " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = fwd(a.values()[i], b.values()[i]);
    auto an = a.node_, bn = b.node_;
    return record(a.shape(), std::move(out), {a, b},
                  [an, bn, da_of, db_of](const std::vector<T>& g) {
                    if (an->requires_grad) {
                      std::vector<T> da(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] = da_of(g, i);
                      an->accumulate(da);
                    }
                    if (bn->requires_grad) {
                      std::vector<T> db(g.size());
                      for (std::size_t i = 0; i < g.size(); ++i) db[i] = db_of(g, i);
                      bn->accumulate(db);
                    }
                  });
  }

  template <class Fwd, class Deriv>
  Tensor<T> unary_elementwise(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.values()[i]);
    auto xn = x.node_;
    auto on = std::make_shared<std::vector<T>>(out);
    return record(x.shape(), std::move(out), {x},
                  [xn, on, deriv](const std::vector<T>& g) {
                    if (!xn->requires_grad) return;
                    std::vector<T> dx(g.size());
                    for (std::size_t i = 0; i < g.size(); ++i)
                      dx[i] = g[i] * deriv(xn->value[i], (*on)[i]);
                    xn->accumulate(dx);
                  });
  }

  std::vector<OpRecord> ops_;
  bool recording_ = true;
};

// RAII guard: ops executed in scope compute values but record no gradients,
// detaching their outputs from the graph.
template <class T>
class FrozenTape {
 public:
  explicit FrozenTape(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~FrozenTape() { tape_.set_recording(prev_); }
  FrozenTape(const FrozenTape&) = delete;
  FrozenTape& operator=(const FrozenTape&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace bikd
