#pragma once

// Tape-based reverse-mode automatic differentiation over dense double tensors.
//
// A Tape is activated for the current thread on construction and deactivated
// on destruction. Ops whose inputs participate in differentiation record a
// node on the active tape; with no active tape they only compute values.
// Tapes are rebuilt every iteration (define-by-run).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "imr/core.hpp"

namespace imr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

class Tensor;
class Tape;
class Gradients;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool grad_enabled = false;
};

// grad_out is the gradient of the node output; grad_in has one span per input,
// empty for inputs that do not participate in differentiation.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  BackwardFn backward;
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

}  // namespace detail

inline Tensor record(std::string_view op, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                     detail::BackwardFn backward);

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool grad_enabled = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (ad::numel(shape) != data.size()) {
      throw DimensionError(imr::detail::concat("tensor: shape ", to_string(shape), " holds ", ad::numel(shape),
                                          " values but ", data.size(), " were given"));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->grad_enabled = grad_enabled;
  }

  static Tensor full(Shape shape, double value, bool grad_enabled = false) {
    std::vector<double> data(ad::numel(shape), value);
    return Tensor(std::move(shape), std::move(data), grad_enabled);
  }
  static Tensor zeros(Shape shape, bool grad_enabled = false) {
    return full(std::move(shape), 0.0, grad_enabled);
  }
  static Tensor ones(Shape shape, bool grad_enabled = false) {
    return full(std::move(shape), 1.0, grad_enabled);
  }
  static Tensor scalar(double value, bool grad_enabled = false) {
    return Tensor({}, {value}, grad_enabled);
  }
  static Tensor vector(std::vector<double> values, bool grad_enabled = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), grad_enabled);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access, intended for leaves (parameters) between tapes.
  std::span<double> mutable_data() { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    if (numel() != 1) {
      throw DimensionError(imr::detail::concat("item: tensor of shape ", to_string(shape()), " is not a scalar"));
    }
    return impl_->data[0];
  }

  bool grad_enabled() const { return impl_ && impl_->grad_enabled; }
  void set_grad_enabled(bool on) { impl_->grad_enabled = on; }

  // Copy of the values with no gradient participation.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }
  Tensor clone(bool grad_enabled) const { return Tensor(shape(), impl_->data, grad_enabled); }

  const void* handle() const { return impl_.get(); }

 private:
  friend Tensor record(std::string_view, Shape, std::vector<double>, const std::vector<Tensor>&,
                       detail::BackwardFn);
  friend class Gradients;
  friend class Tape;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Gradient map produced by Tape::backward. Tensors never reached by the
// backward pass report zero gradients.
class Gradients {
 public:
  Tensor of(const Tensor& t) const {
    auto it = grads_.find(t.impl_.get());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), it->second);
  }
  std::span<const double> raw(const Tensor& t) const {
    auto it = grads_.find(t.impl_.get());
    if (it == grads_.end()) return {};
    return it->second;
  }
  bool reached(const Tensor& t) const { return grads_.count(t.impl_.get()) != 0; }

 private:
  friend class Tape;
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads_;
};

class Tape {
 public:
  Tape() : previous_(detail::active_tape()) { detail::active_tape() = this; }
  ~Tape() { detail::active_tape() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape(); }

  std::size_t size() const { return nodes_.size(); }

  void push(detail::Node node) { nodes_.push_back(std::move(node)); }

  // Reverse sweep in strict reverse append order. Gradients of a tensor with
  // several consumers are the sum of the consumers' contributions.
  Gradients backward(const Tensor& loss) const {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError(imr::detail::concat("backward: loss must be a scalar, got shape ",
                                         loss.defined() ? to_string(loss.shape()) : "<undefined>"));
    }
    Gradients result;
    if (!loss.grad_enabled()) return result;
    auto& g = result.grads_;
    g[loss.impl_.get()] = {1.0};
    std::vector<std::span<double>> grad_in;
    for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
      auto it = g.find(node->output.get());
      if (it == g.end()) continue;
      const std::vector<double>& grad_out = it->second;
      grad_in.clear();
      for (const auto& input : node->inputs) {
        if (!input->grad_enabled) {
          grad_in.emplace_back();
          continue;
        }
        auto& buf = g[input.get()];
        if (buf.empty()) buf.assign(input->data.size(), 0.0);
        grad_in.emplace_back(buf);
      }
      node->backward(grad_out, grad_in);
    }
    return result;
  }

 private:
  std::vector<detail::Node> nodes_;
  Tape* previous_;
};

// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradGuard() { detail::active_tape() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

// Builds an op result and records a node when any input has gradients
// enabled and a tape is active. This is also the extension point for fused
// ops defined in other modules.
inline Tensor record(std::string_view op, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                     detail::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  Tape* tape = Tape::active();
  if (!tape) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.grad_enabled();
  if (!any) return out;
  out.impl_->grad_enabled = true;
  detail::Node node{op, {}, out.impl_, std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.impl_);
  tape->push(std::move(node));
  return out;
}

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(imr::detail::concat(op, ": shapes ", to_string(a), " and ", to_string(b), " do not broadcast"));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// For each element of `out`, the flat index of the element of `in` it reads.
inline std::vector<std::size_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis = rank - 1 - k;
    const std::size_t extent = in[in.size() - 1 - k];
    in_stride[axis] = extent == 1 ? 0 : stride;
    stride *= extent;
  }
  std::vector<std::size_t> map(numel(out));
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t axis = 0; axis < rank; ++axis) off += idx[axis] * in_stride[axis];
    map[flat] = off;
    for (std::size_t axis = rank; axis-- > 0;) {
      if (++idx[axis] < out[axis]) break;
      idx[axis] = 0;
    }
  }
  return map;
}

// How a broadcast operand is indexed from a flat output index: directly,
// cyclically (its shape is a suffix of the output shape), or via a map.
struct BroadcastIndex {
  enum class Mode { identity, cyclic, mapped } mode = Mode::identity;
  std::size_t period = 1;
  std::vector<std::size_t> map;

  static BroadcastIndex make(const Shape& in, const Shape& out) {
    BroadcastIndex bi;
    if (in == out) return bi;
    const bool suffix = in.size() <= out.size() && std::equal(in.rbegin(), in.rend(), out.rbegin());
    if (suffix) {
      bi.mode = Mode::cyclic;
      bi.period = numel(in);
      return bi;
    }
    bi.mode = Mode::mapped;
    bi.map = broadcast_map(in, out);
    return bi;
  }
  std::size_t operator()(std::size_t i) const {
    switch (mode) {
      case Mode::identity:
        return i;
      case Mode::cyclic:
        return i % period;
      default:
        return map[i];
    }
  }
};

// Elementwise binary op with numpy-style broadcasting. `da`/`db` return the
// partial derivatives of f at (x, y).
template <typename F, typename DA, typename DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shapes(a.shape(), b.shape(), op);
  const std::size_t n = numel(out_shape);
  BroadcastIndex ia = BroadcastIndex::make(a.shape(), out_shape);
  BroadcastIndex ib = BroadcastIndex::make(b.shape(), out_shape);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  if (ia.mode == BroadcastIndex::Mode::identity && ib.mode == BroadcastIndex::Mode::identity) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ia(i)], bv[ib(i)]);
  }
  return record(op, out_shape, std::move(out), {a, b},
                [a, b, ia = std::move(ia), ib = std::move(ib), da, db](std::span<const double> g,
                                                                       std::span<const std::span<double>> gin) {
                  const auto av = a.data();
                  const auto bv = b.data();
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t ja = ia(i);
                    const std::size_t jb = ib(i);
                    if (!gin[0].empty()) gin[0][ja] += g[i] * da(av[ja], bv[jb]);
                    if (!gin[1].empty()) gin[1][jb] += g[i] * db(av[ja], bv[jb]);
                  }
                });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

namespace detail {

template <typename F, typename DF>
Tensor map_unary(std::string_view op, const Tensor& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  std::vector<double> saved = out;
  return record(op, x.shape(), std::move(out), {x},
                [x, y = std::move(saved), df](std::span<const double> g, std::span<const std::span<double>> gin) {
                  const auto xv = x.data();
                  for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * df(xv[i], y[i]);
                });
}

}  // namespace detail

inline Tensor scale(const Tensor& x, double c) {
  return detail::map_unary(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Tensor shift(const Tensor& x, double c) {
  return detail::map_unary(
      "shift", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor square(const Tensor& x) {
  return detail::map_unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor sqrt(const Tensor& x) {
  return detail::map_unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}
inline Tensor exp(const Tensor& x) {
  return detail::map_unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  return detail::map_unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor tanh(const Tensor& x) {
  return detail::map_unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::map_unary(
      "sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}
// Subgradient 0 at the origin.
inline Tensor relu(const Tensor& x) {
  return detail::map_unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor abs(const Tensor& x) {
  return detail::map_unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}
// Gradient passes only where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::map_unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return scale(a, 1.0 / c); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record("sum", {}, {s}, {x}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (double& v : gin[0]) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Sum over one axis; the axis is removed from the shape.
inline Tensor sum(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError(imr::detail::concat("sum: axis ", axis, " out of range for shape ", to_string(s)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> out(outer * inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < extent; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + k) * inner + i];
  return record("sum_axis", out_shape, std::move(out), {x},
                [outer, inner, extent](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < extent; ++k)
                      for (std::size_t i = 0; i < inner; ++i) gin[0][(o * extent + k) * inner + i] += g[o * inner + i];
                });
}

// Euclidean norm of all elements; gradient 0 at the origin.
inline Tensor l2norm(const Tensor& x) {
  double ss = 0.0;
  for (double v : x.data()) ss += v * v;
  const double n = std::sqrt(ss);
  return record("l2norm", {}, {n}, {x}, [x, n](std::span<const double> g, std::span<const std::span<double>> gin) {
    if (n == 0.0) return;
    const auto xv = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) gin[0][i] += g[0] * xv[i] / n;
  });
}

inline Tensor l1norm(const Tensor& x) { return sum(abs(x)); }

// Norm over the last axis: (..., k) -> (...). Gradient 0 for zero rows.
inline Tensor row_norms(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("row_norms: scalar input");
  const std::size_t k = x.shape().back();
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < k; ++j) ss += xv[r * k + j] * xv[r * k + j];
    out[r] = std::sqrt(ss);
  }
  std::vector<double> norms = out;
  return record("row_norms", out_shape, std::move(out), {x},
                [x, k, norms = std::move(norms)](std::span<const double> g, std::span<const std::span<double>> gin) {
                  const auto xv = x.data();
                  for (std::size_t r = 0; r < norms.size(); ++r) {
                    if (norms[r] == 0.0) continue;
                    const double c = g[r] / norms[r];
                    for (std::size_t j = 0; j < k; ++j) gin[0][r * k + j] += c * xv[r * k + j];
                  }
                });
}

// Rows scaled to unit norm over the last axis.
inline Tensor normalize_rows(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("normalize_rows: scalar input");
  const std::size_t k = x.shape().back();
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < k; ++j) ss += xv[r * k + j] * xv[r * k + j];
    norms[r] = std::sqrt(ss);
    if (norms[r] == 0.0) throw NumericError(imr::detail::concat("normalize_rows: row ", r, " has zero norm"));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xv[r * k + j] / norms[r];
  }
  std::vector<double> y = out;
  return record("normalize_rows", x.shape(), std::move(out), {x},
                [k, y = std::move(y), norms = std::move(norms)](std::span<const double> g,
                                                               std::span<const std::span<double>> gin) {
                  for (std::size_t r = 0; r < norms.size(); ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < k; ++j) dot += y[r * k + j] * g[r * k + j];
                    for (std::size_t j = 0; j < k; ++j)
                      gin[0][r * k + j] += (g[r * k + j] - y[r * k + j] * dot) / norms[r];
                  }
                });
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t k = x.shape().back();
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, xv[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += out[r * k + j] = std::exp(xv[r * k + j] - m);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
  }
  std::vector<double> y = out;
  return record("softmax", x.shape(), std::move(out), {x},
                [k, y = std::move(y)](std::span<const double> g, std::span<const std::span<double>> gin) {
                  const std::size_t rows = y.size() / k;
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < k; ++j) dot += y[r * k + j] * g[r * k + j];
                    for (std::size_t j = 0; j < k; ++j) gin[0][r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
                  }
                });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError(
        imr::detail::concat("matmul: incompatible shapes ", to_string(a.shape()), " and ", to_string(b.shape())));
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const RowMat>;
  using MMap = Eigen::Map<RowMat>;
  const Eigen::Index m = static_cast<Eigen::Index>(a.size(0));
  const Eigen::Index k = static_cast<Eigen::Index>(a.size(1));
  const Eigen::Index n = static_cast<Eigen::Index>(b.size(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  return record("matmul", {a.size(0), b.size(1)}, std::move(out), {a, b},
                [a, b, m, k, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                  CMap gm(g.data(), m, n);
                  if (!gin[0].empty()) MMap(gin[0].data(), m, k).noalias() += gm * CMap(b.data().data(), k, n).transpose();
                  if (!gin[1].empty()) MMap(gin[1].data(), k, n).noalias() += CMap(a.data().data(), m, k).transpose() * gm;
                });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError(
        imr::detail::concat("reshape: cannot view ", to_string(x.shape()), " as ", to_string(shape)));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return record("reshape", std::move(shape), std::move(out), {x},
                [](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError(imr::detail::concat("transpose: expected 2-D, got ", to_string(x.shape())));
  const std::size_t r = x.size(0), c = x.size(1);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return record("transpose", {c, r}, std::move(out), {x},
                [r, c](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
                });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape check = detail::broadcast_shapes(x.shape(), shape, "broadcast");
  if (check != shape) {
    throw DimensionError(
        imr::detail::concat("broadcast: cannot expand ", to_string(x.shape()), " to ", to_string(shape)));
  }
  auto map = detail::broadcast_map(x.shape(), shape);
  std::vector<double> out(map.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  return record("broadcast", shape, std::move(out), {x},
                [map = std::move(map)](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t i = 0; i < map.size(); ++i) gin[0][map[i]] += g[i];
                });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError(imr::detail::concat("concat: axis ", axis, " out of range"));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError(
          imr::detail::concat("concat: shape ", to_string(s), " incompatible with ", to_string(first), " on axis ", axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_chunk = out_shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[axis] * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_chunk + off));
    off += chunk;
  }
  std::vector<std::size_t> chunks;
  for (const auto& p : parts) chunks.push_back(p.shape()[axis] * inner);
  return record("concat", out_shape, std::move(out), parts,
                [outer, out_chunk, offsets = std::move(offsets), chunks = std::move(chunks)](
                    std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t p = 0; p < chunks.size(); ++p) {
                    if (gin[p].empty()) continue;
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t i = 0; i < chunks[p]; ++i)
                        gin[p][o * chunks[p] + i] += g[o * out_chunk + offsets[p] + i];
                  }
                });
}

// Stacks scalars (or same-shaped tensors) along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  std::vector<Tensor> reshaped;
  reshaped.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    reshaped.push_back(reshape(p, s));
  }
  return concat(reshaped, 0);
}

// Selects slices along axis 0 (rows may repeat).
inline Tensor index_select(const Tensor& x, std::vector<std::size_t> indices) {
  if (x.rank() == 0) throw DimensionError("index: scalar input");
  const std::size_t rows = x.size(0);
  const std::size_t inner = rows == 0 ? 0 : x.numel() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * inner);
  const auto xv = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw DimensionError(imr::detail::concat("index: row ", indices[i], " out of range for shape ", to_string(x.shape())));
    }
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[i] * inner), inner,
                out.begin() + static_cast<std::ptrdiff_t>(i * inner));
  }
  return record("index", out_shape, std::move(out), {x},
                [inner, indices = std::move(indices)](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t i = 0; i < indices.size(); ++i)
                    for (std::size_t j = 0; j < inner; ++j) gin[0][indices[i] * inner + j] += g[i * inner + j];
                });
}

// Contiguous range [start, start + count) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() == 0 || start + count > x.shape().back()) {
    throw DimensionError(imr::detail::concat("slice: range [", start, ",", start + count, ") invalid for shape ",
                                        to_string(x.shape())));
  }
  const std::size_t k = x.shape().back();
  const std::size_t rows = k == 0 ? 0 : x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = count;
  std::vector<double> out(rows * count);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < count; ++j) out[r * count + j] = xv[r * k + start + j];
  return record("slice", out_shape, std::move(out), {x},
                [rows, k, start, count](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < count; ++j) gin[0][r * k + start + j] += g[r * count + j];
                });
}

// Bilinear sampling of a grid (H, W) or (H, W, C) at real coordinates
// (N, 2) given as (column, row) in cell-index units: integer coordinates hit
// cell centres. Coordinates are clamped to the grid; the gradient with
// respect to a clamped coordinate is zero. Output (N) or (N, C).
inline Tensor bilinear_gather(const Tensor& grid, const Tensor& coords) {
  if ((grid.rank() != 2 && grid.rank() != 3) || coords.rank() != 2 || coords.size(1) != 2) {
    throw DimensionError(imr::detail::concat("bilinear_gather: bad shapes grid ", to_string(grid.shape()), " coords ",
                                        to_string(coords.shape())));
  }
  const std::size_t H = grid.size(0), W = grid.size(1);
  const std::size_t C = grid.rank() == 3 ? grid.size(2) : 1;
  const std::size_t N = coords.size(0);
  if (H == 0 || W == 0) throw DimensionError("bilinear_gather: empty grid");
  struct Tap {
    std::size_t i00, i01, i10, i11;
    double fx, fy;
    bool in_x, in_y;
  };
  std::vector<Tap> taps(N);
  std::vector<double> out(N * C);
  const auto gv = grid.data();
  const auto cv = coords.data();
  for (std::size_t n = 0; n < N; ++n) {
    const double x = cv[2 * n], y = cv[2 * n + 1];
    const double xc = std::clamp(x, 0.0, static_cast<double>(W - 1));
    const double yc = std::clamp(y, 0.0, static_cast<double>(H - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(xc));
    const auto y0 = static_cast<std::size_t>(std::floor(yc));
    const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    Tap t{(y0 * W + x0) * C, (y0 * W + x1) * C, (y1 * W + x0) * C, (y1 * W + x1) * C,
          xc - static_cast<double>(x0), yc - static_cast<double>(y0), x >= 0.0 && x <= double(W - 1),
          y >= 0.0 && y <= double(H - 1)};
    for (std::size_t c = 0; c < C; ++c) {
      out[n * C + c] = (1 - t.fx) * (1 - t.fy) * gv[t.i00 + c] + t.fx * (1 - t.fy) * gv[t.i01 + c] +
                       (1 - t.fx) * t.fy * gv[t.i10 + c] + t.fx * t.fy * gv[t.i11 + c];
    }
    taps[n] = t;
  }
  Shape out_shape = grid.rank() == 3 ? Shape{N, C} : Shape{N};
  return record("bilinear_gather", out_shape, std::move(out), {grid, coords},
                [grid, C, taps = std::move(taps)](std::span<const double> g, std::span<const std::span<double>> gin) {
                  const auto gv = grid.data();
                  for (std::size_t n = 0; n < taps.size(); ++n) {
                    const Tap& t = taps[n];
                    for (std::size_t c = 0; c < C; ++c) {
                      const double go = g[n * C + c];
                      if (!gin[0].empty()) {
                        gin[0][t.i00 + c] += go * (1 - t.fx) * (1 - t.fy);
                        gin[0][t.i01 + c] += go * t.fx * (1 - t.fy);
                        gin[0][t.i10 + c] += go * (1 - t.fx) * t.fy;
                        gin[0][t.i11 + c] += go * t.fx * t.fy;
                      }
                      if (!gin[1].empty()) {
                        if (t.in_x) {
                          gin[1][2 * n] += go * ((1 - t.fy) * (gv[t.i01 + c] - gv[t.i00 + c]) +
                                                 t.fy * (gv[t.i11 + c] - gv[t.i10 + c]));
                        }
                        if (t.in_y) {
                          gin[1][2 * n + 1] += go * ((1 - t.fx) * (gv[t.i10 + c] - gv[t.i00 + c]) +
                                                     t.fx * (gv[t.i11 + c] - gv[t.i01 + c]));
                        }
                      }
                    }
                  }
                });
}

// 2x2 average pooling over the two leading axes of (H, W) or (H, W, C).
inline Tensor avg_pool2(const Tensor& x) {
  if ((x.rank() != 2 && x.rank() != 3) || x.size(0) % 2 || x.size(1) % 2) {
    throw DimensionError(imr::detail::concat("avg_pool2: need even (H, W[, C]), got ", to_string(x.shape())));
  }
  const std::size_t H = x.size(0), W = x.size(1), C = x.rank() == 3 ? x.size(2) : 1;
  const std::size_t h = H / 2, w = W / 2;
  Shape out_shape = x.shape();
  out_shape[0] = h;
  out_shape[1] = w;
  std::vector<double> out(h * w * C, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < C; ++k) out[((r / 2) * w + c / 2) * C + k] += 0.25 * xv[(r * W + c) * C + k];
  return record("avg_pool2", out_shape, std::move(out), {x},
                [H, W, C, w](std::span<const double> g, std::span<const std::span<double>> gin) {
                  for (std::size_t r = 0; r < H; ++r)
                    for (std::size_t c = 0; c < W; ++c)
                      for (std::size_t k = 0; k < C; ++k)
                        gin[0][(r * W + c) * C + k] += 0.25 * g[((r / 2) * w + c / 2) * C + k];
                });
}

// ---------------------------------------------------------------------------
// Validation

// Max relative error between the tape gradient of f at x and central finite
// differences with step eps.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-4) {
  if (!(eps > 0)) throw ArgumentError("grad_check: eps must be positive");
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor leaf = x.clone(true);
    Tensor y = f(leaf);
    if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
    Gradients g = tape.backward(y);
    Tensor gx = g.of(leaf);
    analytic.assign(gx.data().begin(), gx.data().end());
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - eps;
    const double fm = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError(imr::detail::concat("grad_check: non-finite value when perturbing index ", i));
    }
    const double central = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - central) / denom);
  }
  return worst;
}

}  // namespace imr::ad
