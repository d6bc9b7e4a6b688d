#pragma once

// Dense n-dimensional float64 arrays with tape-based reverse-mode
// differentiation. Operations record a closure on their output node when any
// input requires a gradient; Tensor::backward replays those closures in
// reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cordseg/error.hpp"

namespace cordseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_disabled = false;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled) { detail::grad_disabled = true; }
  ~NoGradGuard() { detail::grad_disabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    require(numel(shape) == data.size(), ErrorCode::shape_mismatch,
            "data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Writable view of a leaf's values (parameter updates, perturbation).
  std::span<double> values() {
    require(node_->leaf, ErrorCode::invalid_argument, "only leaf tensors are writable");
    return node_->data;
  }

  double item() const {
    require(size() == 1, ErrorCode::non_scalar, "item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  /// Accumulated gradient; zeros when nothing has been accumulated yet.
  std::vector<double> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<double>(size(), 0.0);
  }

  void zero_grad() { node_->grad.clear(); }

  /// Detached copy sharing no graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node().get()) {
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_, 0);
    visited.insert(root_);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent && parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  /// Inputs precede their consumers.
  const std::vector<detail::Node*>& order() const { return order_; }

  /// Leaf gradients of this pass are summed into a fresh buffer and only then
  /// added to the existing accumulator, so repeated passes add exact multiples.
  void replay() {
    std::vector<std::vector<double>> previous(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) {
      detail::Node* node = order_[i];
      if (node->leaf)
        previous[i] = std::exchange(node->grad, {});
      else
        node->grad.assign(node->data.size(), 0.0);
    }
    root_->grad_buffer()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it)
      if (!(*it)->leaf && (*it)->backward) (*it)->backward(**it);
    for (std::size_t i = 0; i < order_.size(); ++i) {
      detail::Node* node = order_[i];
      if (!node->leaf || previous[i].empty()) continue;
      auto& grad = node->grad_buffer();
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = previous[i][j] + grad[j];
    }
  }

 private:
  detail::Node* root_;
  std::vector<detail::Node*> order_;
};

inline void Tensor::backward() const {
  require(defined(), ErrorCode::no_graph, "backward() on an undefined tensor");
  require(size() == 1, ErrorCode::non_scalar, "backward() needs a scalar, got " + shape_string(shape()));
  require(node_->requires_grad, ErrorCode::no_graph,
          "backward() on a tensor that was not produced by a recorded computation");
  Tape(*this).replay();
}

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (grad_disabled) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (should_record(inputs)) {
    Node& node = *out.node();
    node.requires_grad = true;
    node.leaf = false;
    for (const Tensor* t : inputs) node.parents.push_back(t->defined() ? t->node() : nullptr);
    node.backward = std::move(backward);
  }
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data), false);
  bool record = false;
  if (!grad_disabled)
    for (const Tensor& t : inputs) record = record || t.requires_grad();
  if (record) {
    Node& node = *out.node();
    node.requires_grad = true;
    node.leaf = false;
    for (const Tensor& t : inputs) node.parents.push_back(t.node());
    node.backward = std::move(backward);
  }
  return out;
}

/// Gradient buffer of parent i, or nullptr when it does not take gradients.
inline double* parent_grad(Node& out, std::size_t i) {
  Node* p = out.parents[i].get();
  if (p == nullptr || !p->requires_grad) return nullptr;
  return p->grad_buffer().data();
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    require(da == db || da == 1 || db == 1, ErrorCode::shape_mismatch,
            "shapes " + shape_string(a) + " and " + shape_string(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each element of `out`, the flat index of the broadcast source in `in`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t axis = k + (rank - in.size());
    stride[axis] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  std::vector<std::size_t> index(numel(out), 0);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    index[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++counter[axis];
      offset += stride[axis];
      if (counter[axis] < out[axis]) break;
      offset -= stride[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
  return index;
}

enum class Binary { add, sub, mul, div };

inline Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = numel(shape);
  const bool direct_a = a.size() == n;
  const bool direct_b = b.size() == n;
  std::vector<std::size_t> ia, ib;
  if (!direct_a && a.size() != 1) ia = broadcast_index(a.shape(), shape);
  if (!direct_b && b.size() != 1) ib = broadcast_index(b.shape(), shape);
  auto index_a = [direct_a, &ia](std::size_t i) { return direct_a ? i : (ia.empty() ? 0 : ia[i]); };
  auto index_b = [direct_b, &ib](std::size_t i) { return direct_b ? i : (ib.empty() ? 0 : ib[i]); };

  const auto av = a.data();
  const auto bv = b.data();
  if (kind == Binary::div)
    for (double v : bv) require(v != 0.0, ErrorCode::domain, "division by zero; guard the denominator");

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[index_a(i)];
    const double y = bv[index_b(i)];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
      case Binary::div: out[i] = x / y; break;
    }
  }
  return make_result(shape, std::move(out), {&a, &b},
                     [kind, direct_a, direct_b, ia = std::move(ia), ib = std::move(ib)](Node& node) {
                       auto ix = [&](std::size_t i) { return direct_a ? i : (ia.empty() ? 0 : ia[i]); };
                       auto iy = [&](std::size_t i) { return direct_b ? i : (ib.empty() ? 0 : ib[i]); };
                       const auto& av = node.parents[0]->data;
                       const auto& bv = node.parents[1]->data;
                       double* ga = parent_grad(node, 0);
                       double* gb = parent_grad(node, 1);
                       const auto& g = node.grad;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t j = ix(i);
                         const std::size_t k = iy(i);
                         switch (kind) {
                           case Binary::add:
                             if (ga) ga[j] += g[i];
                             if (gb) gb[k] += g[i];
                             break;
                           case Binary::sub:
                             if (ga) ga[j] += g[i];
                             if (gb) gb[k] -= g[i];
                             break;
                           case Binary::mul:
                             if (ga) ga[j] += g[i] * bv[k];
                             if (gb) gb[k] += g[i] * av[j];
                             break;
                           case Binary::div:
                             if (ga) ga[j] += g[i] / bv[k];
                             if (gb) gb[k] -= g[i] * av[j] / (bv[k] * bv[k]);
                             break;
                         }
                       }
                     });
}

/// Elementwise map; `derivative(x, y)` is dy/dx given input x and output y.
template <class Forward, class Derivative>
Tensor unary(const Tensor& a, Forward forward, Derivative derivative) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = forward(av[i]);
  return make_result(a.shape(), std::move(out), {&a}, [derivative](Node& node) {
    double* ga = parent_grad(node, 0);
    if (!ga) return;
    const auto& x = node.parents[0]->data;
    for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i] * derivative(x[i], node.data[i]);
  });
}

inline std::size_t checked_axis(const Tensor& a, std::size_t axis) {
  require(axis < a.rank(), ErrorCode::invalid_argument,
          "axis " + std::to_string(axis) + " out of range for " + shape_string(a.shape()));
  return axis;
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_at(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::div, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }

inline Tensor neg(const Tensor& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor log(const Tensor& a) {
  for (double v : a.data())
    require(v > 0.0, ErrorCode::domain, "log of non-positive value; clamp the operand first");
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Clamps into [lo, hi]; the gradient is passed only where the value was not clamped.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- structural -------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), ErrorCode::shape_mismatch,
          "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  std::vector<double> data(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(data), {&a}, [](detail::Node& node) {
    if (double* ga = detail::parent_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i];
  });
}

/// Swaps the first two axes of a rank-3 tensor (H x W x C -> W x H x C).
inline Tensor transpose01(const Tensor& a) {
  require(a.rank() == 3, ErrorCode::shape_mismatch, "transpose01 needs rank 3, got " + shape_string(a.shape()));
  const std::size_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      std::copy_n(av.begin() + (y * w + x) * c, c, out.begin() + (x * h + y) * c);
  return detail::make_result(Shape{w, h, c}, std::move(out), {&a}, [h, w, c](detail::Node& node) {
    double* ga = detail::parent_grad(node, 0);
    if (!ga) return;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < c; ++k) ga[(y * w + x) * c + k] += node.grad[(x * h + y) * c + k];
  });
}

/// Reverses the order of elements along `axis`.
inline Tensor flip(const Tensor& a, std::size_t axis) {
  detail::checked_axis(a, axis);
  const auto [outer, extent, inner] = detail::split_at(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < extent; ++t)
      std::copy_n(av.begin() + (o * extent + t) * inner, inner, out.begin() + (o * extent + extent - 1 - t) * inner);
  return detail::make_result(a.shape(), std::move(out), {&a}, [outer, extent, inner](detail::Node& node) {
    double* ga = detail::parent_grad(node, 0);
    if (!ga) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < extent; ++t)
        for (std::size_t i = 0; i < inner; ++i)
          ga[(o * extent + t) * inner + i] += node.grad[(o * extent + extent - 1 - t) * inner + i];
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::checked_axis(a, axis);
  require(begin < end && end <= a.dim(axis), ErrorCode::invalid_argument,
          "slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside axis of extent " +
              std::to_string(a.dim(axis)));
  const auto [outer, extent, inner] = detail::split_at(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = a.shape();
  shape[axis] = len;
  const auto av = a.data();
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + (o * extent + begin) * inner, len * inner, out.begin() + o * len * inner);
  return detail::make_result(std::move(shape), std::move(out), {&a},
                             [outer, extent, inner, begin, len](detail::Node& node) {
                               double* ga = detail::parent_grad(node, 0);
                               if (!ga) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < len * inner; ++i)
                                   ga[(o * extent + begin) * inner + i] += node.grad[o * len * inner + i];
                             });
}

/// Joins tensors along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat of zero tensors");
  detail::checked_axis(parts[0], axis);
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == shape.size(), ErrorCode::shape_mismatch, "concat rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i)
      require(i == axis || p.dim(i) == parts[0].dim(i), ErrorCode::shape_mismatch,
              "concat extents differ: " + shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
    shape[axis] += p.dim(axis);
  }
  const auto [outer, extent, inner] = detail::split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len * inner, len * inner, out.begin() + (o * extent + offset) * inner);
    offset += len;
  }
  return detail::make_result(shape, std::move(out), parts, [outer, extent, inner, offsets](detail::Node& node) {
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      double* gp = detail::parent_grad(node, k);
      if (!gp) continue;
      const std::size_t len = node.parents[k]->data.size() / (outer * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i)
          gp[o * len * inner + i] += node.grad[(o * extent + offsets[k]) * inner + i];
    }
  });
}

// ---- convolution ------------------------------------------------------------

/// Same-padded 2D convolution (cross-correlation) with zero fill.
/// input H x W x Cin, kernel kh x kw x Cin x Cout, bias Cout (optional).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor()) {
  require(input.rank() == 3, ErrorCode::shape_mismatch, "conv2d input must be H x W x C, got " + shape_string(input.shape()));
  require(kernel.rank() == 4, ErrorCode::shape_mismatch,
          "conv2d kernel must be kh x kw x Cin x Cout, got " + shape_string(kernel.shape()));
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  require(kh % 2 == 1 && kw % 2 == 1, ErrorCode::invalid_argument,
          "conv2d kernel extents must be odd, got " + shape_string(kernel.shape()));
  require(kernel.dim(2) == cin, ErrorCode::shape_mismatch,
          "kernel expects " + std::to_string(kernel.dim(2)) + " input channels, input has " + std::to_string(cin));
  if (bias.defined())
    require(bias.size() == cout, ErrorCode::shape_mismatch, "bias length does not match output channels");

  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto in = input.data();
  const auto k = kernel.data();
  std::vector<double> out(h * w * cout, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* __restrict o = out.data() + (y * w + x) * cout;
      if (bias.defined()) std::copy_n(bias.data().begin(), cout, o);
      for (std::size_t dy = 0; dy < kh; ++dy) {
        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - ph;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dx = 0; dx < kw; ++dx) {
          const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + dx) - pw;
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* __restrict iv = in.data() + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * cin;
          const double* __restrict kv = k.data() + (dy * kw + dx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double v = iv[ci];
            const double* __restrict kr = kv + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += v * kr[co];
          }
        }
      }
    }
  }

  return detail::make_result(
      Shape{h, w, cout}, std::move(out), {&input, &kernel, &bias},
      [h, w, cin, kh, kw, cout, ph, pw](detail::Node& node) {
        double* gin = detail::parent_grad(node, 0);
        double* gk = detail::parent_grad(node, 1);
        double* gb = node.parents[2] ? detail::parent_grad(node, 2) : nullptr;
        const auto& in = node.parents[0]->data;
        const auto& k = node.parents[1]->data;
        const auto& g = node.grad;
        // kernel with the channel axes swapped, so both gradient loops run over contiguous memory
        std::vector<double> kt;
        if (gin) {
          kt.resize(k.size());
          for (std::size_t t = 0; t < kh * kw; ++t)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co)
                kt[(t * cout + co) * cin + ci] = k[(t * cin + ci) * cout + co];
        }
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double* __restrict go = g.data() + (y * w + x) * cout;
            if (gb)
              for (std::size_t co = 0; co < cout; ++co) gb[co] += go[co];
            for (std::size_t dy = 0; dy < kh; ++dy) {
              const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - ph;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + dx) - pw;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t ioff = (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * cin;
                const std::size_t t = dy * kw + dx;
                if (gin) {
                  double* __restrict gi = gin + ioff;
                  for (std::size_t co = 0; co < cout; ++co) {
                    const double gv = go[co];
                    const double* __restrict kr = kt.data() + (t * cout + co) * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci) gi[ci] += gv * kr[ci];
                  }
                }
                if (gk) {
                  const double* __restrict iv = in.data() + ioff;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double v = iv[ci];
                    double* __restrict gkr = gk + (t * cin + ci) * cout;
                    for (std::size_t co = 0; co < cout; ++co) gkr[co] += v * go[co];
                  }
                }
              }
            }
          }
        }
      });
}

// ---- softmax and reductions ------------------------------------------------

/// Softmax along `axis` with max subtraction.
inline Tensor softmax(const Tensor& input, std::size_t axis) {
  detail::checked_axis(input, axis);
  const auto [outer, extent, inner] = detail::split_at(input.shape(), axis);
  const auto in = input.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < extent; ++t) peak = std::max(peak, in[base + t * inner]);
      double total = 0.0;
      for (std::size_t t = 0; t < extent; ++t) {
        out[base + t * inner] = std::exp(in[base + t * inner] - peak);
        total += out[base + t * inner];
      }
      for (std::size_t t = 0; t < extent; ++t) out[base + t * inner] /= total;
    }
  }
  return detail::make_result(input.shape(), std::move(out), {&input}, [outer, extent, inner](detail::Node& node) {
    double* ga = detail::parent_grad(node, 0);
    if (!ga) return;
    const auto& y = node.data;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        double dot = 0.0;
        for (std::size_t t = 0; t < extent; ++t) dot += g[base + t * inner] * y[base + t * inner];
        for (std::size_t t = 0; t < extent; ++t)
          ga[base + t * inner] += y[base + t * inner] * (g[base + t * inner] - dot);
      }
    }
  });
}

enum class Reduce { sum, mean, max };

/// Reduces over the listed axes; those axes are removed from the result shape.
inline Tensor reduce(Reduce kind, const Tensor& input, std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t axis : axes) detail::checked_axis(input, axis);

  const Shape& in_shape = input.shape();
  Shape out_shape;
  std::vector<bool> reduced(in_shape.size(), false);
  for (std::size_t axis : axes) reduced[axis] = true;
  for (std::size_t i = 0; i < in_shape.size(); ++i)
    if (!reduced[i]) out_shape.push_back(in_shape[i]);

  // target[i]: output slot of input element i
  std::vector<std::size_t> target(input.size());
  {
    std::vector<std::size_t> counter(in_shape.size(), 0);
    for (std::size_t flat = 0; flat < target.size(); ++flat) {
      std::size_t slot = 0;
      for (std::size_t d = 0; d < in_shape.size(); ++d)
        if (!reduced[d]) slot = slot * in_shape[d] + counter[d];
      target[flat] = slot;
      for (std::size_t d = in_shape.size(); d-- > 0;) {
        if (++counter[d] < in_shape[d]) break;
        counter[d] = 0;
      }
    }
  }
  const std::size_t n_out = numel(out_shape);
  const std::size_t group = n_out == 0 ? 0 : input.size() / n_out;
  require(group > 0, ErrorCode::invalid_argument, "reduction over an empty extent");
  const auto in = input.data();

  std::vector<double> out(n_out, kind == Reduce::max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> argmax;
  if (kind == Reduce::max) {
    argmax.assign(n_out, 0);
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > out[target[i]]) {
        out[target[i]] = in[i];
        argmax[target[i]] = i;
      }
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) out[target[i]] += in[i];
    if (kind == Reduce::mean)
      for (double& v : out) v /= static_cast<double>(group);
  }

  return detail::make_result(std::move(out_shape), std::move(out), {&input},
                             [kind, group, target = std::move(target), argmax = std::move(argmax)](detail::Node& node) {
                               double* ga = detail::parent_grad(node, 0);
                               if (!ga) return;
                               const auto& g = node.grad;
                               if (kind == Reduce::max) {
                                 for (std::size_t o = 0; o < g.size(); ++o) ga[argmax[o]] += g[o];
                                 return;
                               }
                               const double scale = kind == Reduce::mean ? 1.0 / static_cast<double>(group) : 1.0;
                               for (std::size_t i = 0; i < target.size(); ++i) ga[i] += g[target[i]] * scale;
                             });
}

inline Tensor sum(const Tensor& a, std::vector<std::size_t> axes) { return reduce(Reduce::sum, a, std::move(axes)); }
inline Tensor mean(const Tensor& a, std::vector<std::size_t> axes) { return reduce(Reduce::mean, a, std::move(axes)); }
inline Tensor max(const Tensor& a, std::vector<std::size_t> axes) { return reduce(Reduce::max, a, std::move(axes)); }

inline std::vector<std::size_t> all_axes(const Tensor& a) {
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return axes;
}

inline Tensor sum(const Tensor& a) { return sum(a, all_axes(a)); }
inline Tensor mean(const Tensor& a) { return mean(a, all_axes(a)); }

// ---- verification -------------------------------------------------------------

/// Largest |analytic - central difference| / max(1, |analytic|) over every
/// coordinate of every parameter. `f` must return a scalar.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps) {
  require(eps >= 1e-7 && eps <= 1e-4, ErrorCode::invalid_argument, "finite-difference step must lie in [1e-7, 1e-4]");
  for (Tensor& p : params) p.zero_grad();
  const Tensor y = f();
  require(y.size() == 1, ErrorCode::non_scalar, "grad_check needs a scalar function, got " + shape_string(y.shape()));
  if (y.requires_grad()) y.backward();

  double worst = 0.0;
  for (Tensor& p : params) {
    const std::vector<double> analytic = p.grad();
    auto values = p.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + eps;
        plus = f().item();
        values[i] = saved - eps;
        minus = f().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& theta, double eps) {
  return grad_check([&] { return f(theta); }, std::vector<Tensor>{theta}, eps);
}

}  // namespace cordseg
