#pragma once

// Tensor-level reverse-mode automatic differentiation.
//
// Every backward rule is itself written with the differentiable ops below, so
// a gradient computed with create_graph = true can be differentiated again.
// Gradient matching needs exactly that: d/d(delta) of a function of d(loss)/d(theta).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "plab/errors.hpp"
#include "plab/tensor.hpp"

namespace plab {

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() noexcept { return detail::grad_mode; }

/// Scoped switch for graph recording on the current thread.
class GradMode {
 public:
  explicit GradMode(bool enabled) : previous_(detail::grad_mode) { detail::grad_mode = enabled; }
  ~GradMode() { detail::grad_mode = previous_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var;

template <typename T>
struct Node : std::enable_shared_from_this<Node<T>> {
  // (output, d loss / d output, which inputs need a gradient) -> one gradient per input.
  using Backward =
      std::function<std::vector<Var<T>>(const Var<T>&, const Var<T>&, const std::vector<bool>&)>;

  Tensor<T> value;
  bool requires_grad = false;
  std::vector<Var<T>> inputs;
  Backward backward;
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }

  /// In-place access for leaves (parameters, perturbations being optimized).
  Tensor<T>& mutable_value() {
    if (!is_leaf()) throw ValueError("only leaf variables may be modified in place");
    return node_->value;
  }
  void set_requires_grad(bool on) {
    if (!is_leaf()) throw ValueError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }

  Node<T>* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> leaf(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, typename Node<T>::Backward backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool record = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) {
                        return v.requires_grad();
                      });
  if (record) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) dst[i] = f(src[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out(a.shape());
  const T* x = a.data();
  const T* y = b.data();
  T* dst = out.data();
  for (std::size_t i = 0, n = a.size(); i < n; ++i) dst[i] = f(x[i], y[i]);
  return out;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// Reverse-mode gradients of a scalar `output` with respect to each of `wrt`.
///
/// Leaves that do not influence the output receive zeros. Nothing outside the
/// returned vector is modified. With create_graph the returned gradients are
/// themselves differentiable.
template <typename T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& wrt, bool create_graph = false) {
  if (output.size() != 1) throw ShapeError("gradient requires a scalar loss, got " + shape_str(output.shape()));

  std::unordered_set<const Node<T>*> targets;
  for (const auto& w : wrt) targets.insert(w.node());

  // Post-order over recorded nodes; a node "reaches" if a target lies below it.
  std::unordered_map<const Node<T>*, bool> reaches;
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  if (output.requires_grad()) stack.emplace_back(output.node(), 0);
  reaches[output.node()] = false;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].node();
      if (child->requires_grad && !reaches.count(child)) {
        reaches[child] = false;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    bool r = targets.count(node) > 0;
    for (const auto& in : node->inputs) {
      auto it = reaches.find(in.node());
      if (it != reaches.end() && it->second) r = true;
    }
    reaches[node] = r;
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<const Node<T>*, Var<T>> grads;
  {
    GradMode mode(create_graph);
    grads[output.node()] = constant(Tensor<T>(output.shape(), T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (!reaches[node] || !node->backward) continue;
      auto g = grads.find(node);
      if (g == grads.end()) continue;
      std::vector<bool> needs(node->inputs.size());
      for (std::size_t i = 0; i < needs.size(); ++i) {
        auto r = reaches.find(node->inputs[i].node());
        needs[i] = r != reaches.end() && r->second;
      }
      const Var<T> self(node->shared_from_this());
      std::vector<Var<T>> input_grads = node->backward(self, g->second, needs);
      for (std::size_t i = 0; i < needs.size(); ++i) {
        if (!needs[i] || !input_grads[i].defined()) continue;
        const Node<T>* in = node->inputs[i].node();
        auto slot = grads.find(in);
        if (slot == grads.end())
          grads.emplace(in, input_grads[i]);
        else
          slot->second = add(slot->second, input_grads[i]);
      }
      if (!create_graph && !targets.count(node)) grads.erase(node);
    }
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto g = grads.find(w.node());
    result.push_back(g != grads.end() ? g->second : constant(Tensor<T>(w.shape())));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  return detail::make_op<T>(detail::zip(a.value(), b.value(), [](T x, T y) { return x + y; }), {a, b},
                            [](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{g, g};
                            });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  return detail::make_op<T>(detail::zip(a.value(), b.value(), [](T x, T y) { return x - y; }), {a, b},
                            [](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                              return std::vector<Var<T>>{g, needs[1] ? scale(g, T(-1)) : Var<T>()};
                            });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  return detail::make_op<T>(detail::zip(a.value(), b.value(), [](T x, T y) { return x * y; }), {a, b},
                            [a, b](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                              return std::vector<Var<T>>{needs[0] ? mul(g, b) : Var<T>(),
                                                         needs[1] ? mul(g, a) : Var<T>()};
                            });
}

/// c * a + d.
template <typename T>
Var<T> affine(const Var<T>& a, T c, T d) {
  return detail::make_op<T>(detail::map(a.value(), [c, d](T x) { return c * x + d; }), {a},
                            [c](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{scale(g, c)};
                            });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return affine(a, c, T(0));
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return std::exp(x); }), {a},
                            [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{mul(g, out)};
                            });
}

/// log(max(a, floor)); entries at or below the floor get zero gradient.
template <typename T>
Var<T> log_floor(const Var<T>& a, T floor) {
  return detail::make_op<T>(detail::map(a.value(), [floor](T x) { return std::log(std::max(x, floor)); }), {a},
                            [a, floor](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              auto mask = detail::map(a.value(), [floor](T x) { return x > floor ? T(1) : T(0); });
                              return std::vector<Var<T>>{mul(g, mul(recip(a), constant(std::move(mask))))};
                            });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return x > T(0) ? x : T(0); }), {a},
                            [a](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              auto mask = detail::map(a.value(), [](T x) { return x > T(0) ? T(1) : T(0); });
                              return std::vector<Var<T>>{mul(g, constant(std::move(mask)))};
                            });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return std::tanh(x); }), {a},
                            [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{mul(g, affine(mul(out, out), T(-1), T(1)))};
                            });
}

/// Clamp to [lo, hi]; gradient passes only where the input lies inside the interval.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return detail::make_op<T>(detail::map(a.value(), [lo, hi](T x) { return std::clamp(x, lo, hi); }), {a},
                            [a, lo, hi](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              auto mask = detail::map(a.value(), [lo, hi](T x) { return x >= lo && x <= hi ? T(1) : T(0); });
                              return std::vector<Var<T>>{mul(g, constant(std::move(mask)))};
                            });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return std::abs(x); }), {a},
                            [a](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              auto sign = detail::map(a.value(), [](T x) { return T((x > 0) - (x < 0)); });
                              return std::vector<Var<T>>{mul(g, constant(std::move(sign)))};
                            });
}

/// 1/a with 1/0 defined as 0.
template <typename T>
Var<T> recip(const Var<T>& a) {
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return x != T(0) ? T(1) / x : T(0); }), {a},
                            [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{scale(mul(g, mul(out, out)), T(-1))};
                            });
}

/// Square root; the subgradient at 0 is taken as 0.
template <typename T>
Var<T> sqrt(const Var<T>& a) {
  for (T v : a.value().values())
    if (v < T(0)) throw NumericError("sqrt of a negative value");
  return detail::make_op<T>(detail::map(a.value(), [](T x) { return std::sqrt(x); }), {a},
                            [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{scale(mul(g, recip(out)), T(0.5))};
                            });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <typename T>
Var<T> expand(const Var<T>& s, const Shape& shape);

template <typename T>
Var<T> sum(const Var<T>& a) {
  return detail::make_op<T>(Tensor<T>::scalar(a.value().sum()), {a},
                            [shape = a.shape()](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{expand(g, shape)};
                            });
}

/// Broadcast a one-element tensor to `shape`.
template <typename T>
Var<T> expand(const Var<T>& s, const Shape& shape) {
  if (s.size() != 1) throw ShapeError("expand needs a single value, got " + shape_str(s.shape()));
  return detail::make_op<T>(Tensor<T>(shape, s.value()[0]), {s},
                            [src = s.shape()](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              Var<T> total = sum(g);
                              return std::vector<Var<T>>{src.empty() ? total : reshape(total, src)};
                            });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  return sum(mul(a, b));
}

/// a * s for a one-element s.
template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar needs a single-value factor");
  const T c = s.value()[0];
  return detail::make_op<T>(detail::map(a.value(), [c](T x) { return x * c; }), {a, s},
                            [a, s](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                              Var<T> gs;
                              if (needs[1]) {
                                gs = dot(g, a);
                                if (!s.shape().empty()) gs = reshape(gs, s.shape());
                              }
                              return std::vector<Var<T>>{needs[0] ? mul_scalar(g, s) : Var<T>(), gs};
                            });
}

template <typename T>
Var<T> expand_rows(const Var<T>& v, const Shape& shape);

/// [N, ...] -> [N], summing everything but the leading axis.
template <typename T>
Var<T> row_sum(const Var<T>& a) {
  if (a.shape().empty()) throw ShapeError("row_sum needs rank >= 1");
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.size() / rows;
  Tensor<T> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = a.value().data() + r * cols;
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += p[c];
    out[r] = s;
  }
  return detail::make_op<T>(std::move(out), {a},
                            [shape = a.shape()](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{expand_rows(g, shape)};
                            });
}

/// [N] -> `shape` (leading extent N), repeating each row value.
template <typename T>
Var<T> expand_rows(const Var<T>& v, const Shape& shape) {
  if (v.shape().size() != 1 || shape.empty() || shape[0] != v.shape()[0])
    throw ShapeError("expand_rows: " + shape_str(v.shape()) + " to " + shape_str(shape));
  Tensor<T> out(shape);
  const std::size_t rows = shape[0];
  const std::size_t cols = out.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(out.data() + r * cols, cols, v.value()[r]);
  return detail::make_op<T>(std::move(out), {v}, [](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
    return std::vector<Var<T>>{row_sum(g)};
  });
}

/// [N, ...] -> [N], the largest |entry| of each row.
template <typename T>
Var<T> row_max_abs(const Var<T>& a) {
  const std::size_t rows = a.shape().at(0);
  const std::size_t cols = a.size() / rows;
  Tensor<T> out(Shape{rows});
  Tensor<T> pick(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = a.value().data() + r * cols;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (std::abs(p[c]) > std::abs(p[best])) best = c;
    out[r] = std::abs(p[best]);
    pick[r * cols + best] = T((p[best] > 0) - (p[best] < 0));
  }
  return detail::make_op<T>(std::move(out), {a},
                            [pick = std::move(pick)](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{mul(expand_rows(g, pick.shape()), constant(pick))};
                            });
}

template <typename T>
Var<T> channel_sum(const Var<T>& x);

/// x[n, c, ...] + b[c].
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  if (x.shape().size() < 2 || b.shape() != Shape{x.shape()[1]})
    throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], inner = x.size() / (n * c);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      T* p = out.data() + (i * c + k) * inner;
      const T bias = b.value()[k];
      for (std::size_t j = 0; j < inner; ++j) p[j] += bias;
    }
  return detail::make_op<T>(std::move(out), {x, b},
                            [](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
                              return std::vector<Var<T>>{g, needs[1] ? channel_sum(g) : Var<T>()};
                            });
}

/// x[n, c, ...] * scale[c] + shift[c] with constant coefficients.
template <typename T>
Var<T> channel_affine(const Var<T>& x, std::vector<T> scale, std::vector<T> shift) {
  const std::size_t n = x.shape().at(0), c = x.shape().at(1), inner = x.size() / (n * c);
  if (scale.size() != c || shift.size() != c) throw ShapeError("channel_affine: coefficient count mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const T* p = x.value().data() + (i * c + k) * inner;
      T* o = out.data() + (i * c + k) * inner;
      for (std::size_t j = 0; j < inner; ++j) o[j] = p[j] * scale[k] + shift[k];
    }
  return detail::make_op<T>(std::move(out), {x},
                            [scale](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{channel_affine(g, scale, std::vector<T>(scale.size()))};
                            });
}

/// [N, C, ...] -> [C].
template <typename T>
Var<T> channel_sum(const Var<T>& x) {
  const std::size_t n = x.shape().at(0), c = x.shape().at(1), inner = x.size() / (n * c);
  Tensor<T> out(Shape{c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const T* p = x.value().data() + (i * c + k) * inner;
      T s = 0;
      for (std::size_t j = 0; j < inner; ++j) s += p[j];
      out[k] += s;
    }
  return detail::make_op<T>(std::move(out), {x},
                            [shape = x.shape()](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{add_channel_bias(constant(Tensor<T>(shape)), g)};
                            });
}

// ---------------------------------------------------------------------------
// Shape and linear algebra

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return detail::make_op<T>(std::move(out), {a},
                            [src = a.shape()](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{reshape(g, src)};
                            });
}

/// [A, B, rest...] -> [B, A, rest...].
template <typename T>
Var<T> swap01(const Var<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("swap01 needs rank >= 2");
  const std::size_t d0 = s[0], d1 = s[1], inner = a.size() / (d0 * d1);
  Shape os = s;
  std::swap(os[0], os[1]);
  Tensor<T> out(os);
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      std::copy_n(a.value().data() + (i * d1 + j) * inner, inner, out.data() + (j * d0 + i) * inner);
  return detail::make_op<T>(std::move(out), {a}, [](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
    return std::vector<Var<T>>{swap01(g)};
  });
}

/// op(a) * op(b) where op transposes when the matching flag is set.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.shape().size() != 2 || b.shape().size() != 2) throw ShapeError("matmul needs rank-2 operands");
  const std::size_t ar = a.shape()[0], ac = a.shape()[1], br = b.shape()[0], bc = b.shape()[1];
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + (trans_a ? "^T" : "") + " * " +
                     shape_str(b.shape()) + (trans_b ? "^T" : ""));
  using M = detail::RowMat<T>;
  Eigen::Map<const M> A(a.value().data(), Eigen::Index(ar), Eigen::Index(ac));
  Eigen::Map<const M> B(b.value().data(), Eigen::Index(br), Eigen::Index(bc));
  Tensor<T> out(Shape{m, n});
  Eigen::Map<M> C(out.data(), Eigen::Index(m), Eigen::Index(n));
  if (!trans_a && !trans_b)
    C.noalias() = A * B;
  else if (trans_a && !trans_b)
    C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A.transpose() * B.transpose();
  return detail::make_op<T>(
      std::move(out), {a, b},
      [a, b, trans_a, trans_b](const Var<T>&, const Var<T>& g, const std::vector<bool>& needs) {
        Var<T> ga, gb;
        if (needs[0]) ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
        if (needs[1]) gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
        return std::vector<Var<T>>{ga, gb};
      });
}

// ---------------------------------------------------------------------------
// Image ops. Layout is [N, C, H, W].

template <typename T>
Var<T> col2im(const Var<T>& cols, const Shape& image_shape, std::size_t k);

/// Same-padded, stride-1 patch extraction: [N,C,H,W] -> [C*k*k, N*H*W].
template <typename T>
Var<T> im2col(const Var<T>& x, std::size_t k) {
  const Shape& s = x.shape();
  if (s.size() != 4 || k % 2 == 0) throw ShapeError("im2col needs [N,C,H,W] input and an odd kernel");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], pad = k / 2, hw = h * w;
  Tensor<T> out(Shape{c * k * k, n * hw});
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = dst + ((ch * k + ki) * k + kj) * n * hw;
        for (std::size_t img = 0; img < n; ++img) {
          const T* plane = src + (img * c + ch) * hw;
          T* orow = row + img * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = std::ptrdiff_t(y + ki) - std::ptrdiff_t(pad);
            if (sy < 0 || sy >= std::ptrdiff_t(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = std::ptrdiff_t(xx + kj) - std::ptrdiff_t(pad);
              if (sx >= 0 && sx < std::ptrdiff_t(w)) orow[y * w + xx] = plane[sy * std::ptrdiff_t(w) + sx];
            }
          }
        }
      }
  return detail::make_op<T>(std::move(out), {x},
                            [shape = s, k](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{col2im(g, shape, k)};
                            });
}

/// Adjoint of im2col: scatter-add patches back into an image.
template <typename T>
Var<T> col2im(const Var<T>& cols, const Shape& image_shape, std::size_t k) {
  const std::size_t n = image_shape[0], c = image_shape[1], h = image_shape[2], w = image_shape[3];
  const std::size_t pad = k / 2, hw = h * w;
  if (cols.shape() != Shape{c * k * k, n * hw}) throw ShapeError("col2im: column shape mismatch");
  Tensor<T> out(image_shape);
  const T* src = cols.value().data();
  T* dst = out.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = src + ((ch * k + ki) * k + kj) * n * hw;
        for (std::size_t img = 0; img < n; ++img) {
          T* plane = dst + (img * c + ch) * hw;
          const T* irow = row + img * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = std::ptrdiff_t(y + ki) - std::ptrdiff_t(pad);
            if (sy < 0 || sy >= std::ptrdiff_t(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = std::ptrdiff_t(xx + kj) - std::ptrdiff_t(pad);
              if (sx >= 0 && sx < std::ptrdiff_t(w)) plane[sy * std::ptrdiff_t(w) + sx] += irow[y * w + xx];
            }
          }
        }
      }
  return detail::make_op<T>(std::move(out), {cols}, [k](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
    return std::vector<Var<T>>{im2col(g, k)};
  });
}

template <typename T>
Var<T> avg_pool2_adjoint(const Var<T>& g, const Shape& image_shape);

/// 2x2 average pooling with stride 2.
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2 needs [N,C,H,W] with even H and W");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{s[0], s[1], oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x.value().data() + p * h * w;
    T* o = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const T* q = in + 2 * y * w + 2 * xx;
        o[y * ow + xx] = T(0.25) * (q[0] + q[1] + q[w] + q[w + 1]);
      }
  }
  return detail::make_op<T>(std::move(out), {x},
                            [shape = s](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{avg_pool2_adjoint(g, shape)};
                            });
}

template <typename T>
Var<T> avg_pool2_adjoint(const Var<T>& g, const Shape& image_shape) {
  const std::size_t planes = image_shape[0] * image_shape[1], h = image_shape[2], w = image_shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out(image_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = g.value().data() + p * oh * ow;
    T* o = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) o[y * w + xx] = T(0.25) * in[(y / 2) * ow + xx / 2];
  }
  return detail::make_op<T>(std::move(out), {g}, [](const Var<T>&, const Var<T>& gg, const std::vector<bool>&) {
    return std::vector<Var<T>>{avg_pool2(gg)};
  });
}

template <typename T>
Var<T> scatter_pixels(const Var<T>& g, std::shared_ptr<const std::vector<std::int32_t>> map);

/// out[n,c,p] = x[n,c,map[n*HW+p]], or 0 where the map holds -1.
/// Crops, shifts and flips are all pixel gathers of this form.
template <typename T>
Var<T> gather_pixels(const Var<T>& x, std::shared_ptr<const std::vector<std::int32_t>> map) {
  const Shape& s = x.shape();
  const std::size_t n = s.at(0), c = s.at(1), hw = s.at(2) * s.at(3);
  if (map->size() != n * hw) throw ShapeError("gather_pixels: map size mismatch");
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t* m = map->data() + i * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* in = x.value().data() + (i * c + ch) * hw;
      T* o = out.data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        if (m[p] >= 0) o[p] = in[m[p]];
    }
  }
  return detail::make_op<T>(std::move(out), {x},
                            [map](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{scatter_pixels(g, map)};
                            });
}

template <typename T>
Var<T> scatter_pixels(const Var<T>& g, std::shared_ptr<const std::vector<std::int32_t>> map) {
  const Shape& s = g.shape();
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t* m = map->data() + i * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* in = g.value().data() + (i * c + ch) * hw;
      T* o = out.data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p)
        if (m[p] >= 0) o[m[p]] += in[p];
    }
  }
  return detail::make_op<T>(std::move(out), {g},
                            [map](const Var<T>&, const Var<T>& gg, const std::vector<bool>&) {
                              return std::vector<Var<T>>{gather_pixels(gg, map)};
                            });
}

// ---------------------------------------------------------------------------
// Classification heads

/// Row-wise log-softmax of [N, K] logits.
template <typename T>
Var<T> log_softmax(const Var<T>& z) {
  if (z.shape().size() != 2) throw ShapeError("log_softmax needs [N, K] logits");
  const std::size_t rows = z.shape()[0], k = z.shape()[1];
  Tensor<T> out(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = z.value().data() + r * k;
    T* o = out.data() + r * k;
    const T m = *std::max_element(p, p + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(p[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) o[j] = p[j] - lse;
  }
  return detail::make_op<T>(std::move(out), {z}, [](const Var<T>& out, const Var<T>& g, const std::vector<bool>&) {
    return std::vector<Var<T>>{sub(g, mul(exp(out), expand_rows(row_sum(g), g.shape())))};
  });
}

template <typename T>
Var<T> softmax(const Var<T>& z) {
  return exp(log_softmax(z));
}

/// mean_i a[i, labels[i]].
template <typename T>
Var<T> pick_mean(const Var<T>& a, std::span<const int> labels) {
  if (a.shape().size() != 2 || a.shape()[0] != labels.size()) throw ShapeError("pick_mean: labels do not match rows");
  const std::size_t rows = a.shape()[0], k = a.shape()[1];
  Tensor<T> pick(a.shape());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= k) throw ValueError("label out of range");
    total += a.value()[r * k + labels[r]];
    pick[r * k + labels[r]] = T(1) / T(rows);
  }
  return detail::make_op<T>(Tensor<T>::scalar(total / T(rows)), {a},
                            [pick = std::move(pick)](const Var<T>&, const Var<T>& g, const std::vector<bool>&) {
                              return std::vector<Var<T>>{mul_scalar(constant(pick), g)};
                            });
}

/// Mean cross-entropy of [N, K] logits against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  return scale(pick_mean(log_softmax(logits), labels), T(-1));
}

}  // namespace plab
