#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "plab/autograd.hpp"
#include "plab/errors.hpp"

namespace plab {

/// Floor applied to probabilities inside logarithms.
inline constexpr double kProbFloor = 1e-12;

namespace detail {

template <typename T>
void require_distribution(std::span<const T> p, const char* which) {
  const double tol = sizeof(T) >= 8 ? 1e-6 : 1e-4;
  double s = 0;
  for (T v : p) {
    if (!(v >= T(0))) throw ValueError(std::string(which) + " has a negative or non-finite entry");
    s += double(v);
  }
  if (std::abs(s - 1.0) > tol) throw ValueError(std::string(which) + " is not normalized (sum " + std::to_string(s) + ")");
}

}  // namespace detail

/// KL(p || q) = sum p ln(p / q), both arguments probability vectors.
template <typename T>
T kl_divergence(std::span<const T> p, std::span<const T> q) {
  if (p.size() != q.size() || p.empty()) throw ShapeError("kl_divergence: length mismatch");
  detail::require_distribution(p, "p");
  detail::require_distribution(q, "q");
  const T floor = T(kProbFloor);
  T kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) kl += p[i] * (std::log(std::max(p[i], floor)) - std::log(std::max(q[i], floor)));
  return std::max(kl, T(0));
}

/// Row-wise KL(p_i || q_i) for [N, K] probabilities; differentiable in p.
template <typename T>
Var<T> kl_rows(const Var<T>& p, const Tensor<T>& q) {
  detail::require_same_shape(p.shape(), q.shape(), "kl_rows");
  const T floor = T(kProbFloor);
  Tensor<T> log_q = detail::map(q, [floor](T v) { return std::log(std::max(v, floor)); });
  return row_sum(mul(p, sub(log_floor(p, floor), constant(std::move(log_q)))));
}

/// 1 - cos(a, b); lies in [0, 2].
template <typename T>
T matching_loss(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("matching_loss: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * double(b[i]);
    aa += double(a[i]) * double(a[i]);
    bb += double(b[i]) * double(b[i]);
  }
  if (aa == 0 || bb == 0) throw ValueError("matching_loss: cosine undefined for a zero-norm gradient");
  const double c = std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
  return T(1.0 - c);
}

/// Flattens a list of gradient tensors into one vector.
template <typename T>
std::vector<T> flatten(const std::vector<Var<T>>& parts) {
  std::vector<T> out;
  for (const auto& p : parts) out.insert(out.end(), p.value().values().begin(), p.value().values().end());
  return out;
}

/// Differentiable 1 - cos between a fixed gradient and a graph-carrying one,
/// both given as matching lists of per-parameter tensors.
template <typename T>
Var<T> matching_loss(const std::vector<Tensor<T>>& target, const std::vector<Var<T>>& poison) {
  if (target.size() != poison.size()) throw ShapeError("matching_loss: parameter lists differ");
  double tt = 0;
  Var<T> ab, bb;
  for (std::size_t i = 0; i < target.size(); ++i) {
    for (T v : target[i].values()) tt += double(v) * double(v);
    Var<T> d = dot(constant(target[i]), poison[i]);
    Var<T> n = dot(poison[i], poison[i]);
    ab = ab.defined() ? add(ab, d) : d;
    bb = bb.defined() ? add(bb, n) : n;
  }
  if (tt == 0 || bb.value().item() == T(0))
    throw ValueError("matching_loss: cosine undefined for a zero-norm gradient");
  Var<T> cosine = scale(mul(ab, recip(sqrt(bb))), T(1.0 / std::sqrt(tt)));
  return affine(cosine, T(-1), T(1));
}

}  // namespace plab
