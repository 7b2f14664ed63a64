#pragma once

// Test-only oracles: central finite differences and random tensors.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "plab/autograd.hpp"

namespace plab::testing {

/// Fresh empty directory under the system temp dir, unique per test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "plab_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

/// True when a and b agree to `rel` relative, or are both below `abs_floor`.
inline ::testing::AssertionResult close_rel(double a, double b, double rel, double abs_floor = 1e-8) {
  if (std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << a << " vs " << b << " (rel err " << rel_err(a, b) << ")";
}

/// Central-difference gradient of a scalar function of one tensor.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                       double step = 1e-5) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

inline void expect_gradients_close(const Tensor<double>& analytic, const Tensor<double>& numeric, double rel,
                                   const std::string& what, double abs_floor = 1e-8) {
  ASSERT_EQ(analytic.shape(), numeric.shape()) << what;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    EXPECT_TRUE(close_rel(analytic[i], numeric[i], rel, abs_floor)) << what << " coordinate " << i;
}

using UnaryOp = std::function<Var<double>(const Var<double>&)>;

/// Checks d/dx <op(x), w> against finite differences, and, when asked, the
/// gradient of <d/dx <op(x), w>, v> (exercising the differentiable backward).
inline void check_op(const UnaryOp& op, const Tensor<double>& x0, const std::string& name, bool second_order = true,
                     double rel = 1e-4, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  const Shape out_shape = [&] {
    GradMode off(false);
    return op(constant(x0)).shape();
  }();
  const Tensor<double> w = random_tensor(out_shape, rng);
  const Tensor<double> v = random_tensor(x0.shape(), rng);

  auto value = [&](const Tensor<double>& x) {
    GradMode off(false);
    return dot(op(constant(x)), constant(w)).value().item();
  };
  Var<double> x = leaf(x0);
  auto g = grad(dot(op(x), constant(w)), {x});
  expect_gradients_close(g[0].value(), numeric_gradient(value, x0), rel, name + " first order");

  if (!second_order) return;
  auto directional = [&](const Tensor<double>& xt) {
    Var<double> xl = leaf(xt);
    auto gg = grad(dot(op(xl), constant(w)), {xl});
    double s = 0;
    for (std::size_t i = 0; i < xt.size(); ++i) s += gg[0].value()[i] * v[i];
    return s;
  };
  Var<double> x2 = leaf(x0);
  auto g1 = grad(dot(op(x2), constant(w)), {x2}, /*create_graph=*/true);
  auto g2 = grad(dot(g1[0], constant(v)), {x2});
  expect_gradients_close(g2[0].value(), numeric_gradient(directional, x0), rel, name + " second order", 1e-7);
}

}  // namespace plab::testing
