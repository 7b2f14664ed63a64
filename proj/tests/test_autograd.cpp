#include <gtest/gtest.h>

#include <memory>
#include <random>

#include "plab/autograd.hpp"
#include "plab/loss.hpp"
#include "support.hpp"

using namespace plab;
using plab::testing::check_op;
using plab::testing::random_tensor;

namespace {

// Random values kept away from 0 so kinked ops are differentiable at the sample.
Tensor<double> away_from_zero(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> t = random_tensor(shape, rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.values())
    if (flip(rng)) v = -v;
  return t;
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Var<double> x = leaf(random_tensor({3, 4}, rng));
  auto g = grad(sum(x), {x});
  for (double v : g[0].value().values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, NonScalarLossRejected) {
  Var<double> x = leaf(Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(grad(scale(x, 2.0), {x}), ShapeError);
}

TEST(Backward, UnselectedAndUnreachedLeaves) {
  Var<double> a = leaf(Tensor<double>({2}, 1.0));
  Var<double> b = leaf(Tensor<double>({2}, 3.0));
  Var<double> c = leaf(Tensor<double>({2}, 5.0));
  Var<double> loss = sum(mul(a, b));
  auto g = grad(loss, {a, c});
  EXPECT_EQ(g[0].value()[0], 3.0);
  EXPECT_EQ(g[1].value()[0], 0.0);
  // Leaves keep their values; nothing is written back into them.
  EXPECT_EQ(b.value()[0], 3.0);
}

TEST(Backward, NoGraphWhenDisabled) {
  Var<double> x = leaf(Tensor<double>({2}, 1.0));
  GradMode off(false);
  EXPECT_FALSE(exp(x).requires_grad());
}

TEST(FiniteDifference, Elementwise) {
  const auto x = away_from_zero({2, 5}, 11);
  std::mt19937_64 rng(3);
  const auto y = random_tensor({2, 5}, rng);
  check_op([&](const Var<double>& v) { return add(v, constant(y)); }, x, "add");
  check_op([&](const Var<double>& v) { return sub(constant(y), v); }, x, "sub");
  check_op([&](const Var<double>& v) { return mul(v, v); }, x, "mul");
  check_op([&](const Var<double>& v) { return affine(v, -2.5, 0.3); }, x, "affine");
  check_op([](const Var<double>& v) { return exp(v); }, x, "exp");
  check_op([](const Var<double>& v) { return relu(v); }, x, "relu");
  check_op([](const Var<double>& v) { return tanh(v); }, x, "tanh");
  check_op([](const Var<double>& v) { return abs(v); }, x, "abs");
  check_op([](const Var<double>& v) { return recip(v); }, x, "recip");
  check_op([](const Var<double>& v) { return clamp(v, -0.5, 0.55); }, away_from_zero({12}, 5), "clamp");
  const auto pos = random_tensor({7}, rng, 0.2, 2.0);
  check_op([](const Var<double>& v) { return sqrt(v); }, pos, "sqrt");
  check_op([](const Var<double>& v) { return log_floor(v, 1e-12); }, pos, "log_floor");
}

TEST(FiniteDifference, ReductionsAndBroadcasts) {
  const auto x = away_from_zero({3, 2, 4}, 21);
  check_op([](const Var<double>& v) { return sum(mul(v, v)); }, x, "sum");
  check_op([](const Var<double>& v) { return row_sum(mul(v, v)); }, x, "row_sum");
  check_op([](const Var<double>& v) { return expand_rows(row_sum(v), Shape{3, 5}); }, x, "expand_rows");
  check_op([](const Var<double>& v) { return row_max_abs(v); }, x, "row_max_abs", false);
  check_op([](const Var<double>& v) { return expand(sum(v), Shape{2, 2}); }, x, "expand");
  check_op([](const Var<double>& v) { return mul_scalar(v, sum(v)); }, x, "mul_scalar");
  check_op([](const Var<double>& v) { return channel_sum(mul(v, v)); }, x, "channel_sum");
  check_op([](const Var<double>& v) { return channel_affine(v, {2.0, -1.0}, {0.5, 0.1}); }, x, "channel_affine");
  std::mt19937_64 rng(5);
  const auto bias = random_tensor({2}, rng);
  check_op([&](const Var<double>& v) { return mul(v, add_channel_bias(v, constant(bias))); }, x, "add_channel_bias x");
  check_op([&](const Var<double>& b) { return add_channel_bias(constant(x), mul(b, b)); }, bias, "add_channel_bias b");
}

TEST(FiniteDifference, ShapeAndMatmul) {
  std::mt19937_64 rng(8);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 5}, rng);
  const auto bt = random_tensor({5, 4}, rng);
  const auto at = random_tensor({4, 3}, rng);
  check_op([&](const Var<double>& v) { return matmul(mul(v, v), constant(b)); }, a, "matmul A");
  check_op([&](const Var<double>& v) { return matmul(constant(a), mul(v, v)); }, b, "matmul B");
  check_op([&](const Var<double>& v) { return matmul(mul(v, v), constant(b), true, false); }, at, "matmul A^T");
  check_op([&](const Var<double>& v) { return matmul(constant(a), mul(v, v), false, true); }, bt, "matmul B^T");
  check_op([&](const Var<double>& v) { return matmul(constant(at), mul(v, v), true, true); }, bt, "matmul A^T B^T");
  check_op([&](const Var<double>& v) { return matmul(mul(v, v), constant(bt), true, true); }, at, "matmul A^T B^T (A)");
  const auto t = random_tensor({2, 3, 4}, rng);
  check_op([](const Var<double>& v) { return reshape(mul(v, v), Shape{6, 4}); }, t, "reshape");
  check_op([](const Var<double>& v) { return swap01(mul(v, v)); }, t, "swap01");
}

TEST(FiniteDifference, ImageOps) {
  std::mt19937_64 rng(9);
  const auto img = random_tensor({2, 2, 4, 4}, rng);
  check_op([](const Var<double>& v) { return im2col(mul(v, v), 3); }, img, "im2col");
  const auto cols = random_tensor({18, 32}, rng);
  check_op([](const Var<double>& v) { return col2im(mul(v, v), Shape{2, 2, 4, 4}, 3); }, cols, "col2im");
  check_op([](const Var<double>& v) { return avg_pool2(mul(v, v)); }, img, "avg_pool2");
  const auto small = random_tensor({2, 2, 2, 2}, rng);
  check_op([](const Var<double>& v) { return avg_pool2_adjoint(mul(v, v), Shape{2, 2, 4, 4}); }, small, "pool adjoint");

  auto map = std::make_shared<std::vector<std::int32_t>>(2 * 16, -1);
  for (int p = 0; p < 16; ++p) {
    (*map)[p] = (p % 4 == 3) ? -1 : p + 1;  // shift left by one
    (*map)[16 + p] = (p / 4) * 4 + (3 - p % 4);  // horizontal flip
  }
  std::shared_ptr<const std::vector<std::int32_t>> cmap = map;
  check_op([&](const Var<double>& v) { return gather_pixels(mul(v, v), cmap); }, img, "gather_pixels");
  check_op([&](const Var<double>& v) { return scatter_pixels(mul(v, v), cmap); }, img, "scatter_pixels");
}

TEST(FiniteDifference, ClassificationHeads) {
  std::mt19937_64 rng(10);
  const auto z = random_tensor({4, 3}, rng, -2, 2);
  const std::vector<int> labels{0, 2, 1, 2};
  check_op([](const Var<double>& v) { return log_softmax(v); }, z, "log_softmax");
  check_op([](const Var<double>& v) { return softmax(v); }, z, "softmax");
  check_op([&](const Var<double>& v) { return cross_entropy(v, labels); }, z, "cross_entropy");
  Tensor<double> q({4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) q[r * 3 + c] = (1.0 + double(r + c)) / (3.0 + 3.0 * double(r) + 3.0);
  check_op([&](const Var<double>& v) { return kl_rows(softmax(v), q); }, z, "kl_rows");
}

TEST(FiniteDifference, ConvolutionInputAndWeights) {
  // conv = matmul(W, im2col(x)); both operands checked through the full composition.
  std::mt19937_64 rng(12);
  const auto x = random_tensor({2, 3, 4, 4}, rng);
  const auto w = random_tensor({5, 27}, rng);
  auto conv = [](const Var<double>& in, const Var<double>& wt) {
    Var<double> y = matmul(wt, im2col(in, 3));
    return tanh(swap01(reshape(y, Shape{5, 2, 16})));
  };
  check_op([&](const Var<double>& v) { return conv(v, constant(w)); }, x, "conv input");
  check_op([&](const Var<double>& v) { return conv(constant(x), v); }, w, "conv weights");
}
