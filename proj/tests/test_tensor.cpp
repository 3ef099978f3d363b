#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "aunet/gradcheck.hpp"
#include "aunet/ops.hpp"

using namespace aunet;

namespace {

Tensor filled(Shape s, std::vector<double> v, bool rg = true) { return Tensor(std::move(s), std::move(v), rg); }

}  // namespace

TEST(Tensor, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{3, 2})), DimensionError);
  EXPECT_THROW(add(Tensor(Shape{2, 3}), Tensor(Shape{3})), DimensionError);
}

TEST(Tensor, BroadcastAlongExtentOneAxes) {
  Tensor a = filled({2, 2}, {1, 2, 3, 4});
  Tensor b = filled({1, 2}, {10, 20});
  Tensor y = add(a, b);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{11, 22, 13, 24}));
  backward(sum(y));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{2, 2}));
}

TEST(Tensor, MulAndSubValues) {
  Tensor a = filled({3}, {1, -2, 3}), b = filled({3}, {4, 5, -6});
  Tensor m = mul(a, b), s = sub(a, b);
  EXPECT_EQ(m[1], -10.0);
  EXPECT_EQ(s[2], 9.0);
  backward(sum(m));
  EXPECT_EQ(a.grad()[0], 4.0);
  EXPECT_EQ(b.grad()[2], 3.0);
}

TEST(Tensor, ReluSubgradientAtZeroIsZero) {
  Tensor a = filled({3}, {-1.0, 0.0, 2.0});
  backward(sum(relu(a)));
  EXPECT_EQ(a.grad()[0], 0.0);
  EXPECT_EQ(a.grad()[1], 0.0);
  EXPECT_EQ(a.grad()[2], 1.0);
}

TEST(Tensor, SigmoidIsStableForLargeInputs) {
  Tensor a = filled({4}, {-1000.0, -40.0, 40.0, 1000.0});
  Tensor y = sigmoid(a);
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(y[0], 0.0);
  EXPECT_LT(y[3], 1.0);
  EXPECT_NEAR(sigmoid_value(3.0), 0.9525741268224334, 1e-15);
}

TEST(Tensor, SoftmaxChannelSumsToOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 5);
  Tensor x(Shape{2, 4, 2, 3, 2});
  for (double& v : x.mutable_data()) v = n(rng);
  Tensor y = softmax_channel(x);
  const std::size_t sp = 12;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < sp; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += y[(b * 4 + c) * sp + i];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, ConcatAndSliceRoundTrip) {
  Tensor a(Shape{1, 2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor b(Shape{1, 1, 1, 1, 2}, std::vector<double>{5, 6});
  Tensor c = concat_channels({a, b});
  EXPECT_EQ(c.dim(1), 3u);
  Tensor s = slice_channels(c, 2, 1);
  EXPECT_EQ(s[0], 5.0);
  EXPECT_EQ(s[1], 6.0);
  EXPECT_THROW(slice_channels(c, 2, 2), DimensionError);
}

TEST(Tensor, GradientsAccumulateOverFanOut) {
  Tensor x = filled({1}, {3.0});
  backward(add(mul(x, x), scale(x, 2.0)));
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Tensor, BackwardReleasesTheGraph) {
  Tensor x = filled({2}, {1.0, 2.0});
  Tensor y = sum(mul(x, x));
  std::weak_ptr<Node> inner = y.node().inputs.at(0);
  ASSERT_FALSE(inner.expired());
  backward(y);
  EXPECT_TRUE(inner.expired());
  EXPECT_TRUE(y.node().inputs.empty());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x = filled({2}, {1.0, 2.0});
  {
    NoGradGuard g;
    Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node().inputs.empty());
  }
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor x = filled({2}, {1.0, 2.0});
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Tensor, MeanMatchesSumOverCount) {
  Tensor x = filled({4}, {1, 2, 3, 6});
  EXPECT_DOUBLE_EQ(mean(x).item(), 3.0);
  backward(mean(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(GradCheck, FiniteDifferenceOfQuadratic) {
  Tensor x = filled({3}, {0.5, -1.0, 2.0});
  auto f = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v * v * v;
    return s;
  };
  Tensor g = finite_difference_grad(f, x, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], 3 * x[i] * x[i], 1e-9);
  EXPECT_EQ(x[0], 0.5);  // restored exactly
}

TEST(GradCheck, RelativeErrorConventions) {
  const std::vector<double> z{0.0, 0.0}, a{1.0, 2.0}, b{1.0, 2.2};
  EXPECT_EQ(max_relative_error(z, z), 0.0);
  EXPECT_NEAR(max_relative_error(a, b), 0.2 / 2.2, 1e-15);
  EXPECT_THROW(max_relative_error(a, std::vector<double>{1.0}), DimensionError);
}
