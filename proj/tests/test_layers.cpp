#include <gtest/gtest.h>

#include <random>

#include "aunet/layers.hpp"
#include "aunet/verify/oracles.hpp"

using namespace aunet;

namespace {

Tensor random(Shape s, std::mt19937_64& rng) {
  Tensor t(std::move(s), 0.0, true);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

oracle::Grid5 grid(const Tensor& t) {
  oracle::Grid5 g(t.dim(0), t.dim(1), {t.dim(2), t.dim(3), t.dim(4)});
  std::copy(t.data().begin(), t.data().end(), g.v.begin());
  return g;
}

}  // namespace

TEST(Conv3d, SingleConvParameterCount) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(Conv3dParams::make(1, 8, 3, 1, 1, true, rng).param_count(), 224u);
}

TEST(Conv3d, OutputExtents) {
  std::mt19937_64 rng(1);
  Tensor x(Shape{1, 2, 9, 8, 7});
  EXPECT_EQ(conv3d(x, Conv3dParams::make(2, 3, 3, 1, 1, true, rng)).shape(), (Shape{1, 3, 9, 8, 7}));
  EXPECT_EQ(conv3d(x, Conv3dParams::make(2, 3, 3, 2, 1, true, rng)).shape(), (Shape{1, 3, 5, 4, 4}));
  EXPECT_EQ(conv3d(x, Conv3dParams::make(2, 3, 3, 1, 0, true, rng)).shape(), (Shape{1, 3, 7, 6, 5}));
}

TEST(Conv3d, ChannelMismatchIsDimensionError) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(conv3d(Tensor(Shape{1, 3, 4, 4, 4}), Conv3dParams::make(2, 3, 3, 1, 1, true, rng)), DimensionError);
}

TEST(Conv3d, IdentityKernelCopiesInput) {
  std::mt19937_64 rng(2);
  Conv3dParams p = Conv3dParams::make(1, 1, 3, 1, 1, false, rng);
  for (double& v : p.weight.mutable_data()) v = 0;
  p.weight.mutable_data()[13] = 1.0;
  Tensor x = random({1, 1, 4, 5, 6}, rng);
  Tensor y = conv3d(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv3d, BlockedPathMatchesOracleWithWideChannels) {
  std::mt19937_64 rng(3);
  Conv3dParams p = Conv3dParams::make(16, 16, 3, 1, 1, true, rng);
  for (double& v : p.bias.mutable_data()) v = 0.25;
  Tensor x = random({2, 16, 5, 6, 19}, rng);
  Tensor y = conv3d(x, p);
  const auto o = oracle::conv3d(grid(x), {p.weight.data().begin(), p.weight.data().end()}, 16, {3, 3, 3},
                                std::vector<double>(16, 0.25), {1, 1, 1}, {1, 1, 1});
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], o.v[i], 1e-12);
}

TEST(MaxPool, TiesRouteToFirstIndex) {
  Tensor x(Shape{1, 1, 2, 2, 2}, 1.0, true);
  Tensor y = max_pool3d(x, 2);
  EXPECT_EQ(y.numel(), 1u);
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 1.0);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(x.grad()[i], 0.0);
}

TEST(MaxPool, IndivisibleExtentIsDimensionError) {
  EXPECT_THROW(max_pool3d(Tensor(Shape{1, 1, 3, 4, 4}), 2), DimensionError);
}

TEST(Trilinear, SameExtentIsIdentity) {
  std::mt19937_64 rng(4);
  Tensor x = random({1, 2, 3, 4, 5}, rng);
  Tensor y = trilinear_resample(x, {3, 4, 5});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Trilinear, AlignCornersKeepsCornersAndInterpolatesLinearFields) {
  Tensor x(Shape{1, 1, 2, 2, 2});
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t w = 0; w < 2; ++w) x.mutable_data()[(z * 2 + y) * 2 + w] = 1.0 + 2.0 * z - 3.0 * y + 0.5 * w;
  Tensor u = trilinear_resample(x, {5, 3, 4});
  for (std::size_t z = 0; z < 5; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t w = 0; w < 4; ++w) {
        const double expect = 1.0 + 2.0 * (z / 4.0) - 3.0 * (y / 2.0) + 0.5 * (w / 3.0);
        EXPECT_NEAR(u[(z * 3 + y) * 4 + w], expect, 1e-14);
      }
}

TEST(BatchNorm, TrainingNormalizesAndUpdatesRunningStats) {
  std::mt19937_64 rng(5);
  BatchNormParams bn = BatchNormParams::make(2);
  Tensor x = random({3, 2, 2, 2, 2}, rng);
  Tensor y = batch_norm(x, bn, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, m2 = 0, xm = 0, xv = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 8; ++i) {
        const double v = y[(b * 2 + c) * 8 + i], xi = x[(b * 2 + c) * 8 + i];
        m += v;
        m2 += v * v;
        xm += xi;
      }
    m /= 24;
    xm /= 24;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 8; ++i) xv += std::pow(x[(b * 2 + c) * 8 + i] - xm, 2);
    xv /= 24;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(m2 / 24, xv / (xv + 1e-5), 1e-12);
    EXPECT_NEAR(bn.running_mean[c], 0.1 * xm, 1e-15);
    EXPECT_NEAR(bn.running_var[c], 0.9 + 0.1 * xv, 1e-15);
  }
}

TEST(BatchNorm, InferenceUsesRunningStats) {
  BatchNormParams bn = BatchNormParams::make(1);
  bn.running_mean = {2.0};
  bn.running_var = {4.0};
  Tensor x(Shape{1, 1, 1, 1, 2}, std::vector<double>{2.0, 6.0});
  Tensor y = batch_norm(x, bn, false);
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 4.0 / std::sqrt(4.0 + 1e-5), 1e-15);
}
