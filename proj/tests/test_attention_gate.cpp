#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aunet/attention_gate.hpp"

using namespace aunet;

namespace {

Tensor random(Shape s, std::mt19937_64& rng, bool rg = false) {
  Tensor t(std::move(s), 0.0, rg);
  std::uniform_real_distribution<double> u(-2, 2);
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

}  // namespace

TEST(AttentionGate, ParameterCountFormula) {
  std::mt19937_64 rng(1);
  const auto p = make_attention_gate(16, 32, 8, rng);
  EXPECT_EQ(p.param_count(), gate_param_count(16, 32, 8));
  EXPECT_EQ(gate_param_count(16, 32, 8), 16u * 8 + 32 * 8 + 2 * 8 + 1);
}

TEST(AttentionGate, PassThroughInitGivesConstantCoefficients) {
  std::mt19937_64 rng(2);
  const auto p = make_attention_gate(4, 8, 2, rng);
  const Tensor x = random({2, 4, 6, 4, 8}, rng), g = random({2, 8, 3, 2, 4}, rng);
  const Tensor a = attention_coefficients(x, g, p);
  EXPECT_EQ(a.shape(), (Shape{2, 1, 6, 4, 8}));
  for (double v : a.data()) EXPECT_NEAR(v, 0.9525741268224334, 1e-12);
}

TEST(AttentionGate, SaturatedCoefficientsStayFiniteInUnitInterval) {
  std::mt19937_64 rng(3);
  auto p = make_attention_gate(3, 5, 2, rng);
  for (double& v : p.psi.weight.mutable_data()) v = 40.0;
  const Tensor x = random({1, 3, 4, 4, 4}, rng), g = random({1, 5, 2, 2, 2}, rng);
  const Tensor a = attention_coefficients(x, g, p);
  for (double v : a.data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(AttentionGate, GridMismatchIsDimensionError) {
  std::mt19937_64 rng(4);
  const auto p = make_attention_gate(3, 5, 2, rng);
  EXPECT_THROW(attention_coefficients(Tensor(Shape{1, 3, 4, 4, 4}), Tensor(Shape{1, 5, 3, 2, 2}), p), DimensionError);
  EXPECT_THROW(attention_coefficients(Tensor(Shape{1, 2, 4, 4, 4}), Tensor(Shape{1, 5, 2, 2, 2}), p), DimensionError);
}

TEST(AttentionGate, GateApplyBroadcastsOverChannels) {
  Tensor x(Shape{1, 2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor a(Shape{1, 1, 1, 1, 2}, std::vector<double>{0.5, 0.25});
  const Tensor y = gate_apply(x, a);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{0.5, 0.5, 1.5, 1.0}));
}

TEST(MultiGate, SubGatesPartitionChannels) {
  std::mt19937_64 rng(5);
  MultiGate m = MultiGate::make(2, 4, 6, 2, rng);
  // second sub-gate fully closed, first pass-through
  for (double& v : m.sub_gates[1].psi.bias.mutable_data()) v = -1e4;
  const Tensor x = random({1, 4, 2, 2, 2}, rng), g = random({1, 6, 1, 1, 1}, rng);
  const GatedSkip gs = multi_gate_apply(x, g, m);
  ASSERT_EQ(gs.alphas.size(), 2u);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 8; ++i) {
      const double expect = c < 2 ? 0.9525741268224334 * x[c * 8 + i] : 0.0;
      EXPECT_NEAR(gs.gated[c * 8 + i], expect, 1e-12);
    }
  EXPECT_EQ(m.param_count(), 2 * gate_param_count(4, 6, 2));
  EXPECT_THROW(MultiGate::make(3, 4, 6, 2, rng), ConfigError);
}

TEST(MultiGate, AlphaOverrideBlocksGateGradients) {
  std::mt19937_64 rng(6);
  MultiGate m = MultiGate::make(1, 2, 2, 1, rng);
  Tensor x = random({1, 2, 2, 2, 2}, rng, true), g = random({1, 2, 1, 1, 1}, rng, true);
  GateOptions o;
  o.alpha_override = 0.3;
  const GatedSkip gs = multi_gate_apply(x, g, m, o);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(gs.gated[i], 0.3 * x[i]);
  backward(sum(gs.gated));
  EXPECT_FALSE(m.sub_gates[0].psi.weight.has_grad());
  EXPECT_FALSE(g.has_grad());
  for (double v : x.grad()) EXPECT_DOUBLE_EQ(v, 0.3);
}
