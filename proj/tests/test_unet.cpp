#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "aunet/checkpoint.hpp"
#include "aunet/unet.hpp"

using namespace aunet;

namespace {

Tensor random(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t(std::move(s));
  std::normal_distribution<double> n(0, 1);
  for (double& v : t.mutable_data()) v = n(rng);
  return t;
}

std::filesystem::path tmp(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / "aunet_test_unet";
  std::filesystem::create_directories(d);
  return d / name;
}

}  // namespace

TEST(Network, OutputShapesAndSoftmax) {
  ModelConfig c;
  c.depth = 3;
  c.base_channels = 4;
  Network net = Network::build(c, 1);
  const ForwardOutput o = net.forward(random({2, 1, 8, 8, 12}, 2), {.training = true});
  EXPECT_EQ(o.main.shape(), (Shape{2, 3, 8, 8, 12}));
  ASSERT_EQ(o.aux.size(), 1u);
  EXPECT_EQ(o.aux[0].shape(), o.main.shape());
  ASSERT_EQ(o.attention_maps.size(), 1u);
  EXPECT_EQ(o.attention_maps[0].shape(), (Shape{2, 1, 4, 4, 6}));
  EXPECT_EQ(o.attention_scales[0], 2u);
  const std::size_t sp = 8 * 8 * 12;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < sp; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += o.main[(b * 3 + k) * sp + i];
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
  for (double a : o.attention_maps[0].data()) {
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
}

TEST(Network, GatesSitAtIntermediateScalesOnly) {
  ModelConfig c;
  Network net = Network::build(c, 1);
  EXPECT_EQ(net.gate_count(), 2u);  // depth 4: scales 3 and 2
  const ForwardOutput o = net.forward(random({1, 1, 16, 16, 16}, 3));
  ASSERT_EQ(o.attention_scales.size(), 2u);
  EXPECT_EQ(o.attention_scales[0], 3u);
  EXPECT_EQ(o.attention_scales[1], 2u);
  EXPECT_EQ(o.aux.size(), 2u);
  c.deep_supervision = false;
  EXPECT_TRUE(Network::build(c, 1).forward(random({1, 1, 8, 8, 8}, 3)).aux.empty());
}

TEST(Network, IndivisibleExtentsAreDimensionErrors) {
  Network net = Network::build(ModelConfig{}, 1);
  EXPECT_THROW(net.forward(Tensor(Shape{1, 1, 12, 16, 16})), DimensionError);
  EXPECT_THROW(net.forward(Tensor(Shape{1, 2, 16, 16, 16})), DimensionError);
}

TEST(Network, ConfigValidation) {
  ModelConfig c;
  c.depth = 1;
  EXPECT_THROW(Network::build(c, 1), ConfigError);
  c = {};
  c.n_gates = 3;
  EXPECT_THROW(Network::build(c, 1), ConfigError);
  c = {};
  c.n_classes = 1;
  EXPECT_THROW(Network::build(c, 1), ConfigError);
}

TEST(Network, TrunkInitializationIndependentOfGates) {
  ModelConfig on, off;
  off.attention_enabled = false;
  const auto a = Network::build(on, 5).named_parameters(), b = Network::build(off, 5).named_parameters();
  std::size_t matched = 0;
  for (const auto& [name, t] : b) {
    for (const auto& [na, ta] : a) {
      if (na == name) {
        ASSERT_TRUE(std::equal(t.data().begin(), t.data().end(), ta.data().begin())) << name;
        ++matched;
      }
    }
  }
  EXPECT_EQ(matched, b.size());
}

TEST(Network, ParameterCountClosedForm) {
  for (std::size_t depth : {2u, 3u, 4u, 5u}) {
    for (bool att : {false, true}) {
      ModelConfig c;
      c.depth = depth;
      c.attention_enabled = att;
      EXPECT_EQ(param_count(Network::build(c, 1)), expected_param_count(c)) << depth << att;
    }
  }
  ModelConfig c;
  EXPECT_EQ(param_count(Network::build(c, 1)), 404483u);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  ModelConfig c;
  c.depth = 3;
  c.base_channels = 2;
  Network net = Network::build(c, 7);
  const Tensor x = random({1, 1, 8, 8, 8}, 8);
  net.forward(x, {.training = true});  // moves the running statistics
  save_checkpoint(tmp("a.ckpt").string(), net, {5, 2, {}, {}});
  LoadedCheckpoint lc = load_checkpoint(tmp("a.ckpt").string());
  EXPECT_EQ(lc.net.config(), c);
  EXPECT_EQ(lc.progress.step, 5u);
  const Tensor ya = net.forward(x).main, yb = lc.net.forward(x).main;
  for (std::size_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya[i], yb[i]);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  Network net = Network::build(ModelConfig{.depth = 2, .base_channels = 2}, 1);
  const auto p = tmp("b.ckpt");
  save_checkpoint(p.string(), net);
  std::filesystem::resize_file(p, std::filesystem::file_size(p) - 9);
  EXPECT_THROW(load_checkpoint(p.string()), FormatError);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "NOTACKPT and more bytes";
  }
  EXPECT_THROW(load_checkpoint(p.string()), FormatError);
  EXPECT_THROW(load_checkpoint(tmp("missing.ckpt").string()), IoError);
}
