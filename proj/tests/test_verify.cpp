#include <gtest/gtest.h>

#include <filesystem>

#include "aunet/verify/suite.hpp"

using namespace aunet;

namespace {

void expect_all_pass(const verify::Report& r) {
  EXPECT_FALSE(r.checks.empty());
  for (const auto& c : r.checks) EXPECT_TRUE(c.passed) << verify::Report::line(c);
}

}  // namespace

TEST(Verify, ElementwiseGradients) { expect_all_pass(verify::check_elementwise_gradients()); }
TEST(Verify, LayerGradients) { expect_all_pass(verify::check_layer_gradients()); }
TEST(Verify, NetworkGradients) { expect_all_pass(verify::check_network_gradients()); }
TEST(Verify, Oracles) { expect_all_pass(verify::check_oracles()); }
TEST(Verify, GateGradientScaling) { expect_all_pass(verify::check_gate_gradient_scaling()); }
TEST(Verify, PassThrough) { expect_all_pass(verify::check_pass_through()); }
TEST(Verify, ParameterAccounting) { expect_all_pass(verify::check_parameter_accounting()); }
TEST(Verify, DeterminismAndIo) {
  expect_all_pass(verify::check_determinism_and_io(std::filesystem::temp_directory_path() / "aunet_test_verify"));
}

TEST(Verify, InjectedConvFaultFailsTheGradientCheck) {
  expect_all_pass(verify::check_mutation_detected());
  verify::Report faulty;
  {
    verify::ConvBackwardFault fault;
    faulty = verify::check_layer_gradients();
  }
  std::size_t conv_failures = 0;
  for (const auto& c : faulty.checks) conv_failures += !c.passed && c.name.find("conv") != std::string::npos;
  EXPECT_GE(conv_failures, 5u);
  // and the switch is off again
  expect_all_pass(verify::check_layer_gradients());
}

TEST(Verify, ReportListsMeasuredAndTolerance) {
  verify::Report r;
  r.add("g", "n", 2e-7, 1e-6);
  r.add("g", "m", 3.0, 1.0);
  EXPECT_FALSE(r.all_passed());
  EXPECT_EQ(r.failures(), 1u);
  const std::string t = r.to_text();
  EXPECT_NE(t.find("[PASS] g/n: 2.000e-07 < 1.000e-06"), std::string::npos);
  EXPECT_NE(t.find("[FAIL] g/m"), std::string::npos);
}
