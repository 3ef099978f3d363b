#pragma once

// Property and oracle checks shared by `aunet verify`, the acceptance binary
// and the unit tests. Every check records its measured value next to the
// tolerance it was held to.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aunet/attention_gate.hpp"
#include "aunet/checkpoint.hpp"
#include "aunet/gradcheck.hpp"
#include "aunet/metrics.hpp"
#include "aunet/synthetic.hpp"
#include "aunet/training.hpp"
#include "aunet/verify/oracles.hpp"

namespace aunet::verify {

enum class Relation { Below, AtMost, AtLeast };

struct Check {
  std::string group;
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  Relation relation = Relation::Below;
  bool passed = false;
  std::string note;
};

struct Report {
  std::vector<Check> checks;

  void add(std::string group, std::string name, double measured, double tolerance, Relation rel = Relation::Below,
           std::string note = {}) {
    bool ok = false;
    switch (rel) {
      case Relation::Below: ok = measured < tolerance; break;
      case Relation::AtMost: ok = measured <= tolerance; break;
      case Relation::AtLeast: ok = measured >= tolerance; break;
    }
    if (std::isnan(measured)) ok = false;
    checks.push_back({std::move(group), std::move(name), measured, tolerance, rel, ok, std::move(note)});
  }
  void add_flag(std::string group, std::string name, bool ok, std::string note = {}) {
    add(std::move(group), std::move(name), ok ? 1.0 : 0.0, 1.0, Relation::AtLeast, std::move(note));
  }
  void append(const Report& o) { checks.insert(checks.end(), o.checks.begin(), o.checks.end()); }

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const Check& c) { return !c.passed; }));
  }

  static std::string line(const Check& c) {
    static const char* rel[] = {"<", "<=", ">="};
    std::ostringstream s;
    s << (c.passed ? "[PASS] " : "[FAIL] ") << c.group << "/" << c.name << ": ";
    s.precision(3);
    s << std::scientific << c.measured << " " << rel[static_cast<int>(c.relation)] << " " << c.tolerance;
    if (!c.note.empty()) s << "  (" << c.note << ")";
    return s.str();
  }
  std::string to_text() const {
    std::string out;
    for (const auto& c : checks) out += line(c) + "\n";
    return out;
  }
};

inline constexpr double kFdStep = 1e-5;
inline constexpr double kElementwiseTol = 1e-6;
inline constexpr double kOpTol = 1e-6;
inline constexpr double kNetworkTol = 1e-5;
inline constexpr double kOracleTol = 1e-12;
inline constexpr double kSurfaceTol = 1e-9;
inline constexpr double kScalingTol = 1e-9;
inline constexpr double kInitTol = 1e-9;

namespace detail {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = true) {
  Tensor t(shape, 0.0, requires_grad);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

// Values in [-2, 2] with pairwise gaps of at least 4/n, in random order, so
// that no finite-difference step can reorder them.
inline Tensor distinct_tensor(const Shape& shape, std::mt19937_64& rng) {
  Tensor t(shape, 0.0, true);
  const std::size_t n = t.numel();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i] = -2.0 + 4.0 * (static_cast<double>(perm[i]) + 0.5) / static_cast<double>(n);
  return t;
}

inline std::vector<double> grad_or_zero(const Tensor& t) {
  if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
  return {t.grad().begin(), t.grad().end()};
}

inline oracle::Grid5 to_grid(const Tensor& t) {
  oracle::Grid5 g(t.dim(0), t.dim(1), {t.dim(2), t.dim(3), t.dim(4)});
  std::copy(t.data().begin(), t.data().end(), g.v.begin());
  return g;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Worst norm-wise relative error between backward() and central differences
/// of L = sum(R * fn()) over every tensor in `inputs`, with R a fixed random
/// projection of the output.
///
/// With `pooled`, the error is taken once over the concatenation of all input
/// gradients instead of per tensor. Network checks use this: a conv bias in
/// front of batch norm has an exactly zero gradient, and a per-tensor ratio
/// of two rounding residues is meaningless.
inline double gradient_error(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, std::mt19937_64& rng,
                             double eps = kFdStep, bool pooled = false) {
  Shape out_shape;
  {
    NoGradGuard g;
    out_shape = fn().shape();
  }
  const Tensor r = detail::random_tensor(out_shape, rng, -1.0, 1.0, false);
  for (auto& t : inputs) t.zero_grad();
  backward(sum(mul(fn(), r)));
  auto f = [&](const Tensor&) {
    NoGradGuard g;
    return sum(mul(fn(), r)).item();
  };
  double worst = 0.0;
  std::vector<double> all_a, all_n;
  for (auto& t : inputs) {
    const std::vector<double> analytic = detail::grad_or_zero(t);
    const Tensor numeric = finite_difference_grad(f, t, eps);
    if (pooled) {
      all_a.insert(all_a.end(), analytic.begin(), analytic.end());
      all_n.insert(all_n.end(), numeric.data().begin(), numeric.data().end());
    } else {
      worst = std::max(worst, max_relative_error(analytic, numeric.data()));
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return pooled ? max_relative_error(all_a, all_n) : worst;
}

/// Scales every conv3d gradient by 1.1 while alive.
class ConvBackwardFault {
 public:
  ConvBackwardFault() { testing::conv_backward_fault() = true; }
  ~ConvBackwardFault() { testing::conv_backward_fault() = false; }
  ConvBackwardFault(const ConvBackwardFault&) = delete;
  ConvBackwardFault& operator=(const ConvBackwardFault&) = delete;
};

inline AttentionGateParams random_gate(std::size_t f_l, std::size_t f_g, std::size_t f_int, std::mt19937_64& rng) {
  AttentionGateParams p = make_attention_gate(f_l, f_g, f_int, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Tensor* t : {&p.w_x.weight, &p.w_g.weight, &p.w_g.bias, &p.psi.weight, &p.psi.bias}) {
    for (double& v : t->mutable_data()) v = u(rng);
  }
  return p;
}

inline std::vector<Tensor> gate_tensors(const AttentionGateParams& p) {
  return {p.w_x.weight, p.w_g.weight, p.w_g.bias, p.psi.weight, p.psi.bias};
}

// ---------------------------------------------------------------------------
// Gradient correctness

inline Report check_elementwise_gradients(std::uint64_t seed = 11) {
  Report r;
  std::mt19937_64 rng(seed);
  const std::string g = "gradients";
  const Shape s{2, 3, 3, 3, 3};
  {
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor(s, rng);
    r.add(g, "add", gradient_error([&] { return add(a, b); }, {a, b}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor({1, 3, 1, 1, 1}, rng);
    r.add(g, "add broadcast", gradient_error([&] { return add(a, b); }, {a, b}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor({2, 1, 3, 3, 3}, rng);
    r.add(g, "sub broadcast", gradient_error([&] { return sub(a, b); }, {a, b}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng), b = detail::random_tensor({1, 3, 1, 1, 1}, rng);
    r.add(g, "mul broadcast", gradient_error([&] { return mul(a, b); }, {a, b}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng);
    r.add(g, "scale", gradient_error([&] { return scale(a, -1.7); }, {a}, rng), kElementwiseTol);
  }
  {
    // keep every input at least 1e-3 away from the kink
    Tensor a = detail::random_tensor(s, rng);
    for (double& v : a.mutable_data()) v = std::copysign(1e-3 + std::abs(v), v);
    r.add(g, "relu", gradient_error([&] { return relu(a); }, {a}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng);
    r.add(g, "sigmoid", gradient_error([&] { return sigmoid(a); }, {a}, rng), kElementwiseTol);
  }
  {
    Tensor a = detail::random_tensor(s, rng);
    r.add(g, "sum", gradient_error([&] { return sum(a); }, {a}, rng), kElementwiseTol);
    r.add(g, "mean", gradient_error([&] { return mean(a); }, {a}, rng), kElementwiseTol);
  }
  {
    Tensor x = detail::random_tensor(s, rng), al = detail::random_tensor({2, 1, 3, 3, 3}, rng, 0.01, 0.99);
    r.add(g, "gate_apply", gradient_error([&] { return gate_apply(x, al); }, {x, al}, rng), kElementwiseTol);
  }
  return r;
}

inline Report check_layer_gradients(std::uint64_t seed = 12) {
  Report r;
  std::mt19937_64 rng(seed);
  const std::string g = "gradients";
  {
    Tensor a = detail::random_tensor({2, 4, 3, 2, 3}, rng);
    r.add(g, "softmax_channel", gradient_error([&] { return softmax_channel(a); }, {a}, rng), kOpTol);
  }
  {
    Tensor a = detail::random_tensor({1, 2, 3, 3, 2}, rng), b = detail::random_tensor({1, 3, 3, 3, 2}, rng);
    r.add(g, "concat_channels", gradient_error([&] { return concat_channels({a, b}); }, {a, b}, rng), kOpTol);
    r.add(g, "slice_channels", gradient_error([&] { return slice_channels(b, 1, 2); }, {b}, rng), kOpTol);
  }
  auto conv_case = [&](const char* name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                       std::size_t pad, Shape xs, bool bias) {
    Conv3dParams p = Conv3dParams::make(cin, cout, k, stride, pad, bias, rng);
    if (bias) p.bias = detail::random_tensor({cout}, rng);
    Tensor x = detail::random_tensor(xs, rng);
    std::vector<Tensor> in{x, p.weight};
    if (bias) in.push_back(p.bias);
    r.add(g, name, gradient_error([&] { return conv3d(x, p); }, in, rng), kOpTol);
  };
  conv_case("conv3d k3 pad1", 2, 3, 3, 1, 1, {2, 2, 4, 5, 3}, true);
  conv_case("conv3d k3 pad1 blocked", 8, 8, 3, 1, 1, {1, 8, 4, 4, 5}, true);
  conv_case("conv3d k3 stride2 pad1", 2, 2, 3, 2, 1, {1, 2, 5, 4, 4}, true);
  conv_case("conv3d k1 stride2", 3, 2, 1, 2, 0, {1, 3, 4, 4, 4}, false);
  conv_case("conv1x1x1", 3, 2, 1, 1, 0, {2, 3, 3, 3, 3}, true);
  {
    Tensor x = detail::distinct_tensor({2, 2, 4, 4, 6}, rng);
    r.add(g, "max_pool3d", gradient_error([&] { return max_pool3d(x, 2); }, {x}, rng), kOpTol);
  }
  {
    Tensor x = detail::random_tensor({1, 2, 3, 2, 4}, rng);
    r.add(g, "trilinear up", gradient_error([&] { return trilinear_resample(x, {5, 4, 7}); }, {x}, rng), kOpTol);
    r.add(g, "trilinear down", gradient_error([&] { return trilinear_resample(x, {2, 1, 3}); }, {x}, rng), kOpTol);
  }
  {
    BatchNormParams bn = BatchNormParams::make(3);
    bn.scale = detail::random_tensor({3}, rng, 0.5, 1.5);
    bn.shift = detail::random_tensor({3}, rng);
    Tensor x = detail::random_tensor({2, 3, 4, 4, 4}, rng);
    r.add(g, "batch_norm", gradient_error([&] { return batch_norm(x, bn, true); }, {x, bn.scale, bn.shift}, rng),
          kOpTol);
  }
  {
    AttentionGateParams p = random_gate(4, 6, 3, rng);
    Tensor x = detail::random_tensor({1, 4, 4, 4, 6}, rng), gs = detail::random_tensor({1, 6, 2, 2, 3}, rng);
    std::vector<Tensor> in = gate_tensors(p);
    in.push_back(x);
    in.push_back(gs);
    r.add(g, "attention_coefficients", gradient_error([&] { return attention_coefficients(x, gs, p); }, in, rng),
          kOpTol);
    r.add(g, "gated skip", gradient_error([&] { return gate_apply(x, attention_coefficients(x, gs, p)); }, in, rng),
          kOpTol);
  }
  {
    MultiGate m;
    m.sub_gates = {random_gate(4, 3, 2, rng), random_gate(4, 3, 2, rng)};
    Tensor x = detail::random_tensor({1, 4, 4, 4, 4}, rng), gs = detail::random_tensor({1, 3, 2, 2, 2}, rng);
    std::vector<Tensor> in{x, gs};
    for (const auto& sg : m.sub_gates)
      for (const auto& t : gate_tensors(sg)) in.push_back(t);
    r.add(g, "multi_gate_apply", gradient_error([&] { return multi_gate_apply(x, gs, m).gated; }, in, rng), kOpTol);
  }
  {
    Tensor logits = detail::random_tensor({1, 2, 4, 4, 4}, rng);
    Tensor target(Shape{1, 2, 4, 4, 4}, 0.0);
    std::bernoulli_distribution coin(0.4);
    auto t = target.mutable_data();
    for (std::size_t i = 0; i < 64; ++i) (coin(rng) ? t[64 + i] : t[i]) = 1.0;
    r.add(g, "dice_loss", gradient_error([&] { return dice_loss(softmax_channel(logits), target); }, {logits}, rng),
          kOpTol);
    Tensor l2 = detail::random_tensor({1, 2, 4, 4, 4}, rng);
    r.add(g, "combined_loss",
          gradient_error([&] { return combined_loss(softmax_channel(logits), {softmax_channel(l2)}, target); },
                         {logits, l2}, rng),
          kOpTol);
  }
  {
    // fan-out: the gradient of f1(x) + f2(x) equals the sum of the single-path gradients
    Tensor x = detail::random_tensor({1, 2, 2, 2, 2}, rng);
    auto grad_of = [&](const std::function<Tensor()>& f) {
      x.zero_grad();
      backward(f());
      auto gv = detail::grad_or_zero(x);
      x.zero_grad();
      return gv;
    };
    auto f1 = [&] { return sum(mul(x, x)); };
    auto f2 = [&] { return sum(sigmoid(x)); };
    const auto g1 = grad_of(f1), g2 = grad_of(f2), g12 = grad_of([&] { return add(f1(), f2()); });
    std::vector<double> expect(g1.size());
    for (std::size_t i = 0; i < g1.size(); ++i) expect[i] = g1[i] + g2[i];
    r.add(g, "fan-out accumulation", detail::max_abs_diff(g12, expect), 1e-12, Relation::Below);
  }
  return r;
}

/// Every parameter of a small network against finite differences of the
/// deep-supervised training loss.
inline double network_gradient_error(const ModelConfig& cfg, std::size_t extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net = Network::build(cfg, seed);
  // perturb gate parameters off the pass-through point so that every gate
  // tensor carries a generic gradient
  for (auto& [name, t] : net.named_parameters()) {
    if (name.find(".gate") != std::string::npos) {
      Tensor h = t;
      std::uniform_real_distribution<double> u(-0.5, 0.5);
      for (double& v : h.mutable_data()) v += u(rng);
    }
  }
  Tensor x = detail::random_tensor({1, cfg.in_channels, extent, extent, extent}, rng, -2.0, 2.0, false);
  Tensor target(Shape{1, cfg.n_classes, extent, extent, extent}, 0.0);
  {
    std::uniform_int_distribution<std::size_t> cls(0, cfg.n_classes - 1);
    const std::size_t sp = extent * extent * extent;
    auto t = target.mutable_data();
    for (std::size_t i = 0; i < sp; ++i) t[cls(rng) * sp + i] = 1.0;
  }
  auto loss = [&] {
    ForwardOutput o = net.forward(x, {.training = true});
    return combined_loss(o.main, o.aux, target);
  };
  return gradient_error(loss, net.parameters(), rng, kFdStep, true);
}

/// Largest |gradient| (analytic or numeric) of conv biases that feed batch
/// norm; the normalization cancels them, so both should vanish.
inline double bn_bias_gradient(const ModelConfig& cfg, std::size_t extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net = Network::build(cfg, seed);
  Tensor x = detail::random_tensor({1, cfg.in_channels, extent, extent, extent}, rng, -2.0, 2.0, false);
  const Tensor proj = detail::random_tensor({1, cfg.n_classes, extent, extent, extent}, rng, -1.0, 1.0, false);
  auto loss = [&] { return sum(mul(net.forward(x, {.training = true}).main, proj)); };
  std::vector<Tensor> biases;
  for (const auto& [name, t] : net.named_parameters()) {
    if (name.size() > 10 && name.compare(name.size() - 10, 10, ".conv.bias") == 0) biases.push_back(t);
  }
  net.zero_grad();
  backward(loss());
  double worst = 0.0;
  for (auto& b : biases) {
    for (double v : detail::grad_or_zero(b)) worst = std::max(worst, std::abs(v));
    const Tensor numeric = finite_difference_grad(
        [&](const Tensor&) {
          NoGradGuard ng;
          return loss().item();
        },
        b, kFdStep);
    for (double v : numeric.data()) worst = std::max(worst, std::abs(v));
  }
  net.zero_grad();
  return worst;
}

inline Report check_network_gradients() {
  Report r;
  ModelConfig tiny;
  tiny.depth = 2;
  tiny.base_channels = 2;
  r.add("gradients", "attention unet depth 2, 8^3, all parameters", network_gradient_error(tiny, 8, 21), kNetworkTol,
        Relation::Below, "no gated skip exists at depth 2");
  tiny.depth = 3;
  r.add("gradients", "attention unet depth 3, 8^3, all parameters", network_gradient_error(tiny, 8, 22), kNetworkTol,
        Relation::Below, "one gate, deep supervision head");
  r.add("gradients", "conv bias ahead of batch norm has zero gradient", bn_bias_gradient(tiny, 8, 23), 1e-7,
        Relation::Below, "central-difference noise floor");
  return r;
}

/// A conv backward rule scaled by 1.1 must be caught by the gradient check.
inline Report check_mutation_detected(std::uint64_t seed = 13) {
  Report r;
  std::mt19937_64 rng(seed);
  Conv3dParams p = Conv3dParams::make(2, 2, 3, 1, 1, true, rng);
  Tensor x = detail::random_tensor({1, 2, 3, 3, 3}, rng);
  double err = 0.0;
  {
    ConvBackwardFault fault;
    err = gradient_error([&] { return conv3d(x, p); }, {x, p.weight, p.bias}, rng);
  }
  r.add("mutation", "faulty conv backward is detected", err, kOpTol, Relation::AtLeast,
        "gradient error with the injected fault must exceed the tolerance");
  return r;
}

// ---------------------------------------------------------------------------
// Oracle equivalence

inline Report check_oracles(std::size_t instances = 100, std::uint64_t seed = 31) {
  Report r;
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::string g = "oracles";
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      const bool blocked = i % 5 == 0;  // exercise the register-blocked path too
      const std::size_t cin = blocked ? 8 : pick(1, 3), cout = blocked ? 8 : pick(1, 3);
      const std::size_t k = blocked ? 3 : (pick(0, 1) ? 3 : 1);
      const std::size_t stride = blocked ? 1 : pick(1, 2), pad = k == 3 ? pick(0, 1) : 0;
      Shape xs{pick(1, 2), cin, pick(3, 7), pick(3, 7), pick(3, 7)};
      Conv3dParams p = Conv3dParams::make(cin, cout, k, stride, pad, pick(0, 1) == 1, rng);
      if (p.has_bias()) p.bias = detail::random_tensor({cout}, rng);
      const Tensor x = detail::random_tensor(xs, rng);
      NoGradGuard ng;
      const Tensor y = conv3d(x, p);
      const auto o = oracle::conv3d(detail::to_grid(x), {p.weight.data().begin(), p.weight.data().end()}, cout,
                                    {k, k, k},
                                    p.has_bias() ? std::vector<double>(p.bias.data().begin(), p.bias.data().end())
                                                 : std::vector<double>{},
                                    {stride, stride, stride}, {pad, pad, pad});
      worst = std::max(worst, detail::max_abs_diff(y.data(), o.v));
    }
    r.add(g, "conv3d vs direct loops (" + std::to_string(instances) + " instances)", worst, kOracleTol,
          Relation::AtMost);
  }
  {
    double worst = 0.0;
    bool routed = true;
    for (std::size_t i = 0; i < instances; ++i) {
      const std::size_t w = pick(1, 3);
      Tensor x = detail::random_tensor({pick(1, 2), pick(1, 3), w * pick(1, 3), w * pick(1, 3), w * pick(1, 3)}, rng);
      if (i % 4 == 0) {
        // quantized values force ties
        for (double& v : x.mutable_data()) v = std::round(v);
      }
      const Tensor y = max_pool3d(x, w);
      const auto o = oracle::max_pool3d(detail::to_grid(x), w);
      worst = std::max(worst, detail::max_abs_diff(y.data(), o.out.v));
      const Tensor rr = detail::random_tensor(y.shape(), rng, -1.0, 1.0, false);
      x.zero_grad();
      backward(sum(mul(y, rr)));
      std::vector<double> expect(x.numel(), 0.0);
      for (std::size_t j = 0; j < o.argmax.size(); ++j) expect[o.argmax[j]] += rr[j];
      routed = routed && detail::max_abs_diff(detail::grad_or_zero(x), expect) == 0.0;
    }
    r.add(g, "max_pool3d vs window scan (" + std::to_string(instances) + " instances)", worst, kOracleTol,
          Relation::AtMost);
    r.add_flag(g, "max_pool3d gradient routed to first argmax", routed);
  }
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      const Tensor x = detail::random_tensor({1, pick(1, 2), pick(1, 5), pick(1, 5), pick(1, 5)}, rng);
      const Extents3 t{pick(1, 7), pick(1, 7), pick(1, 7)};
      NoGradGuard ng;
      const Tensor y = trilinear_resample(x, t);
      const auto o = oracle::trilinear(detail::to_grid(x), t);
      worst = std::max(worst, detail::max_abs_diff(y.data(), o.v));
    }
    r.add(g, "trilinear_resample vs per-point formula (" + std::to_string(instances) + " instances)", worst,
          kOracleTol, Relation::AtMost);
  }
  {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      const std::size_t fl = pick(1, 4), fg = pick(1, 4), fi = pick(1, 3);
      AttentionGateParams p = random_gate(fl, fg, fi, rng);
      const Extents3 gsp{pick(1, 3), pick(1, 3), pick(1, 3)};
      const std::size_t n = pick(1, 2);
      const Tensor x = detail::random_tensor({n, fl, 2 * gsp[0], 2 * gsp[1], 2 * gsp[2]}, rng);
      const Tensor gs = detail::random_tensor({n, fg, gsp[0], gsp[1], gsp[2]}, rng);
      NoGradGuard ng;
      const Tensor a = attention_coefficients(x, gs, p);
      oracle::GateWeights w{fl,
                            fg,
                            fi,
                            {p.w_x.weight.data().begin(), p.w_x.weight.data().end()},
                            {p.w_g.weight.data().begin(), p.w_g.weight.data().end()},
                            {p.w_g.bias.data().begin(), p.w_g.bias.data().end()},
                            {p.psi.weight.data().begin(), p.psi.weight.data().end()},
                            p.psi.bias[0]};
      const auto o = oracle::attention(detail::to_grid(x), detail::to_grid(gs), w);
      worst = std::max(worst, detail::max_abs_diff(a.data(), o.v));
    }
    r.add(g, "attention_coefficients vs direct evaluation (" + std::to_string(instances) + " instances)", worst,
          kOracleTol, Relation::AtMost);
  }
  {
    double worst = 0.0;
    std::size_t evaluated = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      const Dims3 d{pick(4, 12), pick(4, 12), pick(4, 12)};
      const Spacing3 sp{0.5 + 0.25 * static_cast<double>(pick(0, 6)), 0.5 + 0.25 * static_cast<double>(pick(0, 6)),
                        0.5 + 0.25 * static_cast<double>(pick(0, 6))};
      auto blob = [&](LabelVolume& l, std::uint8_t cls) {
        const double cz = static_cast<double>(pick(0, d[0] - 1)), cy = static_cast<double>(pick(0, d[1] - 1)),
                     cx = static_cast<double>(pick(0, d[2] - 1));
        const double rad = 1.0 + static_cast<double>(pick(0, 8)) * 0.5;
        std::bernoulli_distribution speck(0.05);
        for (std::size_t z = 0; z < d[0]; ++z)
          for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[2]; ++x) {
              const double dz = z - cz, dy = y - cy, dx = x - cx;
              if (dz * dz + dy * dy + dx * dx <= rad * rad || speck(rng)) l.at(z, y, x) = cls;
            }
        l.at(static_cast<std::size_t>(cz), static_cast<std::size_t>(cy), static_cast<std::size_t>(cx)) = cls;
      };
      LabelVolume a(d, sp), b(d, sp);
      blob(a, 1);
      blob(b, 1);
      std::vector<std::uint8_t> ma(a.labels.size()), mb(b.labels.size());
      for (std::size_t j = 0; j < ma.size(); ++j) {
        ma[j] = a.labels[j] == 1;
        mb[j] = b.labels[j] == 1;
      }
      const double got = surface_distance(a, b, 1, sp);
      const double want = oracle::assd(ma, mb, {d[0], d[1], d[2]}, sp);
      worst = std::max(worst, std::abs(got - want));
      ++evaluated;
    }
    r.add(g, "surface_distance vs all-pairs search (" + std::to_string(evaluated) + " instances)", worst, kSurfaceTol,
          Relation::AtMost);
  }
  {
    bool ok = true;
    for (std::size_t i = 0; i < instances; ++i) {
      const Dims3 d{pick(1, 8), pick(1, 8), pick(1, 8)};
      LabelVolume a(d, {1, 1, 1}), b(d, {1, 1, 1});
      for (auto& v : a.labels) v = static_cast<std::uint8_t>(pick(0, 2));
      for (auto& v : b.labels) v = static_cast<std::uint8_t>(pick(0, 2));
      for (std::uint8_t c = 0; c < 3; ++c) {
        const auto n = oracle::count(a.labels, b.labels, c);
        const auto pr = precision_recall(a, b, c);
        const double e_dsc = n.tp + n.fp + n.fn == 0 ? 1.0 : 2.0 * n.tp / (2.0 * n.tp + n.fp + n.fn);
        const bool both_empty = n.tp + n.fp + n.fn == 0;
        const double e_p = n.tp + n.fp == 0 ? (both_empty ? 1.0 : 0.0) : double(n.tp) / double(n.tp + n.fp);
        const double e_r = n.tp + n.fn == 0 ? (both_empty ? 1.0 : 0.0) : double(n.tp) / double(n.tp + n.fn);
        ok = ok && pr.precision == e_p && pr.recall == e_r && dsc(a, b, c) == e_dsc;
      }
    }
    r.add_flag(g, "dsc / precision / recall vs voxel counting", ok);
  }
  {
    std::mt19937_64 rr(seed + 1);
    Conv3dParams p = Conv3dParams::make(3, 2, 1, 1, 0, true, rr);
    p.bias = detail::random_tensor({2}, rr);
    const Tensor x = detail::random_tensor({2, 3, 3, 4, 5}, rr);
    NoGradGuard ng;
    r.add(g, "conv1x1x1 equals conv3d k=1", detail::max_abs_diff(conv1x1x1(x, p).data(), conv3d(x, p).data()), 0.0,
          Relation::AtMost, "bitwise");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient attenuation through a gated skip

/// Ratio check: with the coefficients detached and held at c and then 2c,
/// gradients of the encoder parameters feeding the gated skip double.
inline Report check_gate_gradient_scaling(std::uint64_t seed = 41) {
  Report r;
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 4;
  Network net = Network::build(cfg, seed);
  std::mt19937_64 rng(seed);
  const Tensor x = detail::random_tensor({1, 1, 8, 8, 8}, rng, -2.0, 2.0, false);
  Tensor probe;
  {
    NoGradGuard ng;
    probe = net.forward(x, {.training = true}).gated_skips.at(0);
  }
  const Tensor proj = detail::random_tensor(probe.shape(), rng, -1.0, 1.0, false);
  // encoder stages up to the gated scale (2) are strictly upstream of the skip
  std::vector<Tensor> upstream;
  for (const auto& [name, t] : net.named_parameters()) {
    if (name.rfind("enc1.", 0) == 0 || name.rfind("enc2.", 0) == 0) upstream.push_back(t);
  }
  auto grads_at = [&](double c) {
    net.zero_grad();
    ForwardOptions o{.training = true};
    o.gate.alpha_override = c;
    backward(sum(mul(net.forward(x, o).gated_skips.at(0), proj)));
    std::vector<double> all;
    for (const auto& t : upstream) {
      const auto gv = detail::grad_or_zero(t);
      all.insert(all.end(), gv.begin(), gv.end());
    }
    net.zero_grad();
    return all;
  };
  const double c = 0.37;
  const auto g1 = grads_at(c), g2 = grads_at(2.0 * c);
  std::vector<double> doubled(g1.size());
  for (std::size_t i = 0; i < g1.size(); ++i) doubled[i] = 2.0 * g1[i];
  const double rel = max_relative_error(g2, doubled);
  double norm = 0.0;
  for (double v : g1) norm = std::max(norm, std::abs(v));
  r.add("gate_scaling", "upstream gradient ratio at 2c vs c equals 2", rel, kScalingTol, Relation::Below,
        std::to_string(g1.size()) + " encoder parameters");
  r.add("gate_scaling", "upstream gradient is nonzero", norm, 1e-12, Relation::AtLeast);
  return r;
}

// ---------------------------------------------------------------------------
// Pass-through initialization

inline Report check_pass_through(std::uint64_t seed = 51) {
  Report r;
  const std::string g = "gate_init";
  const double expected = 1.0 / (1.0 + std::exp(-kPassThroughBias));
  r.add(g, "sigmoid(b_psi) rounds to 0.9526", std::abs(expected - 0.9526), 5e-5, Relation::Below);
  std::mt19937_64 rng(seed);
  for (std::size_t gates : {std::size_t{1}, std::size_t{2}}) {
    ModelConfig cfg;
    cfg.n_gates = gates;
    Network net = Network::build(cfg, seed);
    const Tensor x = detail::random_tensor({1, 1, 16, 16, 16}, rng, -2.0, 2.0, false);
    NoGradGuard ng;
    const ForwardOutput o = net.forward(x, {.training = true});
    double dev = 0.0;
    for (const auto& a : o.attention_maps)
      for (double v : a.data()) dev = std::max(dev, std::abs(v - expected));
    r.add(g, "every coefficient equals sigmoid(3), n_gates=" + std::to_string(gates), dev, kInitTol, Relation::Below,
          std::to_string(o.attention_maps.size()) + " maps");
  }
  {
    AttentionGateParams p = make_attention_gate(4, 8, 2, rng);
    const Tensor x = detail::random_tensor({1, 4, 6, 4, 4}, rng, -2.0, 2.0, false);
    const Tensor gs = detail::random_tensor({1, 8, 3, 2, 2}, rng, -2.0, 2.0, false);
    NoGradGuard ng;
    const Tensor xh = gate_apply(x, attention_coefficients(x, gs, p));
    double dev = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) dev = std::max(dev, std::abs(xh[i] - expected * x[i]));
    r.add(g, "gated skip equals sigmoid(3) * x", dev, kInitTol, Relation::Below);
  }
  {
    AttentionGateParams p = make_attention_gate(3, 5, 2, rng);
    Tensor x = detail::random_tensor({1, 3, 4, 4, 4}, rng), gs = detail::random_tensor({1, 5, 2, 2, 2}, rng);
    p.psi.weight.zero_grad();
    backward(sum(mul(gate_apply(x, attention_coefficients(x, gs, p)), detail::random_tensor(x.shape(), rng))));
    double n = 0.0;
    for (double v : detail::grad_or_zero(p.psi.weight)) n = std::max(n, std::abs(v));
    r.add(g, "psi gradient nonzero at initialization", n, 1e-8, Relation::AtLeast);
  }
  {
    // With the coefficients forced to 1, the gated and plain networks coincide bitwise.
    ModelConfig on, off;
    off.attention_enabled = false;
    Network a = Network::build(on, seed), b = Network::build(off, seed);
    const Tensor x = detail::random_tensor({1, 1, 16, 16, 16}, rng, -2.0, 2.0, false);
    NoGradGuard ng;
    ForwardOptions forced{.training = true};
    forced.gate.alpha_override = 1.0;
    const Tensor ya = a.forward(x, forced).main, yb = b.forward(x, {.training = true}).main;
    r.add(g, "alpha=1 reproduces the plain network", detail::max_abs_diff(ya.data(), yb.data()), 0.0,
          Relation::AtMost, "bitwise");
    const Tensor yp = a.forward(x, {.training = true}).main;
    r.add(g, "pass-through output deviation from plain network", detail::max_abs_diff(yp.data(), yb.data()), 1.0,
          Relation::Below, "bounded effect of the 0.9526 skip scaling");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Gate parameters implied by the configuration, counted from the field list
/// of one gate: W_x, W_g, b_g, psi, b_psi.
inline std::size_t analytic_gate_parameters(const ModelConfig& cfg) {
  std::size_t total = 0;
  for (std::size_t s = 2; s + 1 <= cfg.depth; ++s) {
    const std::size_t fl = cfg.base_channels << (s - 1), fg = cfg.base_channels << s;
    const std::size_t fi = std::max<std::size_t>(1, fl / cfg.gate_reduction);
    total += cfg.n_gates * (fl * fi + fg * fi + fi + fi + 1);
  }
  return total;
}

inline Report check_parameter_accounting() {
  Report r;
  const std::string g = "params";
  std::vector<ModelConfig> cfgs(4);
  cfgs[1].n_gates = 2;
  cfgs[2].depth = 3;
  cfgs[3].base_channels = 4;
  cfgs[3].depth = 5;
  for (const auto& base : cfgs) {
    ModelConfig on = base, off = base;
    on.attention_enabled = true;
    off.attention_enabled = false;
    const std::size_t pa = param_count(Network::build(on, 1)), pb = param_count(Network::build(off, 1));
    const double diff = static_cast<double>(pa) - static_cast<double>(pb);
    const std::string tag = "depth " + std::to_string(base.depth) + " base " + std::to_string(base.base_channels) +
                            " n_gates " + std::to_string(base.n_gates);
    r.add(g, "attention overhead equals gate formula, " + tag,
          std::abs(diff - static_cast<double>(analytic_gate_parameters(base))), 0.0, Relation::AtMost,
          std::to_string(pa) + " vs " + std::to_string(pb));
    r.add(g, "closed-form count matches enumeration, " + tag,
          std::abs(static_cast<double>(expected_param_count(on)) - static_cast<double>(pa)), 0.0, Relation::AtMost);
  }
  ModelConfig def, plain;
  plain.attention_enabled = false;
  const double overhead = static_cast<double>(param_count(Network::build(def, 1))) /
                              static_cast<double>(param_count(Network::build(plain, 1))) - 1.0;
  r.add(g, "default attention overhead fraction", overhead, 0.15, Relation::Below);
  std::mt19937_64 rng(1);
  r.add(g, "single conv 1->8 k3", std::abs(double(Conv3dParams::make(1, 8, 3, 1, 1, true, rng).param_count()) - 224.0),
        0.0, Relation::AtMost);
  return r;
}

// ---------------------------------------------------------------------------
// Determinism, formats and metric conventions

inline Report check_determinism_and_io(const std::filesystem::path& work) {
  Report r;
  const std::string g = "determinism_io";
  std::filesystem::create_directories(work);
  {
    ModelConfig mc;
    mc.depth = 2;
    mc.base_channels = 4;
    mc.n_classes = 2;
    SyntheticSpec ss;
    ss.dims = {16, 16, 16};
    ss.n_classes = 2;
    ss.class_intensity = {0.0, 1.0};
    ss.large_radius = {3.5, 5.0};
    ss.small_radius = {1.5, 2.0};
    ss.distractor_count = 0;
    Dataset data;
    for (std::uint64_t s = 1; s <= 3; ++s) {
      ss.seed = s;
      auto smp = generate_synthetic(ss);
      data.push_back({"v" + std::to_string(s), smp.image, smp.labels});
    }
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 7;
    tc.crop = {16, 16, 8};
    auto run = [&](const std::string& tag) {
      Network net = Network::build(mc, 3);
      TrainResult res = train(net, data, tc, &data);
      const auto path = work / ("determinism_" + tag + ".ckpt");
      save_checkpoint(path.string(), net, {res.optimizer.step, tc.epochs, res.optimizer.m, res.optimizer.v});
      return std::make_pair(res.log.to_jsonl(), detail::file_bytes(path));
    };
    const auto a = run("a"), b = run("b");
    r.add_flag(g, "same seed gives identical training log", a.first == b.first && !a.first.empty());
    r.add_flag(g, "same seed gives identical checkpoint bytes", a.second == b.second && !a.second.empty());
  }
  {
    std::mt19937_64 rng(5);
    Volume v({5, 7, 3}, {1.5, 2.0, 0.75});
    std::normal_distribution<double> n(0.0, 10.0);
    for (double& x : v.data) x = static_cast<double>(static_cast<float>(n(rng)));
    LabelVolume l({5, 7, 3}, {1.5, 2.0, 0.75});
    for (auto& x : l.labels) x = static_cast<std::uint8_t>(rng() % 4);
    const auto stem = (work / "roundtrip").string();
    write_volume(stem + "_image", v);
    write_labels(stem + "_label", l);
    r.add_flag(g, "intensity volume round-trips bitwise", read_volume(stem + "_image") == v);
    r.add_flag(g, "label volume round-trips bitwise", read_labels(stem + "_label") == l);
    {
      std::filesystem::resize_file(stem + "_image.raw", 5 * 7 * 3 * 4 - 6);
      bool ok = false;
      try {
        read_volume(stem + "_image");
      } catch (const FormatError& e) {
        const std::string m = e.what();
        ok = m.find("414") != std::string::npos && m.find("420") != std::string::npos;
      }
      r.add_flag(g, "truncated payload raises a format error naming both sizes", ok);
    }
  }
  {
    ModelConfig mc;
    mc.depth = 3;
    mc.base_channels = 4;
    mc.n_gates = 2;
    Network net = Network::build(mc, 9);
    std::mt19937_64 rng(9);
    for (auto& [name, t] : net.named_parameters()) {
      Tensor h = t;
      for (double& v : h.mutable_data()) v += std::uniform_real_distribution<double>(-1, 1)(rng);
    }
    for (auto& [name, b] : net.named_buffers())
      for (double& v : *b) v = std::uniform_real_distribution<double>(0.1, 2)(rng);
    const auto p1 = work / "roundtrip_a.ckpt", p2 = work / "roundtrip_b.ckpt";
    save_checkpoint(p1.string(), net, {17, 3, {}, {}});
    LoadedCheckpoint lc = load_checkpoint(p1.string());
    save_checkpoint(p2.string(), lc.net, lc.progress);
    bool same = lc.net.config() == mc && lc.progress.step == 17 && lc.progress.epoch == 3;
    const auto pa = net.named_parameters(), pb = lc.net.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      same = same && pa[i].first == pb[i].first &&
             std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin());
    }
    r.add_flag(g, "checkpoint round-trips bitwise", same && detail::file_bytes(p1) == detail::file_bytes(p2));
  }
  {
    LabelVolume empty({4, 4, 4}, {1, 1, 1}), some({4, 4, 4}, {1, 1, 1});
    some.at(1, 1, 1) = 1;
    const auto both = precision_recall(empty, empty, 1), pred_only = precision_recall(some, empty, 1),
               truth_only = precision_recall(empty, some, 1);
    r.add_flag(g, "dsc of two empty masks is 1", dsc(empty, empty, 1) == 1.0);
    r.add_flag(g, "dsc with one empty mask is 0", dsc(some, empty, 1) == 0.0 && dsc(empty, some, 1) == 0.0);
    r.add_flag(g, "precision/recall of two empty masks are 1", both.precision == 1.0 && both.recall == 1.0);
    r.add_flag(g, "undefined precision/recall member is 0 otherwise",
               pred_only.recall == 0.0 && pred_only.precision == 0.0 && truth_only.precision == 0.0 &&
                   truth_only.recall == 0.0);
    bool threw = false;
    try {
      surface_distance(some, empty, 1, {1, 1, 1});
    } catch (const UndefinedMetricError&) {
      threw = true;
    }
    r.add_flag(g, "surface distance with an empty mask is undefined", threw);
  }
  return r;
}

/// Every fast check (everything except the trained benchmark).
inline Report run_all(const std::filesystem::path& work) {
  Report r;
  r.append(check_elementwise_gradients());
  r.append(check_layer_gradients());
  r.append(check_network_gradients());
  r.append(check_mutation_detected());
  r.append(check_oracles());
  r.append(check_gate_gradient_scaling());
  r.append(check_pass_through());
  r.append(check_parameter_accounting());
  r.append(check_determinism_and_io(work));
  return r;
}

}  // namespace aunet::verify
