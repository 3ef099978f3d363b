#pragma once

// Additive grid attention gate.
//
//   q     = psi( relu( W_x x_down + W_g g + b_g ) ) + b_psi     (at the gating grid)
//   alpha = resample( sigmoid(q) )                             (back to the skip grid)
//   x_hat = x * alpha                                          (broadcast over channels)
//
// W_x is a bias-free 1x1x1 projection with stride 2, so it also performs the
// downsampling of the skip features onto the gating grid.

#include <optional>
#include <random>
#include <vector>

#include "aunet/layers.hpp"
#include "aunet/ops.hpp"

namespace aunet {

/// Bias added to the psi projection at initialization; sigmoid(3) ~= 0.9526.
inline constexpr double kPassThroughBias = 3.0;

struct AttentionGateParams {
  Conv3dParams w_x;  // F_l -> F_int, 1x1x1, stride 2, no bias
  Conv3dParams w_g;  // F_g -> F_int, 1x1x1, bias b_g
  Conv3dParams psi;  // F_int -> 1, 1x1x1, bias b_psi

  std::size_t f_l() const { return w_x.in_channels(); }
  std::size_t f_g() const { return w_g.in_channels(); }
  std::size_t f_int() const { return w_x.out_channels(); }

  std::size_t param_count() const { return w_x.param_count() + w_g.param_count() + psi.param_count(); }
};

/// F_l*F_int + F_g*F_int + F_int (b_g) + F_int (psi) + 1 (b_psi).
constexpr std::size_t gate_param_count(std::size_t f_l, std::size_t f_g, std::size_t f_int) {
  return f_l * f_int + f_g * f_int + 2 * f_int + 1;
}

/// psi <- 0 and b_psi <- +3 so that every coefficient starts at sigmoid(3);
/// W_x, W_g get He-uniform weights and b_g is zeroed.
inline void init_pass_through(AttentionGateParams& p, std::mt19937_64& rng) {
  he_uniform(p.w_x.weight, p.f_l(), rng);
  he_uniform(p.w_g.weight, p.f_g(), rng);
  for (double& v : p.w_g.bias.mutable_data()) v = 0.0;
  for (double& v : p.psi.weight.mutable_data()) v = 0.0;
  p.psi.bias.mutable_data()[0] = kPassThroughBias;
}

inline AttentionGateParams make_attention_gate(std::size_t f_l, std::size_t f_g, std::size_t f_int,
                                               std::mt19937_64& rng) {
  if (f_l == 0 || f_g == 0 || f_int == 0) throw ConfigError("attention gate: channel extents must be >= 1");
  AttentionGateParams p;
  p.w_x = Conv3dParams::make(f_l, f_int, 1, 2, 0, false, rng);
  p.w_g = Conv3dParams::make(f_g, f_int, 1, 1, 0, true, rng);
  p.psi = Conv3dParams::make(f_int, 1, 1, 1, 0, true, rng);
  init_pass_through(p, rng);
  return p;
}

/// Single-channel coefficients in (0,1) on the spatial grid of `x`.
///
/// Requires x's spatial extents to be exactly twice those of g.
inline Tensor attention_coefficients(const Tensor& x, const Tensor& g, const AttentionGateParams& p) {
  detail::require_5d(x, "attention_coefficients");
  detail::require_5d(g, "attention_coefficients");
  if (x.dim(0) != g.dim(0)) throw DimensionError("attention_coefficients: batch extents differ");
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.dim(a) != 2 * g.dim(a)) {
      throw DimensionError("attention_coefficients: skip " + detail::shape_str(x.shape()) +
                           " must be exactly twice the gating grid " + detail::shape_str(g.shape()));
    }
  }
  if (x.dim(1) != p.f_l() || g.dim(1) != p.f_g()) {
    throw DimensionError("attention_coefficients: channel extents (" + std::to_string(x.dim(1)) + "," +
                         std::to_string(g.dim(1)) + ") do not match gate (" + std::to_string(p.f_l()) + "," +
                         std::to_string(p.f_g()) + ")");
  }
  Tensor theta = conv3d(x, p.w_x);
  Tensor phi = conv3d(g, p.w_g);
  Tensor q = conv3d(relu(add(theta, phi)), p.psi);
  return trilinear_resample(sigmoid(q), {x.dim(2), x.dim(3), x.dim(4)});
}

/// x_hat[n,c,i] = x[n,c,i] * alpha[n,0,i].
inline Tensor gate_apply(const Tensor& x, const Tensor& alpha) {
  detail::require_5d(x, "gate_apply");
  detail::require_5d(alpha, "gate_apply");
  if (alpha.dim(1) != 1 || alpha.dim(0) != x.dim(0) || alpha.dim(2) != x.dim(2) || alpha.dim(3) != x.dim(3) ||
      alpha.dim(4) != x.dim(4)) {
    throw DimensionError("gate_apply: coefficients " + detail::shape_str(alpha.shape()) +
                         " incompatible with features " + detail::shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3) * x.dim(4);
  std::vector<double> out(x.numel());
  auto xd = x.data(), ad = alpha.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < sp; ++i) out[(b * c + ch) * sp + i] = xd[(b * c + ch) * sp + i] * ad[b * sp + i];
  return Tensor::from_op(x.shape(), std::move(out), OpKind::GateApply, {x, alpha}, [n, c, sp](Node& self) {
    Node& nx = *self.inputs[0];
    Node& na = *self.inputs[1];
    const auto& g = self.grad;
    if (nx.requires_grad) {
      auto& gx = nx.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < sp; ++i) gx[(b * c + ch) * sp + i] += g[(b * c + ch) * sp + i] * na.data[b * sp + i];
    }
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < sp; ++i) ga[b * sp + i] += g[(b * c + ch) * sp + i] * nx.data[(b * c + ch) * sp + i];
    }
  });
}

/// Several sub-gates sharing one skip connection; sub-gate i gates the i-th
/// contiguous channel group.
struct MultiGate {
  std::vector<AttentionGateParams> sub_gates;

  std::size_t n_gates() const { return sub_gates.size(); }
  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& s : sub_gates) total += s.param_count();
    return total;
  }

  static MultiGate make(std::size_t n_gates, std::size_t f_l, std::size_t f_g, std::size_t f_int,
                        std::mt19937_64& rng) {
    if (n_gates == 0 || f_l % n_gates != 0) {
      throw ConfigError("multi gate: " + std::to_string(n_gates) + " sub-gates cannot partition " +
                        std::to_string(f_l) + " channels");
    }
    MultiGate m;
    for (std::size_t i = 0; i < n_gates; ++i) m.sub_gates.push_back(make_attention_gate(f_l, f_g, f_int, rng));
    return m;
  }
};

struct GatedSkip {
  Tensor gated;
  std::vector<Tensor> alphas;  // one per sub-gate, on the skip grid
};

struct GateOptions {
  /// Replace every coefficient map by this constant (no gradient flows to the
  /// gate parameters). Used to isolate the gated path in experiments.
  std::optional<double> alpha_override;
};

inline GatedSkip multi_gate_apply(const Tensor& x, const Tensor& g, const MultiGate& m,
                                  const GateOptions& opts = {}) {
  detail::require_5d(x, "multi_gate_apply");
  const std::size_t k = m.n_gates();
  if (k == 0 || x.dim(1) % k != 0) {
    throw ConfigError("multi_gate_apply: " + std::to_string(k) + " sub-gates cannot partition " +
                      std::to_string(x.dim(1)) + " channels");
  }
  GatedSkip out;
  for (const auto& sub : m.sub_gates) {
    Tensor a = attention_coefficients(x, g, sub);
    if (opts.alpha_override) a = Tensor(a.shape(), *opts.alpha_override);
    out.alphas.push_back(a);
  }
  if (k == 1) {
    out.gated = gate_apply(x, out.alphas[0]);
    return out;
  }
  const std::size_t group = x.dim(1) / k;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < k; ++i) parts.push_back(gate_apply(slice_channels(x, i * group, group), out.alphas[i]));
  out.gated = concat_channels(parts);
  return out;
}

}  // namespace aunet
