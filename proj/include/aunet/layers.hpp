#pragma once

// Volumetric layers: 3-D convolution, max-pooling, trilinear resampling and
// batch normalization, each a single differentiable graph op.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "aunet/ops.hpp"
#include "aunet/tensor.hpp"

namespace aunet {

using Extents3 = std::array<std::size_t, 3>;

namespace testing {
/// Mutation switch used by the verification suite to prove that gradient
/// checks detect a broken backward rule. Never set outside that fixture.
inline bool& conv_backward_fault() {
  static bool fault = false;
  return fault;
}
}  // namespace testing

/// He-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
inline void he_uniform(Tensor& w, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : w.mutable_data()) v = dist(rng);
}

struct Conv3dParams {
  Tensor weight;  // (out, in, kd, kh, kw)
  Tensor bias;    // (out), or undefined for bias-free projections
  Extents3 stride{1, 1, 1};
  Extents3 padding{0, 0, 0};

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
  bool has_bias() const { return bias.defined(); }

  /// Cubic kernel `k` with the same stride and padding on every axis,
  /// He-uniform weights and zero bias.
  static Conv3dParams make(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                           std::size_t pad, bool with_bias, std::mt19937_64& rng) {
    Conv3dParams p;
    p.weight = Tensor(Shape{out, in, k, k, k}, 0.0, true);
    he_uniform(p.weight, in * k * k * k, rng);
    if (with_bias) p.bias = Tensor(Shape{out}, 0.0, true);
    p.stride = {stride, stride, stride};
    p.padding = {pad, pad, pad};
    return p;
  }

  std::size_t param_count() const { return weight.numel() + (has_bias() ? bias.numel() : 0); }
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

struct ConvGeometry {
  std::size_t n, cin, cout;
  Extents3 in, out, k, stride, pad;
  std::size_t in_sp, out_sp, kvol, kdim;
  bool pointwise;  // 1x1x1, stride 1, no padding: the input is its own column matrix
  bool direct;     // 3x3x3, stride 1, cout a multiple of kCoBlock

  // Padded input extents for the direct kernels.
  Extents3 padded_in() const;

  // Output rows (od, oh) per im2col chunk.
  std::size_t rows_per_chunk() const {
    const std::size_t budget = std::size_t{1} << 19;  // doubles per column buffer
    const std::size_t per_row = kdim * out[2];
    return std::max<std::size_t>(1, std::min(out[0] * out[1], budget / std::max<std::size_t>(per_row, 1)));
  }
};

// Gather input patches for output rows [r0, r1) into a (kdim x P) row-major buffer.
inline void im2col(const ConvGeometry& g, const double* x, std::size_t r0, std::size_t r1, double* col) {
  const std::size_t P = (r1 - r0) * g.out[2];
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* xc = x + ci * g.in_sp;
    for (std::size_t a = 0; a < g.k[0]; ++a)
      for (std::size_t b = 0; b < g.k[1]; ++b)
        for (std::size_t c = 0; c < g.k[2]; ++c) {
          const std::size_t row = ((ci * g.k[0] + a) * g.k[1] + b) * g.k[2] + c;
          double* dst = col + row * P;
          for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t od = r / g.out[1], oh = r % g.out[1];
            double* d = dst + (r - r0) * g.out[2];
            const long id = static_cast<long>(od * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
            if (id < 0 || id >= static_cast<long>(g.in[0]) || ih < 0 || ih >= static_cast<long>(g.in[1])) {
              std::fill_n(d, g.out[2], 0.0);
              continue;
            }
            const double* src = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
            for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
              const long iw = static_cast<long>(ow * g.stride[2] + c) - static_cast<long>(g.pad[2]);
              d[ow] = (iw < 0 || iw >= static_cast<long>(g.in[2])) ? 0.0 : src[iw];
            }
          }
        }
  }
}

// Scatter-add a (kdim x P) column gradient back onto the input gradient.
inline void col2im(const ConvGeometry& g, const double* col, std::size_t r0, std::size_t r1, double* dx) {
  const std::size_t P = (r1 - r0) * g.out[2];
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* xc = dx + ci * g.in_sp;
    for (std::size_t a = 0; a < g.k[0]; ++a)
      for (std::size_t b = 0; b < g.k[1]; ++b)
        for (std::size_t c = 0; c < g.k[2]; ++c) {
          const std::size_t row = ((ci * g.k[0] + a) * g.k[1] + b) * g.k[2] + c;
          const double* srcrow = col + row * P;
          for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t od = r / g.out[1], oh = r % g.out[1];
            const double* s = srcrow + (r - r0) * g.out[2];
            const long id = static_cast<long>(od * g.stride[0] + a) - static_cast<long>(g.pad[0]);
            const long ih = static_cast<long>(oh * g.stride[1] + b) - static_cast<long>(g.pad[1]);
            if (id < 0 || id >= static_cast<long>(g.in[0]) || ih < 0 || ih >= static_cast<long>(g.in[1])) continue;
            double* dst = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
            for (std::size_t ow = 0; ow < g.out[2]; ++ow) {
              const long iw = static_cast<long>(ow * g.stride[2] + c) - static_cast<long>(g.pad[2]);
              if (iw >= 0 && iw < static_cast<long>(g.in[2])) dst[iw] += s[ow];
            }
          }
        }
  }
}


// Register-blocked direct kernels for stride-1, 3x3x3 convolutions whose
// output channel count is a multiple of kCoBlock. Inputs are pre-padded and
// rows are rounded up to kTile so the inner loops carry no boundary tests.
inline constexpr std::size_t kCoBlock = 8;
inline constexpr std::size_t kTile = 16;

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

// wt[cb][ci][tap][q] = w[cb*8+q][ci][tap]
inline std::vector<double> pack_weights3(const double* w, std::size_t cout, std::size_t cin) {
  std::vector<double> wt(cout * cin * 27);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t t = 0; t < 27; ++t) {
        const std::size_t cb = co / kCoBlock, q = co % kCoBlock;
        wt[((cb * cin + ci) * 27 + t) * kCoBlock + q] = w[(co * cin + ci) * 27 + t];
      }
  return wt;
}

using vec8 = double __attribute__((vector_size(64)));

inline vec8 load8(const double* p) {
  vec8 v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}
inline void store8(double* p, vec8 v) { __builtin_memcpy(p, &v, sizeof v); }

// yp (cout, ye[0], ye[1], ye[2]) = correlation of xp (cin, xe) with packed
// weights; ye[2] is a multiple of kTile and xe[2] >= ye[2] + 2.
inline void conv3_direct(const double* xp, std::size_t cin, const Extents3& xe, const double* wt, std::size_t cout,
                         double* yp, const Extents3& ye) {
  static_assert(kTile == 16 && kCoBlock == 8);
  const std::size_t xplane = xe[1] * xe[2], xvol = xe[0] * xplane;
  const std::size_t yvol = ye[0] * ye[1] * ye[2];
  for (std::size_t cb = 0; cb < cout / kCoBlock; ++cb) {
    const double* wb = wt + cb * cin * 27 * kCoBlock;
    for (std::size_t od = 0; od < ye[0]; ++od)
      for (std::size_t oh = 0; oh < ye[1]; ++oh)
        for (std::size_t t0 = 0; t0 < ye[2]; t0 += kTile) {
          vec8 acc[kCoBlock][2] = {};
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xc = xp + ci * xvol + t0;
            const double* wq = wb + ci * 27 * kCoBlock;
            for (std::size_t a = 0; a < 3; ++a)
              for (std::size_t b = 0; b < 3; ++b) {
                const double* xr = xc + (od + a) * xplane + (oh + b) * xe[2];
#pragma GCC unroll 3
                for (std::size_t c = 0; c < 3; ++c, wq += kCoBlock) {
                  const vec8 x0 = load8(xr + c), x1 = load8(xr + c + 8);
#pragma GCC unroll 8
                  for (std::size_t q = 0; q < kCoBlock; ++q) {
                    const double wv = wq[q];
                    acc[q][0] += wv * x0;
                    acc[q][1] += wv * x1;
                  }
                }
              }
          }
#pragma GCC unroll 8
          for (std::size_t q = 0; q < kCoBlock; ++q) {
            double* yr = yp + (cb * kCoBlock + q) * yvol + (od * ye[1] + oh) * ye[2] + t0;
            store8(yr, acc[q][0]);
            store8(yr + 8, acc[q][1]);
          }
        }
  }
}

// dw[co][ci][tap] += sum over positions of dyp[co][pos] * xp[ci][pos + tap];
// dyp (cout, ye) is zero beyond the valid row length. Rows are processed in
// small blocks so the gradient rows stay cache resident across all taps.
inline void conv3_weight_grad(const double* dyp, std::size_t cout, const Extents3& ye, const double* xp,
                              std::size_t cin, const Extents3& xe, double* dw) {
  constexpr std::size_t kRows = 4;
  const std::size_t xplane = xe[1] * xe[2], xvol = xe[0] * xplane;
  const std::size_t yvol = ye[0] * ye[1] * ye[2];
  const std::size_t nrows = ye[0] * ye[1];
  const std::size_t nblk = cout / kCoBlock;
  std::vector<vec8> accbuf(nblk * cin * 9 * kCoBlock * 3, vec8{});
  for (std::size_t r0 = 0; r0 < nrows; r0 += kRows) {
    const std::size_t r1 = std::min(nrows, r0 + kRows);
    for (std::size_t cb = 0; cb < nblk; ++cb)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ab = 0; ab < 9; ++ab) {
          const std::size_t a = ab / 3, b = ab % 3;
          vec8* slot = accbuf.data() + ((cb * cin + ci) * 9 + ab) * kCoBlock * 3;
          vec8 acc[kCoBlock][3];
#pragma GCC unroll 8
          for (std::size_t q = 0; q < kCoBlock; ++q)
            for (std::size_t c = 0; c < 3; ++c) acc[q][c] = slot[q * 3 + c];
          for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t od = r / ye[1], oh = r % ye[1];
            const double* xr = xp + ci * xvol + (od + a) * xplane + (oh + b) * xe[2];
            const double* gr = dyp + cb * kCoBlock * yvol + r * ye[2];
            for (std::size_t t0 = 0; t0 < ye[2]; t0 += 8) {
              const vec8 x0 = load8(xr + t0), x1 = load8(xr + t0 + 1), x2 = load8(xr + t0 + 2);
#pragma GCC unroll 8
              for (std::size_t q = 0; q < kCoBlock; ++q) {
                const vec8 g = load8(gr + q * yvol + t0);
                acc[q][0] += g * x0;
                acc[q][1] += g * x1;
                acc[q][2] += g * x2;
              }
            }
          }
#pragma GCC unroll 8
          for (std::size_t q = 0; q < kCoBlock; ++q)
            for (std::size_t c = 0; c < 3; ++c) slot[q * 3 + c] = acc[q][c];
        }
  }
  for (std::size_t cb = 0; cb < nblk; ++cb)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ab = 0; ab < 9; ++ab)
        for (std::size_t q = 0; q < kCoBlock; ++q)
          for (std::size_t c = 0; c < 3; ++c) {
            const vec8 v = accbuf[(((cb * cin + ci) * 9 + ab) * kCoBlock + q) * 3 + c];
            double s = 0.0;
            for (std::size_t i = 0; i < 8; ++i) s += v[i];
            dw[((cb * kCoBlock + q) * cin + ci) * 27 + ab * 3 + c] += s;
          }
}

// Per-thread reusable work buffers; avoids page-faulting fresh allocations
// on every call. Slots must not be held across a nested use of the same slot.
enum class Scratch { XPad, YPad, GPad, DxPad, Col, DCol, Count };
inline std::vector<double>& scratch(Scratch s) {
  thread_local std::array<std::vector<double>, static_cast<std::size_t>(Scratch::Count)> bufs;
  return bufs[static_cast<std::size_t>(s)];
}

// Copy a (C, src) block into the interior of a zeroed (C, dst) block at `off`.
inline void pad_into(const double* src, std::size_t channels, const Extents3& se, double* dst, const Extents3& de,
                     const Extents3& off) {
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t z = 0; z < se[0]; ++z)
      for (std::size_t y = 0; y < se[1]; ++y) {
        const double* s = src + ((ch * se[0] + z) * se[1] + y) * se[2];
        double* d = dst + ((ch * de[0] + z + off[0]) * de[1] + y + off[1]) * de[2] + off[2];
        std::copy_n(s, se[2], d);
      }
}

inline Extents3 ConvGeometry::padded_in() const {
  return {in[0] + 2 * pad[0], in[1] + 2 * pad[1], round_up(out[2], kTile) + 2};
}

}  // namespace detail

/// Cross-correlation over the three spatial axes of a (N,C,D,H,W) tensor.
/// Output extent per axis is floor((in + 2*pad - k) / stride) + 1.
inline Tensor conv3d(const Tensor& x, const Conv3dParams& p) {
  detail::require_5d(x, "conv3d");
  const Shape& ws = p.weight.shape();
  if (ws.size() != 5) throw DimensionError("conv3d: weight must be 5-D, got " + detail::shape_str(ws));
  if (x.dim(1) != ws[1]) {
    throw DimensionError("conv3d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(ws[1]));
  }
  if (p.has_bias() && p.bias.numel() != ws[0]) throw DimensionError("conv3d: bias extent mismatch");
  detail::ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = ws[1];
  g.cout = ws[0];
  g.k = {ws[2], ws[3], ws[4]};
  g.stride = p.stride;
  g.pad = p.padding;
  for (std::size_t a = 0; a < 3; ++a) {
    g.in[a] = x.dim(2 + a);
    if (g.stride[a] == 0) throw ConfigError("conv3d: stride must be positive");
    if (g.in[a] + 2 * g.pad[a] < g.k[a]) {
      throw DimensionError("conv3d: spatial input " + detail::shape_str(x.shape()) +
                           " too small for kernel " + detail::shape_str(ws));
    }
    g.out[a] = (g.in[a] + 2 * g.pad[a] - g.k[a]) / g.stride[a] + 1;
  }
  g.in_sp = g.in[0] * g.in[1] * g.in[2];
  g.out_sp = g.out[0] * g.out[1] * g.out[2];
  g.kvol = g.k[0] * g.k[1] * g.k[2];
  g.kdim = g.cin * g.kvol;
  g.pointwise = g.kvol == 1 && g.stride == Extents3{1, 1, 1} && g.pad == Extents3{0, 0, 0};
  g.direct = g.k == Extents3{3, 3, 3} && g.stride == Extents3{1, 1, 1} && g.cout % detail::kCoBlock == 0;

  Shape out_shape{g.n, g.cout, g.out[0], g.out[1], g.out[2]};
  std::vector<double> out(shape_numel(out_shape));
  const double* xd = x.data().data();
  detail::ConstStridedMap W(p.weight.data().data(), g.cout, g.kdim, Eigen::OuterStride<>(g.kdim));

  const std::size_t rows = g.out[0] * g.out[1];
  const std::size_t chunk = g.rows_per_chunk();
  std::vector<double>& col = detail::scratch(detail::Scratch::Col);
  std::vector<double>& xp = detail::scratch(detail::Scratch::XPad);
  std::vector<double>& yp = detail::scratch(detail::Scratch::YPad);
  std::vector<double> wt;
  const Extents3 xe = g.padded_in();
  const Extents3 ye{g.out[0], g.out[1], detail::round_up(g.out[2], detail::kTile)};
  if (g.direct) wt = detail::pack_weights3(p.weight.data().data(), g.cout, g.cin);
  for (std::size_t b = 0; b < g.n; ++b) {
    const double* xb = xd + b * g.cin * g.in_sp;
    double* yb = out.data() + b * g.cout * g.out_sp;
    if (g.direct) {
      xp.assign(g.cin * xe[0] * xe[1] * xe[2], 0.0);
      yp.resize(g.cout * ye[0] * ye[1] * ye[2]);
      detail::pad_into(xb, g.cin, g.in, xp.data(), xe, g.pad);
      detail::conv3_direct(xp.data(), g.cin, xe, wt.data(), g.cout, yp.data(), ye);
      for (std::size_t r = 0; r < g.cout * rows; ++r) std::copy_n(yp.data() + r * ye[2], g.out[2], yb + r * g.out[2]);
    } else if (g.pointwise) {
      detail::ConstStridedMap X(xb, g.cin, g.in_sp, Eigen::OuterStride<>(g.in_sp));
      detail::StridedMap Y(yb, g.cout, g.out_sp, Eigen::OuterStride<>(g.out_sp));
      Y.noalias() = W * X;
    } else {
      for (std::size_t r0 = 0; r0 < rows; r0 += chunk) {
        const std::size_t r1 = std::min(rows, r0 + chunk);
        const std::size_t P = (r1 - r0) * g.out[2];
        col.resize(g.kdim * P);
        detail::im2col(g, xb, r0, r1, col.data());
        detail::ConstStridedMap C(col.data(), g.kdim, P, Eigen::OuterStride<>(P));
        detail::StridedMap Y(yb + r0 * g.out[2], g.cout, P, Eigen::OuterStride<>(g.out_sp));
        Y.noalias() = W * C;
      }
    }
    if (p.has_bias()) {
      auto bias = p.bias.data();
      for (std::size_t co = 0; co < g.cout; ++co) {
        double* yc = yb + co * g.out_sp;
        for (std::size_t i = 0; i < g.out_sp; ++i) yc[i] += bias[co];
      }
    }
  }

  std::vector<Tensor> inputs{x, p.weight};
  if (p.has_bias()) inputs.push_back(p.bias);
  return Tensor::from_op(out_shape, std::move(out), OpKind::Conv3d, inputs, [g](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    Node* nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    const double fault = testing::conv_backward_fault() ? 1.1 : 1.0;
    detail::ConstStridedMap W(nw.data.data(), g.cout, g.kdim, Eigen::OuterStride<>(g.kdim));
    double* dw = nw.requires_grad ? nw.grad_buffer().data() : nullptr;
    double* dx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
    const std::size_t rows = g.out[0] * g.out[1];
    const std::size_t chunk = g.rows_per_chunk();
    std::vector<double>& col = detail::scratch(detail::Scratch::Col);
    std::vector<double>& dcol = detail::scratch(detail::Scratch::DCol);
    detail::RowMat dW_acc;
    if (dw) dW_acc = detail::RowMat::Zero(g.cout, g.kdim);
    // Input gradient of the direct path is itself a direct correlation of the
    // zero-padded output gradient with the flipped, channel-transposed kernel.
    const bool direct_dx = g.direct && g.cin % detail::kCoBlock == 0;
    const Extents3 xe = g.padded_in();
    const Extents3 ye{g.out[0], g.out[1], detail::round_up(g.out[2], detail::kTile)};
    const Extents3 ge{g.out[0] + 4, g.out[1] + 4, detail::round_up(g.out[2] + 2, detail::kTile) + 2};
    const Extents3 de{g.out[0] + 2, g.out[1] + 2, detail::round_up(g.out[2] + 2, detail::kTile)};
    std::vector<double>& xp = detail::scratch(detail::Scratch::XPad);
    std::vector<double>& gp = detail::scratch(detail::Scratch::GPad);
    std::vector<double>& dxp = detail::scratch(detail::Scratch::DxPad);
    std::vector<double> wt_flip;
    if (direct_dx) {
      std::vector<double> flipped(g.cout * g.kdim);
      const double* w = nw.data.data();
      for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t ci = 0; ci < g.cin; ++ci)
          for (std::size_t t = 0; t < 27; ++t) flipped[(ci * g.cout + co) * 27 + t] = w[(co * g.cin + ci) * 27 + 26 - t];
      wt_flip = detail::pack_weights3(flipped.data(), g.cin, g.cout);
    }
    for (std::size_t b = 0; b < g.n; ++b) {
      const double* xb = nx.data.data() + b * g.cin * g.in_sp;
      const double* gb = self.grad.data() + b * g.cout * g.out_sp;
      if (g.direct && (dw || direct_dx)) {
        if (dw) {
          xp.assign(g.cin * xe[0] * xe[1] * xe[2], 0.0);
          detail::pad_into(xb, g.cin, g.in, xp.data(), xe, g.pad);
          gp.assign(g.cout * ye[0] * ye[1] * ye[2], 0.0);
          detail::pad_into(gb, g.cout, g.out, gp.data(), ye, {0, 0, 0});
          detail::conv3_weight_grad(gp.data(), g.cout, ye, xp.data(), g.cin, xe, dW_acc.data());
        }
        if (direct_dx && dx) {
          gp.assign(g.cout * ge[0] * ge[1] * ge[2], 0.0);
          detail::pad_into(gb, g.cout, g.out, gp.data(), ge, {2, 2, 2});
          dxp.resize(g.cin * de[0] * de[1] * de[2]);
          detail::conv3_direct(gp.data(), g.cout, ge, wt_flip.data(), g.cin, dxp.data(), de);
          double* dxb = dx + b * g.cin * g.in_sp;
          for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t z = 0; z < g.in[0]; ++z)
              for (std::size_t y = 0; y < g.in[1]; ++y) {
                const double* s = dxp.data() + ((ci * de[0] + z + g.pad[0]) * de[1] + y + g.pad[1]) * de[2] + g.pad[2];
                double* d = dxb + ((ci * g.in[0] + z) * g.in[1] + y) * g.in[2];
                for (std::size_t i = 0; i < g.in[2]; ++i) d[i] += fault * s[i];
              }
        }
        if (!dx || direct_dx) continue;
      }
      if (g.pointwise) {
        detail::ConstStridedMap G(gb, g.cout, g.out_sp, Eigen::OuterStride<>(g.out_sp));
        if (dw) {
          detail::ConstStridedMap X(xb, g.cin, g.in_sp, Eigen::OuterStride<>(g.in_sp));
          dW_acc.noalias() += G * X.transpose();
        }
        if (dx) {
          detail::StridedMap DX(dx + b * g.cin * g.in_sp, g.cin, g.in_sp, Eigen::OuterStride<>(g.in_sp));
          DX.noalias() += fault * (W.transpose() * G);
        }
      } else {
        for (std::size_t r0 = 0; r0 < rows; r0 += chunk) {
          const std::size_t r1 = std::min(rows, r0 + chunk);
          const std::size_t P = (r1 - r0) * g.out[2];
          detail::ConstStridedMap G(gb + r0 * g.out[2], g.cout, P, Eigen::OuterStride<>(g.out_sp));
          if (dw && !g.direct) {
            col.resize(g.kdim * P);
            detail::im2col(g, xb, r0, r1, col.data());
            detail::ConstStridedMap C(col.data(), g.kdim, P, Eigen::OuterStride<>(P));
            dW_acc.noalias() += G * C.transpose();
          }
          if (dx) {
            dcol.resize(g.kdim * P);
            detail::StridedMap DC(dcol.data(), g.kdim, P, Eigen::OuterStride<>(P));
            DC.noalias() = W.transpose() * G;
            if (fault != 1.0) DC *= fault;
            detail::col2im(g, dcol.data(), r0, r1, dx + b * g.cin * g.in_sp);
          }
        }
      }
    }
    if (dw) {
      for (std::size_t i = 0; i < g.cout * g.kdim; ++i) dw[i] += fault * dW_acc.data()[i];
    }
    if (nb && nb->requires_grad) {
      auto& db = nb->grad_buffer();
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* gc = self.grad.data() + (b * g.cout + co) * g.out_sp;
          double acc = 0.0;
          for (std::size_t i = 0; i < g.out_sp; ++i) acc += gc[i];
          db[co] += acc;
        }
    }
  });
}

/// Per-voxel linear map across channels (kernel 1, stride 1, no padding).
inline Tensor conv1x1x1(const Tensor& x, const Conv3dParams& p) {
  if (p.weight.rank() != 5 || p.weight.dim(2) != 1 || p.weight.dim(3) != 1 || p.weight.dim(4) != 1 ||
      p.stride != Extents3{1, 1, 1} || p.padding != Extents3{0, 0, 0}) {
    throw ConfigError("conv1x1x1: parameters must describe a 1x1x1, stride-1, unpadded kernel");
  }
  return conv3d(x, p);
}

/// Non-overlapping max pooling with a cubic window; ties resolve to the first
/// element in (d, h, w) scan order.
inline Tensor max_pool3d(const Tensor& x, std::size_t window) {
  detail::require_5d(x, "max_pool3d");
  if (window == 0) throw ConfigError("max_pool3d: window must be positive");
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.dim(a) % window != 0) {
      throw DimensionError("max_pool3d: extent " + std::to_string(x.dim(a)) + " of " +
                           detail::shape_str(x.shape()) + " not divisible by window " + std::to_string(window));
    }
  }
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t od = D / window, oh = H / window, ow = W / window;
  Shape out_shape{x.dim(0), x.dim(1), od, oh, ow};
  const std::size_t out_n = shape_numel(out_shape);
  std::vector<double> out(out_n);
  std::vector<std::size_t> argmax(out_n);
  auto d = x.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    const std::size_t base = c * D * H * W;
    for (std::size_t i = 0; i < od; ++i)
      for (std::size_t j = 0; j < oh; ++j)
        for (std::size_t k = 0; k < ow; ++k, ++o) {
          std::size_t best = base + ((i * window) * H + j * window) * W + k * window;
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b)
              for (std::size_t e = 0; e < window; ++e) {
                const std::size_t idx = base + ((i * window + a) * H + (j * window + b)) * W + (k * window + e);
                if (d[idx] > d[best]) best = idx;
              }
          out[o] = d[best];
          argmax[o] = best;
        }
  }
  return Tensor::from_op(out_shape, std::move(out), OpKind::MaxPool3d, {x},
                         [argmax = std::move(argmax)](Node& self) {
                           auto& gx = self.inputs[0]->grad_buffer();
                           for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
                         });
}

namespace detail {

struct AxisLerp {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

// Align-corners source coordinates for one axis.
inline AxisLerp axis_lerp(std::size_t in, std::size_t out) {
  AxisLerp a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  for (std::size_t t = 0; t < out; ++t) {
    const double s = out > 1 ? static_cast<double>(t) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(s));
    if (i0 > in - 1) i0 = in - 1;
    a.lo[t] = i0;
    a.hi[t] = std::min(i0 + 1, in - 1);
    a.frac[t] = s - static_cast<double>(i0);
  }
  return a;
}

}  // namespace detail

/// Trilinear resampling of every (N,C) field to `target` spatial extents,
/// with the corner voxels of source and target grids aligned.
inline Tensor trilinear_resample(const Tensor& x, const Extents3& target) {
  detail::require_5d(x, "trilinear_resample");
  for (std::size_t t : target) {
    if (t == 0) throw DimensionError("trilinear_resample: target extents must be >= 1");
  }
  const Extents3 in{x.dim(2), x.dim(3), x.dim(4)};
  const std::size_t nc = x.dim(0) * x.dim(1);
  const auto az = detail::axis_lerp(in[0], target[0]);
  const auto ay = detail::axis_lerp(in[1], target[1]);
  const auto ax = detail::axis_lerp(in[2], target[2]);
  const std::size_t in_sp = in[0] * in[1] * in[2];
  const std::size_t out_sp = target[0] * target[1] * target[2];
  Shape out_shape{x.dim(0), x.dim(1), target[0], target[1], target[2]};
  std::vector<double> out(nc * out_sp);
  auto d = x.data();
  for (std::size_t c = 0; c < nc; ++c) {
    const double* src = d.data() + c * in_sp;
    double* dst = out.data() + c * out_sp;
    std::size_t o = 0;
    for (std::size_t i = 0; i < target[0]; ++i) {
      const double fz = az.frac[i];
      const std::size_t z0 = az.lo[i] * in[1], z1 = az.hi[i] * in[1];
      for (std::size_t j = 0; j < target[1]; ++j) {
        const double fy = ay.frac[j];
        const std::size_t r00 = (z0 + ay.lo[j]) * in[2], r01 = (z0 + ay.hi[j]) * in[2];
        const std::size_t r10 = (z1 + ay.lo[j]) * in[2], r11 = (z1 + ay.hi[j]) * in[2];
        for (std::size_t k = 0; k < target[2]; ++k, ++o) {
          const double fx = ax.frac[k];
          const std::size_t x0 = ax.lo[k], x1 = ax.hi[k];
          const double c00 = src[r00 + x0] * (1 - fx) + src[r00 + x1] * fx;
          const double c01 = src[r01 + x0] * (1 - fx) + src[r01 + x1] * fx;
          const double c10 = src[r10 + x0] * (1 - fx) + src[r10 + x1] * fx;
          const double c11 = src[r11 + x0] * (1 - fx) + src[r11 + x1] * fx;
          const double c0 = c00 * (1 - fy) + c01 * fy;
          const double c1 = c10 * (1 - fy) + c11 * fy;
          dst[o] = c0 * (1 - fz) + c1 * fz;
        }
      }
    }
  }
  return Tensor::from_op(out_shape, std::move(out), OpKind::Trilinear, {x},
                         [az, ay, ax, in, target, nc, in_sp, out_sp](Node& self) {
                           auto& gx = self.inputs[0]->grad_buffer();
                           for (std::size_t c = 0; c < nc; ++c) {
                             const double* g = self.grad.data() + c * out_sp;
                             double* dst = gx.data() + c * in_sp;
                             std::size_t o = 0;
                             for (std::size_t i = 0; i < target[0]; ++i) {
                               const double fz = az.frac[i];
                               const std::size_t z0 = az.lo[i] * in[1], z1 = az.hi[i] * in[1];
                               for (std::size_t j = 0; j < target[1]; ++j) {
                                 const double fy = ay.frac[j];
                                 const std::size_t r00 = (z0 + ay.lo[j]) * in[2], r01 = (z0 + ay.hi[j]) * in[2];
                                 const std::size_t r10 = (z1 + ay.lo[j]) * in[2], r11 = (z1 + ay.hi[j]) * in[2];
                                 for (std::size_t k = 0; k < target[2]; ++k, ++o) {
                                   const double fx = ax.frac[k];
                                   const std::size_t x0 = ax.lo[k], x1 = ax.hi[k];
                                   const double gz0 = g[o] * (1 - fz), gz1 = g[o] * fz;
                                   const double g00 = gz0 * (1 - fy), g01 = gz0 * fy;
                                   const double g10 = gz1 * (1 - fy), g11 = gz1 * fy;
                                   dst[r00 + x0] += g00 * (1 - fx);
                                   dst[r00 + x1] += g00 * fx;
                                   dst[r01 + x0] += g01 * (1 - fx);
                                   dst[r01 + x1] += g01 * fx;
                                   dst[r10 + x0] += g10 * (1 - fx);
                                   dst[r10 + x1] += g10 * fx;
                                   dst[r11 + x0] += g11 * (1 - fx);
                                   dst[r11 + x1] += g11 * fx;
                                 }
                               }
                             }
                           }
                         });
}

struct BatchNormParams {
  Tensor scale;  // (C)
  Tensor shift;  // (C)
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormParams make(std::size_t channels) {
    BatchNormParams p;
    p.scale = Tensor(Shape{channels}, 1.0, true);
    p.shift = Tensor(Shape{channels}, 0.0, true);
    p.running_mean.assign(channels, 0.0);
    p.running_var.assign(channels, 1.0);
    return p;
  }

  std::size_t channels() const { return scale.numel(); }
};

/// Per-channel normalization over the (batch, spatial) axes.
///
/// Training mode uses batch statistics (biased variance) and folds them into
/// the running estimates with `momentum`; inference mode applies the running
/// estimates as a fixed affine map.
inline Tensor batch_norm(const Tensor& x, BatchNormParams& p, bool training) {
  detail::require_5d(x, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3) * x.dim(4);
  if (c != p.channels()) {
    throw DimensionError("batch_norm: input has " + std::to_string(c) + " channels, parameters have " +
                         std::to_string(p.channels()));
  }
  const double m = static_cast<double>(n * sp);
  std::vector<double> mean(c), inv_std(c);
  auto d = x.data();
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* xc = d.data() + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) s += xc[i];
      }
      const double mu = s / m;
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* xc = d.data() + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) v += (xc[i] - mu) * (xc[i] - mu);
      }
      v /= m;
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(v + p.epsilon);
      p.running_mean[ch] = (1.0 - p.momentum) * p.running_mean[ch] + p.momentum * mu;
      p.running_var[ch] = (1.0 - p.momentum) * p.running_var[ch] + p.momentum * v;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = p.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(p.running_var[ch] + p.epsilon);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  auto gamma = p.scale.data(), beta = p.shift.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        xhat[off + i] = (d[off + i] - mean[ch]) * inv_std[ch];
        out[off + i] = gamma[ch] * xhat[off + i] + beta[ch];
      }
    }
  return Tensor::from_op(
      x.shape(), std::move(out), OpKind::BatchNorm, {x, p.scale, p.shift},
      [xhat = std::move(xhat), inv_std, n, c, sp, m, training](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nbeta = *self.inputs[2];
        const auto& g = self.grad;
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        if (ng.requires_grad) {
          auto& gg = ng.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (nbeta.requires_grad) {
          auto& gb = nbeta.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (nx.requires_grad) {
          auto& gx = nx.grad_buffer();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double gamma = ng.data[ch];
              const std::size_t off = (b * c + ch) * sp;
              if (training) {
                const double k = gamma * inv_std[ch] / m;
                for (std::size_t i = 0; i < sp; ++i) {
                  gx[off + i] += k * (m * g[off + i] - sum_g[ch] - xhat[off + i] * sum_gx[ch]);
                }
              } else {
                for (std::size_t i = 0; i < sp; ++i) gx[off + i] += g[off + i] * gamma * inv_std[ch];
              }
            }
        }
      });
}

}  // namespace aunet
