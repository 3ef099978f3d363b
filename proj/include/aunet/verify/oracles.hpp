#pragma once

// Brute-force reference implementations for the verification suite. Each is
// written directly from its defining formula on plain arrays and shares no
// code with the library kernels it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

namespace aunet::oracle {

using Ext = std::array<std::size_t, 3>;

// Dense (N, C, D, H, W) array.
struct Grid5 {
  std::size_t n = 0, c = 0;
  Ext sp{};
  std::vector<double> v;

  Grid5() = default;
  Grid5(std::size_t n_, std::size_t c_, Ext sp_) : n(n_), c(c_), sp(sp_), v(n_ * c_ * sp_[0] * sp_[1] * sp_[2], 0.0) {}

  std::size_t idx(std::size_t b, std::size_t ch, std::size_t z, std::size_t y, std::size_t x) const {
    return (((b * c + ch) * sp[0] + z) * sp[1] + y) * sp[2] + x;
  }
  double at(std::size_t b, std::size_t ch, std::size_t z, std::size_t y, std::size_t x) const {
    return v[idx(b, ch, z, y, x)];
  }
  double& at(std::size_t b, std::size_t ch, std::size_t z, std::size_t y, std::size_t x) {
    return v[idx(b, ch, z, y, x)];
  }
};

// y[b,o,z,y,x] = bias[o] + sum_{i,a,b,c} w[o,i,a,b,c] * x[b,i,z*s+a-p, ...], zero outside.
inline Grid5 conv3d(const Grid5& x, const std::vector<double>& w, std::size_t cout, Ext k,
                    const std::vector<double>& bias, Ext stride, Ext pad) {
  Ext osp;
  for (int a = 0; a < 3; ++a) osp[a] = (x.sp[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
  Grid5 y(x.n, cout, osp);
  for (std::size_t b = 0; b < x.n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t oz = 0; oz < osp[0]; ++oz)
        for (std::size_t oy = 0; oy < osp[1]; ++oy)
          for (std::size_t ox = 0; ox < osp[2]; ++ox) {
            double s = bias.empty() ? 0.0 : bias[o];
            for (std::size_t i = 0; i < x.c; ++i)
              for (std::size_t a = 0; a < k[0]; ++a)
                for (std::size_t bb = 0; bb < k[1]; ++bb)
                  for (std::size_t cc = 0; cc < k[2]; ++cc) {
                    const long z = long(oz * stride[0] + a) - long(pad[0]);
                    const long yy = long(oy * stride[1] + bb) - long(pad[1]);
                    const long xx = long(ox * stride[2] + cc) - long(pad[2]);
                    if (z < 0 || yy < 0 || xx < 0 || z >= long(x.sp[0]) || yy >= long(x.sp[1]) ||
                        xx >= long(x.sp[2]))
                      continue;
                    s += w[(((o * x.c + i) * k[0] + a) * k[1] + bb) * k[2] + cc] * x.at(b, i, z, yy, xx);
                  }
            y.at(b, o, oz, oy, ox) = s;
          }
  return y;
}

struct PoolResult {
  Grid5 out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Window scan in (d, h, w) order keeping the first maximum.
inline PoolResult max_pool3d(const Grid5& x, std::size_t w) {
  PoolResult r{Grid5(x.n, x.c, {x.sp[0] / w, x.sp[1] / w, x.sp[2] / w}), {}};
  for (std::size_t b = 0; b < x.n; ++b)
    for (std::size_t ch = 0; ch < x.c; ++ch)
      for (std::size_t z = 0; z < r.out.sp[0]; ++z)
        for (std::size_t y = 0; y < r.out.sp[1]; ++y)
          for (std::size_t xx = 0; xx < r.out.sp[2]; ++xx) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t a = 0; a < w; ++a)
              for (std::size_t bb = 0; bb < w; ++bb)
                for (std::size_t c = 0; c < w; ++c) {
                  const std::size_t i = x.idx(b, ch, z * w + a, y * w + bb, xx * w + c);
                  if (x.v[i] > best) {
                    best = x.v[i];
                    arg = i;
                  }
                }
            r.out.at(b, ch, z, y, xx) = best;
            r.argmax.push_back(arg);
          }
  return r;
}

// Align-corners trilinear sample of every (n, c) field, point by point.
inline Grid5 trilinear(const Grid5& x, Ext target) {
  Grid5 y(x.n, x.c, target);
  auto coord = [](std::size_t t, std::size_t in, std::size_t out) {
    return out == 1 ? 0.0 : static_cast<double>(t) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
  };
  for (std::size_t b = 0; b < x.n; ++b)
    for (std::size_t ch = 0; ch < x.c; ++ch)
      for (std::size_t z = 0; z < target[0]; ++z)
        for (std::size_t yy = 0; yy < target[1]; ++yy)
          for (std::size_t xx = 0; xx < target[2]; ++xx) {
            const double s[3] = {coord(z, x.sp[0], target[0]), coord(yy, x.sp[1], target[1]),
                                 coord(xx, x.sp[2], target[2])};
            std::size_t lo[3];
            double f[3];
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::min(static_cast<std::size_t>(std::floor(s[a])), x.sp[a] - 1);
              f[a] = s[a] - static_cast<double>(lo[a]);
            }
            double acc = 0.0;
            for (int corner = 0; corner < 8; ++corner) {
              double wgt = 1.0;
              std::size_t p[3];
              for (int a = 0; a < 3; ++a) {
                const int bit = (corner >> (2 - a)) & 1;
                p[a] = std::min(lo[a] + static_cast<std::size_t>(bit), x.sp[a] - 1);
                wgt *= bit ? f[a] : 1.0 - f[a];
              }
              acc += wgt * x.at(b, ch, p[0], p[1], p[2]);
            }
            y.at(b, ch, z, yy, xx) = acc;
          }
  return y;
}

struct GateWeights {
  std::size_t f_l = 0, f_g = 0, f_int = 0;
  std::vector<double> wx;   // (f_int, f_l)
  std::vector<double> wg;   // (f_int, f_g)
  std::vector<double> bg;   // (f_int)
  std::vector<double> psi;  // (f_int)
  double bpsi = 0.0;
};

// alpha at the skip grid: sigmoid(psi . relu(Wx x[2p] + Wg g[p] + bg) + bpsi),
// evaluated per gating voxel and then resampled with `trilinear`.
inline Grid5 attention(const Grid5& x, const Grid5& g, const GateWeights& w) {
  Grid5 q(g.n, 1, g.sp);
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t z = 0; z < g.sp[0]; ++z)
      for (std::size_t y = 0; y < g.sp[1]; ++y)
        for (std::size_t xx = 0; xx < g.sp[2]; ++xx) {
          double s = w.bpsi;
          for (std::size_t k = 0; k < w.f_int; ++k) {
            double h = w.bg[k];
            for (std::size_t c = 0; c < w.f_l; ++c) h += w.wx[k * w.f_l + c] * x.at(b, c, 2 * z, 2 * y, 2 * xx);
            for (std::size_t c = 0; c < w.f_g; ++c) h += w.wg[k * w.f_g + c] * g.at(b, c, z, y, xx);
            s += w.psi[k] * std::max(0.0, h);
          }
          q.at(b, 0, z, y, xx) = 1.0 / (1.0 + std::exp(-s));
        }
  return trilinear(q, x.sp);
}

// Average symmetric surface distance by exhaustive pairwise search over
// 6-connected surface voxels (outside the grid counts as background).
inline double assd(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, Ext d,
                   std::array<double, 3> spacing) {
  auto surface = [&](const std::vector<std::uint8_t>& m) {
    std::vector<std::array<long, 3>> pts;
    auto inside = [&](long z, long y, long x) {
      return z >= 0 && y >= 0 && x >= 0 && z < long(d[0]) && y < long(d[1]) && x < long(d[2]) &&
             m[(std::size_t(z) * d[1] + std::size_t(y)) * d[2] + std::size_t(x)] != 0;
    };
    for (long z = 0; z < long(d[0]); ++z)
      for (long y = 0; y < long(d[1]); ++y)
        for (long x = 0; x < long(d[2]); ++x) {
          if (!inside(z, y, x)) continue;
          const long nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
          for (const auto& o : nb) {
            if (!inside(z + o[0], y + o[1], x + o[2])) {
              pts.push_back({z, y, x});
              break;
            }
          }
        }
    return pts;
  };
  const auto sa = surface(a), sb = surface(b);
  auto directed = [&](const std::vector<std::array<long, 3>>& from, const std::vector<std::array<long, 3>>& to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double dd = static_cast<double>(p[k] - q[k]) * spacing[k];
          s += dd * dd;
        }
        best = std::min(best, s);
      }
      total += std::sqrt(best);
    }
    return total / static_cast<double>(from.size());
  };
  return 0.5 * (directed(sa, sb) + directed(sb, sa));
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline Counts count(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth, std::uint8_t cls) {
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, t = truth[i] == cls;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

}  // namespace aunet::oracle
