#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "aunet/volume.hpp"

namespace aunet {

/// Zero mean, unit standard deviation (population). A constant volume maps to zeros.
inline Volume normalize_intensity(const Volume& v) {
  Volume out = v;
  const double n = static_cast<double>(v.data.size());
  if (v.data.empty()) return out;
  double mean = 0.0;
  for (double x : v.data) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v.data) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  for (double& x : out.data) x = sd > 0.0 ? (x - mean) / sd : 0.0;
  return out;
}

/// One draw of the spatial augmentation. Default-constructed parameters are
/// the identity when `crop` equals the volume dims and the offset is zero.
struct AugmentParams {
  double rotation_deg = 0.0;  // in-plane (H, W) rotation about the volume centre
  double scale = 1.0;         // isotropic zoom
  bool flip = false;          // mirror along W
  Dims3 crop{0, 0, 0};        // output extents; 0 keeps the full extent
  Dims3 offset{0, 0, 0};      // crop origin on the transformed grid
};

struct AugmentRanges {
  double max_rotation_deg = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double flip_probability = 0.5;
};

inline AugmentParams sample_augment(std::uint64_t seed, const Dims3& dims, const Dims3& crop,
                                    const AugmentRanges& ranges = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentParams p;
  p.rotation_deg = (2.0 * unit(rng) - 1.0) * ranges.max_rotation_deg;
  p.scale = ranges.min_scale + unit(rng) * (ranges.max_scale - ranges.min_scale);
  p.flip = unit(rng) < ranges.flip_probability;
  for (std::size_t a = 0; a < 3; ++a) {
    p.crop[a] = crop[a] == 0 ? dims[a] : crop[a];
    if (p.crop[a] > dims[a]) throw ConfigError("augment: crop extent exceeds volume extent");
    std::uniform_int_distribution<std::size_t> off(0, dims[a] - p.crop[a]);
    p.offset[a] = off(rng);
  }
  return p;
}

struct AugmentedPair {
  Volume image;
  LabelVolume labels;
};

/// Resample image (trilinear) and labels (nearest neighbour) through the same
/// transform; samples outside the grid are clamped to the border.
inline AugmentedPair apply_augment(const Volume& v, const LabelVolume& l, const AugmentParams& p) {
  if (v.dims != l.dims) throw DimensionError("augment: image and label dims differ");
  const Dims3 in = v.dims;
  Dims3 out_dims;
  for (std::size_t a = 0; a < 3; ++a) {
    out_dims[a] = p.crop[a] == 0 ? in[a] : p.crop[a];
    if (p.offset[a] + out_dims[a] > in[a]) throw ConfigError("augment: crop window leaves the volume");
  }
  if (!(p.scale > 0.0)) throw ConfigError("augment: scale must be positive");
  AugmentedPair r{Volume(out_dims, v.spacing), LabelVolume(out_dims, l.spacing)};
  const double th = p.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cy = (static_cast<double>(in[1]) - 1.0) / 2.0, cx = (static_cast<double>(in[2]) - 1.0) / 2.0;
  const double cz = (static_cast<double>(in[0]) - 1.0) / 2.0;
  auto clampi = [](double q, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(q, 0.0, static_cast<double>(n - 1)));
  };
  for (std::size_t z = 0; z < out_dims[0]; ++z)
    for (std::size_t y = 0; y < out_dims[1]; ++y)
      for (std::size_t x = 0; x < out_dims[2]; ++x) {
        double pz = static_cast<double>(z + p.offset[0]);
        double py = static_cast<double>(y + p.offset[1]);
        double px = static_cast<double>(x + p.offset[2]);
        if (p.flip) px = static_cast<double>(in[2] - 1) - px;
        // inverse rotation, then inverse zoom, about the centre
        const double dy = py - cy, dx = px - cx;
        const double sz = cz + (pz - cz) / p.scale;
        const double sy = cy + (c * dy + s * dx) / p.scale;
        const double sx = cx + (-s * dy + c * dx) / p.scale;

        const double qz = std::clamp(sz, 0.0, static_cast<double>(in[0] - 1));
        const double qy = std::clamp(sy, 0.0, static_cast<double>(in[1] - 1));
        const double qx = std::clamp(sx, 0.0, static_cast<double>(in[2] - 1));
        const std::size_t z0 = clampi(std::floor(qz), in[0]), y0 = clampi(std::floor(qy), in[1]),
                          x0 = clampi(std::floor(qx), in[2]);
        const std::size_t z1 = std::min(z0 + 1, in[0] - 1), y1 = std::min(y0 + 1, in[1] - 1),
                          x1 = std::min(x0 + 1, in[2] - 1);
        const double fz = qz - static_cast<double>(z0), fy = qy - static_cast<double>(y0),
                     fx = qx - static_cast<double>(x0);
        auto at = [&](std::size_t a, std::size_t b, std::size_t e) { return v.at(a, b, e); };
        const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
        const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
        const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
        const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
        r.image.at(z, y, x) = (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz;
        r.labels.at(z, y, x) = l.at(clampi(std::round(qz), in[0]), clampi(std::round(qy), in[1]),
                                    clampi(std::round(qx), in[2]));
      }
  return r;
}

inline AugmentedPair augment(const Volume& v, const LabelVolume& l, std::uint64_t seed, const Dims3& crop = {0, 0, 0},
                             const AugmentRanges& ranges = {}) {
  return apply_augment(v, l, sample_augment(seed, v.dims, crop, ranges));
}

}  // namespace aunet
