#pragma once

// Synthetic multi-organ volumes.
//
// Label 1 is a large, smooth ellipsoidal organ. Label 2 is a small lobed organ
// attached to the surface of label 1. Distractor blobs with the small organ's
// size and intensity are scattered away from the large organ and keep the
// background label, so the small organ can only be told apart from them by
// its position relative to the large organ.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <algorithm>
#include <random>
#include <vector>

#include "aunet/volume.hpp"

namespace aunet {

struct SyntheticSpec {
  Dims3 dims{48, 48, 48};
  Spacing3 spacing{2.0, 2.0, 2.0};
  std::size_t n_classes = 3;                  // 2: background + large organ; 3: adds the small organ
  std::vector<double> class_intensity{0.0, 1.0, 1.6};
  double noise_sigma = 0.35;
  std::array<double, 2> large_radius{9.0, 13.0};  // voxels, per-axis range
  std::array<double, 2> small_radius{3.5, 5.5};
  double large_lobe_amplitude = 0.08;
  double small_lobe_amplitude = 0.25;
  std::size_t distractor_count = 4;
  std::uint64_t seed = 1;

  void validate() const {
    validate_grid(dims, spacing, "synthetic");
    if (n_classes != 2 && n_classes != 3) throw ConfigError("synth.n_classes must be 2 or 3");
    if (class_intensity.size() != n_classes) {
      throw ConfigError("synth.class_intensity needs " + std::to_string(n_classes) + " entries");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma must be >= 0");
    for (const auto* r : {&large_radius, &small_radius}) {
      if (!((*r)[0] > 0.0) || (*r)[1] < (*r)[0]) throw ConfigError("synth radius range must satisfy 0 < lo <= hi");
    }
    if (large_lobe_amplitude < 0.0 || large_lobe_amplitude >= 1.0 || small_lobe_amplitude < 0.0 ||
        small_lobe_amplitude >= 1.0) {
      throw ConfigError("synth lobe amplitudes must lie in [0,1)");
    }
    const double need = 2.0 * large_radius[1] * (1.0 + large_lobe_amplitude) + 2.0;
    for (std::size_t a = 0; a < 3; ++a) {
      if (static_cast<double>(dims[a]) < need) {
        throw ConfigError("synth: large-organ radii up to " + std::to_string(large_radius[1]) +
                          " do not fit inside dims");
      }
    }
  }
};

namespace detail {

using Vec3 = std::array<double, 3>;

// Ellipsoid with a smooth angular radius modulation.
struct Ellipsoid {
  Vec3 center{};
  Vec3 radius{};
  double amplitude = 0.0;
  std::array<double, 3> freq{};
  std::array<double, 3> phase{};

  // Normalized radial coordinate; < 1 inside.
  double rho(const Vec3& p) const {
    Vec3 u;
    double r2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      u[a] = (p[a] - center[a]) / radius[a];
      r2 += u[a] * u[a];
    }
    const double r = std::sqrt(r2);
    if (r == 0.0) return 0.0;
    const double h = std::sin(freq[0] * u[0] / r + phase[0]) * std::cos(freq[1] * u[1] / r + phase[1]) *
                     std::sin(freq[2] * u[2] / r + phase[2]);
    return r / (1.0 + amplitude * h);
  }
  bool contains(const Vec3& p) const { return rho(p) < 1.0; }
  double max_extent() const { return std::max({radius[0], radius[1], radius[2]}) * (1.0 + amplitude); }
};

inline Ellipsoid random_blob(std::mt19937_64& rng, const Vec3& center, const std::array<double, 2>& rr, double amp,
                        double base_freq) {
  std::uniform_real_distribution<double> r(rr[0], rr[1]);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> fq(base_freq, 2.0 * base_freq);
  Ellipsoid b;
  b.center = center;
  for (int a = 0; a < 3; ++a) b.radius[a] = r(rng);
  b.amplitude = amp;
  for (int a = 0; a < 3; ++a) {
    b.freq[a] = fq(rng);
    b.phase[a] = ph(rng);
  }
  return b;
}

}  // namespace detail

struct SyntheticSample {
  Volume image;
  LabelVolume labels;
};

/// Deterministic in `spec.seed`. Intensities are rounded to f32 so that the
/// in-memory sample and its on-disk form agree exactly.
inline SyntheticSample generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  using detail::Vec3;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3 ext{static_cast<double>(spec.dims[0]), static_cast<double>(spec.dims[1]),
                 static_cast<double>(spec.dims[2])};

  Vec3 lc;
  for (int a = 0; a < 3; ++a) lc[a] = ext[a] * (0.38 + 0.24 * unit(rng)) - 0.5;
  detail::Ellipsoid large = detail::random_blob(rng, lc, spec.large_radius, spec.large_lobe_amplitude, 1.0);

  auto inside_grid = [&](const Vec3& c, double margin) {
    for (int a = 0; a < 3; ++a) {
      if (c[a] - margin < 0.0 || c[a] + margin > ext[a] - 1.0) return false;
    }
    return true;
  };

  std::vector<detail::Ellipsoid> organs{large};
  std::optional<detail::Ellipsoid> small;
  constexpr int kAttempts = 500;
  if (spec.n_classes == 3) {
    for (int t = 0; t < kAttempts && !small; ++t) {
      Vec3 u{unit(rng) * 2 - 1, unit(rng) * 2 - 1, unit(rng) * 2 - 1};
      const double n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      if (n < 1e-3 || n > 1.0) continue;
      for (auto& v : u) v /= n;
      double q = 0.0;
      for (int a = 0; a < 3; ++a) q += (u[a] / large.radius[a]) * (u[a] / large.radius[a]);
      const double surface = 1.0 / std::sqrt(q);
      detail::Ellipsoid b = detail::random_blob(rng, lc, spec.small_radius, spec.small_lobe_amplitude, 2.5);
      const double mean_r = (b.radius[0] + b.radius[1] + b.radius[2]) / 3.0;
      for (int a = 0; a < 3; ++a) b.center[a] = lc[a] + u[a] * (surface + 0.6 * mean_r);
      if (inside_grid(b.center, b.max_extent() + 1.0)) small = b;
    }
    if (!small) throw ConfigError("synthetic: cannot place the small organ inside dims");
  }

  std::vector<detail::Ellipsoid> distractors;
  const std::size_t fg_class = spec.n_classes - 1;
  for (std::size_t k = 0; k < spec.distractor_count; ++k) {
    bool placed = false;
    for (int t = 0; t < kAttempts && !placed; ++t) {
      detail::Ellipsoid b = detail::random_blob(rng, {0, 0, 0}, spec.small_radius, spec.small_lobe_amplitude, 2.5);
      for (int a = 0; a < 3; ++a) b.center[a] = unit(rng) * (ext[a] - 1.0);
      const double m = b.max_extent();
      if (!inside_grid(b.center, m + 1.0)) continue;
      if (large.rho(b.center) < 1.0 + (m + 3.0) / std::min({large.radius[0], large.radius[1], large.radius[2]})) {
        continue;
      }
      bool clear = true;
      auto far = [&](const detail::Ellipsoid& o) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (o.center[a] - b.center[a]) * (o.center[a] - b.center[a]);
        return std::sqrt(d2) > o.max_extent() + m + 3.0;
      };
      if (small && !far(*small)) clear = false;
      for (const auto& o : distractors) clear = clear && far(o);
      if (clear) {
        distractors.push_back(b);
        placed = true;
      }
    }
    if (!placed) throw ConfigError("synthetic: cannot place distractor " + std::to_string(k) + " (infeasible geometry)");
  }

  SyntheticSample s{Volume(spec.dims, spec.spacing), LabelVolume(spec.dims, spec.spacing)};
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t z = 0; z < spec.dims[0]; ++z)
    for (std::size_t y = 0; y < spec.dims[1]; ++y)
      for (std::size_t x = 0; x < spec.dims[2]; ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        std::uint8_t label = 0;
        double intensity = spec.class_intensity[0];
        if (large.contains(p)) {
          label = 1;
          intensity = spec.class_intensity[1];
        }
        if (small && small->contains(p)) {
          label = 2;
          intensity = spec.class_intensity[2];
        }
        for (const auto& d : distractors) {
          if (label == 0 && d.contains(p)) intensity = spec.class_intensity[fg_class];
        }
        const double n = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
        s.labels.at(z, y, x) = label;
        s.image.at(z, y, x) = static_cast<double>(static_cast<float>(intensity + n));
      }
  return s;
}

}  // namespace aunet
