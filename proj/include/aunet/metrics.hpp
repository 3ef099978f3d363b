#pragma once

// Overlap and surface-distance metrics on label grids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "aunet/volume.hpp"

namespace aunet {

namespace detail {

inline void require_same_dims(const LabelVolume& a, const LabelVolume& b, const char* what) {
  if (a.dims != b.dims) {
    throw DimensionError(std::string(what) + ": dims " + shape_str(a.dims) + " vs " + shape_str(b.dims));
  }
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline Confusion confusion(const LabelVolume& pred, const LabelVolume& truth, std::size_t cls) {
  Confusion c;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == cls, t = truth.labels[i] == cls;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

}  // namespace detail

/// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
inline double dsc(const LabelVolume& pred, const LabelVolume& truth, std::size_t cls) {
  detail::require_same_dims(pred, truth, "dsc");
  const auto c = detail::confusion(pred, truth, cls);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// TP/(TP+FP) and TP/(TP+FN). An undefined member is 1.0 when prediction and
/// truth are both empty and 0.0 otherwise.
inline PrecisionRecall precision_recall(const LabelVolume& pred, const LabelVolume& truth, std::size_t cls) {
  detail::require_same_dims(pred, truth, "precision_recall");
  const auto c = detail::confusion(pred, truth, cls);
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  PrecisionRecall pr;
  pr.precision = c.tp + c.fp == 0 ? (both_empty ? 1.0 : 0.0)
                                  : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  pr.recall = c.tp + c.fn == 0 ? (both_empty ? 1.0 : 0.0)
                               : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return pr;
}

/// Mask voxels with at least one 6-connected neighbour outside the mask.
/// Neighbours beyond the grid count as outside.
inline std::vector<std::uint8_t> surface_mask(const LabelVolume& l, std::size_t cls) {
  const auto& d = l.dims;
  std::vector<std::uint8_t> s(l.labels.size(), 0);
  auto in = [&](long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(d[0]) || y >= static_cast<long>(d[1]) ||
        x >= static_cast<long>(d[2])) {
      return false;
    }
    return l.labels[l.index(z, y, x)] == cls;
  };
  for (long z = 0; z < static_cast<long>(d[0]); ++z)
    for (long y = 0; y < static_cast<long>(d[1]); ++y)
      for (long x = 0; x < static_cast<long>(d[2]); ++x) {
        if (!in(z, y, x)) continue;
        if (!in(z - 1, y, x) || !in(z + 1, y, x) || !in(z, y - 1, x) || !in(z, y + 1, x) || !in(z, y, x - 1) ||
            !in(z, y, x + 1)) {
          s[l.index(z, y, x)] = 1;
        }
      }
  return s;
}

namespace detail {

// Squared distance transform along one line (lower envelope of parabolas);
// f holds squared distances, +inf where no site exists yet.
inline void edt_1d(std::vector<double>& f, double step, std::vector<double>& out, std::vector<std::size_t>& v,
                   std::vector<double>& zb) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  zb.resize(n + 1);
  out.resize(n);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (!any) {
      v[0] = q;
      zb[0] = -inf;
      zb[1] = inf;
      any = true;
      continue;
    }
    const double xq = static_cast<double>(q) * step;
    while (true) {
      const double xv = static_cast<double>(v[k]) * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= zb[k] && k > 0) {
        --k;
        continue;
      }
      if (s <= zb[k]) {
        // k == 0: the new parabola dominates everywhere.
        v[0] = q;
        zb[0] = -inf;
        zb[1] = inf;
        break;
      }
      ++k;
      v[k] = q;
      zb[k] = s;
      zb[k + 1] = inf;
      break;
    }
  }
  if (!any) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * step;
    while (zb[k + 1] < xq) ++k;
    const double xv = static_cast<double>(v[k]) * step;
    out[q] = (xq - xv) * (xq - xv) + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance (in physical units) from every voxel to
/// the nearest site voxel.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, const Dims3& d,
                                                      const Spacing3& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  std::vector<double> line, out, zb;
  std::vector<std::size_t> v;
  // axis 2 (x), then 1 (y), then 0 (z)
  for (int axis = 2; axis >= 0; --axis) {
    const std::size_t n = d[axis];
    const std::size_t stride = axis == 2 ? 1 : (axis == 1 ? d[2] : d[1] * d[2]);
    const std::size_t lines = sites.size() / n;
    line.resize(n);
    for (std::size_t li = 0; li < lines; ++li) {
      // decompose the line index into the base offset
      std::size_t base;
      if (axis == 2) {
        base = li * d[2];
      } else if (axis == 1) {
        base = (li / d[2]) * d[1] * d[2] + (li % d[2]);
      } else {
        base = li;
      }
      for (std::size_t q = 0; q < n; ++q) line[q] = g[base + q * stride];
      detail::edt_1d(line, spacing[axis], out, v, zb);
      for (std::size_t q = 0; q < n; ++q) g[base + q * stride] = out[q];
    }
  }
  return g;
}

/// Average symmetric surface distance in physical units: the mean of the two
/// directed mean nearest-surface distances.
///
/// Throws UndefinedMetricError when either mask is empty.
inline double surface_distance(const LabelVolume& pred, const LabelVolume& truth, std::size_t cls,
                               const Spacing3& spacing) {
  detail::require_same_dims(pred, truth, "surface_distance");
  const auto sp = surface_mask(pred, cls);
  const auto st = surface_mask(truth, cls);
  const bool ep = std::none_of(sp.begin(), sp.end(), [](auto b) { return b != 0; });
  const bool et = std::none_of(st.begin(), st.end(), [](auto b) { return b != 0; });
  if (ep || et) throw UndefinedMetricError("surface_distance: class " + std::to_string(cls) + " mask is empty");
  const auto dt_truth = squared_distance_transform(st, truth.dims, spacing);
  const auto dt_pred = squared_distance_transform(sp, pred.dims, spacing);
  auto directed = [](const std::vector<std::uint8_t>& from, const std::vector<double>& dt) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < from.size(); ++i) {
      if (!from[i]) continue;
      acc += std::sqrt(dt[i]);
      ++n;
    }
    return acc / static_cast<double>(n);
  };
  return 0.5 * (directed(sp, dt_truth) + directed(st, dt_pred));
}

/// Metric set for one class of one volume. `s2s_mm` is empty when undefined.
struct ClassMetrics {
  std::size_t cls = 0;
  double dsc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::optional<double> s2s_mm;
};

inline std::vector<ClassMetrics> evaluate_all(const LabelVolume& pred, const LabelVolume& truth,
                                              std::size_t n_classes) {
  std::vector<ClassMetrics> out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassMetrics m;
    m.cls = c;
    m.dsc = dsc(pred, truth, c);
    const auto pr = precision_recall(pred, truth, c);
    m.precision = pr.precision;
    m.recall = pr.recall;
    try {
      m.s2s_mm = surface_distance(pred, truth, c, truth.spacing);
    } catch (const UndefinedMetricError&) {
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace aunet
