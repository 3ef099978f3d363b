#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "aunet/tensor.hpp"

namespace aunet {

/// Central-difference estimate of d f / d x, element by element.
///
/// `x` is perturbed in place (it is a shared handle, so closures holding the
/// same tensor observe the perturbation) and restored bit-exactly after each
/// evaluation.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, Tensor x,
                                     double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_grad: eps must be positive");
  Tensor out(x.shape(), 0.0);
  auto xs = x.mutable_data();
  auto os = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + eps;
    const double fp = f(x);
    xs[i] = orig - eps;
    const double fm = f(x);
    xs[i] = orig;
    os[i] = (fp - fm) / (2.0 * eps);
  }
  return out;
}

/// Largest absolute deviation divided by the largest magnitude on either side.
/// Zero when both are identically zero.
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: length mismatch");
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale == 0.0) return 0.0;
  return diff / scale;
}

}  // namespace aunet
