#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "aunet/errors.hpp"

namespace aunet {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n-1); 0 for n < 2
  std::size_t n = 0;
};

// Sorted before summing so the result does not depend on input order.
inline MeanStd mean_std(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  MeanStd r;
  r.n = v.size();
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;
  std::size_t n_used = 0;  // pairs with non-zero difference
  bool exact = false;
};

/// Paired two-sided Wilcoxon signed-rank test.
///
/// Zero differences are discarded. Without ties and with at most 50 pairs the
/// p-value comes from the exact null distribution of W+; otherwise from the
/// normal approximation with tie-corrected variance and no continuity
/// correction.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("wilcoxon: samples must be paired");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    if (x != 0.0) d.push_back(x);
  }
  WilcoxonResult r;
  const std::size_t n = d.size();
  r.n_used = n;
  if (n == 0) return r;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(n);
  bool ties = false;
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }
  double w_plus = 0.0, w_minus = 0.0;
  for (std::size_t i = 0; i < n; ++i) (d[i] > 0 ? w_plus : w_minus) += rank[i];
  r.statistic = std::min(w_plus, w_minus);

  if (!ties && n <= 50) {
    // count[s] = number of sign assignments with W+ == s
    const std::size_t max_sum = n * (n + 1) / 2;
    std::vector<double> count(max_sum + 1, 0.0);
    count[0] = 1.0;
    for (std::size_t k = 1; k <= n; ++k)
      for (std::size_t s = max_sum; s >= k; --s) count[s] += count[s - k];
    const auto w = static_cast<std::size_t>(r.statistic);
    double tail = 0.0;
    for (std::size_t s = 0; s <= w; ++s) tail += count[s];
    const double total = std::ldexp(1.0, static_cast<int>(n));
    r.p_value = std::min(1.0, 2.0 * tail / total);
    r.exact = true;
    return r;
  }
  const double nn = static_cast<double>(n);
  const double mu = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) return r;
  const double z = (r.statistic - mu) / std::sqrt(var);
  r.p_value = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  return r;
}

}  // namespace aunet
