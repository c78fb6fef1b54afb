#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fgn/common.hpp"

namespace fgn::crps {

// Sum over ordered pairs (n, n') of |x_n - x_n'|, computed in O(n log n) by
// sorting: sum_{i<j} (x_(j) - x_(i)) = sum_k x_(k) * (2k - n + 1), doubled.
inline double pair_abs_sum(std::span<const double> xs) {
  size_t n = xs.size();
  if (n < 2) return 0.0;
  std::vector<double> s(xs.begin(), xs.end());
  std::sort(s.begin(), s.end());
  double acc = 0.0;
  for (size_t k = 0; k < n; ++k)
    acc += s[k] * (2.0 * static_cast<double>(k) - static_cast<double>(n) + 1.0);
  return 2.0 * acc;
}

inline double mean_abs_vs(std::span<const double> xs, double y) {
  if (xs.empty()) throw ContractViolation("crps: empty ensemble");
  double acc = 0.0;
  for (double x : xs) acc += std::fabs(x - y);
  return acc / static_cast<double>(xs.size());
}

// Fair (unbiased for finite ensembles) estimator:
//   (1/N) sum |x - y| - 1/(2 N (N-1)) sum_{n,n'} |x_n - x_n'|
inline double fair(std::span<const double> xs, double y) {
  if (xs.size() < 2) throw ContractViolation("crps::fair: needs at least 2 members");
  double n = static_cast<double>(xs.size());
  return mean_abs_vs(xs, y) - pair_abs_sum(xs) / (2.0 * n * (n - 1.0));
}

// CRPS of the empirical ensemble CDF; spread term divided by 2 N^2.  Exceeds
// the fair value by pair_abs_sum / (2 N^2 (N-1)) unless all members tie.
inline double biased(std::span<const double> xs, double y) {
  if (xs.empty()) throw ContractViolation("crps::biased: empty ensemble");
  double n = static_cast<double>(xs.size());
  return mean_abs_vs(xs, y) - pair_abs_sum(xs) / (2.0 * n * n);
}

}  // namespace fgn::crps
