#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fgn/climatology.hpp"
#include "fgn/common.hpp"
#include "fgn/rng.hpp"

namespace fgn {

struct BootstrapInterval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  int64_t n = 0;
  int64_t block_length = 0;

  bool excludes_zero() const { return lo > 0.0 || hi < 0.0; }
};

// Moving-block bootstrap percentile interval for the mean of a (possibly
// serially correlated) sample.  Block length ceil(n^(1/3)); blocks are drawn
// with replacement from all maximal in-range start positions and the
// concatenation is trimmed to n.
inline BootstrapInterval moving_block_interval(std::span<const double> xs, int64_t n_boot = 1000,
                                               double confidence = 0.95,
                                               RngStream rng = RngStream::root(0, "bootstrap")) {
  int64_t n = static_cast<int64_t>(xs.size());
  if (n < 2) throw ContractViolation("bootstrap: need at least 2 observations");
  if (n_boot < 10) throw ContractViolation("bootstrap: too few resamples");
  if (!(confidence > 0.0) || !(confidence < 1.0))
    throw ContractViolation("bootstrap: confidence outside (0,1)");
  int64_t L = static_cast<int64_t>(std::ceil(std::cbrt(static_cast<double>(n))));
  L = std::min(L, n);
  int64_t n_starts = n - L + 1;
  int64_t n_blocks = (n + L - 1) / L;
  BootstrapInterval out;
  out.n = n;
  out.block_length = L;
  double base = 0.0;
  for (double x : xs) base += x;
  out.mean = base / static_cast<double>(n);
  std::vector<double> means(static_cast<size_t>(n_boot));
  for (int64_t b = 0; b < n_boot; ++b) {
    double acc = 0.0;
    int64_t taken = 0;
    for (int64_t k = 0; k < n_blocks && taken < n; ++k) {
      int64_t start =
          static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n_starts));
      for (int64_t i = 0; i < L && taken < n; ++i, ++taken) acc += xs[static_cast<size_t>(start + i)];
    }
    means[static_cast<size_t>(b)] = acc / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  double alpha = (1.0 - confidence) / 2.0;
  out.lo = quantile_sorted(means, alpha);
  out.hi = quantile_sorted(means, 1.0 - alpha);
  return out;
}

// Paired comparison a - b across aligned samples (one value per init).
inline BootstrapInterval paired_diff_interval(std::span<const double> a, std::span<const double> b,
                                              int64_t n_boot = 1000, double confidence = 0.95,
                                              RngStream rng = RngStream::root(0, "bootstrap")) {
  if (a.size() != b.size()) throw ContractViolation("bootstrap: paired samples differ in length");
  std::vector<double> d(a.size());
  for (size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return moving_block_interval(d, n_boot, confidence, rng);
}

}  // namespace fgn
