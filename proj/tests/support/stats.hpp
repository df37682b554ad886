// Test-only statistical utilities: regularized incomplete gamma, reference
// CDFs, Kolmogorov-Smirnov and total-variation statistics. Independent of the
// library's sampling code.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace teststats {

// Regularized lower incomplete gamma P(a, x); series for x < a + 1,
// continued fraction otherwise (Numerical Recipes style).
inline double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_p domain");
  if (x == 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - lg);
  }
  // Lentz continued fraction for Q(a, x).
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + a * std::log(x) - lg) * h;
  return 1.0 - q;
}

inline double gamma_q(double a, double x) { return 1.0 - gamma_p(a, x); }

// Inverse-Gamma(shape, rate) CDF: P[X <= x] = Q(shape, rate / x).
inline double inv_gamma_cdf(double x, double shape, double rate) {
  if (x <= 0.0) return 0.0;
  return gamma_q(shape, rate / x);
}

inline double normal_cdf(double x, double mean = 0.0, double sd = 1.0) {
  return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0)));
}

// One-sample KS statistic against a reference CDF.
inline double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double stat = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = cdf(samples[i]);
    stat = std::max(stat, std::abs(f - static_cast<double>(i) / n));
    stat = std::max(stat, std::abs(static_cast<double>(i + 1) / n - f));
  }
  return stat;
}

// Total-variation distance between the empirical bin frequencies of the
// samples and the probability a log-density assigns to each bin. The density
// is integrated per bin with Simpson's rule on a fine subgrid and the grid
// probabilities are normalized over [lo, hi].
inline double tv_distance(std::span<const double> samples,
                          const std::function<double(double)>& log_density, double lo, double hi,
                          int bins) {
  if (bins < 2 || !(hi > lo)) throw std::invalid_argument("tv_distance domain");
  const double width = (hi - lo) / bins;
  // Normalize in a numerically safe way: shift by the max log density.
  double max_ld = -1e308;
  const int sub = 64;
  for (int b = 0; b < bins * sub; ++b)
    max_ld = std::max(max_ld, log_density(lo + (b + 0.5) * (hi - lo) / (bins * sub)));
  std::vector<double> mass(bins, 0.0);
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double a = lo + b * width;
    double acc = 0.0;
    const double h = width / sub;
    for (int s = 0; s < sub; ++s) {
      const double x0 = a + s * h;
      acc += (std::exp(log_density(x0) - max_ld) +
              4.0 * std::exp(log_density(x0 + 0.5 * h) - max_ld) +
              std::exp(log_density(x0 + h) - max_ld)) *
             h / 6.0;
    }
    mass[b] = acc;
    total += acc;
  }
  std::vector<double> counts(bins, 0.0);
  double kept = 0.0;
  for (double v : samples) {
    if (v < lo || v >= hi) continue;
    const int b = std::min(bins - 1, static_cast<int>((v - lo) / width));
    counts[b] += 1.0;
    kept += 1.0;
  }
  if (kept < samples.size() * 0.99)
    throw std::runtime_error("tv_distance: range drops more than 1% of the samples");
  double tv = 0.0;
  for (int b = 0; b < bins; ++b) tv += std::abs(counts[b] / kept - mass[b] / total);
  return 0.5 * tv;
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double variance(std::span<const double> v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace teststats
