#ifndef VOXSEG_STATS_HPP
#define VOXSEG_STATS_HPP

#include <cmath>
#include <limits>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

namespace detail {

// Continued-fraction evaluation (modified Lentz) of the regularized
// incomplete beta function I_x(a, b).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-sided
};

// Classic paired t-test on the differences, n-1 degrees of freedom; the
// two-sided p comes from the t-distribution CDF via the incomplete beta
// function. Zero-variance differences: p = 1 when all differences vanish,
// otherwise p = 0.
inline TTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y) {
  check(x.size() == y.size(), ErrorKind::Config, "paired_t_test: length mismatch");
  const int64_t n = static_cast<int64_t>(x.size());
  check(n >= 2, ErrorKind::Config, "paired_t_test: needs at least 2 pairs");

  double mean = 0.0;
  for (int64_t i = 0; i < n; ++i) mean += x[i] - y[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  bool all_zero = true;
  for (int64_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    if (d != 0.0) all_zero = false;
    ss += (d - mean) * (d - mean);
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  if (sd == 0.0) {
    if (all_zero) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                     : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  const double df = static_cast<double>(n - 1);
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = detail::incomplete_beta(df / 2.0, 0.5, df / (df + r.t * r.t));
  return r;
}

}  // namespace voxseg

#endif  // VOXSEG_STATS_HPP
