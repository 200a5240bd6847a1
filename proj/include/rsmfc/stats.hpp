#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace rsmfc {

struct MeanWithSE {
  double mean = 0.0;
  double se = 0.0;
  bool se_defined = false;  // false for single-sample estimates
};

inline MeanWithSE mean_with_se(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_with_se: empty sample");
  const double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double v : xs) sum += v;
  const double mean = sum / n;
  if (xs.size() < 2) return {mean, 0.0, false};
  double ss = 0.0;
  for (double v : xs) {
    const double d = v - mean;
    ss += d * d;
  }
  const double var = ss / (n - 1.0);
  return {mean, std::sqrt(var / n), true};
}

inline double logsumexp(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("logsumexp: empty input");
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double v : xs) s += std::exp(v - mx);
  return mx + std::log(s);
}

struct WeightedMoments {
  double mean = 0.0;
  double var = 0.0;      // weighted population variance, two-pass (>= 0)
  double se_mean = 0.0;  // ratio-estimator standard error of the mean
  double ess = 0.0;      // effective sample size (sum w)^2 / sum w^2
  double sum_w = 0.0;
};

// Weights need not be normalized; they must be nonnegative with positive sum.
inline WeightedMoments weighted_moments(const std::vector<double>& w,
                                        const std::vector<double>& x) {
  if (w.size() != x.size() || w.empty())
    throw std::invalid_argument("weighted_moments: size mismatch or empty");
  double sw = 0.0, sw2 = 0.0;
  for (double v : w) {
    sw += v;
    sw2 += v * v;
  }
  if (!(sw > 0.0)) throw std::invalid_argument("weighted_moments: nonpositive weight sum");
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m += w[i] * x[i];
  m /= sw;
  double var = 0.0, se2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - m;
    const double wn = w[i] / sw;
    var += wn * d * d;
    se2 += wn * wn * d * d;
  }
  WeightedMoments out;
  out.mean = m;
  out.var = var;
  out.se_mean = std::sqrt(se2);
  out.ess = sw * sw / sw2;
  out.sum_w = sw;
  return out;
}

// Slope of the least-squares line y ~ a + b x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("ols_slope: need >= 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw std::invalid_argument("ols_slope: degenerate abscissae");
  return sxy / sxx;
}

}  // namespace rsmfc
