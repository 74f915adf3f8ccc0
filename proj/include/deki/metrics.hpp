// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "deki/common.hpp"

namespace deki {

/// Relative misfit e_n = (l_n - l_min) / |y|^2, clamped at zero for
/// l_n within 1e-10 below l_min; anything lower violates the reference
/// solution's optimality and is rejected.
inline double relative_misfit(double loss, double l_min, double ynorm2) {
  require(ynorm2 > 0.0, "relative_misfit: |y|^2 > 0");
  require(loss >= l_min - 1e-10, "relative_misfit: loss below reference minimum");
  return std::max(0.0, loss - l_min) / ynorm2;
}

/// Two-point log decay rate r = (log e_m - log e_n) / (m - n); negative for
/// decaying series. For e_k = C rho^k this is log(rho) for any window.
inline std::optional<double> convergence_rate(const std::vector<double>& misfits,
                                              std::size_t m, std::size_t n) {
  require(m < misfits.size() && n < misfits.size(), "convergence_rate: window in range");
  require(m != n, "convergence_rate: m != n");
  if (!(misfits[m] > 0.0) || !(misfits[n] > 0.0)) return std::nullopt;
  return (std::log(misfits[m]) - std::log(misfits[n])) /
         (static_cast<double>(m) - static_cast<double>(n));
}

/// Window for rate fits: m is the first step with e < e_0 / 2 (skipping the
/// transient), n the last step with e > 1e-12 (above the floating-point
/// floor). Empty when the series never halves or never stays positive.
inline std::optional<std::pair<std::size_t, std::size_t>> rate_window(
    const std::vector<double>& misfits) {
  if (misfits.size() < 2 || !(misfits.front() > 0.0)) return std::nullopt;
  std::size_t m = misfits.size();
  for (std::size_t k = 0; k < misfits.size(); ++k)
    if (misfits[k] < 0.5 * misfits.front()) {
      m = k;
      break;
    }
  std::size_t n = 0;
  bool found = false;
  for (std::size_t k = misfits.size(); k-- > 0;)
    if (misfits[k] > 1e-12) {
      n = k;
      found = true;
      break;
    }
  if (!found || m >= n) return std::nullopt;
  return std::make_pair(m, n);
}

/// |r| over the automatic window; reported as a positive decay rate.
inline std::optional<double> fitted_decay_rate(const std::vector<double>& misfits) {
  const auto w = rate_window(misfits);
  if (!w) return std::nullopt;
  const auto r = convergence_rate(misfits, w->first, w->second);
  if (!r) return std::nullopt;
  return std::abs(*r);
}

/// Least-squares line fit y = a x + b with coefficient of determination.
struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "fit_line: need two points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  LineFit f;
  const double denom = n * sxx - sx * sx;
  require(std::abs(denom) > 0.0, "fit_line: degenerate abscissae");
  f.slope = (n * sxy - sx * sy) / denom;
  f.intercept = (sy - f.slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fit = f.slope * x[i] + f.intercept;
    ss_res += (y[i] - fit) * (y[i] - fit);
    ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
  }
  f.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  return f;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: nonempty input");
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace deki
