// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "deki/common.hpp"

namespace deki {

/// Truncated Karhunen-Loeve basis of a Gaussian random field on the unit
/// square, tabulated at the N x N cell centers (row-major over (ix, iy)).
/// Column i of basis holds phi_i = sqrt(lambda_i) psi_i with psi_i
/// orthonormal under the uniform quadrature weight 1/N^2, so field
/// coefficients are i.i.d. standard normal.
struct KLField {
  int grid_n = 0;
  double mean = 0.0;           // constant field mean
  Matrix basis;                // N^2 x d_u
  Vector eigvals;              // leading d_u eigenvalues, descending
  double kernel_sigma = 0.0, length_x = 0.0, length_y = 0.0;
  double threshold = 0.0;      // tail-energy threshold epsilon
  double trace = 0.0;          // trace of the covariance operator

  Index dim() const { return basis.cols(); }

  /// Field values a = mean + basis * coeffs on the grid.
  Vector field(const Vector& coeffs) const {
    require(coeffs.size() == basis.cols(), "KLField: coefficient size mismatch");
    if (basis.cols() == 0) return Vector::Constant(grid_n * grid_n, mean);
    return (basis * coeffs).array() + mean;
  }
};

/// Cell-center coordinates of the N x N grid, row-major over (ix, iy).
inline std::vector<std::pair<double, double>> cell_centers(int n) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      pts.emplace_back((i + 0.5) / n, (j + 0.5) / n);
  return pts;
}

/// KL decomposition of an explicit kernel Gram matrix under a uniform
/// quadrature weight. d_u is the smallest d with sum_{i>d} lambda_i <=
/// eps * tr; eps = 1 gives the degenerate d_u = 0.
inline KLField kl_from_kernel(const Matrix& kernel, double weight, double eps,
                              int grid_n) {
  require(eps > 0.0 && eps <= 1.0, "kl_from_kernel: eps in (0,1]");
  require(kernel.rows() == kernel.cols(), "kl_from_kernel: square kernel");
  const Index m = kernel.rows();
  Matrix a = kernel * weight;
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  // ascending from Eigen; negatives are eigensolver noise on a PSD kernel
  Vector lam = es.eigenvalues().reverse().cwiseMax(0.0);
  const double trace = a.trace();

  // minimal d with tail sum_{i>d} lambda_i <= eps * tr(K); d = 0 allowed
  Index d = 0;
  double partial = 0.0;
  while (d < m && trace - partial > eps * trace) {
    partial += lam[d];
    ++d;
  }

  KLField f;
  f.grid_n = grid_n;
  f.threshold = eps;
  f.trace = trace;
  f.eigvals = lam.head(d);
  f.basis.resize(m, d);
  const double psi_scale = 1.0 / std::sqrt(weight);  // unit quadrature norm
  for (Index i = 0; i < d; ++i)
    f.basis.col(i) = es.eigenvectors().col(m - 1 - i) * (std::sqrt(lam[i]) * psi_scale);
  return f;
}

/// Gaussian (squared-exponential, anisotropic) kernel on the cell-center
/// grid, eigendecomposed with weight 1/N^2.
inline KLField kl_basis(double sigma, double length_x, double length_y, int grid_n,
                        double eps, double mean = 0.0) {
  require(sigma > 0.0 && length_x > 0.0 && length_y > 0.0,
          "kl_basis: positive kernel parameters");
  require(grid_n >= 1, "kl_basis: positive grid");
  const auto pts = cell_centers(grid_n);
  const Index m = static_cast<Index>(pts.size());
  Matrix kernel(m, m);
  for (Index p = 0; p < m; ++p) {
    for (Index q = p; q < m; ++q) {
      const double dx = pts[p].first - pts[q].first;
      const double dy = pts[p].second - pts[q].second;
      const double v = sigma * sigma *
                       std::exp(-dx * dx / (2.0 * length_x * length_x) -
                                dy * dy / (2.0 * length_y * length_y));
      kernel(p, q) = v;
      kernel(q, p) = v;
    }
  }
  KLField f = kl_from_kernel(kernel, 1.0 / (static_cast<double>(m)), eps, grid_n);
  f.mean = mean;
  f.kernel_sigma = sigma;
  f.length_x = length_x;
  f.length_y = length_y;
  return f;
}

}  // namespace deki
