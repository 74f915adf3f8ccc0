// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <cmath>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "deki/kl.hpp"
#include "deki/model.hpp"

namespace deki {

/// -div(exp(a) grad v) = f on the unit square with v = 0 on the boundary,
/// discretized by cell-centered finite volumes on an N x N grid with
/// harmonic averaging of exp(a) at interior faces (one-sided at boundary
/// faces, which sit half a cell from the centers). Fields are row-major
/// over (ix, iy) like KLField.
class DarcySolver {
 public:
  explicit DarcySolver(int grid_n) : n_(grid_n) {
    require(grid_n >= 4, "DarcySolver: N >= 4");
    // fixed 5-point pattern; numeric values refreshed per coefficient field
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(5) * n_ * n_);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) {
        const int c = idx(i, j);
        trips.emplace_back(c, c, 1.0);
        if (i > 0) trips.emplace_back(c, idx(i - 1, j), 1.0);
        if (i + 1 < n_) trips.emplace_back(c, idx(i + 1, j), 1.0);
        if (j > 0) trips.emplace_back(c, idx(i, j - 1), 1.0);
        if (j + 1 < n_) trips.emplace_back(c, idx(i, j + 1), 1.0);
      }
    pattern_.resize(n_ * n_, n_ * n_);
    pattern_.setFromTriplets(trips.begin(), trips.end());
    solver_.analyzePattern(pattern_);
  }

  int grid_n() const { return n_; }

  /// Discrete solution field for log-permeability a and source f (both
  /// N^2 vectors on cell centers). Relative residual is checked to 1e-10.
  Vector solve(const Vector& log_perm, const Vector& source) const {
    require(log_perm.size() == n_ * n_ && source.size() == n_ * n_,
            "DarcySolver: field size mismatch");
    Vector k = log_perm.array().exp();
    Eigen::SparseMatrix<double> a = pattern_;
    const double h2 = 1.0 / (static_cast<double>(n_) * n_);
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) {
        const int c = idx(i, j);
        double diag = 0.0;
        auto face = [&](int ii, int jj) {
          const double t = 2.0 * k[c] * k[idx(ii, jj)] / (k[c] + k[idx(ii, jj)]);
          a.coeffRef(c, idx(ii, jj)) = -t;
          diag += t;
        };
        if (i > 0) face(i - 1, j); else diag += 2.0 * k[c];
        if (i + 1 < n_) face(i + 1, j); else diag += 2.0 * k[c];
        if (j > 0) face(i, j - 1); else diag += 2.0 * k[c];
        if (j + 1 < n_) face(i, j + 1); else diag += 2.0 * k[c];
        a.coeffRef(c, c) = diag;
      }
    Vector b = source * h2;
    Vector v;
    {
      // factorization state is shared; lock so concurrent member
      // evaluations on one model stay correct
      std::lock_guard<std::mutex> lock(mutex_);
      solver_.factorize(a);
      if (solver_.info() != Eigen::Success)
        throw NumericalError("DarcySolver: factorization failed");
      v = solver_.solve(b);
    }
    const double rel = (a * v - b).norm() / std::max(b.norm(), 1e-300);
    if (!(rel <= 1e-10))
      throw NumericalError("DarcySolver: residual above tolerance");
    return v;
  }

  /// Bilinear interpolation of a cell-centered field at (x, y) in [0,1]^2,
  /// with the homogeneous Dirichlet value outside the outermost centers.
  double sample(const Vector& field, double x, double y) const {
    const double gx = x * n_ - 0.5;
    const double gy = y * n_ - 0.5;
    const int i0 = static_cast<int>(std::floor(gx));
    const int j0 = static_cast<int>(std::floor(gy));
    const double wx = gx - i0;
    const double wy = gy - j0;
    double v = 0.0;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj) {
        const int ii = i0 + di;
        const int jj = j0 + dj;
        if (ii < 0 || ii >= n_ || jj < 0 || jj >= n_) continue;  // boundary: 0
        const double w = (di ? wx : 1.0 - wx) * (dj ? wy : 1.0 - wy);
        v += w * field[idx(ii, jj)];
      }
    return v;
  }

 private:
  int idx(int i, int j) const { return i * n_ + j; }

  int n_;
  Eigen::SparseMatrix<double> pattern_;
  mutable std::mutex mutex_;
  mutable Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> solver_;
};

/// The fixed source 13 pi^2 sin(2 pi x) sin(3 pi y) on the cell grid.
inline Vector default_darcy_source(int grid_n) {
  const double pi = 3.14159265358979323846;
  Vector f(grid_n * grid_n);
  const auto pts = cell_centers(grid_n);
  for (std::size_t p = 0; p < pts.size(); ++p)
    f[static_cast<Index>(p)] =
        13.0 * pi * pi * std::sin(2.0 * pi * pts[p].first) * std::sin(3.0 * pi * pts[p].second);
  return f;
}

/// Observation points at the centers of the 8 x 8 subblocks (d_y = 64).
inline std::vector<std::pair<double, double>> subblock_centers_8x8() {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(64);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) pts.emplace_back((i + 0.5) / 8.0, (j + 0.5) / 8.0);
  return pts;
}

/// Forward map: KL coefficients -> log-permeability field -> elliptic solve
/// -> solution values at the observation points.
class DarcyModel final : public ForwardModel {
 public:
  DarcyModel(KLField kl, std::vector<std::pair<double, double>> obs_points, int grid_n,
             Vector source = Vector())
      : kl_(std::move(kl)), obs_(std::move(obs_points)), solver_(grid_n) {
    require(kl_.grid_n == grid_n, "DarcyModel: KL basis grid mismatch");
    require(kl_.dim() >= 1, "DarcyModel: nonempty KL basis");
    require(!obs_.empty(), "DarcyModel: observation points required");
    for (const auto& [x, y] : obs_)
      require(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0,
              "DarcyModel: observation points inside the domain");
    source_ = source.size() ? std::move(source) : default_darcy_source(grid_n);
    require(source_.size() == grid_n * grid_n, "DarcyModel: source size mismatch");
  }

  Index input_dim() const override { return kl_.dim(); }
  Index output_dim() const override { return static_cast<Index>(obs_.size()); }

  const KLField& kl() const { return kl_; }
  const DarcySolver& solver() const { return solver_; }
  const Vector& source() const { return source_; }

  /// Solution field for given coefficients (unmetered helper).
  Vector solution_field(const Vector& coeffs) const {
    return solver_.solve(kl_.field(coeffs), source_);
  }

 protected:
  Vector eval(const Vector& coeffs) const override {
    require(coeffs.size() == input_dim(), "DarcyModel: dimension mismatch");
    const Vector v = solver_.solve(kl_.field(coeffs), source_);
    Vector y(output_dim());
    for (std::size_t p = 0; p < obs_.size(); ++p)
      y[static_cast<Index>(p)] = solver_.sample(v, obs_[p].first, obs_[p].second);
    return y;
  }

 private:
  KLField kl_;
  std::vector<std::pair<double, double>> obs_;
  DarcySolver solver_;
  Vector source_;
};

/// Grid-quadrature L2 relative error |a - a_true| / |a_true| between two
/// cell-centered fields (the uniform weight cancels).
inline double relative_solution_error(const Vector& field, const Vector& truth) {
  require(field.size() == truth.size(), "relative_solution_error: size mismatch");
  const double tn = truth.norm();
  require(tn > 0.0, "relative_solution_error: zero reference field");
  return (field - truth).norm() / tn;
}

}  // namespace deki
