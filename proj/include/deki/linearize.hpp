// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/SVD>
#include <cmath>
#include <utility>

#include "deki/problem.hpp"

namespace deki {

/// Norm-bounded linearization of the forward map around the current
/// ensemble: the top block G_n is the singular-value truncation of the
/// regression C^{yu} (C^{uu})^+, stored in factored form G_n = W S V^T,
/// and the full map is H_n = [G_n; C0^{-1/2}]. Only actions are exposed;
/// the dense d_y x d_u matrix is never formed on the hot path.
class LinearizedMap {
 public:
  LinearizedMap(Matrix w, Matrix s, Matrix v, const Regularizer* reg, double bound)
      : w_(std::move(w)), s_(std::move(s)), v_(std::move(v)), reg_(reg), bound_(bound) {}

  Index dim_u() const { return v_.rows(); }
  Index dim_y() const { return w_.rows(); }
  Index dim_z() const { return dim_y() + dim_u(); }
  double bound() const { return bound_; }
  const Regularizer& regularizer() const { return *reg_; }

  /// G_n applied to the columns of x.
  Matrix apply_g(const Matrix& x) const {
    if (s_.size() == 0) return Matrix::Zero(dim_y(), x.cols());
    return w_ * (s_ * (v_.transpose() * x));
  }

  /// H_n applied to the columns of x (stacked output).
  Matrix apply(const Matrix& x) const {
    Matrix out(dim_z(), x.cols());
    out.topRows(dim_y()) = apply_g(x);
    out.bottomRows(dim_u()) = reg_->apply(x);
    return out;
  }

  /// H_n^T applied to the columns of a stacked d_z x m block.
  Matrix apply_adjoint(const Matrix& z) const {
    Matrix out = reg_->apply(Matrix(z.bottomRows(dim_u())));
    if (s_.size() != 0)
      out += v_ * (s_.transpose() * (w_.transpose() * z.topRows(dim_y())));
    return out;
  }

  Matrix dense_g() const {
    if (s_.size() == 0) return Matrix::Zero(dim_y(), dim_u());
    return w_ * s_ * v_.transpose();
  }

  Matrix dense() const {
    Matrix h(dim_z(), dim_u());
    h.topRows(dim_y()) = dense_g();
    h.bottomRows(dim_u()) = reg_->apply(Matrix(Matrix::Identity(dim_u(), dim_u())));
    return h;
  }

  /// Exact extreme eigenvalues of H_n^T H_n = G_n^T G_n + C0^{-1}.
  /// For a scalar regularizer c I these are c^2 + sv(S)^2 and (for
  /// rank-deficient G_n) c^2 itself; the general case falls back to a
  /// dense eigensolve.
  std::pair<double, double> spectrum_bounds() const {
    const Index du = dim_u();
    if (reg_->is_diagonal()) {
      const Vector creg = reg_->apply(Vector::Ones(du));
      const double cmin = creg.minCoeff(), cmax = creg.maxCoeff();
      if (std::abs(cmax - cmin) <= 1e-14 * std::max(1.0, cmax)) {
        const double c2 = cmin * cmin;
        if (s_.size() == 0) return {c2, c2};
        Eigen::JacobiSVD<Matrix> svd(s_);
        const double smax = svd.singularValues().maxCoeff();
        const Index rank_g = svd.rank();
        const double smin = rank_g < std::min(s_.rows(), s_.cols())
                                ? 0.0
                                : svd.singularValues().minCoeff();
        const double lo = (rank_g < du) ? c2 : c2 + smin * smin;
        return {lo, c2 + smax * smax};
      }
    }
    Matrix hth = dense_g();
    Matrix full = hth.transpose() * hth + reg_->squared_dense();
    Eigen::SelfAdjointEigenSolver<Matrix> es(full, Eigen::EigenvaluesOnly);
    return {es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff()};
  }

  /// Operator norm of the stacked regression map [G_raw; C0^{-1/2} P]
  /// this object was built from, before truncation; used to fix M_G.
  static double regression_norm(const Matrix& w, const Matrix& m_raw, const Matrix& v,
                                const Regularizer& reg) {
    if (m_raw.size() == 0) return std::sqrt(reg.max_eig());
    Matrix stacked(w.rows() + v.rows(), m_raw.cols());
    stacked.topRows(w.rows()) = w * m_raw;
    stacked.bottomRows(v.rows()) = reg.apply(v);
    Eigen::JacobiSVD<Matrix> svd(stacked);
    return svd.singularValues().maxCoeff();
  }

 private:
  Matrix w_;  // d_y x r'
  Matrix s_;  // r' x r, singular values truncated at bound_
  Matrix v_;  // d_u x r
  const Regularizer* reg_;
  double bound_;
};

struct LinearizeResult {
  LinearizedMap map;
  double regression_norm = 0.0;  // pre-truncation norm of [G_raw; C0^{-1/2} P]
};

/// Appendix-style construction of the truncated linearization from the
/// deviation table T (d_u x J, columns sum to zero) and the forward-image
/// deviation table Y (d_y x J):
///   thin SVDs T = V St, Y = W Sy, regression M = Sy St^T (St St^T)^{-1},
///   then clip the singular values of M at the bound. Singular values
///   below 1e-12 of the largest are treated as rank zero.
/// Cost O((d_u + d_y) J^2 + J^3); the result acts on vectors without
/// forming a dense d_y x d_u matrix.
inline LinearizeResult linearize(const Matrix& deviations, const Matrix& image_deviations,
                                 double bound, const Regularizer& reg) {
  require(bound > 0.0, "linearize: positive truncation bound");
  require(deviations.cols() == image_deviations.cols(),
          "linearize: deviation tables must share J");
  constexpr double kRankTol = 1e-12;

  Eigen::BDCSVD<Matrix> tsvd(deviations, Eigen::ComputeThinU | Eigen::ComputeThinV);
  tsvd.setThreshold(kRankTol);
  const Index r = tsvd.rank();
  Eigen::BDCSVD<Matrix> ysvd(image_deviations, Eigen::ComputeThinU | Eigen::ComputeThinV);
  ysvd.setThreshold(kRankTol);
  const Index rp = ysvd.rank();

  if (r == 0 || rp == 0) {
    LinearizedMap map(Matrix::Zero(image_deviations.rows(), 0), Matrix(),
                      Matrix::Zero(deviations.rows(), 0), &reg, bound);
    const double base = std::sqrt(reg.max_eig());
    return {std::move(map), r == 0 ? 0.0 : base};
  }

  const Matrix v = tsvd.matrixU().leftCols(r);
  const Vector st = tsvd.singularValues().head(r);
  // rows of St = diag(st) Vt^T, so St St^T = diag(st^2)
  const Matrix w = ysvd.matrixU().leftCols(rp);
  Matrix sy = ysvd.singularValues().head(rp).asDiagonal() *
              ysvd.matrixV().leftCols(rp).transpose();  // rp x J
  Matrix m_raw = ((sy * tsvd.matrixV().leftCols(r)) * st.cwiseInverse().asDiagonal());

  Eigen::JacobiSVD<Matrix> msvd(m_raw, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Vector sv = msvd.singularValues().cwiseMin(bound);
  Matrix s = msvd.matrixU() * sv.asDiagonal() * msvd.matrixV().transpose();

  const double reg_norm = LinearizedMap::regression_norm(w, m_raw, v, reg);
  LinearizedMap map(w, std::move(s), v, &reg, bound);
  return {std::move(map), reg_norm};
}

}  // namespace deki
