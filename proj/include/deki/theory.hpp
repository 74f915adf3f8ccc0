// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deki/common.hpp"
#include "deki/record.hpp"

namespace deki {

/// A <= B in the PSD order, up to tol * max(1, |B|) on the smallest
/// eigenvalue of B - A. Inputs must be symmetric within the same slack.
inline bool psd_order(const Matrix& a, const Matrix& b, double tol) {
  require(a.rows() == a.cols() && b.rows() == b.cols() && a.rows() == b.rows(),
          "psd_order: square matrices of equal size");
  require(tol >= 0.0, "psd_order: tol >= 0");
  const double scale = std::max(1.0, sym_norm(b));
  require((a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale &&
              (b - b.transpose()).cwiseAbs().maxCoeff() <= tol * scale,
          "psd_order: inputs must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(Matrix(b - a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -tol * scale;
}

/// The two matrix bounds enclosing one deviation update,
///   C (I + M^2 h C)^-2  <=  C_next  <=  C (I + gamma^2 h C)^-2,
/// evaluated through the eigendecomposition of C.
inline std::pair<Matrix, Matrix> covariance_sandwich(const Matrix& c, double h,
                                                     double gamma, double m_bound) {
  require(h > 0.0, "covariance_sandwich: h > 0");
  require(gamma > 0.0 && gamma <= m_bound, "covariance_sandwich: 0 < gamma <= M");
  Eigen::SelfAdjointEigenSolver<Matrix> es(c);
  Vector lam = es.eigenvalues().cwiseMax(0.0);
  auto shrink = [&](double rate2) {
    Vector d(lam.size());
    for (Index i = 0; i < lam.size(); ++i) {
      const double f = 1.0 + rate2 * h * lam[i];
      d[i] = lam[i] / (f * f);
    }
    return Matrix(es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose());
  };
  return {shrink(m_bound * m_bound), shrink(gamma * gamma)};
}

struct CollapseCheck {
  int step = 0;
  std::string what;     // which bound was violated
  double margin = 0.0;  // negative margin at the violation
};

/// Offline audit of one recorded run against the collapse theory.
struct CollapseReport {
  std::vector<double> cov_norms;
  std::vector<int> ranks;
  std::vector<double> kappas;
  std::vector<double> diag_min, diag_max;
  std::vector<double> projector_drift;  // |P_n - P_0|_2
  double kappa_bar = 0.0;
  double min_p_diag = 0.0;   // min_s P(s,s) of the initial projector
  std::vector<CollapseCheck> violations;
  bool passed() const { return violations.empty(); }
};

namespace detail {

inline Matrix projector_of(const Matrix& c) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(c);
  const Vector lam = es.eigenvalues();
  const double lmax = std::max(0.0, lam.maxCoeff());
  const double tol = 1e-24 * lmax;  // rank tolerance consistent with linearize
  Matrix p = Matrix::Zero(c.rows(), c.cols());
  for (Index i = 0; i < lam.size(); ++i)
    if (lam[i] > tol)
      p += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose();
  return p;
}

}  // namespace detail

/// Verifies, step by step on the recorded dense covariances:
/// (a) rank invariance, (b) kappa_n <= kappa_bar, (c) the collapse
/// envelope |C_n| <= |C_0| (1 + gamma^2 theta)^{-2n}, (d) the diagonal
/// lower bound via the initial column-space projector, and (e) the PSD
/// sandwich for each update with its recorded per-step map bounds.
/// gamma and m_bound are the uniform bounds fed to (b)-(d); theta must
/// satisfy theta <= 1 / m_bound^2 for the envelope to be meaningful.
inline CollapseReport audit_collapse(const RunRecord& run, double gamma, double m_bound,
                                     double theta, double tol = 1e-8) {
  require(gamma > 0.0 && gamma <= m_bound, "audit_collapse: 0 < gamma <= M");
  require(theta > 0.0, "audit_collapse: theta > 0");
  const auto& cov = run.trace.covariances;
  if (cov.size() != run.steps.size() + 1)
    throw NumericalError("audit_collapse: run lacks per-step covariance data");

  CollapseReport rep;
  const std::size_t n_states = cov.size();
  rep.cov_norms.reserve(n_states);

  const Matrix p0 = detail::projector_of(cov.front());
  rep.min_p_diag = p0.diagonal().minCoeff();

  std::vector<Matrix> projectors;
  projectors.reserve(n_states);
  for (std::size_t n = 0; n < n_states; ++n) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov[n]);
    Vector lam = es.eigenvalues().reverse().cwiseMax(0.0);
    const double norm = lam[0];
    const double tol2 = 1e-24 * norm;
    int rank = 0;
    for (Index i = 0; i < lam.size(); ++i)
      if (lam[i] > tol2) rank = static_cast<int>(i) + 1;
    rep.cov_norms.push_back(norm);
    rep.ranks.push_back(rank);
    rep.kappas.push_back(rank > 0 ? lam[0] / lam[rank - 1] : 0.0);
    rep.diag_min.push_back(cov[n].diagonal().minCoeff());
    rep.diag_max.push_back(cov[n].diagonal().maxCoeff());
    Matrix pn = Matrix::Zero(cov[n].rows(), cov[n].cols());
    for (Index i = 0; i < lam.size(); ++i)
      if (es.eigenvalues()[i] > tol2)
        pn += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose();
    rep.projector_drift.push_back(sym_norm(Matrix(pn - p0)));
    projectors.push_back(std::move(pn));
  }

  rep.kappa_bar = std::max(rep.kappas.front(),
                           1.5 * m_bound * m_bound / (gamma * gamma));
  const double delta = 1.0 / (1.0 + gamma * gamma * theta);

  for (std::size_t n = 0; n < n_states; ++n) {
    if (rep.ranks[n] != rep.ranks[0])
      rep.violations.push_back({static_cast<int>(n), "rank invariance",
                                static_cast<double>(rep.ranks[n] - rep.ranks[0])});
    if (rep.kappas[n] > rep.kappa_bar * (1.0 + tol))
      rep.violations.push_back({static_cast<int>(n), "condition bound",
                                rep.kappa_bar * (1.0 + tol) - rep.kappas[n]});
    const double envelope =
        rep.cov_norms[0] * std::pow(delta, 2.0 * static_cast<double>(n));
    if (rep.cov_norms[n] > envelope * (1.0 + tol))
      rep.violations.push_back({static_cast<int>(n), "collapse envelope",
                                envelope * (1.0 + tol) - rep.cov_norms[n]});
    const double diag_bound = rep.cov_norms[n] * rep.min_p_diag / rep.kappa_bar;
    if (rep.diag_min[n] < diag_bound * (1.0 - tol))
      rep.violations.push_back({static_cast<int>(n), "diagonal lower bound",
                                rep.diag_min[n] - diag_bound * (1.0 - tol)});
    if (rep.projector_drift[n] > 1e-8)
      rep.violations.push_back({static_cast<int>(n), "projector drift",
                                1e-8 - rep.projector_drift[n]});
  }

  auto min_eig = [](const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
  };
  for (std::size_t n = 0; n + 1 < n_states; ++n) {
    const auto& step = run.steps[n];
    const double g2 = step.gamma2 > 0.0 ? std::sqrt(step.gamma2) : gamma;
    const double mm = step.m2 > 0.0 ? std::sqrt(step.m2) : m_bound;
    const auto [lower, upper] = covariance_sandwich(cov[n], step.h, g2, mm);
    const double slack = tol * std::max(1.0, rep.cov_norms[n]);
    const double lo_margin = min_eig(Matrix(cov[n + 1] - lower));
    if (lo_margin < -slack)
      rep.violations.push_back({static_cast<int>(n + 1), "sandwich lower", lo_margin});
    const double up_margin = min_eig(Matrix(upper - cov[n + 1]));
    if (up_margin < -slack)
      rep.violations.push_back({static_cast<int>(n + 1), "sandwich upper", up_margin});
  }
  return rep;
}

/// Explicit constants of the convergence theory.
struct RateConstants {
  double beta0 = 0.0;       // contraction from the dropout diagonal
  double delta = 0.0;       // (1 + gamma^2 theta)^-1
  double coef_sqrt = 0.0;   // Delta_n = coef_sqrt |C_n|^(1/2) + coef_lin |C_n|
  double coef_lin = 0.0;
  double c1 = 0.0;          // Delta_n <= c1 delta^n
  int n0 = 0;               // warm-up steps
  double beta = 0.0;        // final rate
  double c2 = 0.0;          // additive constant of the theorem
  double big_c = 0.0;       // (J-1)^(3/2) H
};

inline RateConstants rate_constants(double c_pl, double l_smooth, double m_bound,
                                    double gamma, double theta, double mu,
                                    double keep_rate, double kappa_bar, double min_p,
                                    double c0_norm, int j_members, double hess_bound) {
  require(c_pl > 0.0 && l_smooth > 0.0 && m_bound > 0.0 && gamma > 0.0,
          "rate_constants: positive constants");
  require(gamma <= m_bound, "rate_constants: gamma <= M");
  require(keep_rate > 0.0 && keep_rate < 1.0, "rate_constants: lambda in (0,1)");
  require(theta > 0.0 && theta <= 1.0 / (m_bound * m_bound) + 1e-12,
          "rate_constants: theta <= M^-2");
  require(mu > 0.0 && mu <= 1.0 / l_smooth + 1e-12, "rate_constants: mu <= L^-1");
  require(kappa_bar >= 1.0 && min_p > 0.0 && c0_norm >= 0.0 && j_members >= 2,
          "rate_constants: domain violation");
  require(hess_bound >= 0.0, "rate_constants: H >= 0");

  RateConstants r;
  const double mm2 = mu * m_bound * m_bound;
  r.beta0 = c_pl * keep_rate * (1.0 - keep_rate) / kappa_bar * min_p * mu *
            (1.0 + 2.0 * mm2) / (4.0 * (1.0 + mm2) * (1.0 + mm2));
  r.delta = 1.0 / (1.0 + gamma * gamma * theta);
  r.big_c = std::pow(static_cast<double>(j_members - 1), 1.5) * hess_bound;
  r.coef_sqrt = 2.0 * r.big_c * mu * (m_bound + l_smooth * std::sqrt(mu));
  r.coef_lin = l_smooth * r.big_c * r.big_c * mu * mu;
  r.c1 = r.coef_sqrt * std::sqrt(c0_norm) + r.coef_lin * c0_norm;
  r.n0 = r.c1 > r.beta0
             ? static_cast<int>(std::ceil(std::log(r.c1 / r.beta0) / std::log(1.0 / r.delta)))
             : 0;
  const double gt = gamma * gamma * theta;
  r.beta = std::min(r.beta0, gt / (2.0 * (1.0 + gt)));
  r.c2 = std::pow(1.0 - r.beta, r.n0) * r.c1 / (1.0 - r.beta - r.delta);
  return r;
}

/// Gauss-Newton reference iterate for the mean update,
///   mean' = mean + h~ C~ G^T (I + h~ G C~ G^T)^-1 (z - H(mean)),
/// with G the Jacobian of the stacked map at the mean.
inline Vector gauss_newton_reference(const Vector& mean, const Matrix& dropout_cuu,
                                     const Matrix& jacobian, double htilde,
                                     const Vector& target, const Vector& mean_image) {
  const Index dz = target.size();
  require(jacobian.rows() == dz && jacobian.cols() == mean.size(),
          "gauss_newton_reference: Jacobian shape mismatch");
  Matrix gcg = jacobian * dropout_cuu * jacobian.transpose();
  Matrix lhs = Matrix::Identity(dz, dz) + htilde * gcg;
  Eigen::LLT<Matrix> llt(lhs);
  if (llt.info() != Eigen::Success)
    throw NumericalError("gauss_newton_reference: system not SPD");
  return mean + htilde * dropout_cuu * jacobian.transpose() *
                    llt.solve(target - mean_image);
}

struct LinearizationMargin {
  int step = 0;
  double lhs = 0.0;    // |mean_{n+1} - mean'_{n+1}|
  double rhs = 0.0;    // (J-1)^{3/2} H h~ |C~|^{3/2} |z - H(mean)|
  double margin = 0.0; // rhs - lhs
};

/// Checks the Gauss-Newton approximation inequality on every recorded
/// step. Requires the trace payload plus a stacked-map Jacobian callback;
/// the inequality must hold with slack >= -1e-10 (relative to rhs scale).
inline std::vector<LinearizationMargin> audit_linearization_error(
    const RunRecord& run, double hess_bound, int j_members,
    const std::function<Matrix(const Vector&)>& stacked_jacobian,
    const Vector& target) {
  const auto& tr = run.trace;
  if (!tr.enabled || tr.means.size() != run.steps.size() + 1 ||
      tr.dropout_covariances.size() != run.steps.size())
    throw NumericalError("audit_linearization_error: missing trace data");
  require(j_members >= 2, "audit_linearization_error: J >= 2");
  std::vector<LinearizationMargin> out;
  out.reserve(run.steps.size());
  for (std::size_t n = 0; n < run.steps.size(); ++n) {
    const Vector& mean = tr.means[n];
    const Vector& image = tr.mean_images[n];
    const double htilde = run.steps[n].htilde;
    const Matrix& ccov = tr.dropout_covariances[n];
    const Vector ref = gauss_newton_reference(mean, ccov, stacked_jacobian(mean),
                                              htilde, target, image);
    LinearizationMargin m;
    m.step = static_cast<int>(n) + 1;
    m.lhs = (tr.means[n + 1] - ref).norm();
    const double cnorm = sym_norm(ccov);
    m.rhs = std::pow(static_cast<double>(j_members - 1), 1.5) * hess_bound * htilde *
            std::pow(cnorm, 1.5) * (target - image).norm();
    m.margin = m.rhs - m.lhs;
    out.push_back(m);
  }
  return out;
}

/// Residual-growth stability: every consecutive ratio of |z - H(mean_n)|
/// must stay within 1 + M sqrt(mu/2) (+1e-10).
inline bool audit_stability(const std::vector<double>& residual_norms, double m_bound,
                            double mu) {
  require(m_bound > 0.0 && mu > 0.0, "audit_stability: positive constants");
  const double bound = 1.0 + m_bound * std::sqrt(mu / 2.0) + 1e-10;
  for (std::size_t n = 0; n + 1 < residual_norms.size(); ++n) {
    if (residual_norms[n] <= 0.0) continue;
    if (residual_norms[n + 1] / residual_norms[n] > bound) return false;
  }
  return true;
}

}  // namespace deki
