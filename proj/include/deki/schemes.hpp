// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>

#include "deki/ensemble.hpp"
#include "deki/linearize.hpp"
#include "deki/problem.hpp"
#include "deki/record.hpp"
#include "deki/rng.hpp"

namespace deki {

/// Which covariance norm scales the adaptive mean step. The deviation step
/// is always scaled by the plain ensemble covariance norm, which keeps the
/// deviation dynamics independent of the masks. Scaling the mean step by
/// the dropout covariance norm matches the scale of the covariances that
/// actually precondition that update and converges markedly faster; the
/// plain-norm variant is kept as an option.
enum class MeanStepNorm { kDropoutCovariance, kEnsembleCovariance };

/// Adaptive step-size constants: deviation step theta, mean step mu,
/// stabilizer eps0 guarding the fully collapsed ensemble.
struct StepSchedule {
  double theta = 0.25;
  double mu = 2.5;
  double eps0 = 1e-12;
  MeanStepNorm mean_norm = MeanStepNorm::kDropoutCovariance;

  void validate() const {
    require(theta > 0.0 && mu > 0.0, "StepSchedule: positive step constants");
    require(eps0 >= 0.0, "StepSchedule: eps0 >= 0");
  }
};

struct StepSizes {
  double h = 0.0;       // deviation step
  double htilde = 0.0;  // mean step
};

/// (h_n, h~_n) = (theta, mu) / (|C^uu|_2 + eps0).
inline StepSizes adaptive_steps(double cov_norm, const StepSchedule& sched) {
  sched.validate();
  require(cov_norm >= 0.0, "adaptive_steps: covariance norm >= 0");
  const double denom = cov_norm + sched.eps0;
  require(denom > 0.0, "adaptive_steps: zero covariance requires eps0 > 0");
  return {sched.theta / denom, sched.mu / denom};
}

inline StepSizes adaptive_steps(const Matrix& cuu, const StepSchedule& sched) {
  return adaptive_steps(sym_norm(cuu), sched);
}

/// One vanilla (Tikhonov) EKI step:
///   u_j <- u_j + h C^uz (h C^zz + I)^-1 (z - H(u_j)),
/// costing exactly J metered queries.
inline Ensemble eki_step(const Ensemble& e, const RegularizedProblem& p, double h) {
  require(h > 0.0, "eki_step: h > 0");
  require(e.dim() == p.dim_u(), "eki_step: ensemble dimension mismatch");
  const Index j_members = e.size();
  Matrix images(p.dim_z(), j_members);
  for (Index j = 0; j < j_members; ++j) images.col(j) = p.apply(e.members().col(j));
  const CovarianceBundle cov = empirical_covariances(e, images);

  Matrix lhs = h * cov.czz + Matrix::Identity(p.dim_z(), p.dim_z());
  Eigen::LLT<Matrix> llt(lhs);
  if (llt.info() != Eigen::Success)
    throw NumericalError("eki_step: Kalman system not SPD");
  Matrix residuals = (-images).colwise() + p.target();
  Matrix members = e.members() + h * cov.cuz * llt.solve(residuals);
  return Ensemble(std::move(members));
}

/// Naive dropout EKI step: the gain uses the dropout-ensemble covariances,
/// the residuals use the undropped members. 2J metered queries.
inline Ensemble naive_deki_step(const Ensemble& e, const RegularizedProblem& p, double h,
                                const DropoutMask& mask) {
  require(h > 0.0, "naive_deki_step: h > 0");
  const Index j_members = e.size();
  Matrix images(p.dim_z(), j_members);
  for (Index j = 0; j < j_members; ++j) images.col(j) = p.apply(e.members().col(j));

  const Ensemble dropped = apply_dropout(e, mask);
  Matrix dropout_images(p.dim_z(), j_members);
  for (Index j = 0; j < j_members; ++j)
    dropout_images.col(j) = p.apply(dropped.members().col(j));
  const CovarianceBundle cov = empirical_covariances(dropped, dropout_images);

  Matrix lhs = h * cov.czz + Matrix::Identity(p.dim_z(), p.dim_z());
  Eigen::LLT<Matrix> llt(lhs);
  if (llt.info() != Eigen::Success)
    throw NumericalError("naive_deki_step: Kalman system not SPD");
  Matrix residuals = (-images).colwise() + p.target();
  Matrix members = e.members() + h * cov.cuz * llt.solve(residuals);
  return Ensemble(std::move(members));
}

/// Mean update of the separated scheme:
///   mean <- mean + h~ C~^uz (I + h~ C~^zz)^-1 (z - H(mean)),
/// with the stacked image of the mean supplied by the caller.
inline Vector deki_mean_step(const Vector& mean, const CovarianceBundle& dropout_cov,
                             double htilde, const Vector& target, const Vector& mean_image) {
  require(htilde >= 0.0, "deki_mean_step: htilde >= 0");
  const Index dz = target.size();
  require(dropout_cov.czz.rows() == dz && mean_image.size() == dz,
          "deki_mean_step: dimension mismatch");
  Matrix lhs = Matrix::Identity(dz, dz) + htilde * dropout_cov.czz;
  Eigen::LLT<Matrix> llt(lhs);
  if (llt.info() != Eigen::Success)
    throw NumericalError("deki_mean_step: Kalman system not SPD");
  return mean + htilde * dropout_cov.cuz * llt.solve(target - mean_image);
}

/// Deviation update through the linearized map:
///   tau <- tau - h C^uu H_n^T (I + h H_n C^uu H_n^T)^-1 H_n tau.
/// Implemented with J x J solves via the factored H_n; the equivalent
/// resolvent form (I + h C^uu H_n^T H_n)^-1 tau is exercised in tests.
inline Matrix deki_deviation_step(const Matrix& deviations, const LinearizedMap& map,
                                  double h) {
  require(h >= 0.0, "deki_deviation_step: h >= 0");
  const Index j_members = deviations.cols();
  if (h == 0.0 || j_members == 0) return deviations;
  const double denom = static_cast<double>(j_members - 1);
  const double root = std::sqrt(denom);

  // A = H_n T / sqrt(J-1), so H C^uu H^T = A A^T
  Matrix ht = map.apply(deviations);
  Matrix a = ht / root;
  Matrix small = Matrix::Identity(j_members, j_members) + h * (a.transpose() * a);
  Eigen::LLT<Matrix> llt(small);
  if (llt.info() != Eigen::Success)
    throw NumericalError("deki_deviation_step: inner system not SPD");
  // (I + h A A^T)^-1 X = X - h A (I + h A^T A)^-1 A^T X
  Matrix inner = ht - h * a * llt.solve(Matrix(a.transpose() * ht));
  // C^uu H^T inner = T' (A^T inner) with T' = T / sqrt(J-1)
  return deviations - (h / root) * (deviations * (a.transpose() * inner));
}

/// Mean/deviation state of the separated scheme. Deviations are stored
/// apart from the mean so that a collapsed ensemble keeps full relative
/// precision; members are materialized only for forward evaluations.
struct DekiState {
  Vector mean;
  Matrix deviations;
  std::uint64_t seed = 0;
  int step = 0;  // completed iterations

  static DekiState from_ensemble(const Ensemble& e, std::uint64_t seed) {
    auto md = mean_and_deviations(e);
    return DekiState{std::move(md.mean), std::move(md.deviations), seed, 0};
  }

  Ensemble ensemble() const {
    return Ensemble(deviations.colwise() + mean);
  }
};

struct DekiOptions {
  StepSchedule schedule;
  double keep_rate = 0.5;  // lambda; dropout rate is 1 - lambda
  double mg_factor = 10.0;
  std::optional<double> mg_override;  // fixed truncation bound, skips calibration
  bool record_trace = false;
  double l_min = 0.0;
  double ynorm2 = 1.0;

  void validate() const {
    schedule.validate();
    require(keep_rate > 0.0 && keep_rate < 1.0, "DekiOptions: keep rate in (0,1)");
    require(mg_factor > 0.0, "DekiOptions: positive M_G factor");
    require(ynorm2 > 0.0, "DekiOptions: positive |y|^2");
  }
};

namespace detail {

struct CovStats {
  double norm = 0.0;
  double diag_min = 0.0, diag_max = 0.0;
  int rank = 0;
  double kappa = 0.0;
};

// Spectrum of C^uu through the J x J Gram matrix of the deviations. Rank
// uses the linearize tolerance on singular values (1e-12 relative).
inline CovStats cov_stats(const Matrix& deviations) {
  CovStats s;
  const Index j = deviations.cols();
  const double denom = static_cast<double>(j - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(
      Matrix(deviations.transpose() * deviations / denom), Eigen::EigenvaluesOnly);
  Vector lam = es.eigenvalues().reverse().cwiseMax(0.0);
  s.norm = lam.size() ? lam[0] : 0.0;
  const double tol2 = 1e-24 * s.norm;  // (1e-12 sigma_max)^2
  for (Index k = 0; k < lam.size(); ++k)
    if (lam[k] > tol2) s.rank = static_cast<int>(k) + 1;
  s.kappa = s.rank > 0 ? lam[0] / lam[s.rank - 1] : 0.0;
  Vector diag = deviations.rowwise().squaredNorm() / denom;
  s.diag_min = diag.minCoeff();
  s.diag_max = diag.maxCoeff();
  return s;
}

inline void fill_loss(StepStats& row, double loss, double l_min, double ynorm2,
                      bool* violated) {
  row.loss = loss;
  row.residual_norm = std::sqrt(2.0 * loss);
  if (loss < l_min - 1e-10 && violated) *violated = true;
  row.misfit = std::max(0.0, loss - l_min) / ynorm2;
}

}  // namespace detail

/// Dropout EKI: per iteration, J member images feed the linearization,
/// J dropout-member images feed the mean-update covariances, and one
/// fresh image of the mean closes the update; 2J + 1 metered queries.
/// Masks come from the (seed, kDropoutMask, step) stream, so the record
/// is reproducible bit for bit.
inline RunRecord deki_iterate(DekiState& state, const RegularizedProblem& p,
                              const DekiOptions& opt, int n_steps) {
  opt.validate();
  require(n_steps >= 0, "deki_iterate: n_steps >= 0");
  require(state.mean.size() == p.dim_u(), "deki_iterate: state dimension mismatch");
  const Index du = p.dim_u();
  const Index dy = p.dim_y();
  const Index j_members = state.deviations.cols();
  const double denom = static_cast<double>(j_members - 1);

  RunRecord rec;
  rec.seed = state.seed;
  rec.l_min = opt.l_min;
  rec.ynorm2 = opt.ynorm2;
  rec.steps.resize(n_steps);
  rec.trace.enabled = opt.record_trace;

  double mg = opt.mg_override.value_or(0.0);

  for (int k = 0; k < n_steps; ++k) {
    StepStats& row = (k == 0) ? rec.initial : rec.steps[k - 1];
    row.step = k;
    const detail::CovStats cs = detail::cov_stats(state.deviations);
    row.cov_norm = cs.norm;
    row.diag_min = cs.diag_min;
    row.diag_max = cs.diag_max;
    row.rank = cs.rank;
    row.kappa = cs.kappa;

    // J member images; top block feeds the linearization
    Matrix images(p.dim_z(), j_members);
    for (Index j = 0; j < j_members; ++j)
      images.col(j) = p.apply(state.mean + state.deviations.col(j));
    Matrix image_dev = images.topRows(dy).colwise() -
                       Vector(images.topRows(dy).rowwise().mean());

    // shared mask and dropout-ensemble images
    const DropoutMask mask =
        sample_mask(opt.keep_rate, du,
                    RngStream(state.seed, Purpose::kDropoutMask,
                              static_cast<std::uint64_t>(state.step)));
    Matrix masked_dev = mask.keep.asDiagonal() * state.deviations;
    Matrix dropout_images(p.dim_z(), j_members);
    for (Index j = 0; j < j_members; ++j)
      dropout_images.col(j) = p.apply(state.mean + masked_dev.col(j));

    Matrix masked_centered = masked_dev.colwise() - Vector(masked_dev.rowwise().mean());
    Matrix dropout_image_dev =
        dropout_images.colwise() - Vector(dropout_images.rowwise().mean());
    CovarianceBundle dropout_cov;
    dropout_cov.cuz = masked_centered * dropout_image_dev.transpose() / denom;
    dropout_cov.czz = dropout_image_dev * dropout_image_dev.transpose() / denom;

    // fresh image of the mean: metrics for state k plus the update residual
    const Vector mean_image = p.apply(state.mean);
    detail::fill_loss(row, 0.5 * (p.target() - mean_image).squaredNorm(), opt.l_min,
                      opt.ynorm2, &rec.lmin_violated);

    const double cov_norm = cs.norm;
    const double mean_norm = opt.schedule.mean_norm == MeanStepNorm::kDropoutCovariance
                                 ? gram_spectral_norm(masked_dev, denom)
                                 : cov_norm;
    const double h = adaptive_steps(cov_norm, opt.schedule).h;
    const double htilde = adaptive_steps(mean_norm, opt.schedule).htilde;

    LinearizeResult lin = linearize(state.deviations, image_dev,
                                    mg > 0.0 ? mg : std::numeric_limits<double>::infinity(),
                                    p.regularizer());
    if (mg <= 0.0) {
      mg = opt.mg_factor * lin.regression_norm;
      if (!(mg > 0.0)) mg = 1.0;  // fully degenerate start; map is zero anyway
    }
    const auto [gamma2, m2] = lin.map.spectrum_bounds();

    if (opt.record_trace) {
      rec.trace.covariances.push_back(state.deviations * state.deviations.transpose() /
                                      denom);
      rec.trace.dropout_covariances.push_back(masked_centered *
                                              masked_centered.transpose() / denom);
      rec.trace.means.push_back(state.mean);
      rec.trace.mean_images.push_back(mean_image);
    }

    state.mean = deki_mean_step(state.mean, dropout_cov, htilde, p.target(), mean_image);
    state.deviations = deki_deviation_step(state.deviations, lin.map, h);
    state.step += 1;

    StepStats& next = rec.steps[k];
    next.step = k + 1;
    next.h = h;
    next.htilde = htilde;
    next.gamma2 = gamma2;
    next.m2 = m2;
    next.queries = static_cast<std::int64_t>(k + 1) * (2 * j_members + 1);
  }

  // metrics of the final state (unmetered probe)
  StepStats& last = (n_steps == 0) ? rec.initial : rec.steps[n_steps - 1];
  last.step = n_steps;
  const detail::CovStats cs = detail::cov_stats(state.deviations);
  last.cov_norm = cs.norm;
  last.diag_min = cs.diag_min;
  last.diag_max = cs.diag_max;
  last.rank = cs.rank;
  last.kappa = cs.kappa;
  detail::fill_loss(last, p.loss(state.mean), opt.l_min, opt.ynorm2, &rec.lmin_violated);
  if (opt.record_trace) {
    rec.trace.covariances.push_back(state.deviations * state.deviations.transpose() /
                                    denom);
    rec.trace.means.push_back(state.mean);
  }
  return rec;
}

}  // namespace deki
