// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>

#include "deki/common.hpp"
#include "deki/rng.hpp"

namespace deki {

/// Ensemble of J parameter vectors, stored as the columns of a
/// dim x size matrix. J >= 2 so that deviations and covariances exist.
class Ensemble {
 public:
  Ensemble(Matrix members) : members_(std::move(members)) {
    require(members_.cols() >= 2, "ensemble needs J >= 2 members");
    require(members_.rows() >= 1, "ensemble dimension must be positive");
  }

  Index dim() const { return members_.rows(); }
  Index size() const { return members_.cols(); }
  const Matrix& members() const { return members_; }
  Matrix& members() { return members_; }

 private:
  Matrix members_;
};

/// Shared Bernoulli keep/drop pattern; entries are exactly 0 or 1.
struct DropoutMask {
  Vector keep;       // 0/1 entries, length d_u
  double keep_rate;  // lambda in (0,1)
};

/// Empirical second moments of an ensemble and its images under the
/// stacked map. With d_z = d_y + d_u: cuu is d_u x d_u, cuz is d_u x d_z,
/// czz is d_z x d_z; all with 1/(J-1) normalization.
struct CovarianceBundle {
  Matrix cuu;
  Matrix cuz;
  Matrix czz;
};

struct MeanDeviations {
  Vector mean;
  Matrix deviations;  // same shape as members; columns sum to ~0
};

/// J i.i.d. draws from N(0, scale^2 I). Deterministic given the stream.
inline Ensemble gaussian_init(Index d_u, Index j_members, double scale,
                              RngStream stream) {
  require(d_u >= 1, "gaussian_init: d_u >= 1");
  require(j_members >= 2, "gaussian_init: J >= 2");
  require(scale >= 0.0, "gaussian_init: scale >= 0");
  Matrix m(d_u, j_members);
  for (Index j = 0; j < j_members; ++j)
    for (Index i = 0; i < d_u; ++i) m(i, j) = scale * stream.gaussian();
  return Ensemble(std::move(m));
}

inline MeanDeviations mean_and_deviations(const Ensemble& e) {
  MeanDeviations md;
  md.mean = e.members().rowwise().mean();
  md.deviations = e.members().colwise() - md.mean;
  return md;
}

/// Covariance bundle from members and their stacked-map images
/// (columns in matching order).
inline CovarianceBundle empirical_covariances(const Ensemble& e,
                                              const Matrix& images) {
  require(images.cols() == e.size(),
          "empirical_covariances: one image per member required");
  const double denom = static_cast<double>(e.size() - 1);
  const auto md = mean_and_deviations(e);
  Matrix zdev = images.colwise() - Vector(images.rowwise().mean());
  CovarianceBundle b;
  b.cuu = md.deviations * md.deviations.transpose() / denom;
  b.cuz = md.deviations * zdev.transpose() / denom;
  b.czz = zdev * zdev.transpose() / denom;
  return b;
}

/// One shared mask with i.i.d. Bernoulli(keep_rate) entries.
inline DropoutMask sample_mask(double keep_rate, Index d_u, RngStream stream) {
  require(keep_rate > 0.0 && keep_rate < 1.0, "sample_mask: keep rate in (0,1)");
  require(d_u >= 1, "sample_mask: d_u >= 1");
  DropoutMask m;
  m.keep_rate = keep_rate;
  m.keep.resize(d_u);
  for (Index i = 0; i < d_u; ++i) m.keep[i] = stream.bernoulli(keep_rate) ? 1.0 : 0.0;
  return m;
}

/// Dropout ensemble: mean + mask-restricted deviations. The mean is
/// preserved exactly up to rounding. An all-zero mask is legal and
/// collapses every member onto the mean.
inline Ensemble apply_dropout(const Ensemble& e, const DropoutMask& mask) {
  require(mask.keep.size() == e.dim(), "apply_dropout: mask length mismatch");
  const auto md = mean_and_deviations(e);
  Matrix out = (mask.keep.asDiagonal() * md.deviations).colwise() + md.mean;
  return Ensemble(std::move(out));
}

/// Conditional expectation of the dropout covariance:
///   E C~ = lambda(1-lambda) diag(C) + lambda^2 C.
/// Off-diagonal entries shrink by lambda^2, diagonal by lambda.
inline Matrix expected_dropout_covariance(const Matrix& cuu, double keep_rate) {
  require(cuu.rows() == cuu.cols(), "expected_dropout_covariance: square input");
  require(keep_rate >= 0.0 && keep_rate <= 1.0,
          "expected_dropout_covariance: keep rate in [0,1]");
  const double scale = cuu.cwiseAbs().maxCoeff();
  require(cuu.size() == 0 ||
              (cuu - cuu.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, scale),
          "expected_dropout_covariance: input must be symmetric");
  Matrix out = keep_rate * keep_rate * cuu;
  out.diagonal() = keep_rate * cuu.diagonal();
  return out;
}

}  // namespace deki
