// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>

#include "deki/ensemble.hpp"
#include "deki/problem.hpp"
#include "deki/rng.hpp"

namespace deki {

/// Standard fifth-order compactly supported Gaspari-Cohn correlation;
/// 1 at z = 0, support [0, 2).
inline double gaspari_cohn(double z) {
  z = std::abs(z);
  if (z >= 2.0) return 0.0;
  const double z2 = z * z, z3 = z2 * z, z4 = z3 * z, z5 = z4 * z;
  if (z <= 1.0)
    return -0.25 * z5 + 0.5 * z4 + 0.625 * z3 - (5.0 / 3.0) * z2 + 1.0;
  return z5 / 12.0 - 0.5 * z4 + 0.625 * z3 + (5.0 / 3.0) * z2 - 5.0 * z + 4.0 -
         2.0 / (3.0 * z);
}

/// Hadamard taper for the cross-covariance C^uz (d_u x d_z). Entry (i, j)
/// weights parameter i against stacked-observation component j via the
/// Gaspari-Cohn correlation of their circular index distance.
struct LocalizationMatrix {
  Matrix psi;      // d_u x d_z, entries in [0, 1]
  double radius;   // r_loc
};

/// Index map for the transport geometry: observation j reads the initial
/// condition at {(j+1)/d_y - a T}, so with speed knowledge the most
/// influential parameter index is the nearest grid node; without it the
/// map falls back to i_o(j) = j. Regularization components (the bottom
/// d_u block of z) are tied to their own parameter index. Distances wrap
/// on the parameter index circle.
inline LocalizationMatrix gaspari_cohn_localization(Index d_u, Index d_y,
                                                    std::optional<double> shift,
                                                    double r_loc) {
  require(r_loc > 0.0, "gaspari_cohn_localization: r_loc > 0");
  require(d_u >= 1 && d_y >= 1, "gaspari_cohn_localization: positive dims");
  LocalizationMatrix loc;
  loc.radius = r_loc;
  loc.psi.resize(d_u, d_y + d_u);
  auto circ = [d_u](Index a, Index b) {
    double d = std::abs(static_cast<double>(a - b));
    return std::min(d, static_cast<double>(d_u) - d);
  };
  for (Index j = 0; j < d_y; ++j) {
    Index io;
    if (shift) {
      double pos = static_cast<double>(j + 1) / static_cast<double>(d_y) - *shift;
      pos -= std::floor(pos);
      long k = std::lround(pos * static_cast<double>(d_u)) - 1;  // node k+1 at (k+1)/d_u
      k %= d_u;
      if (k < 0) k += d_u;
      io = static_cast<Index>(k);
    } else {
      io = j % d_u;
    }
    for (Index i = 0; i < d_u; ++i)
      loc.psi(i, j) = gaspari_cohn(circ(i, io) / r_loc);
  }
  for (Index s = 0; s < d_u; ++s)
    for (Index i = 0; i < d_u; ++i)
      loc.psi(i, d_y + s) = gaspari_cohn(circ(i, s) / r_loc);
  return loc;
}

/// One localized EKI step,
///   u_j <- u_j + h (Psi o C^uz)(z - H(u_j)) + sigma^2 xi_j,
/// written in descent form. The artificial noise is built so that the
/// symmetrized noise-deviation cross-covariance has unit diagonal:
/// xi_j = 0.5 diag(C)^+ tau_j plus a random direction weighted by a null
/// vector of the deviation table, which leaves the identity intact while
/// letting the stream perturb the ensemble off its span.
inline Ensemble leki_step(const Ensemble& e, const RegularizedProblem& p,
                          const LocalizationMatrix& loc, double h, double sigma_noise,
                          RngStream stream) {
  require(h >= 0.0, "leki_step: h >= 0");
  require(sigma_noise >= 0.0, "leki_step: sigma >= 0");
  require(loc.psi.rows() == e.dim() && loc.psi.cols() == p.dim_z(),
          "leki_step: localization shape mismatch");
  const Index j_members = e.size();
  Matrix images(p.dim_z(), j_members);
  for (Index j = 0; j < j_members; ++j) images.col(j) = p.apply(e.members().col(j));
  const CovarianceBundle cov = empirical_covariances(e, images);

  Matrix gain = loc.psi.cwiseProduct(cov.cuz);
  Matrix residuals = (-images).colwise() + p.target();
  Matrix members = e.members() + h * gain * residuals;

  if (sigma_noise > 0.0) {
    const auto md = mean_and_deviations(e);
    const double denom = static_cast<double>(j_members - 1);
    Vector diag = md.deviations.rowwise().squaredNorm() / denom;
    Vector inv = diag.unaryExpr([](double v) { return v > 1e-300 ? 0.5 / v : 0.0; });
    Matrix noise = inv.asDiagonal() * md.deviations;

    // random component g w^T with T g = 0 keeps the cross term unchanged
    Vector g(j_members);
    for (Index j = 0; j < j_members; ++j) g[j] = stream.gaussian();
    Eigen::BDCSVD<Matrix> svd(md.deviations, Eigen::ComputeThinV);
    svd.setThreshold(1e-12);
    const Index r = svd.rank();
    Matrix vr = svd.matrixV().leftCols(r);
    g -= vr * (vr.transpose() * g);
    if (g.norm() > 1e-12) {
      g.normalize();
      Vector w(e.dim());
      for (Index i = 0; i < e.dim(); ++i) w[i] = stream.gaussian();
      noise += w * g.transpose();
    }
    members += sigma_noise * sigma_noise * noise;
  }
  return Ensemble(std::move(members));
}

}  // namespace deki
