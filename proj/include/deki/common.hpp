// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace deki {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Thrown when an argument violates an operation's stated preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical routine cannot deliver its contract
/// (singular system, non-convergence, inconsistent data).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

/// Largest eigenvalue of the Gram matrix D^T D / denom, i.e. the squared
/// spectral norm of D / sqrt(denom). Computed on the smaller side of D.
inline double gram_spectral_norm(const Matrix& d, double denom) {
  if (d.size() == 0) return 0.0;
  if (d.cols() <= d.rows()) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(Matrix(d.transpose() * d),
                                             Eigen::EigenvaluesOnly);
    return std::max(0.0, es.eigenvalues().maxCoeff()) / denom;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(Matrix(d * d.transpose()),
                                           Eigen::EigenvaluesOnly);
  return std::max(0.0, es.eigenvalues().maxCoeff()) / denom;
}

/// Spectral norm of a symmetric matrix.
inline double sym_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
  return std::max(std::abs(es.eigenvalues().minCoeff()),
                  std::abs(es.eigenvalues().maxCoeff()));
}

}  // namespace deki
