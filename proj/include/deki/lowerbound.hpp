// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/SVD>
#include <cmath>
#include <functional>
#include <utility>

#include "deki/common.hpp"

namespace deki {

/// Query table of a zeroth-order solver: one column per forward evaluation.
/// The adversarial guarantee needs n <= d_u / 2.
struct QuerySet {
  Matrix points;  // d_u x n
  Index queries() const { return points.cols(); }
  Index dim() const { return points.rows(); }
};

/// Exact minimizer of 0.5 |G u - y|^2 + 0.5 |u|^2.
inline Vector tikhonov_solution(const Matrix& g, const Vector& y) {
  require(g.rows() == y.size(), "tikhonov_solution: dimension mismatch");
  Matrix a = g.transpose() * g + Matrix::Identity(g.cols(), g.cols());
  return Eigen::LLT<Matrix>(a).solve(g.transpose() * y);
}

/// Result of the adversarial construction: two maps agreeing on every
/// query yet with well-separated regularized solutions.
struct AdversarialPair {
  Matrix g0;
  Matrix gb;
  double gap = 0.0;        // |u*(g0) - u*(gb)|
  bool tail_branch = false;  // true when |z_2|^2 >= 1/2 drove the choice
};

/// Builds (G0, GB) with G0 U = GB U = G' U, |G0|,|GB| <= 2, and
/// |u*(G0) - u*(GB)| >= |y| / (3 sqrt(2)). The construction splits on the
/// mass of y outside the range of G' restricted to the query span; when
/// that range already covers the data (r' = d_y) the complement branch is
/// forced. Rank decisions use a 1e-12 relative singular-value cutoff.
inline AdversarialPair adversarial_pair(const QuerySet& u_set, const Vector& y,
                                        const Matrix& g_prime) {
  const Index du = u_set.dim();
  const Index dy = y.size();
  require(u_set.queries() >= 1, "adversarial_pair: at least one query");
  require(2 * u_set.queries() <= du, "adversarial_pair: guarantee needs n <= d_u/2");
  require(g_prime.rows() == dy && g_prime.cols() == du,
          "adversarial_pair: seed map shape mismatch");
  const double ynorm = y.norm();
  require(ynorm > 0.0, "adversarial_pair: nonzero data");
  {
    Eigen::JacobiSVD<Matrix> gsvd(g_prime);
    require(gsvd.singularValues().size() == 0 ||
                gsvd.singularValues().maxCoeff() <= 1.0 + 1e-12,
            "adversarial_pair: |G'| <= 1 required");
  }
  const Vector yhat = y / ynorm;

  // Full left basis of the query span: first r columns span range(U).
  Eigen::BDCSVD<Matrix> usvd(u_set.points, Eigen::ComputeFullU);
  const Vector sv = usvd.singularValues();
  const double smax = sv.size() ? sv.maxCoeff() : 0.0;
  Index r = 0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv[i] > 1e-12 * smax) ++r;
  const Matrix sigma = usvd.matrixU();  // d_u x d_u orthogonal

  // In the rotated frame G Sigma = (A | B): agreement on U pins A = C.
  const Matrix c = g_prime * sigma.leftCols(r);  // d_y x r
  const Index free_cols = du - r;

  // Eigenbasis of C C^T, eigenvalues descending; r' = min(r, d_y) caps
  // the rank of C.
  Eigen::SelfAdjointEigenSolver<Matrix> ces(Matrix(c * c.transpose()));
  Matrix q = ces.eigenvectors().rowwise().reverse().eval();
  Vector clam = ces.eigenvalues().reverse().cwiseMax(0.0);
  const Index rp = std::min(r, dy);

  const Vector qty = q.transpose() * yhat;
  const double z2sq = qty.tail(dy - rp).squaredNorm();

  Matrix btilde = Matrix::Zero(dy, free_cols);
  bool tail_branch = false;
  if (z2sq >= 0.5) {
    // unit column supported on the unexplained data directions
    tail_branch = true;
    require(rp < dy, "adversarial_pair: tail branch needs r' < d_y");
    btilde.col(0).tail(dy - rp) = qty.tail(dy - rp) / std::sqrt(z2sq);
  } else {
    // identity block on the first r' coordinates
    for (Index i = 0; i < rp; ++i) btilde(i, i) = 1.0;
  }
  const Matrix b = q * btilde;

  AdversarialPair pair;
  pair.tail_branch = tail_branch;
  pair.g0 = c * sigma.leftCols(r).transpose();
  pair.gb = pair.g0 + b * sigma.rightCols(free_cols).transpose();
  pair.gap = (tikhonov_solution(pair.g0, y) - tikhonov_solution(pair.gb, y)).norm();
  return pair;
}

/// Oracle handed to a solver under test: answers G u and logs the query.
class QueryOracle {
 public:
  explicit QueryOracle(Matrix g) : g_(std::move(g)) {}

  Vector operator()(const Vector& u) {
    require(u.size() == g_.cols(), "QueryOracle: dimension mismatch");
    if (log_.size() == 0) {
      log_.resize(g_.cols(), 1);
      log_.col(0) = u;
    } else {
      log_.conservativeResize(Eigen::NoChange, log_.cols() + 1);
      log_.col(log_.cols() - 1) = u;
    }
    return g_ * u;
  }

  const Matrix& queries() const { return log_; }

 private:
  Matrix g_;
  Matrix log_;
};

/// A zeroth-order solver: given data y and a query oracle, produce a
/// candidate minimizer of the regularized problem with C0^{-1/2} = I.
using ZerothOrderSolver = std::function<Vector(const Vector& y, QueryOracle& oracle)>;

struct FoolResult {
  bool applicable = false;   // false when the solver exceeded floor(d_u/2) queries
  Index queries_used = 0;
  double worst_error = 0.0;  // max over the two adversarial instances
  double gap = 0.0;
  double answer_disagreement = 0.0;  // |a(G0) - a(GB)|, zero in exact arithmetic
  bool tail_branch = false;
};

/// Runs the solver against the seed map, rebuilds its query set, forms the
/// adversarial pair and replays the solver on both instances. By query
/// agreement the replayed answers coincide (asserted up to rounding drift),
/// so at least one instance carries error >= gap / 2.
inline FoolResult fool_solver(const ZerothOrderSolver& solver, Index d_u, Index d_y,
                              const Vector& y, const Matrix& g_prime) {
  require(y.size() == d_y, "fool_solver: data dimension mismatch");
  FoolResult res;
  QueryOracle probe_oracle(g_prime);
  (void)solver(y, probe_oracle);
  res.queries_used =
      probe_oracle.queries().size() == 0 ? 0 : probe_oracle.queries().cols();
  if (2 * res.queries_used > d_u) return res;  // guarantee void, reported distinctly

  // A solver that never queried is pinned down with one arbitrary query.
  QuerySet qs;
  if (res.queries_used == 0) {
    qs.points = Matrix::Zero(d_u, 1);
    qs.points(0, 0) = 1.0;
  } else {
    qs.points = probe_oracle.queries();
  }

  const AdversarialPair pair = adversarial_pair(qs, y, g_prime);
  QueryOracle o0(pair.g0), ob(pair.gb);
  const Vector a0 = solver(y, o0);
  const Vector ab = solver(y, ob);
  res.applicable = true;
  res.gap = pair.gap;
  res.tail_branch = pair.tail_branch;
  res.answer_disagreement = (a0 - ab).norm();
  res.worst_error = std::max((a0 - tikhonov_solution(pair.g0, y)).norm(),
                             (ab - tikhonov_solution(pair.gb, y)).norm());
  return res;
}

}  // namespace deki
