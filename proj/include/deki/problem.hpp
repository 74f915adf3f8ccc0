// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <utility>

#include "deki/common.hpp"
#include "deki/model.hpp"

namespace deki {

/// Symmetric nonnegative operator playing the role of C0^{-1/2}; stored as
/// a diagonal or a dense matrix. A zero operator is allowed for degenerate
/// test problems; reference solvers require strict positive definiteness.
class Regularizer {
 public:
  static Regularizer scaled_identity(Index d, double c) {
    require(c >= 0.0, "Regularizer: nonnegative scale");
    Regularizer r;
    r.diag_ = Vector::Constant(d, c);
    return r;
  }

  static Regularizer diagonal(Vector d) {
    require(d.minCoeff() >= 0.0, "Regularizer: nonnegative diagonal");
    Regularizer r;
    r.diag_ = std::move(d);
    return r;
  }

  static Regularizer dense(Matrix m) {
    require(m.rows() == m.cols(), "Regularizer: square matrix");
    require((m - m.transpose()).cwiseAbs().maxCoeff() <=
                1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()),
            "Regularizer: symmetric matrix required");
    Regularizer r;
    r.dense_ = std::move(m);
    return r;
  }

  Index dim() const { return dense_ ? dense_->rows() : diag_.size(); }
  bool is_diagonal() const { return !dense_.has_value(); }

  Vector apply(const Vector& v) const {
    return dense_ ? Vector(*dense_ * v) : Vector(diag_.cwiseProduct(v));
  }

  Matrix apply(const Matrix& m) const {
    return dense_ ? Matrix(*dense_ * m) : Matrix(diag_.asDiagonal() * m);
  }

  /// C0^{-1} = (C0^{-1/2})^2.
  Matrix squared_dense() const {
    if (dense_) return *dense_ * *dense_;
    return Matrix(diag_.cwiseAbs2().asDiagonal());
  }

  double min_eig() const {
    if (!dense_) return diag_.minCoeff() * diag_.minCoeff();
    Eigen::SelfAdjointEigenSolver<Matrix> es(*dense_, Eigen::EigenvaluesOnly);
    const double m = es.eigenvalues().minCoeff();
    return m * m;
  }

  double max_eig() const {
    if (!dense_) return diag_.maxCoeff() * diag_.maxCoeff();
    Eigen::SelfAdjointEigenSolver<Matrix> es(*dense_, Eigen::EigenvaluesOnly);
    const double m = es.eigenvalues().cwiseAbs().maxCoeff();
    return m * m;
  }

 private:
  Regularizer() = default;
  Vector diag_;
  std::optional<Matrix> dense_;
};

/// Tikhonov-regularized problem in stacked form:
///   H(u) = [G(u); C0^{-1/2} u],  z = [y; 0],  l(u) = 0.5 |z - H(u)|^2.
class RegularizedProblem {
 public:
  RegularizedProblem(std::shared_ptr<ForwardModel> model, Regularizer reg, Vector data)
      : model_(std::move(model)), reg_(std::move(reg)), y_(std::move(data)) {
    require(model_ != nullptr, "RegularizedProblem: model required");
    require(reg_.dim() == model_->input_dim(),
            "RegularizedProblem: regularizer dimension mismatch");
    require(y_.size() == model_->output_dim(),
            "RegularizedProblem: data dimension mismatch");
    z_ = Vector::Zero(dim_z());
    z_.head(dim_y()) = y_;
  }

  Index dim_u() const { return model_->input_dim(); }
  Index dim_y() const { return model_->output_dim(); }
  Index dim_z() const { return dim_y() + dim_u(); }

  const Vector& data() const { return y_; }
  const Vector& target() const { return z_; }
  const Regularizer& regularizer() const { return reg_; }
  const ForwardModel& model() const { return *model_; }
  std::int64_t query_count() const { return model_->query_count(); }

  /// Stacked image [G(u); C0^{-1/2} u]; one metered forward query.
  Vector apply(const Vector& u) const { return stack(model_->evaluate(u), u); }

  /// Same value as apply() without incrementing the query counter.
  Vector probe(const Vector& u) const { return stack(model_->probe(u), u); }

  /// 0.5 |y - G(u)|^2 + 0.5 |C0^{-1/2} u|^2, evaluated unmetered.
  double loss(const Vector& u) const { return 0.5 * (z_ - probe(u)).squaredNorm(); }

 private:
  Vector stack(const Vector& gy, const Vector& u) const {
    require(u.size() == dim_u(), "RegularizedProblem: dimension mismatch");
    Vector z(dim_z());
    z.head(dim_y()) = gy;
    z.tail(dim_u()) = reg_.apply(u);
    return z;
  }

  std::shared_ptr<ForwardModel> model_;
  Regularizer reg_;
  Vector y_;
  Vector z_;
};

struct OptimalSolution {
  Vector minimizer;
  double l_min = 0.0;
  bool converged = true;
  double grad_norm = 0.0;
  int iterations = 0;
};

/// Assemble the dense matrix of a linear model via unmetered probes.
inline Matrix assemble_linear_matrix(const RegularizedProblem& p) {
  const Index du = p.dim_u();
  Matrix g(p.dim_y(), du);
  Vector e = Vector::Zero(du);
  for (Index i = 0; i < du; ++i) {
    e[i] = 1.0;
    g.col(i) = p.model().probe(e);
    e[i] = 0.0;
  }
  return g;
}

/// Reference minimizer of the regularized loss. Linear maps are solved in
/// closed form, u* = (G^T G + C0^{-1})^{-1} G^T y; otherwise damped
/// Gauss-Newton with a central-difference Jacobian (unmetered probes),
/// halving the step until the loss decreases. Non-convergence is reported
/// through the flag together with the best iterate found.
inline OptimalSolution optimal_solution(const RegularizedProblem& p,
                                        int max_iterations = 200,
                                        double fd_step = 1e-6) {
  require(p.regularizer().min_eig() > 0.0,
          "optimal_solution: positive definite regularizer required");
  OptimalSolution out;
  const Index du = p.dim_u();

  if (p.model().linear()) {
    const Matrix g = assemble_linear_matrix(p);
    Matrix a = g.transpose() * g + p.regularizer().squared_dense();
    out.minimizer = Eigen::LLT<Matrix>(a).solve(g.transpose() * p.data());
    out.l_min = p.loss(out.minimizer);
    out.grad_norm = (g.transpose() * (g * out.minimizer - p.data()) +
                     p.regularizer().squared_dense() * out.minimizer)
                        .norm();
    out.iterations = 1;
    return out;
  }

  const double tol = 1e-10 * (1.0 + p.data().norm());
  Vector u = Vector::Zero(du);
  double lu = p.loss(u);
  for (int it = 0; it < max_iterations; ++it) {
    out.iterations = it + 1;
    // Central-difference Jacobian of the stacked map.
    Matrix jac(p.dim_z(), du);
    Vector e = Vector::Zero(du);
    for (Index i = 0; i < du; ++i) {
      e[i] = fd_step;
      jac.col(i) = (p.probe(u + e) - p.probe(u - e)) / (2.0 * fd_step);
      e[i] = 0.0;
    }
    const Vector residual = p.target() - p.probe(u);
    const Vector grad = -jac.transpose() * residual;
    out.grad_norm = grad.norm();
    if (out.grad_norm <= tol) {
      out.minimizer = u;
      out.l_min = lu;
      return out;
    }
    Vector step = Eigen::LDLT<Matrix>(Matrix(jac.transpose() * jac))
                      .solve(jac.transpose() * residual);
    double alpha = 1.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      Vector cand = u + alpha * step;
      const double lc = p.loss(cand);
      if (lc < lu) {
        u = std::move(cand);
        lu = lc;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // no descent along the Gauss-Newton direction
  }
  out.minimizer = u;
  out.l_min = lu;
  out.converged = out.grad_norm <= tol;
  return out;
}

}  // namespace deki
