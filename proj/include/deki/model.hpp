// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <utility>

#include "deki/common.hpp"

namespace deki {

/// Forward map u -> y with a monotone query counter. evaluate() is the
/// metered entry point used by inversion schemes; probe() computes the same
/// value without touching the counter and exists for diagnostics, metrics
/// and reference solvers, so that query accounting reflects the scheme alone.
class ForwardModel {
 public:
  virtual ~ForwardModel() = default;

  virtual Index input_dim() const = 0;
  virtual Index output_dim() const = 0;

  Vector evaluate(const Vector& u) const {
    queries_.fetch_add(1, std::memory_order_relaxed);
    return eval(u);
  }

  Vector probe(const Vector& u) const { return eval(u); }

  std::int64_t query_count() const { return queries_.load(std::memory_order_relaxed); }
  void reset_query_count() const { queries_.store(0, std::memory_order_relaxed); }

  /// True when the map is exactly linear (enables closed-form reference
  /// solutions).
  virtual bool linear() const { return false; }

  /// Analytic Jacobian at u when available (linear and quadratic models).
  virtual bool has_jacobian() const { return false; }
  virtual Matrix jacobian(const Vector&) const {
    throw NumericalError("model does not provide a Jacobian");
  }

 protected:
  virtual Vector eval(const Vector& u) const = 0;

 private:
  mutable std::atomic<std::int64_t> queries_{0};
};

/// Explicit-matrix linear model y = G u.
class LinearModel final : public ForwardModel {
 public:
  explicit LinearModel(Matrix g) : g_(std::move(g)) {
    require(g_.rows() >= 1 && g_.cols() >= 1, "LinearModel: nonempty matrix");
  }

  Index input_dim() const override { return g_.cols(); }
  Index output_dim() const override { return g_.rows(); }
  bool linear() const override { return true; }
  bool has_jacobian() const override { return true; }
  Matrix jacobian(const Vector&) const override { return g_; }
  const Matrix& matrix() const { return g_; }

 protected:
  Vector eval(const Vector& u) const override {
    require(u.size() == g_.cols(), "LinearModel: dimension mismatch");
    return g_ * u;
  }

 private:
  Matrix g_;
};

/// Quadratic model with component maps y_s = b_s^T u + 0.5 u^T Q_s u.
/// The Hessian of component s is exactly Q_s, which makes the Hessian
/// bound sqrt(sum_s |Q_s|_2^2) available in closed form for audits.
class QuadraticModel final : public ForwardModel {
 public:
  QuadraticModel(Matrix b, std::vector<Matrix> q) : b_(std::move(b)), q_(std::move(q)) {
    require(static_cast<Index>(q_.size()) == b_.rows(),
            "QuadraticModel: one quadratic form per output");
    for (const auto& qs : q_) {
      require(qs.rows() == b_.cols() && qs.cols() == b_.cols(),
              "QuadraticModel: quadratic form dimension mismatch");
    }
  }

  Index input_dim() const override { return b_.cols(); }
  Index output_dim() const override { return b_.rows(); }
  bool has_jacobian() const override { return true; }

  Matrix jacobian(const Vector& u) const override {
    Matrix j = b_;
    for (Index s = 0; s < b_.rows(); ++s) j.row(s) += (q_[s] * u).transpose();
    return j;
  }

  /// Exact bound sqrt(sum_s |Q_s|_2^2) on the stacked Hessian.
  double hessian_bound() const {
    double sum = 0.0;
    for (const auto& qs : q_) {
      const double n = sym_norm(Matrix(0.5 * (qs + qs.transpose())));
      sum += n * n;
    }
    return std::sqrt(sum);
  }

 protected:
  Vector eval(const Vector& u) const override {
    require(u.size() == b_.cols(), "QuadraticModel: dimension mismatch");
    Vector y = b_ * u;
    for (Index s = 0; s < b_.rows(); ++s) y[s] += 0.5 * u.dot(q_[s] * u);
    return y;
  }

 private:
  Matrix b_;
  std::vector<Matrix> q_;
};

}  // namespace deki
