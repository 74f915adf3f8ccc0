// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "deki/model.hpp"
#include "deki/rng.hpp"

namespace deki {

/// 1-D linear advection on the periodic unit interval, solved analytically:
/// U(x,t) = U0({x - a t}). The initial condition is known on the uniform
/// grid x_k = k/d_u (k = 1..d_u) and extended by piecewise-linear periodic
/// interpolation; observations sample U(T, .) at x_i = i/d_y (i = 1..d_y).
/// The map u0 -> observations is exactly linear.
class TransportModel final : public ForwardModel {
 public:
  TransportModel(Index grid_points, Index obs_points, double speed, double final_time)
      : d_u_(grid_points), d_y_(obs_points), speed_(speed), time_(final_time) {
    require(d_u_ >= 1 && d_y_ >= 1, "TransportModel: positive dimensions");
    require(final_time >= 0.0, "TransportModel: T >= 0");
  }

  Index input_dim() const override { return d_u_; }
  Index output_dim() const override { return d_y_; }
  bool linear() const override { return true; }
  bool has_jacobian() const override { return true; }

  Matrix jacobian(const Vector&) const override {
    Matrix g = Matrix::Zero(d_y_, d_u_);
    for (Index i = 0; i < d_y_; ++i) {
      const auto [j0, j1, w] = stencil(i);
      g(i, j0) += 1.0 - w;
      g(i, j1) += w;
    }
    return g;
  }

  double speed() const { return speed_; }
  double final_time() const { return time_; }

 protected:
  Vector eval(const Vector& u0) const override {
    require(u0.size() == d_u_, "TransportModel: dimension mismatch");
    Vector y(d_y_);
    for (Index i = 0; i < d_y_; ++i) {
      const auto [j0, j1, w] = stencil(i);
      y[i] = (1.0 - w) * u0[j0] + w * u0[j1];
    }
    return y;
  }

 private:
  // Interpolation stencil for observation i: grid node k (0-based array
  // index k-1) sits at x = k/d_u, and x = 0 wraps to node d_u.
  struct Stencil {
    Index j0, j1;
    double w;
  };

  Stencil stencil(Index i) const {
    double pos = static_cast<double>(i + 1) / static_cast<double>(d_y_) - speed_ * time_;
    pos -= std::floor(pos);  // fractional part in [0,1)
    const double s = pos * static_cast<double>(d_u_) - 1.0;
    double fl = std::floor(s);
    double w = s - fl;
    auto wrap = [this](long k) {
      long m = k % d_u_;
      if (m < 0) m += d_u_;
      return static_cast<Index>(m);
    };
    return {wrap(static_cast<long>(fl)), wrap(static_cast<long>(fl) + 1), w};
  }

  Index d_u_, d_y_;
  double speed_, time_;
};

/// Noisy observations y_i = U(T, x_i) + xi_i, xi ~ N(0, sigma^2).
/// Deterministic given the stream; sigma = 0 returns the exact image.
/// Data generation is unmetered.
inline Vector generate_transport_data(const TransportModel& model, const Vector& u0_true,
                                      double sigma_noise, RngStream stream) {
  require(sigma_noise >= 0.0, "generate_transport_data: sigma >= 0");
  Vector y = model.probe(u0_true);
  for (Index i = 0; i < y.size(); ++i) y[i] += sigma_noise * stream.gaussian();
  return y;
}

}  // namespace deki
