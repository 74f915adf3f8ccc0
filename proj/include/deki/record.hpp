// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "deki/common.hpp"

namespace deki {

/// Per-iteration metrics. Entry 0 of a run describes the initial state
/// (step sizes zero); entry n >= 1 describes the state after update n
/// together with the step sizes and map bounds used in that update.
struct StepStats {
  int step = 0;
  double loss = 0.0;           // l(mean)
  double misfit = 0.0;         // e_n, clamped at 0
  double residual_norm = 0.0;  // |z - H(mean)|
  double cov_norm = 0.0;       // |C^uu|_2
  double diag_min = 0.0;
  double diag_max = 0.0;
  int rank = 0;
  double kappa = 0.0;          // lambda_1 / lambda_rank
  double h = 0.0;              // deviation step size used
  double htilde = 0.0;         // mean step size used
  std::int64_t queries = 0;    // cumulative metered forward queries
  double gamma2 = 0.0;         // min eig of H_n^T H_n for the update
  double m2 = 0.0;             // max eig of H_n^T H_n for the update
};

/// Dense per-step payload for offline theory audits; populated only when
/// recording is requested.
struct AuditTrace {
  std::vector<Matrix> covariances;          // C_0 .. C_N
  std::vector<Matrix> dropout_covariances;  // C~_n, n = 0 .. N-1
  std::vector<Vector> means;                // mean_0 .. mean_N
  std::vector<Vector> mean_images;          // H(mean_n), n = 0 .. N-1
  bool enabled = false;
};

struct RunRecord {
  StepStats initial;
  std::vector<StepStats> steps;  // exactly n_steps entries
  double l_min = 0.0;
  double ynorm2 = 0.0;
  std::uint64_t seed = 0;
  bool lmin_violated = false;  // some recorded loss fell below l_min - 1e-10
  AuditTrace trace;

  std::vector<double> misfit_series() const {
    std::vector<double> e;
    e.reserve(steps.size() + 1);
    e.push_back(initial.misfit);
    for (const auto& s : steps) e.push_back(s.misfit);
    return e;
  }

  std::vector<double> residual_series() const {
    std::vector<double> r;
    r.reserve(steps.size() + 1);
    r.push_back(initial.residual_norm);
    for (const auto& s : steps) r.push_back(s.residual_norm);
    return r;
  }
};

}  // namespace deki
