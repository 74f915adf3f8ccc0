// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "deki/config.hpp"
#include "deki/darcy.hpp"
#include "deki/ensemble.hpp"
#include "deki/localization.hpp"
#include "deki/metrics.hpp"
#include "deki/problem.hpp"
#include "deki/schemes.hpp"
#include "deki/transport.hpp"

namespace deki {

/// One experiment instance: problem, data, reference minimum, truth.
struct ProblemSetup {
  std::shared_ptr<RegularizedProblem> problem;
  double l_min = 0.0;
  double ynorm2 = 0.0;
  bool lmin_converged = true;
  Vector truth;               // transport: u0 on grid; darcy: KL coefficients
  Vector truth_field;         // darcy only: log-permeability on the grid
  const KLField* kl = nullptr;
  double speed = 0.0;         // transport speed actually used
};

/// Builds per-repeat problem instances. Expensive shared pieces (the KL
/// basis, the fixed-data reference minimum) are computed once.
class ProblemFactory {
 public:
  explicit ProblemFactory(ExperimentConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.problem == ProblemKind::kDarcy) {
      kl_ = kl_basis(config_.kernel_sigma, config_.length_x, config_.length_y,
                     config_.grid_n, config_.kl_eps);
      require(kl_->dim() >= 2, "darcy problem: KL basis too small");
    }
    if (!config_.randomize_problem) {
      // data and reference minimum are shared by all repeats
      ProblemSetup s = build(0);
      cached_l_min_ = s.l_min;
      cached_converged_ = s.lmin_converged;
    }
  }

  const ExperimentConfig& config() const { return config_; }
  const KLField* kl() const { return kl_ ? &*kl_ : nullptr; }

  /// Parameter dimension of the built problems (Darcy uses the KL count).
  Index dim_u() const {
    return config_.problem == ProblemKind::kDarcy ? kl_->dim()
                                                  : static_cast<Index>(config_.d_u);
  }

  ProblemSetup make(int rep) const {
    ProblemSetup s = build(rep);
    if (!config_.randomize_problem && cached_l_min_) {
      s.l_min = *cached_l_min_;
      s.lmin_converged = cached_converged_;
    }
    return s;
  }

 private:
  ProblemSetup build(int rep) const {
    const std::uint64_t data_seed =
        config_.randomize_problem ? config_.seed + static_cast<std::uint64_t>(rep)
                                  : config_.seed;
    const bool need_lmin = config_.randomize_problem || !cached_l_min_;
    ProblemSetup s;

    switch (config_.problem) {
      case ProblemKind::kTransport: {
        double a = config_.speed;
        if (config_.randomize_problem)
          a = RngStream(data_seed, Purpose::kProblemSetup).uniform();
        auto model = std::make_shared<TransportModel>(config_.d_u, config_.d_y, a,
                                                      config_.final_time);
        RngStream truth_stream(data_seed, Purpose::kTruth);
        Vector u_true(config_.d_u);
        for (Index i = 0; i < u_true.size(); ++i) u_true[i] = truth_stream.gaussian();
        const Vector y = generate_transport_data(
            *model, u_true, config_.sigma_noise,
            RngStream(data_seed, Purpose::kDataNoise));
        auto reg = Regularizer::scaled_identity(
            config_.d_u, config_.gamma / std::sqrt(static_cast<double>(config_.d_u)));
        s.problem = std::make_shared<RegularizedProblem>(model, reg, y);
        s.truth = u_true;
        s.speed = a;
        break;
      }
      case ProblemKind::kSyntheticLinear: {
        RngStream gs(data_seed, Purpose::kProblemSetup);
        Matrix g(config_.d_y, config_.d_u);
        const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_u));
        for (Index i = 0; i < g.rows(); ++i)
          for (Index j = 0; j < g.cols(); ++j) g(i, j) = scale * gs.gaussian();
        auto model = std::make_shared<LinearModel>(std::move(g));
        RngStream truth_stream(data_seed, Purpose::kTruth);
        Vector u_true(config_.d_u);
        for (Index i = 0; i < u_true.size(); ++i) u_true[i] = truth_stream.gaussian();
        Vector y = model->probe(u_true);
        RngStream noise(data_seed, Purpose::kDataNoise);
        for (Index i = 0; i < y.size(); ++i) y[i] += config_.sigma_noise * noise.gaussian();
        auto reg = Regularizer::scaled_identity(config_.d_u, config_.gamma);
        s.problem = std::make_shared<RegularizedProblem>(model, reg, y);
        s.truth = u_true;
        break;
      }
      case ProblemKind::kDarcy: {
        auto model = std::make_shared<DarcyModel>(*kl_, subblock_centers_8x8(),
                                                  config_.grid_n);
        RngStream truth_stream(data_seed, Purpose::kTruth);
        Vector coeffs(kl_->dim());
        for (Index i = 0; i < coeffs.size(); ++i) coeffs[i] = truth_stream.gaussian();
        Vector y = model->probe(coeffs);
        RngStream noise(data_seed, Purpose::kDataNoise);
        for (Index i = 0; i < y.size(); ++i) y[i] += config_.sigma_noise * noise.gaussian();
        auto reg = Regularizer::scaled_identity(kl_->dim(), config_.gamma);
        s.problem = std::make_shared<RegularizedProblem>(model, reg, y);
        s.truth = coeffs;
        s.truth_field = kl_->field(coeffs);
        s.kl = &*kl_;
        break;
      }
    }

    s.ynorm2 = s.problem->data().squaredNorm();
    if (need_lmin) {
      const OptimalSolution opt = optimal_solution(*s.problem);
      s.l_min = opt.l_min;
      s.lmin_converged = opt.converged;
    }
    return s;
  }

  ExperimentConfig config_;
  std::optional<KLField> kl_;
  std::optional<double> cached_l_min_;
  bool cached_converged_ = true;
};

struct RunOutput {
  RunRecord record;
  Vector final_mean;
  double solution_error = std::nan("");  // darcy only
};

namespace detail {

/// Shared metric/record loop for the single-step-size schemes
/// (eki, naive-deki, leki).
template <typename StepFn>
RunRecord iterate_scheme(Ensemble& e, const RegularizedProblem& p, double l_min,
                         double ynorm2, const StepSchedule& sched, int n_steps,
                         StepFn&& do_step) {
  RunRecord rec;
  rec.l_min = l_min;
  rec.ynorm2 = ynorm2;
  rec.steps.resize(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    StepStats& row = (k == 0) ? rec.initial : rec.steps[k - 1];
    row.step = k;
    const auto md = mean_and_deviations(e);
    const CovStats cs = cov_stats(md.deviations);
    row.cov_norm = cs.norm;
    row.diag_min = cs.diag_min;
    row.diag_max = cs.diag_max;
    row.rank = cs.rank;
    row.kappa = cs.kappa;
    fill_loss(row, p.loss(md.mean), l_min, ynorm2, &rec.lmin_violated);

    const double h = adaptive_steps(cs.norm, sched).htilde;  // single step size
    e = do_step(e, h, k);

    StepStats& next = rec.steps[k];
    next.step = k + 1;
    next.h = h;
    next.htilde = h;
    next.queries = p.query_count();
  }
  StepStats& last = (n_steps == 0) ? rec.initial : rec.steps[n_steps - 1];
  last.step = n_steps;
  const auto md = mean_and_deviations(e);
  const CovStats cs = cov_stats(md.deviations);
  last.cov_norm = cs.norm;
  last.diag_min = cs.diag_min;
  last.diag_max = cs.diag_max;
  last.rank = cs.rank;
  last.kappa = cs.kappa;
  fill_loss(last, p.loss(md.mean), l_min, ynorm2, &rec.lmin_violated);
  return rec;
}

}  // namespace detail

/// Runs one repeat of the configured experiment. Deterministic for a given
/// (config, rep): the data streams key off the base seed, the algorithmic
/// streams off base seed + rep.
inline RunOutput run_experiment(const ProblemFactory& factory, int rep) {
  const ExperimentConfig& cfg = factory.config();
  const ProblemSetup setup = factory.make(rep);
  const RegularizedProblem& p = *setup.problem;
  const std::uint64_t algo_seed = cfg.seed + static_cast<std::uint64_t>(rep);
  const Index du = p.dim_u();

  Ensemble e = gaussian_init(du, cfg.ensemble_size, cfg.init_scale,
                             RngStream(algo_seed, Purpose::kInitEnsemble));
  RunOutput out;

  switch (cfg.scheme) {
    case SchemeKind::kDeki: {
      DekiState state = DekiState::from_ensemble(e, algo_seed);
      DekiOptions opt;
      opt.schedule = cfg.schedule();
      opt.keep_rate = cfg.keep_rate;
      opt.mg_factor = cfg.mg_factor;
      opt.record_trace = cfg.record_covariances;
      opt.l_min = setup.l_min;
      opt.ynorm2 = setup.ynorm2;
      out.record = deki_iterate(state, p, opt, cfg.n_steps);
      out.final_mean = state.mean;
      break;
    }
    case SchemeKind::kEki: {
      out.record = detail::iterate_scheme(
          e, p, setup.l_min, setup.ynorm2, cfg.schedule(), cfg.n_steps,
          [&](const Ensemble& cur, double h, int) { return eki_step(cur, p, h); });
      out.final_mean = mean_and_deviations(e).mean;
      break;
    }
    case SchemeKind::kNaiveDeki: {
      out.record = detail::iterate_scheme(
          e, p, setup.l_min, setup.ynorm2, cfg.schedule(), cfg.n_steps,
          [&](const Ensemble& cur, double h, int k) {
            const DropoutMask mask =
                sample_mask(cfg.keep_rate, du,
                            RngStream(algo_seed, Purpose::kDropoutMask,
                                      static_cast<std::uint64_t>(k)));
            return naive_deki_step(cur, p, h, mask);
          });
      out.final_mean = mean_and_deviations(e).mean;
      break;
    }
    case SchemeKind::kLeki: {
      require(cfg.problem == ProblemKind::kTransport,
              "leki: localization is defined for the transport geometry");
      const auto loc = gaspari_cohn_localization(
          du, p.dim_y(),
          cfg.leki_know_speed
              ? std::optional<double>(setup.speed * cfg.final_time)
              : std::nullopt,
          cfg.r_loc);
      out.record = detail::iterate_scheme(
          e, p, setup.l_min, setup.ynorm2, cfg.schedule(), cfg.n_steps,
          [&](const Ensemble& cur, double h, int k) {
            return leki_step(cur, p, loc, h, cfg.leki_sigma,
                             RngStream(algo_seed, Purpose::kLekiNoise,
                                       static_cast<std::uint64_t>(k)));
          });
      out.final_mean = mean_and_deviations(e).mean;
      break;
    }
  }
  out.record.seed = algo_seed;

  if (cfg.problem == ProblemKind::kDarcy && setup.kl) {
    out.solution_error =
        relative_solution_error(setup.kl->field(out.final_mean), setup.truth_field);
  }
  return out;
}

struct RepeatAggregate {
  std::vector<double> misfit_mean;  // per step 0..n_steps
  std::vector<double> misfit_std;
  std::vector<double> rates;            // fitted |r| per successful repeat
  std::vector<double> final_misfits;    // per repeat
  std::vector<double> solution_errors;  // darcy final relative errors
  std::vector<int> failed_reps;
  std::vector<RunOutput> runs;
};

/// Runs n_rep repeats (seeds base .. base + n_rep - 1) on a small thread
/// pool; streams are disjoint per repeat, so the result is independent of
/// scheduling. Failed repeats are collected, not fatal.
inline RepeatAggregate repeat_experiment(const ProblemFactory& factory,
                                         int threads = 0) {
  const ExperimentConfig& cfg = factory.config();
  const int n_rep = cfg.n_rep;
  RepeatAggregate agg;
  agg.runs.resize(n_rep);
  std::vector<char> ok(n_rep, 0);

  if (threads <= 0)
    threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min<int>(threads, n_rep);
  std::mutex next_mutex;
  int next = 0;
  auto worker = [&]() {
    for (;;) {
      int rep;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= n_rep) return;
        rep = next++;
      }
      try {
        agg.runs[rep] = run_experiment(factory, rep);
        ok[rep] = 1;
      } catch (const std::exception&) {
        ok[rep] = 0;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  const std::size_t n_points = static_cast<std::size_t>(cfg.n_steps) + 1;
  std::vector<double> sum(n_points, 0.0), sumsq(n_points, 0.0);
  int n_ok = 0;
  for (int rep = 0; rep < n_rep; ++rep) {
    if (!ok[rep]) {
      agg.failed_reps.push_back(rep);
      continue;
    }
    ++n_ok;
    const auto series = agg.runs[rep].record.misfit_series();
    for (std::size_t k = 0; k < n_points; ++k) {
      sum[k] += series[k];
      sumsq[k] += series[k] * series[k];
    }
    agg.final_misfits.push_back(series.back());
    if (const auto r = fitted_decay_rate(series)) agg.rates.push_back(*r);
    if (!std::isnan(agg.runs[rep].solution_error))
      agg.solution_errors.push_back(agg.runs[rep].solution_error);
  }
  agg.misfit_mean.resize(n_points);
  agg.misfit_std.resize(n_points);
  for (std::size_t k = 0; k < n_points; ++k) {
    const double m = n_ok ? sum[k] / n_ok : 0.0;
    agg.misfit_mean[k] = m;
    const double var = n_ok > 1 ? std::max(0.0, (sumsq[k] - n_ok * m * m) / (n_ok - 1))
                                : 0.0;
    agg.misfit_std[k] = std::sqrt(var);
  }
  return agg;
}

}  // namespace deki
