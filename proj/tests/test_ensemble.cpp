// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "deki/ensemble.hpp"
#include "deki/rng.hpp"

using namespace deki;

TEST_CASE("rng streams are reproducible and purpose-separated") {
  RngStream a(42, Purpose::kInitEnsemble);
  RngStream b(42, Purpose::kInitEnsemble);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  RngStream c(42, Purpose::kDropoutMask);
  RngStream d(42, Purpose::kInitEnsemble);
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
  REQUIRE(any_diff);

  RngStream e(42, Purpose::kDropoutMask, 3);
  RngStream f(42, Purpose::kDropoutMask, 4);
  REQUIRE(e.next_u64() != f.next_u64());
}

TEST_CASE("rng gaussian moments") {
  RngStream s(7, Purpose::kGeneric);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = s.gaussian();
    sum += x;
    sumsq += x * x;
  }
  REQUIRE(std::abs(sum / n) < 4.0 / std::sqrt(static_cast<double>(n)));
  REQUIRE(sumsq / n == Catch::Approx(1.0).margin(0.02));
}

TEST_CASE("gaussian_init zero scale gives zero vectors") {
  const Ensemble e = gaussian_init(3, 4, 0.0, RngStream(7, Purpose::kInitEnsemble));
  REQUIRE(e.dim() == 3);
  REQUIRE(e.size() == 4);
  REQUIRE(e.members().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gaussian_init determinism and rejection") {
  const Ensemble a = gaussian_init(5, 3, 0.7, RngStream(11, Purpose::kInitEnsemble));
  const Ensemble b = gaussian_init(5, 3, 0.7, RngStream(11, Purpose::kInitEnsemble));
  REQUIRE(a.members() == b.members());
  REQUIRE_THROWS_AS(gaussian_init(5, 1, 1.0, RngStream(1, Purpose::kInitEnsemble)),
                    InvalidArgument);
}

TEST_CASE("gaussian_init norm statistics over seeds") {
  // mean of |u|^2 over members and seeds should be scale^2 d_u = 1.2
  const Index d_u = 120;
  const Index j = 20;
  const double scale = 0.1;
  double sum = 0.0, sumsq = 0.0;
  int count = 0;
  for (std::uint64_t seed = 100; seed < 200; ++seed) {
    const Ensemble e = gaussian_init(d_u, j, scale, RngStream(seed, Purpose::kInitEnsemble));
    for (Index c = 0; c < j; ++c) {
      const double n2 = e.members().col(c).squaredNorm();
      sum += n2;
      sumsq += n2 * n2;
      ++count;
    }
  }
  const double mean = sum / count;
  const double var = (sumsq - count * mean * mean) / (count - 1);
  const double se = std::sqrt(var / count);
  REQUIRE(std::abs(mean - scale * scale * d_u) <= 3.0 * se);
}

TEST_CASE("mean_and_deviations hand case and invariants") {
  Matrix m(1, 2);
  m << 0.0, 2.0;
  const auto md = mean_and_deviations(Ensemble(m));
  REQUIRE(md.mean[0] == Catch::Approx(1.0));
  REQUIRE(md.deviations(0, 0) == Catch::Approx(-1.0));
  REQUIRE(md.deviations(0, 1) == Catch::Approx(1.0));

  // identical members: zero deviations
  Matrix same = Matrix::Constant(3, 4, 2.5);
  const auto md2 = mean_and_deviations(Ensemble(same));
  REQUIRE(md2.deviations.cwiseAbs().maxCoeff() == 0.0);

  // translation equivariance
  Ensemble e = gaussian_init(4, 6, 1.0, RngStream(3, Purpose::kInitEnsemble));
  Vector v(4);
  v << 1, -2, 3, 0.5;
  Ensemble shifted(Matrix(e.members().colwise() + v));
  const auto base = mean_and_deviations(e);
  const auto moved = mean_and_deviations(shifted);
  REQUIRE((moved.mean - base.mean - v).norm() < 1e-14);
  REQUIRE((moved.deviations - base.deviations).norm() < 1e-14);

  // deviations sum to zero
  REQUIRE(base.deviations.rowwise().sum().cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("empirical_covariances hand cases") {
  Matrix m(1, 2);
  m << 0.0, 2.0;
  Matrix images = m;  // identity map images
  const auto b = empirical_covariances(Ensemble(m), images);
  REQUIRE(b.cuu(0, 0) == Catch::Approx(2.0));
  REQUIRE(b.cuz(0, 0) == Catch::Approx(2.0));
  REQUIRE(b.czz(0, 0) == Catch::Approx(2.0));

  Matrix same = Matrix::Constant(2, 3, 1.0);
  const auto zero = empirical_covariances(Ensemble(same), same);
  REQUIRE(zero.cuu.cwiseAbs().maxCoeff() == 0.0);

  Matrix tri(2, 3);
  tri << 1, 0, -1,
         0, 1, -1;
  const auto tb = empirical_covariances(Ensemble(tri), tri);
  Matrix expect(2, 2);
  expect << 1.0, 0.5, 0.5, 1.0;
  REQUIRE((tb.cuu - expect).cwiseAbs().maxCoeff() < 1e-15);

  REQUIRE_THROWS_AS(empirical_covariances(Ensemble(tri), Matrix::Zero(2, 2)),
                    InvalidArgument);
}

TEST_CASE("covariance rank and PSD invariants") {
  const Index d_u = 9, j = 4;
  Ensemble e = gaussian_init(d_u, j, 1.0, RngStream(5, Purpose::kInitEnsemble));
  const auto b = empirical_covariances(e, e.members());
  Eigen::SelfAdjointEigenSolver<Matrix> es(b.cuu);
  int rank = 0;
  for (Index i = 0; i < d_u; ++i)
    if (es.eigenvalues()[i] > 1e-12 * es.eigenvalues().maxCoeff()) ++rank;
  REQUIRE(rank <= j - 1);
  REQUIRE(es.eigenvalues().minCoeff() > -1e-10 * es.eigenvalues().maxCoeff());
  REQUIRE((b.cuu - b.cuu.transpose()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("sample_mask validates and reproduces") {
  REQUIRE_THROWS_AS(sample_mask(0.0, 4, RngStream(1, Purpose::kDropoutMask)),
                    InvalidArgument);
  REQUIRE_THROWS_AS(sample_mask(1.0, 4, RngStream(1, Purpose::kDropoutMask)),
                    InvalidArgument);

  const auto a = sample_mask(0.3, 50, RngStream(9, Purpose::kDropoutMask, 2));
  const auto b = sample_mask(0.3, 50, RngStream(9, Purpose::kDropoutMask, 2));
  REQUIRE(a.keep == b.keep);
  for (Index i = 0; i < 50; ++i)
    REQUIRE((a.keep[i] == 0.0 || a.keep[i] == 1.0));
}

TEST_CASE("sample_mask near-one keep rate is almost surely all ones") {
  const auto m = sample_mask(0.999999, 10, RngStream(123, Purpose::kDropoutMask));
  REQUIRE(m.keep.sum() == Catch::Approx(10.0));
}

TEST_CASE("sample_mask binomial concentration") {
  const Index d = 100000;
  const auto m = sample_mask(0.5, d, RngStream(17, Purpose::kDropoutMask));
  const double frac = m.keep.sum() / static_cast<double>(d);
  REQUIRE(frac > 0.49);
  REQUIRE(frac < 0.51);
}

TEST_CASE("apply_dropout identity, collapse, and hand case") {
  Ensemble e = gaussian_init(6, 5, 1.0, RngStream(2, Purpose::kInitEnsemble));
  DropoutMask ones{Vector::Ones(6), 0.5};
  REQUIRE((apply_dropout(e, ones).members() - e.members()).cwiseAbs().maxCoeff() < 1e-14);

  DropoutMask zeros{Vector::Zero(6), 0.5};
  const auto collapsed = apply_dropout(e, zeros);
  const auto md = mean_and_deviations(e);
  for (Index c = 0; c < e.size(); ++c)
    REQUIRE((collapsed.members().col(c) - md.mean).cwiseAbs().maxCoeff() < 1e-14);

  Matrix m(2, 2);
  m << 0, 2,
       0, 4;
  Vector keep(2);
  keep << 1, 0;
  const auto out = apply_dropout(Ensemble(m), DropoutMask{keep, 0.5});
  Matrix expect(2, 2);
  expect << 0, 2,
            2, 2;
  REQUIRE((out.members() - expect).cwiseAbs().maxCoeff() < 1e-14);

  REQUIRE_THROWS_AS(apply_dropout(e, DropoutMask{Vector::Ones(7), 0.5}), InvalidArgument);
}

TEST_CASE("apply_dropout preserves the mean") {
  Ensemble e = gaussian_init(12, 7, 2.0, RngStream(8, Purpose::kInitEnsemble));
  const auto mask = sample_mask(0.4, 12, RngStream(8, Purpose::kDropoutMask));
  const auto dropped = apply_dropout(e, mask);
  const Vector m0 = mean_and_deviations(e).mean;
  const Vector m1 = mean_and_deviations(dropped).mean;
  REQUIRE((m1 - m0).cwiseAbs().maxCoeff() < 1e-14 * std::max(1.0, m0.cwiseAbs().maxCoeff()));
}

TEST_CASE("expected_dropout_covariance formula cases") {
  Matrix c(2, 2);
  c << 1.0, 0.8, 0.8, 1.0;
  const Matrix out = expected_dropout_covariance(c, 0.5);
  Matrix expect(2, 2);
  expect << 0.5, 0.2, 0.2, 0.5;
  REQUIRE((out - expect).cwiseAbs().maxCoeff() < 1e-15);

  REQUIRE((expected_dropout_covariance(c, 1.0) - c).cwiseAbs().maxCoeff() < 1e-15);
  REQUIRE(expected_dropout_covariance(c, 0.0).cwiseAbs().maxCoeff() < 1e-15);

  Matrix d = Vector::LinSpaced(4, 1.0, 4.0).asDiagonal();
  REQUIRE((expected_dropout_covariance(d, 0.3) - 0.3 * d).cwiseAbs().maxCoeff() < 1e-15);

  Matrix asym(2, 2);
  asym << 1.0, 0.5, 0.2, 1.0;
  REQUIRE_THROWS_AS(expected_dropout_covariance(asym, 0.5), InvalidArgument);
}

namespace {

// Independent oracle: exact Bernoulli-weighted average over all 2^d masks
// of the empirical covariance of the masked ensemble.
Matrix enumerate_dropout_expectation(const Ensemble& e, double lambda) {
  const Index d = e.dim();
  const double denom = static_cast<double>(e.size() - 1);
  Matrix acc = Matrix::Zero(d, d);
  for (std::uint64_t bits = 0; bits < (1ULL << d); ++bits) {
    Vector keep(d);
    double prob = 1.0;
    for (Index i = 0; i < d; ++i) {
      const bool on = bits & (1ULL << i);
      keep[i] = on ? 1.0 : 0.0;
      prob *= on ? lambda : 1.0 - lambda;
    }
    const auto dropped = apply_dropout(e, DropoutMask{keep, lambda});
    const auto md = mean_and_deviations(dropped);
    acc += prob * (md.deviations * md.deviations.transpose()) / denom;
  }
  return acc;
}

}  // namespace

TEST_CASE("dropout expectation identity against exact enumeration") {
  const Index d = 7;
  Ensemble e = gaussian_init(d, 10, 1.3, RngStream(21, Purpose::kInitEnsemble));
  const Matrix c = empirical_covariances(e, e.members()).cuu;
  for (double lambda : {0.1, 0.5, 0.9}) {
    const Matrix exact = enumerate_dropout_expectation(e, lambda);
    const Matrix formula = expected_dropout_covariance(c, lambda);
    REQUIRE((exact - formula).cwiseAbs().maxCoeff() <=
            1e-12 * std::max(1.0, formula.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("dropout Monte Carlo consistency") {
  const Index d = 6;
  const int j = 8;
  Ensemble e = gaussian_init(d, j, 1.0, RngStream(33, Purpose::kInitEnsemble));
  const Matrix c = empirical_covariances(e, e.members()).cuu;
  const double lambda = 0.35;
  const Matrix formula = expected_dropout_covariance(c, lambda);

  const int n_samples = 100000;
  Matrix sum = Matrix::Zero(d, d);
  Matrix sumsq = Matrix::Zero(d, d);
  RngStream stream(99, Purpose::kDropoutMask);
  const double denom = static_cast<double>(j - 1);
  const auto md = mean_and_deviations(e);
  for (int s = 0; s < n_samples; ++s) {
    Vector keep(d);
    for (Index i = 0; i < d; ++i) keep[i] = stream.bernoulli(lambda) ? 1.0 : 0.0;
    const Matrix masked = keep.asDiagonal() * md.deviations;
    const Matrix cov = masked * masked.transpose() / denom;
    sum += cov;
    sumsq += cov.cwiseProduct(cov);
  }
  for (Index r = 0; r < d; ++r)
    for (Index q = 0; q < d; ++q) {
      const double mean = sum(r, q) / n_samples;
      const double var =
          std::max(0.0, (sumsq(r, q) - n_samples * mean * mean) / (n_samples - 1));
      const double se = std::sqrt(var / n_samples);
      REQUIRE(std::abs(mean - formula(r, q)) <= 4.0 * se + 1e-14);
    }
}

TEST_CASE("expected dropout covariance dominates its diagonal part") {
  Ensemble e = gaussian_init(8, 5, 1.0, RngStream(55, Purpose::kInitEnsemble));
  const Matrix c = empirical_covariances(e, e.members()).cuu;
  const double lambda = 0.4;
  const Matrix lhs = expected_dropout_covariance(c, lambda) -
                     Matrix(lambda * (1.0 - lambda) * c.diagonal().asDiagonal());
  Eigen::SelfAdjointEigenSolver<Matrix> es(lhs, Eigen::EigenvaluesOnly);
  REQUIRE(es.eigenvalues().minCoeff() >= -1e-10);
}
