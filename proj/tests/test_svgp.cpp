#include <catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "panelgp/quadrature.hpp"
#include "panelgp/rng.hpp"
#include "panelgp/sparse_gp.hpp"

using namespace panelgp;

namespace {

struct GpPieces {
  std::vector<double> pseudo;
  Eigen::VectorXd mu;
  Eigen::MatrixXd chol;
  ArdKernel kernel{1.0, 1.0};
};

GpPieces random_pieces(Rng& rng, int r, double lo = 0.0, double hi = 10.0) {
  GpPieces p;
  double z = lo + rng.uniform();
  for (int i = 0; i < r; ++i) {
    p.pseudo.push_back(z);
    z += 0.2 + (hi - lo) / r * rng.uniform();
  }
  p.mu.resize(r);
  for (int i = 0; i < r; ++i) p.mu[i] = 2.0 * rng.normal();
  p.chol = Eigen::MatrixXd::Zero(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < i; ++j) p.chol(i, j) = 0.3 * rng.normal();
    p.chol(i, i) = 0.2 + 0.8 * rng.uniform();
  }
  // Lengthscale tied to the pseudo-input spacing keeps K_RR well away from
  // the jitter floor, where quadrature comparisons stop being meaningful.
  const double spacing = (p.pseudo.back() - p.pseudo.front()) / (r - 1);
  p.kernel = ArdKernel(0.3 + 2.7 * rng.uniform(),
                       spacing * (0.6 + 0.8 * rng.uniform()));
  return p;
}

SparseVariationalGP random_gp(Rng& rng, int r) {
  const GpPieces p = random_pieces(rng, r);
  return SparseVariationalGP(p.pseudo, p.mu, p.chol, p.kernel);
}

// Prior-matching variational state: mu = 0, Sigma = K_RR + jitter I.
SparseVariationalGP prior_gp(const std::vector<double>& pseudo,
                             const ArdKernel& kernel, double jitter = 1e-6) {
  Eigen::MatrixXd kuu = gram(kernel, pseudo, pseudo);
  kuu.diagonal().array() += jitter;
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(kuu).matrixL();
  return SparseVariationalGP(pseudo, Eigen::VectorXd::Zero(kuu.rows()), chol,
                             kernel, jitter);
}

}  // namespace

TEST_CASE("state invariants are enforced", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 1.0, 2.0};
  const ArdKernel k(1.0, 1.0);
  const Eigen::VectorXd mu = Eigen::VectorXd::Zero(3);
  Eigen::MatrixXd chol = Eigen::MatrixXd::Identity(3, 3);

  CHECK_NOTHROW(SparseVariationalGP(pseudo, mu, chol, k));
  CHECK_THROWS_AS(SparseVariationalGP({0.0, 0.0, 1.0}, mu, chol, k),
                  std::domain_error);
  chol(1, 1) = 0.0;
  CHECK_THROWS_AS(SparseVariationalGP(pseudo, mu, chol, k), std::domain_error);
  chol(1, 1) = 1.0;
  CHECK_THROWS_AS(SparseVariationalGP(pseudo, mu, chol, k, 0.0),
                  std::domain_error);
  CHECK_THROWS_AS(SparseVariationalGP(pseudo, Eigen::VectorXd::Zero(2), chol, k),
                  std::domain_error);
}

TEST_CASE("prior variational state recovers the prior marginal", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 2.0, 4.0, 6.0, 8.0};
  const ArdKernel kernel(1.7, 1.3);
  const SparseVariationalGP gp = prior_gp(pseudo, kernel);
  for (const double x : {0.0, 0.7, 3.3, 5.0, 9.5}) {
    const PosteriorMoments m = gp.posterior_moments_at(x);
    CHECK(m.mean == Catch::Approx(0.0).margin(1e-8));
    CHECK(m.variance == Catch::Approx(kernel(x, x)).margin(1e-8));
  }
}

TEST_CASE("near-deterministic q interpolates mu at the pseudo inputs", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 1.0, 2.0, 3.0};
  Eigen::VectorXd mu(4);
  mu << 1.0, -2.0, 0.5, 3.0;
  const Eigen::MatrixXd chol = 1e-5 * Eigen::MatrixXd::Identity(4, 4);
  const SparseVariationalGP gp(pseudo, mu, chol, ArdKernel(1.0, 1.0));
  for (int i = 0; i < 4; ++i) {
    const PosteriorMoments m = gp.posterior_moments_at(pseudo[i]);
    CHECK(m.mean == Catch::Approx(mu[i]).margin(1e-3));
  }
}

TEST_CASE("posterior moments match a dense-inverse oracle", "[svgp]") {
  Rng rng(314);
  for (int trial = 0; trial < 25; ++trial) {
    const GpPieces p = random_pieces(rng, 2 + static_cast<int>(rng.bounded(6)));
    const SparseVariationalGP gp(p.pseudo, p.mu, p.chol, p.kernel);
    const double x = -1.0 + 12.0 * rng.uniform();

    // Oracle: explicit inverses, textbook formulas.
    const Eigen::Index r = gp.size();
    Eigen::MatrixXd kuu = gram(p.kernel, p.pseudo, p.pseudo);
    kuu.diagonal().array() += gp.jitter();
    const Eigen::MatrixXd kinv = kuu.inverse();
    Eigen::VectorXd kx(r);
    for (Eigen::Index i = 0; i < r; ++i) {
      kx[i] = p.kernel(x, p.pseudo[static_cast<std::size_t>(i)]);
    }
    const Eigen::MatrixXd sigma = p.chol * p.chol.transpose();
    const double mean = kx.dot(kinv * p.mu);
    const double var = p.kernel(x, x) - kx.dot(kinv * kx) +
                       kx.dot(kinv * sigma * kinv * kx);

    const PosteriorMoments m = gp.posterior_moments_at(x);
    CHECK(m.mean == Catch::Approx(mean).margin(1e-10));
    CHECK(m.variance == Catch::Approx(var).margin(1e-10));
  }
}

TEST_CASE("prior integrated second moment is gamma times the length", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 2.5, 5.0, 7.5, 10.0};
  const ArdKernel kernel(2.4, 1.8);
  const SparseVariationalGP gp = prior_gp(pseudo, kernel);
  CHECK(gp.integrated_second_moment(Interval(1.0, 7.0)) ==
        Catch::Approx(2.4 * 6.0).margin(1e-6));
  CHECK(gp.integrated_second_moment(Interval(3.0, 3.0)) == 0.0);
}

TEST_CASE("integrated moments match Simpson quadrature of the pointwise moments",
          "[svgp]") {
  Rng rng(2718);
  for (int trial = 0; trial < 50; ++trial) {
    const SparseVariationalGP gp =
        random_gp(rng, 2 + static_cast<int>(rng.bounded(6)));
    const double start = 10.0 * rng.uniform();
    const Interval iv(start, start + 0.5 + 6.0 * rng.uniform());

    const IntegratedMoments m = gp.integrated_moments(iv);
    const double q_sq_mean = simpson(
        [&](double x) {
          const double mean = gp.posterior_moments_at(x).mean;
          return mean * mean;
        },
        iv.start, iv.end, 2001);
    const double q_var = simpson(
        [&](double x) { return gp.posterior_moments_at(x).variance; },
        iv.start, iv.end, 2001);
    CHECK(m.sq_mean == Catch::Approx(q_sq_mean).margin(1e-6));
    CHECK(m.variance == Catch::Approx(q_var).margin(1e-6));

    // Decomposition identity.
    CHECK(m.sq_mean + m.variance ==
          Catch::Approx(gp.integrated_second_moment(iv)).margin(1e-9));
    if (gp.mu().isZero()) CHECK(m.sq_mean == 0.0);
  }
}

TEST_CASE("integrated second moment is additive over adjacent intervals",
          "[svgp]") {
  Rng rng(12);
  const SparseVariationalGP gp = random_gp(rng, 5);
  const double left = gp.integrated_second_moment(Interval(0.0, 3.0));
  const double right = gp.integrated_second_moment(Interval(3.0, 8.0));
  const double whole = gp.integrated_second_moment(Interval(0.0, 8.0));
  CHECK(left + right == Catch::Approx(whole).margin(1e-10));
}

TEST_CASE("zero mu gives zero integrated squared mean", "[svgp]") {
  Rng rng(13);
  GpPieces p = random_pieces(rng, 4);
  p.mu.setZero();
  const SparseVariationalGP gp(p.pseudo, p.mu, p.chol, p.kernel);
  const IntegratedMoments m = gp.integrated_moments(Interval(0.0, 5.0));
  CHECK(m.sq_mean == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("integrated second moment agrees with Monte Carlo", "[svgp]") {
  Rng rng(515);
  const SparseVariationalGP gp = random_gp(rng, 5);
  const Interval iv(0.5, 6.5);
  const int grid_n = 201;
  const int samples = 20000;
  const std::vector<double> grid = linspace(iv.start, iv.end, grid_n);
  const Eigen::MatrixXd paths = gp.sample_function(grid, 99, samples);
  double sum = 0.0, sum_sq = 0.0;
  std::vector<double> values(grid_n);
  for (int s = 0; s < samples; ++s) {
    for (int i = 0; i < grid_n; ++i) {
      values[static_cast<std::size_t>(i)] = paths(i, s) * paths(i, s);
    }
    const double integral = simpson_sampled(values, iv.start, iv.end);
    sum += integral;
    sum_sq += integral * integral;
  }
  const double mean = sum / samples;
  const double se =
      std::sqrt((sum_sq / samples - mean * mean) / samples);
  const double exact = gp.integrated_second_moment(iv);
  INFO("mc=" << mean << " exact=" << exact << " se=" << se);
  CHECK(std::abs(mean - exact) < 3.0 * se + 1e-6);
}

TEST_CASE("joint sampling is deterministic and calibrated", "[svgp]") {
  Rng rng(77);
  const SparseVariationalGP gp = random_gp(rng, 4);
  const std::vector<double> grid = {1.0, 2.0, 5.0};
  const Eigen::MatrixXd a = gp.sample_function(grid, 4242, 7);
  const Eigen::MatrixXd b = gp.sample_function(grid, 4242, 7);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  const Eigen::MatrixXd c = gp.sample_function(grid, 4243, 7);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);

  // One-point marginal statistics over many draws.
  const double x = 3.3;
  const PosteriorMoments m = gp.posterior_moments_at(x);
  const int n = 100000;
  const Eigen::MatrixXd draws = gp.sample_function({x}, 11, n);
  double sum = 0.0, sum_sq = 0.0;
  for (int s = 0; s < n; ++s) {
    sum += draws(0, s);
    sum_sq += draws(0, s) * draws(0, s);
  }
  const double mc_mean = sum / n;
  const double mc_var = sum_sq / n - mc_mean * mc_mean;
  const double se_mean = std::sqrt(m.variance / n);
  const double se_var = m.variance * std::sqrt(2.0 / n);
  CHECK(std::abs(mc_mean - m.mean) < 3.0 * se_mean);
  CHECK(std::abs(mc_var - m.variance) < 3.0 * se_var);

  CHECK_THROWS_AS(gp.sample_function({}, 1, 1), std::domain_error);
  CHECK_THROWS_AS(gp.sample_function({2.0, 1.0}, 1, 1), std::domain_error);
}

TEST_CASE("tiny-variance q concentrates samples near mu", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 1.0, 2.0};
  Eigen::VectorXd mu(3);
  mu << 2.0, -1.0, 0.5;
  const Eigen::MatrixXd chol = 1e-5 * Eigen::MatrixXd::Identity(3, 3);
  const SparseVariationalGP gp(pseudo, mu, chol, ArdKernel(1.0, 1.0));
  const Eigen::MatrixXd draws = gp.sample_function(pseudo, 5, 50);
  for (int s = 0; s < draws.cols(); ++s) {
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(draws(i, s) - mu[i]) < 0.05);
    }
  }
}

TEST_CASE("joint covariance is symmetric with PSD 2x2 marginals", "[svgp]") {
  Rng rng(31);
  const SparseVariationalGP gp = random_gp(rng, 5);
  const std::vector<double> grid = linspace(0.0, 9.0, 12);
  const Eigen::MatrixXd cov = gp.joint_covariance(grid);
  CHECK((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  for (Eigen::Index i = 0; i < cov.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < cov.cols(); ++j) {
      const double det = cov(i, i) * cov(j, j) - cov(i, j) * cov(j, i);
      CHECK(cov(i, i) >= -1e-10);
      CHECK(det >= -1e-8);
    }
  }
}

TEST_CASE("KL divergence closed cases", "[svgp]") {
  const std::vector<double> pseudo = {0.0, 1.5, 3.0, 4.5};
  const ArdKernel kernel(1.2, 1.1);
  // Identical Gaussians.
  CHECK(prior_gp(pseudo, kernel).kl_divergence() ==
        Catch::Approx(0.0).margin(1e-9));

  // Mean shift only: KL = mu^T K^-1 mu / 2.
  Eigen::MatrixXd kuu = gram(kernel, pseudo, pseudo);
  kuu.diagonal().array() += 1e-6;
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(kuu).matrixL();
  Eigen::VectorXd mu(4);
  mu << 0.5, -1.0, 2.0, 0.25;
  const SparseVariationalGP gp(pseudo, mu, chol, kernel);
  CHECK(gp.kl_divergence() ==
        Catch::Approx(0.5 * mu.dot(kuu.inverse() * mu)).margin(1e-9));
}

TEST_CASE("KL divergence matches Monte Carlo and stays nonnegative", "[svgp]") {
  Rng rng(61);
  for (int trial = 0; trial < 5; ++trial) {
    const GpPieces p = random_pieces(rng, 4);
    const SparseVariationalGP gp(p.pseudo, p.mu, p.chol, p.kernel);
    const double kl = gp.kl_divergence();
    CHECK(kl >= 0.0);

    Eigen::MatrixXd kuu = gram(p.kernel, p.pseudo, p.pseudo);
    kuu.diagonal().array() += gp.jitter();
    const Eigen::MatrixXd kinv = kuu.inverse();
    const Eigen::MatrixXd sigma = p.chol * p.chol.transpose();
    const Eigen::MatrixXd sigma_inv = sigma.inverse();
    const double logdet_k = std::log(kuu.determinant());
    const double logdet_s = std::log(sigma.determinant());

    Rng sampler(900 + static_cast<std::uint64_t>(trial));
    const int n = 200000;
    double sum = 0.0, sum_sq = 0.0;
    Eigen::VectorXd z(4);
    for (int s = 0; s < n; ++s) {
      for (int i = 0; i < 4; ++i) z[i] = sampler.normal();
      const Eigen::VectorXd x = p.mu + p.chol * z;
      const double lq = -0.5 * (x - p.mu).dot(sigma_inv * (x - p.mu)) -
                        0.5 * logdet_s;
      const double lp = -0.5 * x.dot(kinv * x) - 0.5 * logdet_k;
      const double v = lq - lp;
      sum += v;
      sum_sq += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum_sq / n - mean * mean) / n);
    INFO("kl=" << kl << " mc=" << mean << " se=" << se);
    CHECK(std::abs(kl - mean) < 3.0 * se + 1e-8);
  }
}
