#include <catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "panelgp/kernel.hpp"
#include "panelgp/quadrature.hpp"
#include "panelgp/rng.hpp"

using namespace panelgp;

namespace {

// Quadrature oracle for the psi integrand.
double psi_entry_quadrature(const ArdKernel& k, double zi, double zj,
                            const Interval& iv, int points = 10001) {
  return simpson([&](double x) { return k(zi, x) * k(x, zj); }, iv.start,
                 iv.end, points);
}

}  // namespace

TEST_CASE("kernel evaluation", "[kernel]") {
  CHECK(ArdKernel(2.0, 1.0)(3.0, 3.0) == Catch::Approx(2.0));
  CHECK(ArdKernel(1.0, 1.0)(0.0, 1.0) == Catch::Approx(std::exp(-0.5)));
  CHECK(ArdKernel(1.5, 0.7)(0.2, 1.1) ==
        Catch::Approx(0.656347106550403855).margin(1e-12));
  CHECK_THROWS_AS(ArdKernel(0.0, 1.0), std::domain_error);
  CHECK_THROWS_AS(ArdKernel(1.0, -1.0), std::domain_error);
}

TEST_CASE("gram matrix basics", "[kernel]") {
  const ArdKernel k(1.0, 1.0);
  const Eigen::MatrixXd single = gram(k, {4.2}, {4.2});
  REQUIRE(single.rows() == 1);
  CHECK(single(0, 0) == Catch::Approx(1.0));

  const Eigen::MatrixXd two = gram(k, {0.0, 1.0}, {0.0, 1.0});
  CHECK(two(0, 1) == Catch::Approx(std::exp(-0.5)));
  CHECK(two(1, 0) == Catch::Approx(std::exp(-0.5)));
  CHECK(two(0, 0) == Catch::Approx(1.0));

  CHECK_THROWS_AS(gram(k, {}, {1.0}), std::domain_error);
}

TEST_CASE("gram with jitter is positive definite", "[kernel]") {
  Rng rng(11);
  const ArdKernel k(2.3, 3.0);
  std::vector<double> xs;
  for (int i = 0; i < 50; ++i) xs.push_back(100.0 * rng.uniform());
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  Eigen::MatrixXd g = gram(k, xs, xs);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(
      g + 1e-6 * Eigen::MatrixXd::Identity(g.rows(), g.cols()));
  CHECK(eig.eigenvalues().minCoeff() >= -1e-10);

  g.diagonal().array() += 1e-6;
  Eigen::LLT<Eigen::MatrixXd> llt(g);
  CHECK(llt.info() == Eigen::Success);
}

TEST_CASE("psi entry closed form", "[kernel]") {
  const ArdKernel unit(1.0, 1.0);
  CHECK(psi_entry(unit, 1.7, 1.7, Interval(3.0, 3.0)) == 0.0);
  // Whole-line limit of the Gaussian product integral.
  CHECK(psi_entry(unit, 0.0, 0.0, Interval(-50.0, 50.0)) ==
        Catch::Approx(std::sqrt(M_PI)).margin(1e-12));
  CHECK(psi_entry(unit, 0.0, 2.0, Interval(-10.0, 12.0)) ==
        Catch::Approx(std::exp(-1.0) * std::sqrt(M_PI)).margin(1e-10));
}

TEST_CASE("psi entry is symmetric, nonnegative and monotone in the interval",
          "[kernel]") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const ArdKernel k(0.2 + 3.0 * rng.uniform(), 0.3 + 2.0 * rng.uniform());
    const double zi = -3.0 + 6.0 * rng.uniform();
    const double zj = -3.0 + 6.0 * rng.uniform();
    const double a = -4.0 + 8.0 * rng.uniform();
    const double b = a + 5.0 * rng.uniform();
    CHECK(psi_entry(k, zi, zj, Interval(a, b)) ==
          Catch::Approx(psi_entry(k, zj, zi, Interval(a, b))).margin(1e-14));
    const double narrow = psi_entry(k, zi, zj, Interval(a, b));
    const double wide = psi_entry(k, zi, zj, Interval(a - 1.0, b + 1.0));
    CHECK(narrow >= 0.0);
    CHECK(wide >= narrow - 1e-14);
  }
}

TEST_CASE("psi matrix matches quadrature on randomized cases", "[kernel]") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const ArdKernel k(0.2 + 2.5 * rng.uniform(), 0.4 + 2.0 * rng.uniform());
    const double start = -2.0 + 4.0 * rng.uniform();
    const Interval iv(start, start + 0.5 + 4.0 * rng.uniform());
    std::vector<double> pseudo;
    const int r = 2 + static_cast<int>(rng.bounded(3));
    double z = -3.0 + 2.0 * rng.uniform();
    for (int i = 0; i < r; ++i) {
      pseudo.push_back(z);
      z += 0.5 + 2.0 * rng.uniform();
    }
    const Eigen::MatrixXd psi = psi_matrix(k, pseudo, iv);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j <= i; ++j) {
        CHECK(psi(i, j) ==
              Catch::Approx(psi_entry_quadrature(k, pseudo[i], pseudo[j], iv))
                  .margin(1e-8));
        CHECK(psi(i, j) == psi(j, i));
      }
    }
  }
}

TEST_CASE("psi matrix is additive over adjacent intervals", "[kernel]") {
  const ArdKernel k(1.4, 0.9);
  const std::vector<double> pseudo = {0.0, 1.5, 3.0, 4.5};
  const Eigen::MatrixXd left = psi_matrix(k, pseudo, Interval(0.0, 2.0));
  const Eigen::MatrixXd right = psi_matrix(k, pseudo, Interval(2.0, 5.0));
  const Eigen::MatrixXd whole = psi_matrix(k, pseudo, Interval(0.0, 5.0));
  CHECK(((left + right) - whole).cwiseAbs().maxCoeff() < 1e-12);

  const Eigen::MatrixXd one = psi_matrix(k, {2.2}, Interval(0.0, 5.0));
  CHECK(one(0, 0) == Catch::Approx(psi_entry(k, 2.2, 2.2, Interval(0.0, 5.0))));
}

TEST_CASE("kernel and psi lengthscale derivatives match finite differences",
          "[kernel]") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const double gamma = 0.3 + 2.0 * rng.uniform();
    const double a = 0.4 + 2.0 * rng.uniform();
    const double zi = -2.0 + 4.0 * rng.uniform();
    const double zj = -2.0 + 4.0 * rng.uniform();
    const Interval iv(-1.0, 1.0 + 3.0 * rng.uniform());
    const double h = 1e-6 * a;
    {
      const double fd = (psi_entry(ArdKernel(gamma, a + h), zi, zj, iv) -
                         psi_entry(ArdKernel(gamma, a - h), zi, zj, iv)) /
                        (2.0 * h);
      CHECK(psi_entry_dlengthscale(ArdKernel(gamma, a), zi, zj, iv) ==
            Catch::Approx(fd).margin(1e-5));
    }
    {
      const std::vector<double> xs = {zi, zj + 5.0};
      const Eigen::MatrixXd fd =
          (gram(ArdKernel(gamma, a + h), xs, xs) -
           gram(ArdKernel(gamma, a - h), xs, xs)) /
          (2.0 * h);
      const Eigen::MatrixXd an = gram_dlengthscale(ArdKernel(gamma, a), xs, xs);
      CHECK((fd - an).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
}
