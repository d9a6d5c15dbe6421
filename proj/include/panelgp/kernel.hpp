#pragma once

// ARD squared-exponential covariance in one dimension and its analytic
// integrals over intervals (the Psi statistics of sparse-GP inference).
//
// The product of two SE factors completes the square:
//   k(z_i, x) k(x, z_j)
//     = gamma^2 exp(-(z_i - z_j)^2 / (4 a^2)) exp(-(x - zbar)^2 / a^2)
// with zbar = (z_i + z_j)/2, so the interval integral reduces to erf
// evaluations at the scaled endpoints.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "panelgp/special_functions.hpp"

namespace panelgp {

struct Interval {
  double start = 0.0;
  double end = 0.0;

  Interval() = default;
  Interval(double s, double e) : start(s), end(e) {
    if (!(s <= e)) {
      throw std::domain_error("Interval: start must not exceed end");
    }
  }
  double length() const { return end - start; }
};

struct ArdKernel {
  double variance = 1.0;     // gamma, the intensity-squared scale
  double lengthscale = 1.0;  // a, in time units

  ArdKernel() = default;
  ArdKernel(double gamma, double a) : variance(gamma), lengthscale(a) {
    if (!(gamma > 0.0) || !(a > 0.0)) {
      throw std::domain_error("ArdKernel: variance and lengthscale must be positive");
    }
  }

  double operator()(double x, double y) const {
    const double d = x - y;
    return variance * std::exp(-d * d / (2.0 * lengthscale * lengthscale));
  }
};

inline Eigen::MatrixXd gram(const ArdKernel& k, const std::vector<double>& xs,
                            const std::vector<double>& ys) {
  if (xs.empty() || ys.empty()) {
    throw std::domain_error("gram: point lists must be nonempty");
  }
  Eigen::MatrixXd out(xs.size(), ys.size());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      out(i, j) = k(xs[i], ys[j]);
    }
  }
  return out;
}

// Entrywise derivative of the gram matrix in the lengthscale:
//   d k(x,y) / da = k(x,y) * (x-y)^2 / a^3.
inline Eigen::MatrixXd gram_dlengthscale(const ArdKernel& k,
                                         const std::vector<double>& xs,
                                         const std::vector<double>& ys) {
  Eigen::MatrixXd out(xs.size(), ys.size());
  const double a3 = k.lengthscale * k.lengthscale * k.lengthscale;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      const double d = xs[i] - ys[j];
      out(i, j) = k(xs[i], ys[j]) * d * d / a3;
    }
  }
  return out;
}

// int_iv k(z_i, x) k(x, z_j) dx in closed form.
inline double psi_entry(const ArdKernel& k, double z_i, double z_j,
                        const Interval& iv) {
  const double a = k.lengthscale;
  const double d = z_i - z_j;
  const double zbar = 0.5 * (z_i + z_j);
  const double cross = std::exp(-d * d / (4.0 * a * a));
  const double scale = k.variance * k.variance * cross * kSqrtPi * a * 0.5;
  return scale * (erf((iv.end - zbar) / a) - erf((iv.start - zbar) / a));
}

inline Eigen::MatrixXd psi_matrix(const ArdKernel& k,
                                  const std::vector<double>& pseudo,
                                  const Interval& iv) {
  if (pseudo.empty()) {
    throw std::domain_error("psi_matrix: pseudo-input list must be nonempty");
  }
  const Eigen::Index r = static_cast<Eigen::Index>(pseudo.size());
  Eigen::MatrixXd out(r, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = psi_entry(k, pseudo[i], pseudo[j], iv);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

// Derivative of psi_entry in the lengthscale. Differentiates the three
// a-dependent factors of the closed form; erf'(u) = 2 exp(-u^2)/sqrt(pi).
inline double psi_entry_dlengthscale(const ArdKernel& k, double z_i, double z_j,
                                     const Interval& iv) {
  const double a = k.lengthscale;
  const double d = z_i - z_j;
  const double zbar = 0.5 * (z_i + z_j);
  const double cross = std::exp(-d * d / (4.0 * a * a));
  const double base = psi_entry(k, z_i, z_j, iv);
  const double ue = (iv.end - zbar) / a;
  const double us = (iv.start - zbar) / a;
  const double edge = (iv.end - zbar) * std::exp(-ue * ue) -
                      (iv.start - zbar) * std::exp(-us * us);
  return base * (d * d / (2.0 * a * a * a) + 1.0 / a) -
         k.variance * k.variance * cross * edge / a;
}

inline Eigen::MatrixXd psi_matrix_dlengthscale(const ArdKernel& k,
                                               const std::vector<double>& pseudo,
                                               const Interval& iv) {
  const Eigen::Index r = static_cast<Eigen::Index>(pseudo.size());
  Eigen::MatrixXd out(r, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = psi_entry_dlengthscale(k, pseudo[i], pseudo[j], iv);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

}  // namespace panelgp
