#pragma once

// Scalar special functions and the bound machinery underlying the panel-count
// objectives: digamma / log-gamma / erf, the Poisson-weighted digamma series
// and its exact reference function, the closed-form lower bound on E[ln y^2]
// for Gaussian y, and the variance-minimizing search for the bound parameter.
//
// Everything here is a pure function of its arguments and safe to call from
// any number of threads.

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace panelgp {

inline constexpr double kEulerGamma = 0.57721566490153286060651209008240243;
inline constexpr double kLn2 = 0.69314718055994530941723212145817657;
inline constexpr double kSqrtPi = 1.77245385090551602729816748334114518;

// digamma(x) for x > 0: upward recurrence to x >= 6, then the Bernoulli
// asymptotic series with terms through x^-14 (absolute error < 2e-13 on
// [1e-3, 1e6]).
inline double digamma(double x) {
  if (!(x > 0.0)) {
    throw std::domain_error("digamma: argument must be positive, got " +
                            std::to_string(x));
  }
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double v = inv * inv;
  // B_{2k}/(2k x^{2k}), k = 1..7
  const double tail =
      v * (1.0 / 12.0 -
           v * (1.0 / 120.0 -
                v * (1.0 / 252.0 -
                     v * (1.0 / 240.0 -
                          v * (1.0 / 132.0 -
                               v * (691.0 / 32760.0 - v * (1.0 / 12.0)))))));
  return acc + std::log(x) - 0.5 * inv - tail;
}

// ln Gamma(x) for x > 0 via Stirling's series after shifting to x >= 8.
// Absolute error < 1e-12 for x >= 1.
inline double log_gamma(double x) {
  if (!(x > 0.0)) {
    throw std::domain_error("log_gamma: argument must be positive, got " +
                            std::to_string(x));
  }
  double shift = 0.0;
  while (x < 8.0) {
    shift -= std::log(x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double v = inv * inv;
  const double series =
      inv * (1.0 / 12.0 -
             v * (1.0 / 360.0 -
                  v * (1.0 / 1260.0 - v * (1.0 / 1680.0 - v * (1.0 / 1188.0)))));
  return shift + (x - 0.5) * std::log(x) - x +
         0.91893853320467274178032973640562 + series;  // ln sqrt(2 pi)
}

// erf(x), dependency-free, absolute error < 1e-14. Three branches:
//   |x| < 2:     non-alternating confluent series
//                erf(x) = 2x e^{-x^2}/sqrt(pi) * sum_n (2x^2)^n/(2n+1)!!
//                (every term positive, no cancellation),
//   2 <= |x| < 6: erfc via the Legendre continued fraction (modified Lentz),
//   |x| >= 6:    saturated, where 1 - |erf| < 3e-17.
inline double erf(double x) {
  const double ax = std::abs(x);
  if (ax >= 6.0) return x > 0.0 ? 1.0 : -1.0;
  if (ax == 0.0) return 0.0;
  const double x2 = x * x;
  if (ax < 2.0) {
    const double r = 2.0 * x2;
    double term = 1.0;
    double sum = 1.0;
    for (int n = 0; n < 120; ++n) {
      term *= r / (2.0 * n + 3.0);
      sum += term;
      if (term < sum * 1e-17) break;
    }
    return 2.0 * x * std::exp(-x2) / kSqrtPi * sum;
  }
  // Modified Lentz on f = 1/(ax + (1/2)/(ax + 1/(ax + (3/2)/(ax + ...)))),
  // partial numerators 1, 1/2, 1, 3/2, 2, ...
  double f = 1e-300, c = f, d = 0.0;
  for (int n = 1; n <= 200; ++n) {
    const double a_n = n == 1 ? 1.0 : 0.5 * (n - 1);
    d = ax + a_n * d;
    if (d == 0.0) d = 1e-300;
    c = ax + a_n / c;
    if (c == 0.0) c = 1e-300;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  const double erfc_ax = std::exp(-x2) / kSqrtPi * f;
  const double val = 1.0 - erfc_ax;
  return x > 0.0 ? val : -val;
}

namespace detail {

// Polygamma asymptotics used by the large-argument branch of the series
// below; valid for x >> 1 (we only call them with x > 700).
inline double psi_large(double x) {
  const double v = 1.0 / (x * x);
  return std::log(x) - 0.5 / x -
         v * (1.0 / 12.0 - v * (1.0 / 120.0 - v * (1.0 / 252.0)));
}

// E[psi(J + m)] and E[1/(J + m)] for J ~ Poisson(y) with y large, expanded
// through the central moments of J (mu2..mu6). First omitted contribution is
// O(y^-4); below 1e-8 for y > 700.
inline double poisson_digamma_asymptotic(double m, double y) {
  const double x = y + m;
  const double x2 = x * x, x3 = x2 * x, x4 = x3 * x, x5 = x4 * x, x6 = x5 * x,
               x7 = x6 * x;
  const double psi2 = -(1.0 / x2 + 1.0 / x3 + 0.5 / x4 - 1.0 / (6.0 * x6));
  const double psi3 = 2.0 / x3 + 3.0 / x4 + 2.0 / x5;
  const double psi4 = -(6.0 / x4 + 12.0 / x5 + 10.0 / x6);
  const double psi5 = 24.0 / x5 + 60.0 / x6;
  const double psi6 = -(120.0 / x6 + 360.0 / x7);
  const double mu2 = y, mu3 = y, mu4 = y + 3.0 * y * y,
               mu5 = y + 10.0 * y * y, mu6 = y + 25.0 * y * y + 15.0 * y * y * y;
  return psi_large(x) + mu2 / 2.0 * psi2 + mu3 / 6.0 * psi3 + mu4 / 24.0 * psi4 +
         mu5 / 120.0 * psi5 + mu6 / 720.0 * psi6;
}

inline double poisson_reciprocal_asymptotic(double m, double y) {
  const double x = y + m;
  const double x3 = x * x * x, x4 = x3 * x, x5 = x4 * x, x6 = x5 * x,
               x7 = x6 * x;
  return 1.0 / x + y / x3 - y / x4 + (y + 3.0 * y * y) / x5 -
         (y + 10.0 * y * y) / x6 + (y + 25.0 * y * y + 15.0 * y * y * y) / x7;
}

}  // namespace detail

// Poisson-weighted digamma series
//   sum_{j>=0} y^j e^{-y}/j! * psi(j + m),
// truncated once the weighted term drops below tol past the Poisson mode
// (the weights are unimodal in j, so tail bounding is only valid there).
// Switches to a central-moment expansion for y > 700; the two branches agree
// to better than 1e-6 at the switch point.
inline double poisson_digamma_series(double m, double y, double tol = 1e-12) {
  if (!(m > 0.0)) {
    throw std::domain_error("poisson_digamma_series: m must be positive");
  }
  if (y < 0.0) {
    throw std::domain_error("poisson_digamma_series: y must be nonnegative");
  }
  if (y == 0.0) return digamma(m);
  if (y > 700.0) return detail::poisson_digamma_asymptotic(m, y);

  const double log_y = std::log(y);
  double log_w = -y;           // ln of the Poisson weight at j = 0
  double psi_jm = digamma(m);  // psi(j + m), advanced by recurrence
  double sum = 0.0;
  const double j_cap = y + 60.0 * std::sqrt(y + 1.0) + 200.0;
  for (double j = 0.0; j <= j_cap; j += 1.0) {
    const double w = std::exp(log_w);
    const double term = w * psi_jm;
    sum += term;
    if (j > y && std::abs(term) < tol) break;
    log_w += log_y - std::log(j + 1.0);
    psi_jm += 1.0 / (j + m);
  }
  return sum;
}

// Derivative of the series in y: sum_j y^j e^{-y}/j! * 1/(j + m).
inline double poisson_digamma_series_derivative(double m, double y,
                                                double tol = 1e-14) {
  if (!(m > 0.0)) {
    throw std::domain_error(
        "poisson_digamma_series_derivative: m must be positive");
  }
  if (y < 0.0) {
    throw std::domain_error(
        "poisson_digamma_series_derivative: y must be nonnegative");
  }
  if (y == 0.0) return 1.0 / m;
  if (y > 700.0) return detail::poisson_reciprocal_asymptotic(m, y);

  const double log_y = std::log(y);
  double log_w = -y;
  double sum = 0.0;
  const double j_cap = y + 60.0 * std::sqrt(y + 1.0) + 200.0;
  for (double j = 0.0; j <= j_cap; j += 1.0) {
    const double term = std::exp(log_w) / (j + m);
    sum += term;
    if (j > y && term < tol) break;
    log_w += log_y - std::log(j + 1.0);
  }
  return sum;
}

// E[ln y^2] for y ~ N(mu, sigma^2):  ln(2 sigma^2) + series(1/2, phi/2)
// with phi = (mu/sigma)^2.
inline double expected_log_square(double mu, double sigma) {
  if (!(sigma > 0.0)) {
    throw std::domain_error("expected_log_square: sigma must be positive");
  }
  const double z = mu / sigma;
  return std::log(2.0 * sigma * sigma) +
         poisson_digamma_series(0.5, 0.5 * z * z);
}

// The exact reference function G(-phi/2) satisfying
//   series(1/2, phi/2) = -G(-phi/2) - 2 ln 2 - C.
// Computed on demand from the series; no look-up table is kept.
inline double gap_reference(double neg_half_phi) {
  if (neg_half_phi > 0.0) {
    throw std::domain_error("gap_reference: argument must be nonpositive");
  }
  return -poisson_digamma_series(0.5, -neg_half_phi) - 2.0 * kLn2 -
         kEulerGamma;
}

// Closed-form lower bound on E[ln y^2]:  ln(mu^2 + b sigma^2) - C - ln 2.
inline double lower_bound_log_square(double mu, double sigma, double b) {
  if (!(sigma > 0.0)) {
    throw std::domain_error("lower_bound_log_square: sigma must be positive");
  }
  if (b < 0.0 || b > 1.0) {
    throw std::domain_error("lower_bound_log_square: b must lie in [0, 1]");
  }
  const double arg = mu * mu + b * sigma * sigma;
  if (arg <= 0.0) {
    throw std::domain_error(
        "lower_bound_log_square: mu = 0 with b = 0 has no finite bound");
  }
  return std::log(arg) - kEulerGamma - kLn2;
}

// Bound-minus-truth gap  h(phi, b) = ln(phi + b) + G(-phi/2), expressed in
// the signal-to-noise ratio phi = (mu/sigma)^2.
inline double bound_gap(double phi, double b) {
  if (phi < 0.0) {
    throw std::domain_error("bound_gap: phi must be nonnegative");
  }
  if (b < 0.0 || b > 1.0) {
    throw std::domain_error("bound_gap: b must lie in [0, 1]");
  }
  if (phi + b <= 0.0) {
    throw std::domain_error("bound_gap: phi = 0 requires b > 0");
  }
  return std::log(phi + b) + gap_reference(-0.5 * phi);
}

// Gap evaluation grid: the variance of h(phi, .) over the phi grid, one
// entry per candidate b.
struct GapGrid {
  std::vector<double> phi_values;
  std::vector<double> b_values;
  std::vector<double> variances;
};

struct SelectBResult {
  double b_star = 0.0;
  GapGrid grid;
};

// Picks the b whose gap curve has the smallest variance over the phi grid
// (population variance; ties broken toward smaller b).
inline SelectBResult select_b(const std::vector<double>& phi_grid,
                              const std::vector<double>& b_grid) {
  if (phi_grid.empty() || b_grid.empty()) {
    throw std::domain_error("select_b: grids must be nonempty");
  }
  for (std::size_t i = 0; i < phi_grid.size(); ++i) {
    if (!(phi_grid[i] > 0.0)) {
      throw std::domain_error("select_b: phi grid must be positive");
    }
    if (i > 0 && !(phi_grid[i] > phi_grid[i - 1])) {
      throw std::domain_error("select_b: phi grid must be strictly increasing");
    }
  }
  for (std::size_t i = 0; i < b_grid.size(); ++i) {
    if (b_grid[i] < 0.0 || b_grid[i] > 1.0) {
      throw std::domain_error("select_b: b grid must lie in [0, 1]");
    }
    if (i > 0 && !(b_grid[i] > b_grid[i - 1])) {
      throw std::domain_error("select_b: b grid must be strictly increasing");
    }
  }

  // The reference values are shared across all b.
  std::vector<double> ref(phi_grid.size());
  for (std::size_t i = 0; i < phi_grid.size(); ++i) {
    ref[i] = gap_reference(-0.5 * phi_grid[i]);
  }

  SelectBResult out;
  out.grid.phi_values = phi_grid;
  out.grid.b_values = b_grid;
  out.grid.variances.reserve(b_grid.size());
  const double n = static_cast<double>(phi_grid.size());
  double best = std::numeric_limits<double>::infinity();
  for (const double b : b_grid) {
    double mean = 0.0;
    for (std::size_t i = 0; i < phi_grid.size(); ++i) {
      mean += std::log(phi_grid[i] + b) + ref[i];
    }
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < phi_grid.size(); ++i) {
      const double d = std::log(phi_grid[i] + b) + ref[i] - mean;
      var += d * d;
    }
    var /= n;
    out.grid.variances.push_back(var);
    if (var < best) {
      best = var;
      out.b_star = b;
    }
  }
  return out;
}

}  // namespace panelgp
