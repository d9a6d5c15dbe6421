#pragma once

// Composite Simpson's rule plus the grid helpers shared by the generators,
// metrics and CLI defaults.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace panelgp {

// Simpson weights require an odd number of points (>= 3).
inline void check_simpson_points(int n) {
  if (n < 3 || n % 2 == 0) {
    throw std::domain_error("simpson: need an odd number of points >= 3");
  }
}

template <typename F>
double simpson(F&& f, double a, double b, int n_points) {
  check_simpson_points(n_points);
  if (a == b) return 0.0;
  const double h = (b - a) / (n_points - 1);
  double sum = f(a) + f(b);
  for (int i = 1; i + 1 < n_points; ++i) {
    sum += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return sum * h / 3.0;
}

// Simpson over already-sampled values on an evenly spaced grid.
inline double simpson_sampled(const std::vector<double>& values, double a,
                              double b) {
  const int n = static_cast<int>(values.size());
  check_simpson_points(n);
  if (a == b) return 0.0;
  const double h = (b - a) / (n - 1);
  double sum = values.front() + values.back();
  for (int i = 1; i + 1 < n; ++i) {
    sum += values[i] * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return sum * h / 3.0;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  if (n == 0) return {};
  if (n == 1) return {lo};
  std::vector<double> out(n);
  const double step = (hi - lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = lo + step * static_cast<double>(i);
  }
  out.back() = hi;
  return out;
}

inline std::vector<double> logspace(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0) || !(hi > 0.0)) {
    throw std::domain_error("logspace: endpoints must be positive");
  }
  std::vector<double> out = linspace(std::log(lo), std::log(hi), n);
  for (double& v : out) v = std::exp(v);
  if (!out.empty()) {
    out.front() = lo;
    out.back() = hi;
  }
  return out;
}

}  // namespace panelgp
