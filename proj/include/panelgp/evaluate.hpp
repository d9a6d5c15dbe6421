#pragma once

// Evaluation metrics: integrated squared error of an intensity estimate and
// the Monte-Carlo test log-likelihood (sampled paths, log-sum-exp over
// paths, factorial constants omitted).

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/quadrature.hpp"
#include "panelgp/sparse_gp.hpp"
#include "panelgp/special_functions.hpp"

namespace panelgp {

struct EvalSettings {
  int u_samples = 50;      // posterior paths
  int path_grid = 3001;    // evenly spaced path evaluation points
  int quad_points = 501;   // Simpson points per integral
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::optional<double> mise;
  double test_ll = 0.0;  // factorial constants omitted
  std::vector<std::pair<std::string, double>> per_subject_ll;
  double wall_time_s = 0.0;
  EvalSettings settings;
};

// Simpson value of int (estimated - truth)^2 over the domain.
template <typename FEst, typename FTrue>
double mise(FEst&& estimated, FTrue&& truth, const Interval& domain,
            int quad_points) {
  return simpson(
      [&](double x) {
        const double d = estimated(x) - truth(x);
        return d * d;
      },
      domain.start, domain.end, quad_points);
}

namespace detail {

// O(1) linear interpolation on an evenly spaced grid.
struct EvenGridInterpolant {
  double lo = 0.0;
  double step = 1.0;
  const double* values = nullptr;
  Eigen::Index n = 0;

  double operator()(double x) const {
    if (x <= lo) return values[0];
    const double pos = (x - lo) / step;
    const Eigen::Index i = static_cast<Eigen::Index>(pos);
    if (i >= n - 1) return values[n - 1];
    const double t = pos - static_cast<double>(i);
    return values[i] + t * (values[i + 1] - values[i]);
  }
};

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (const double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

// Monte-Carlo test log-likelihood. Paths of f are drawn jointly on the
// evenly spaced grid over `domain`, squared via linear interpolation of f,
// and every integral uses Simpson's rule. Per-subject values come from the
// same paths (log-sum-exp over paths per subject); the reported total is
// their sum. With nonempty `weight_floor`-style subject weights disabled,
// pass `weighted = false`; the weighted variant plugs in the closed-form
// per-subject weight computed from the posterior mean intensity.
inline EvalReport test_log_likelihood(const SparseVariationalGP& gp,
                                      const PanelDataset& test,
                                      const Interval& domain,
                                      const EvalSettings& settings,
                                      bool weighted = false,
                                      double weight_floor = 1e-6) {
  if (settings.u_samples < 1) {
    throw std::domain_error("test_log_likelihood: need U >= 1");
  }
  check_simpson_points(settings.quad_points);
  if (settings.path_grid < 2) {
    throw std::domain_error("test_log_likelihood: need path_grid >= 2");
  }
  const auto t_start = std::chrono::steady_clock::now();

  EvalReport report;
  report.settings = settings;
  if (test.empty()) {
    report.test_ll = 0.0;
    return report;
  }

  // Plug-in subject weights for the random-effects variant: observed total
  // over expected total under the posterior mean intensity.
  std::vector<double> weights(test.subjects.size(), 1.0);
  if (weighted) {
    for (std::size_t k = 0; k < test.subjects.size(); ++k) {
      const double expected =
          gp.integrated_second_moment(test.subjects[k].window);
      weights[k] = std::max(
          weight_floor,
          static_cast<double>(test.subjects[k].total_count()) / expected);
    }
  }

  const std::vector<double> grid =
      linspace(domain.start, domain.end,
               static_cast<std::size_t>(settings.path_grid));
  const Eigen::MatrixXd paths =
      gp.sample_function(grid, settings.seed, settings.u_samples);
  const double grid_step = (domain.end - domain.start) /
                           static_cast<double>(settings.path_grid - 1);

  // Windows repeat across subjects; integrate each unique window once per
  // path.
  std::map<std::pair<double, double>, double> window_integral;

  std::vector<std::vector<double>> subject_path_ll(
      test.subjects.size(),
      std::vector<double>(static_cast<std::size_t>(settings.u_samples)));

  for (int u = 0; u < settings.u_samples; ++u) {
    detail::EvenGridInterpolant f{domain.start, grid_step,
                                  paths.col(u).data(),
                                  static_cast<Eigen::Index>(grid.size())};
    const auto squared = [&](double x) {
      const double v = f(x);
      return v * v;
    };
    window_integral.clear();
    for (std::size_t k = 0; k < test.subjects.size(); ++k) {
      const auto& subject = test.subjects[k];
      const auto wkey =
          std::make_pair(subject.window.start, subject.window.end);
      auto it = window_integral.find(wkey);
      if (it == window_integral.end()) {
        it = window_integral
                 .emplace(wkey, simpson(squared, subject.window.start,
                                        subject.window.end,
                                        settings.quad_points))
                 .first;
      }
      double ll = -weights[k] * it->second;
      for (const auto& rec : subject.records) {
        if (rec.count == 0) continue;
        const double rate = weights[k] * simpson(squared, rec.interval.start,
                                                 rec.interval.end,
                                                 settings.quad_points);
        if (rate <= 0.0) {
          throw FactorizationError(
              "test_log_likelihood: nonpositive sampled rate");
        }
        ll += static_cast<double>(rec.count) * std::log(rate);
      }
      subject_path_ll[k][static_cast<std::size_t>(u)] = ll;
    }
  }

  const double log_u = std::log(static_cast<double>(settings.u_samples));
  for (std::size_t k = 0; k < test.subjects.size(); ++k) {
    const double ll = detail::log_sum_exp(subject_path_ll[k]) - log_u;
    report.per_subject_ll.emplace_back(test.subjects[k].id, ll);
    report.test_ll += ll;
  }
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return report;
}

}  // namespace panelgp
