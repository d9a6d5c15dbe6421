#include <catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/evaluate.hpp"
#include "panelgp/objective.hpp"

using namespace panelgp;

namespace {

SparseVariationalGP example_gp(double mu_scale = 1.0, double chol_scale = 0.2) {
  Rng rng(8080);
  const std::vector<double> pseudo = linspace(0.0, 10.0, 7);
  Eigen::VectorXd mu(7);
  for (int i = 0; i < 7; ++i) mu[i] = mu_scale * (1.0 + 0.4 * rng.normal());
  Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(7, 7);
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < i; ++j) chol(i, j) = 0.1 * chol_scale * rng.normal();
    chol(i, i) = chol_scale * (0.5 + 0.5 * rng.uniform());
  }
  return SparseVariationalGP(pseudo, mu, chol, ArdKernel(1.3, 1.8));
}

PanelDataset example_panel(int subjects, std::uint64_t seed) {
  PanelDataset data;
  const std::vector<double> theta(5, 1.0);
  for (int k = 0; k < subjects; ++k) {
    const auto events =
        sample_ipp(IntensitySpec::constant(1.5), Interval(0.0, 10.0),
                   seed + 2 * static_cast<std::uint64_t>(k));
    data.subjects.push_back(censor_to_panel(
        events, Interval(0.0, 10.0), 5, theta,
        seed + 2 * static_cast<std::uint64_t>(k) + 1, "s" + std::to_string(k)));
  }
  return data;
}

}  // namespace

TEST_CASE("mise closed cases", "[eval]") {
  const auto same = [](double x) { return 1.0 + std::sin(x); };
  CHECK(mise(same, same, Interval(0.0, 6.0), 101) == 0.0);

  const auto est = [](double) { return 3.2; };
  const auto truth = [](double) { return 2.7; };
  CHECK(mise(est, truth, Interval(0.0, 8.0), 11) ==
        Catch::Approx(0.25 * 8.0).margin(1e-12));

  // Square wave vs its midline: the squared error is constant 6.25.
  const auto flat = [](double) { return 4.5; };
  CHECK(mise([](double x) { return square_wave_h1(x); }, flat,
             Interval(0.0, 60.0), 6001) == Catch::Approx(375.0).margin(1e-3));

  CHECK(mise(est, truth, Interval(0.0, 8.0), 11) ==
        Catch::Approx(mise(truth, est, Interval(0.0, 8.0), 11)).margin(1e-12));
  CHECK_THROWS_AS(mise(est, truth, Interval(0.0, 1.0), 4), std::domain_error);
}

TEST_CASE("single-path test likelihood equals the plug-in of that path",
          "[eval]") {
  const SparseVariationalGP gp = example_gp();
  const PanelDataset test = example_panel(3, 900);
  const Interval domain(0.0, 10.0);
  EvalSettings settings;
  settings.u_samples = 1;
  settings.path_grid = 401;
  settings.quad_points = 201;
  settings.seed = 31;
  const EvalReport report = test_log_likelihood(gp, test, domain, settings);

  // Rebuild the single path and integrate it the same way.
  const std::vector<double> grid = linspace(0.0, 10.0, 401);
  const Eigen::MatrixXd path = gp.sample_function(grid, 31, 1);
  const auto interp = [&](double x) {
    const double pos = x * 40.0;
    const auto i = static_cast<Eigen::Index>(std::min(pos, 399.0));
    const double t = pos - static_cast<double>(i);
    const double f = path(i, 0) + t * (path(i + 1, 0) - path(i, 0));
    return f * f;
  };
  double expected = 0.0;
  for (const auto& subject : test.subjects) {
    expected -= simpson(interp, subject.window.start, subject.window.end, 201);
    for (const auto& rec : subject.records) {
      if (rec.count == 0) continue;
      expected += rec.count * std::log(simpson(interp, rec.interval.start,
                                               rec.interval.end, 201));
    }
  }
  CHECK(report.test_ll == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("empty test set scores zero", "[eval]") {
  const SparseVariationalGP gp = example_gp();
  const EvalReport report =
      test_log_likelihood(gp, PanelDataset{}, Interval(0.0, 10.0), {});
  CHECK(report.test_ll == 0.0);
  CHECK(report.per_subject_ll.empty());
}

TEST_CASE("near-deterministic q matches the mean-path plug-in", "[eval]") {
  // Dense-enough pseudo inputs with a long lengthscale make the
  // conditional-prior variance negligible, so sampled paths collapse onto
  // the mean path up to the sampling-jitter floor. Few counts keep the
  // amplification of that floor well inside the margin.
  const std::vector<double> pseudo = linspace(0.0, 10.0, 21);
  Eigen::VectorXd mu(21);
  for (int i = 0; i < 21; ++i) mu[i] = 1.2 + 0.2 * std::sin(1.8 * i);
  const Eigen::MatrixXd chol = 1e-6 * Eigen::MatrixXd::Identity(21, 21);
  const SparseVariationalGP gp(pseudo, mu, chol, ArdKernel(1.0, 2.0));

  PanelDataset test;
  {
    PanelSubject s;
    s.id = "a";
    s.window = Interval(0.0, 10.0);
    s.records.push_back({Interval(0.0, 4.0), 1});
    s.records.push_back({Interval(4.0, 7.0), 2});
    s.records.push_back({Interval(7.0, 10.0), 0});
    test.subjects.push_back(s);
  }
  EvalSettings settings;
  settings.u_samples = 8;
  settings.path_grid = 2001;
  settings.quad_points = 501;
  const EvalReport report =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings);

  // Plug-in of the mean path in the estimator's own representation: the
  // posterior mean tabulated on the path grid, squared via interpolation.
  const std::vector<double> grid = linspace(0.0, 10.0, 2001);
  std::vector<double> mean_values(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    mean_values[i] = gp.posterior_moments_at(grid[i]).mean;
  }
  detail::EvenGridInterpolant mean_path{0.0, 10.0 / 2000.0, mean_values.data(),
                                        static_cast<Eigen::Index>(grid.size())};
  const auto mean_sq = [&](double x) {
    const double v = mean_path(x);
    return v * v;
  };
  double expected = 0.0;
  for (const auto& subject : test.subjects) {
    expected -=
        simpson(mean_sq, subject.window.start, subject.window.end, 501);
    for (const auto& rec : subject.records) {
      if (rec.count == 0) continue;
      expected += rec.count * std::log(simpson(mean_sq, rec.interval.start,
                                               rec.interval.end, 501));
    }
  }
  CHECK(report.test_ll == Catch::Approx(expected).margin(1e-4));
}

TEST_CASE("test likelihood is invariant to subject order", "[eval]") {
  const SparseVariationalGP gp = example_gp();
  PanelDataset test = example_panel(5, 921);
  const EvalSettings settings{16, 401, 101, 5};
  const EvalReport forward =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings);
  std::reverse(test.subjects.begin(), test.subjects.end());
  const EvalReport backward =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings);
  CHECK(forward.test_ll == Catch::Approx(backward.test_ll).margin(1e-12));
  for (const auto& [id, ll] : forward.per_subject_ll) {
    bool found = false;
    for (const auto& [id2, ll2] : backward.per_subject_ll) {
      if (id2 == id) {
        CHECK(ll2 == Catch::Approx(ll).margin(1e-12));
        found = true;
      }
    }
    CHECK(found);
  }
}

TEST_CASE("per-subject contributions sum to the total", "[eval]") {
  const SparseVariationalGP gp = example_gp();
  const PanelDataset test = example_panel(6, 931);
  const EvalSettings settings{32, 401, 101, 6};
  const EvalReport report =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings);
  double sum = 0.0;
  for (const auto& [id, ll] : report.per_subject_ll) sum += ll;
  CHECK(report.test_ll == Catch::Approx(sum).margin(1e-9));
  CHECK(report.per_subject_ll.size() == test.subjects.size());
}

TEST_CASE("estimates stabilize as U grows", "[eval]") {
  const SparseVariationalGP gp = example_gp(1.0, 0.4);
  const PanelDataset test = example_panel(4, 941);
  const Interval domain(0.0, 10.0);

  EvalSettings base{50, 801, 201, 77};
  const EvalReport at_50 = test_log_likelihood(gp, test, domain, base);
  EvalSettings big = base;
  big.u_samples = 500;
  const EvalReport at_500 = test_log_likelihood(gp, test, domain, big);

  // Jackknife standard error of the U = 50 estimate over paths: recompute
  // per-subject log-sum-exp leaving one path out.
  const std::vector<double> grid =
      linspace(domain.start, domain.end, static_cast<std::size_t>(base.path_grid));
  const Eigen::MatrixXd paths = gp.sample_function(grid, base.seed, base.u_samples);
  const double step = domain.length() / (base.path_grid - 1);
  std::vector<std::vector<double>> subject_ll(test.subjects.size());
  for (int u = 0; u < base.u_samples; ++u) {
    detail::EvenGridInterpolant f{domain.start, step, paths.col(u).data(),
                                  static_cast<Eigen::Index>(grid.size())};
    const auto sq = [&](double x) {
      const double v = f(x);
      return v * v;
    };
    for (std::size_t k = 0; k < test.subjects.size(); ++k) {
      const auto& subject = test.subjects[k];
      double ll = -simpson(sq, subject.window.start, subject.window.end,
                           base.quad_points);
      for (const auto& rec : subject.records) {
        if (rec.count == 0) continue;
        ll += rec.count * std::log(simpson(sq, rec.interval.start,
                                           rec.interval.end, base.quad_points));
      }
      subject_ll[k].push_back(ll);
    }
  }
  const int u_n = base.u_samples;
  std::vector<double> loo_totals(static_cast<std::size_t>(u_n), 0.0);
  for (std::size_t k = 0; k < test.subjects.size(); ++k) {
    const auto& lls = subject_ll[k];
    const double m = *std::max_element(lls.begin(), lls.end());
    double all = 0.0;
    for (const double v : lls) all += std::exp(v - m);
    for (int u = 0; u < u_n; ++u) {
      const double loo = all - std::exp(lls[static_cast<std::size_t>(u)] - m);
      loo_totals[static_cast<std::size_t>(u)] +=
          m + std::log(loo / (u_n - 1));
    }
  }
  double mean_loo = 0.0;
  for (const double v : loo_totals) mean_loo += v;
  mean_loo /= u_n;
  double var_loo = 0.0;
  for (const double v : loo_totals) var_loo += (v - mean_loo) * (v - mean_loo);
  const double se_jack = std::sqrt((u_n - 1.0) / u_n * var_loo);

  INFO("U=50: " << at_50.test_ll << " U=500: " << at_500.test_ll
                << " jackknife se: " << se_jack);
  CHECK(std::abs(at_500.test_ll - at_50.test_ll) < 3.0 * se_jack);
}

TEST_CASE("weighted evaluation rescales subjects", "[eval]") {
  const SparseVariationalGP gp = example_gp();
  PanelDataset test;
  {
    PanelSubject s;
    s.id = "heavy";
    s.window = Interval(0.0, 10.0);
    s.records.push_back({Interval(0.0, 5.0), 30});
    s.records.push_back({Interval(5.0, 10.0), 34});
    test.subjects.push_back(s);
  }
  const EvalSettings settings{16, 401, 101, 9};
  const EvalReport plain =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings, false);
  const EvalReport weighted =
      test_log_likelihood(gp, test, Interval(0.0, 10.0), settings, true);
  // With far more counts than the fitted intensity explains, the plug-in
  // weight must help.
  CHECK(weighted.test_ll > plain.test_ll);
}
