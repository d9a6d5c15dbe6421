#pragma once

// Variational EM drivers. Each vEM iteration alternates
//   E: maximize the bound over the variational parameters (mu, L) with the
//      diagonal of L kept positive by projection,
//   M: maximize over the kernel hyperparameters in log space
// with a limited-memory projected quasi-Newton inner optimizer (Armijo
// backtracking along the projected arc). The weighted variant adds a
// closed-form per-subject weight update at the start of each M step.
//
// A piecewise-constant maximum-likelihood baseline (EM with multiplicative
// updates) and posterior intensity prediction with credible bands live here
// as well.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/objective.hpp"
#include "panelgp/sparse_gp.hpp"

namespace panelgp {

struct FitConfig {
  int n_pseudo = 20;
  double b = 0.3;
  int max_vem_iters = 100;
  int inner_opt_iters = 50;
  double rel_tol = 1e-6;
  double jitter = 1e-6;
  std::uint64_t seed = 0;
  double weight_floor = 1e-6;  // weighted variant only

  void validate() const {
    if (n_pseudo < 2) throw std::domain_error("FitConfig: n_pseudo must be >= 2");
    if (b < 0.0 || b > 1.0) throw std::domain_error("FitConfig: b must lie in [0, 1]");
    if (!(rel_tol > 0.0)) throw std::domain_error("FitConfig: rel_tol must be positive");
    if (!(jitter > 0.0)) throw std::domain_error("FitConfig: jitter must be positive");
    if (!(weight_floor > 0.0)) {
      throw std::domain_error("FitConfig: weight_floor must be positive");
    }
    if (max_vem_iters < 1 || inner_opt_iters < 1) {
      throw std::domain_error("FitConfig: iteration caps must be >= 1");
    }
  }
};

struct FitResult {
  SparseVariationalGP gp;
  std::vector<double> bound_trajectory;  // total bound per vEM iteration
  std::vector<std::pair<double, double>> hyper_trajectory;  // (gamma, a)
  std::vector<double> weights;  // per subject, empty unless weighted
  double wall_time_s = 0.0;
  bool converged = false;
  BoundValue final_bound;
};

struct OptimizerDivergence : std::runtime_error {
  OptimizerDivergence(const std::string& what, int iteration)
      : std::runtime_error(what + " (vEM iteration " +
                           std::to_string(iteration) + ")"),
        iteration(iteration) {}
  int iteration;
};

// ---------------------------------------------------------------------------
// Projected L-BFGS (minimization, lower bounds only)

namespace detail {

struct LbfgsOutcome {
  Eigen::VectorXd x;
  double f = 0.0;
  int iterations = 0;
};

// eval(x, grad_out) -> f; grad_out may be null for value-only probes.
// Trial points that throw or return non-finite values are treated as
// infeasible and absorbed by the backtracking.
template <typename Eval>
LbfgsOutcome projected_lbfgs(Eval&& eval, Eigen::VectorXd x,
                             const Eigen::VectorXd& lower, int max_iters,
                             double grad_tol = 1e-7) {
  const auto project = [&](Eigen::VectorXd v) {
    return v.cwiseMax(lower).eval();
  };
  const auto safe_value = [&](const Eigen::VectorXd& p) {
    try {
      const double f = eval(p, nullptr);
      return std::isfinite(f) ? f : std::numeric_limits<double>::infinity();
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  x = project(std::move(x));
  const Eigen::Index dim = x.size();
  Eigen::VectorXd g(dim);
  double f = eval(x, &g);

  constexpr int memory = 10;
  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho_hist;

  LbfgsOutcome out;
  int it = 0;
  for (; it < max_iters; ++it) {
    // Projected-gradient stationarity measure.
    const Eigen::VectorXd pg = x - project(x - g);
    if (pg.lpNorm<Eigen::Infinity>() < grad_tol) break;

    // Two-loop recursion.
    Eigen::VectorXd d = -g;
    const int h = static_cast<int>(s_hist.size());
    std::vector<double> alpha(static_cast<std::size_t>(h));
    for (int i = h - 1; i >= 0; --i) {
      alpha[static_cast<std::size_t>(i)] =
          rho_hist[static_cast<std::size_t>(i)] *
          s_hist[static_cast<std::size_t>(i)].dot(d);
      d -= alpha[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
    }
    if (h > 0) {
      const auto& sl = s_hist.back();
      const auto& yl = y_hist.back();
      d *= sl.dot(yl) / yl.squaredNorm();
    }
    for (int i = 0; i < h; ++i) {
      const double beta = rho_hist[static_cast<std::size_t>(i)] *
                          y_hist[static_cast<std::size_t>(i)].dot(d);
      d += (alpha[static_cast<std::size_t>(i)] - beta) *
           s_hist[static_cast<std::size_t>(i)];
    }
    if (!d.allFinite() || d.dot(g) >= 0.0) {
      d = -g;  // fall back to steepest descent
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    // Armijo backtracking along the projected arc.
    double step = 1.0;
    bool accepted = false;
    Eigen::VectorXd x_new;
    double f_new = 0.0;
    for (int bt = 0; bt < 45; ++bt) {
      x_new = project(x + step * d);
      const Eigen::VectorXd delta = x_new - x;
      if (delta.lpNorm<Eigen::Infinity>() == 0.0) break;
      f_new = safe_value(x_new);
      if (f_new <= f + 1e-4 * g.dot(delta)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    Eigen::VectorXd g_new(dim);
    f_new = eval(x_new, &g_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    x = std::move(x_new);
    g = std::move(g_new);
    const double improvement = f - f_new;
    f = f_new;
    if (improvement <= 1e-14 * (std::abs(f) + 1.0)) {
      ++it;
      break;
    }
  }
  out.x = std::move(x);
  out.f = f;
  out.iterations = it;
  return out;
}

// Variational parameter packing: [mu; vech(L)] with the diagonal of L
// bounded below at 1e-8.
inline Eigen::Index vech_size(Eigen::Index r) { return r * (r + 1) / 2; }

inline void pack_variational(const Eigen::VectorXd& mu, const Eigen::MatrixXd& l,
                             Eigen::VectorXd& out) {
  const Eigen::Index r = mu.size();
  out.resize(r + vech_size(r));
  out.head(r) = mu;
  Eigen::Index idx = r;
  for (Eigen::Index j = 0; j < r; ++j) {
    for (Eigen::Index i = j; i < r; ++i) {
      out[idx++] = l(i, j);
    }
  }
}

inline void unpack_variational(const Eigen::VectorXd& x, Eigen::Index r,
                               Eigen::VectorXd& mu, Eigen::MatrixXd& l) {
  mu = x.head(r);
  l = Eigen::MatrixXd::Zero(r, r);
  Eigen::Index idx = r;
  for (Eigen::Index j = 0; j < r; ++j) {
    for (Eigen::Index i = j; i < r; ++i) {
      l(i, j) = x[idx++];
    }
  }
}

inline void pack_variational_gradient(const BoundGradient& grad,
                                      Eigen::VectorXd& out) {
  const Eigen::Index r = grad.d_mu.size();
  out.resize(r + vech_size(r));
  out.head(r) = grad.d_mu;
  Eigen::Index idx = r;
  for (Eigen::Index j = 0; j < r; ++j) {
    for (Eigen::Index i = j; i < r; ++i) {
      out[idx++] = grad.d_chol_sigma(i, j);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// vEM driver shared by the panel and recurrent objectives

namespace detail {

struct VemState {
  std::vector<double> pseudo;
  Eigen::VectorXd mu;
  Eigen::MatrixXd chol;
  double gamma = 1.0;
  double lengthscale = 1.0;
};

inline VemState initialize_state(const Interval& hull, double rate_estimate,
                                 const FitConfig& cfg) {
  if (!(hull.length() > 0.0)) {
    throw std::domain_error("fit: observation windows have zero total extent");
  }
  VemState st;
  st.pseudo = linspace(hull.start, hull.end,
                       static_cast<std::size_t>(cfg.n_pseudo));
  st.gamma = std::max(rate_estimate, 1e-3);
  st.lengthscale = hull.length() / 10.0;
  const Eigen::Index r = cfg.n_pseudo;
  st.mu = Eigen::VectorXd::Constant(r, std::sqrt(st.gamma));
  Eigen::MatrixXd kuu =
      gram(ArdKernel(st.gamma, st.lengthscale), st.pseudo, st.pseudo);
  st.chol = 0.1 * cholesky_with_escalation(kuu, cfg.jitter);
  return st;
}

inline SparseVariationalGP make_gp(const VemState& st, double jitter) {
  return SparseVariationalGP(st.pseudo, st.mu, st.chol,
                             ArdKernel(st.gamma, st.lengthscale), jitter);
}

// Objective must expose value(gp) and value_and_gradient(gp, select).
// weight_update, when set, runs at the start of every M step.
template <typename Objective>
FitResult run_vem(Objective& objective, const Interval& hull,
                  double rate_estimate, const FitConfig& cfg,
                  const std::function<void(const SparseVariationalGP&)>&
                      weight_update = {}) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  VemState st = initialize_state(hull, rate_estimate, cfg);
  const Eigen::Index r = cfg.n_pseudo;

  Eigen::VectorXd var_lower(r + vech_size(r));
  var_lower.setConstant(-std::numeric_limits<double>::infinity());
  {
    Eigen::Index idx = r;
    for (Eigen::Index j = 0; j < r; ++j) {
      var_lower[idx] = 1e-8;  // diagonal entry of column j
      idx += r - j;
    }
  }
  const Eigen::VectorXd hyper_lower = Eigen::VectorXd::Constant(
      2, -std::numeric_limits<double>::infinity());

  FitResult result{make_gp(st, cfg.jitter), {}, {}, {}, 0.0, false, {}};
  BoundValue bound = objective.value(result.gp);
  if (!std::isfinite(bound.total)) {
    throw OptimizerDivergence("fit: non-finite bound at initialization", 0);
  }
  result.bound_trajectory.push_back(bound.total);
  result.hyper_trajectory.emplace_back(st.gamma, st.lengthscale);

  for (int iter = 1; iter <= cfg.max_vem_iters; ++iter) {
    // E step: variational parameters.
    {
      auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad_out) {
        VemState trial = st;
        unpack_variational(x, r, trial.mu, trial.chol);
        const SparseVariationalGP gp = make_gp(trial, cfg.jitter);
        if (!grad_out) {
          const BoundValue v = objective.value(gp);
          return -(v.data_term - v.integral_term - v.kl_term);
        }
        auto [v, g] = objective.value_and_gradient(gp, {true, false});
        Eigen::VectorXd packed;
        pack_variational_gradient(g, packed);
        *grad_out = -packed;
        return -(v.data_term - v.integral_term - v.kl_term);
      };
      Eigen::VectorXd x0;
      pack_variational(st.mu, st.chol, x0);
      const LbfgsOutcome res = projected_lbfgs(eval, std::move(x0), var_lower,
                                               cfg.inner_opt_iters);
      unpack_variational(res.x, r, st.mu, st.chol);
    }

    // M step: weights (when enabled), then hyperparameters in log space.
    if (weight_update) {
      weight_update(make_gp(st, cfg.jitter));
    }
    {
      auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad_out) {
        VemState trial = st;
        trial.gamma = std::exp(x[0]);
        trial.lengthscale = std::exp(x[1]);
        const SparseVariationalGP gp = make_gp(trial, cfg.jitter);
        if (!grad_out) {
          const BoundValue v = objective.value(gp);
          return -(v.data_term - v.integral_term - v.kl_term);
        }
        auto [v, g] = objective.value_and_gradient(gp, {false, true});
        grad_out->resize(2);
        (*grad_out)[0] = -g.d_log_variance;
        (*grad_out)[1] = -g.d_log_lengthscale;
        return -(v.data_term - v.integral_term - v.kl_term);
      };
      Eigen::VectorXd x0(2);
      x0 << std::log(st.gamma), std::log(st.lengthscale);
      const LbfgsOutcome res =
          projected_lbfgs(eval, std::move(x0), hyper_lower, cfg.inner_opt_iters);
      st.gamma = std::exp(res.x[0]);
      st.lengthscale = std::exp(res.x[1]);
    }

    result.gp = make_gp(st, cfg.jitter);
    const BoundValue new_bound = objective.value(result.gp);
    if (!std::isfinite(new_bound.total)) {
      throw OptimizerDivergence("fit: non-finite bound", iter);
    }
    const double prev = result.bound_trajectory.back();
    result.bound_trajectory.push_back(new_bound.total);
    result.hyper_trajectory.emplace_back(st.gamma, st.lengthscale);
    bound = new_bound;
    if (std::abs(new_bound.total - prev) <=
        cfg.rel_tol * std::max(1.0, std::abs(prev))) {
      result.converged = true;
      break;
    }
  }

  result.final_bound = bound;
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public fit entry points

inline void validate_panel_for_fit(const PanelDataset& data) {
  if (data.empty()) throw std::domain_error("fit: dataset is empty");
  for (const auto& s : data.subjects) {
    for (const auto& rec : s.records) {
      if (rec.interval.length() <= 0.0 && rec.count > 0) {
        throw std::domain_error("fit: subject '" + s.id +
                                "' has a zero-length interval with events");
      }
    }
  }
}

inline FitResult fit_gp4c(const PanelDataset& data, const FitConfig& cfg) {
  validate_panel_for_fit(data);
  PanelObjective objective(build_panel_terms(data), BoundConfig{cfg.b, true});
  const double rate = data.total_observed_length() > 0.0
                          ? static_cast<double>(data.total_count()) /
                                data.total_observed_length()
                          : 0.0;
  return detail::run_vem(objective, data.hull(), rate, cfg);
}

inline FitResult fit_gp4cw(const PanelDataset& data, const FitConfig& cfg) {
  validate_panel_for_fit(data);
  PanelObjective objective(build_panel_terms(data), BoundConfig{cfg.b, true});
  std::vector<double> weights(data.subjects.size(), 1.0);
  objective.set_weights(weights);

  std::vector<long> subject_counts(data.subjects.size());
  for (std::size_t k = 0; k < data.subjects.size(); ++k) {
    subject_counts[k] = data.subjects[k].total_count();
  }
  auto update = [&](const SparseVariationalGP& gp) {
    const std::vector<double> integrals = objective.subject_integrals(gp);
    std::vector<double> w(integrals.size());
    for (std::size_t k = 0; k < integrals.size(); ++k) {
      w[k] = std::max(cfg.weight_floor,
                      static_cast<double>(subject_counts[k]) / integrals[k]);
    }
    objective.set_weights(w);
  };
  const double rate = data.total_observed_length() > 0.0
                          ? static_cast<double>(data.total_count()) /
                                data.total_observed_length()
                          : 0.0;
  FitResult result = detail::run_vem(objective, data.hull(), rate, cfg, update);
  result.weights = objective.weights();
  return result;
}

inline FitResult fit_gp3(const RecurrentDataset& data, const FitConfig& cfg) {
  if (data.empty()) throw std::domain_error("fit: dataset is empty");
  RecurrentObjective objective(build_recurrent_terms(data));
  double total_len = 0.0;
  double total_events = 0.0;
  for (const auto& s : data.subjects) {
    total_len += s.window.length();
    total_events += static_cast<double>(s.timestamps.size());
  }
  const double rate = total_len > 0.0 ? total_events / total_len : 0.0;
  return detail::run_vem(objective, data.hull(), rate, cfg);
}

// ---------------------------------------------------------------------------
// Piecewise-constant maximum-likelihood baseline

struct PiecewiseConstantFit {
  std::vector<double> edges;  // n_bins + 1
  std::vector<double> rates;  // n_bins
  std::vector<double> loglik_trajectory;

  double operator()(double x) const {
    if (x <= edges.front()) return rates.front();
    if (x >= edges.back()) return rates.back();
    const auto it = std::upper_bound(edges.begin(), edges.end(), x);
    const std::size_t bin =
        std::min(rates.size() - 1,
                 static_cast<std::size_t>(it - edges.begin()) - 1);
    return rates[bin];
  }
};

// EM over bin rates: the complete-data counts allocate each interval's
// events to bins proportionally to lambda_b * overlap, and the M step is the
// decoupled Poisson MLE. The likelihood is nondecreasing per iteration.
inline PiecewiseConstantFit fit_piecewise_constant(const PanelDataset& data,
                                                   int n_bins, int max_iters) {
  if (n_bins < 1) throw std::domain_error("fit_piecewise_constant: n_bins >= 1");
  validate_panel_for_fit(data);
  const Interval hull = data.hull();
  PiecewiseConstantFit fit;
  fit.edges = linspace(hull.start, hull.end,
                       static_cast<std::size_t>(n_bins) + 1);

  struct Cell {
    long count;
    std::size_t first_bin;
    std::vector<double> overlap;  // per bin from first_bin
  };
  std::vector<Cell> cells;
  std::vector<double> exposure(static_cast<std::size_t>(n_bins), 0.0);
  const double width = hull.length() / n_bins;
  for (const auto& subject : data.subjects) {
    for (const auto& rec : subject.records) {
      Cell cell;
      cell.count = rec.count;
      const double lo = rec.interval.start, hi = rec.interval.end;
      std::size_t b0 = static_cast<std::size_t>(
          std::clamp(static_cast<long>((lo - hull.start) / width), 0L,
                     static_cast<long>(n_bins - 1)));
      cell.first_bin = b0;
      for (std::size_t b = b0; b < static_cast<std::size_t>(n_bins); ++b) {
        const double blo = fit.edges[b], bhi = fit.edges[b + 1];
        const double ov = std::max(0.0, std::min(hi, bhi) - std::max(lo, blo));
        if (ov <= 0.0 && b > b0) break;
        cell.overlap.push_back(ov);
        exposure[b] += ov;
      }
      cells.push_back(std::move(cell));
    }
  }

  const double total_len = data.total_observed_length();
  const double init =
      total_len > 0.0 ? static_cast<double>(data.total_count()) / total_len : 0.0;
  fit.rates.assign(static_cast<std::size_t>(n_bins), std::max(init, 1e-12));

  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<double> allocated(static_cast<std::size_t>(n_bins), 0.0);
    double loglik = 0.0;
    for (const auto& cell : cells) {
      double rate = 0.0;
      for (std::size_t j = 0; j < cell.overlap.size(); ++j) {
        rate += fit.rates[cell.first_bin + j] * cell.overlap[j];
      }
      if (rate > 0.0) {
        loglik += static_cast<double>(cell.count) * std::log(rate) - rate;
      } else if (cell.count > 0) {
        throw FactorizationError(
            "fit_piecewise_constant: zero rate under positive count");
      }
      if (cell.count > 0) {
        for (std::size_t j = 0; j < cell.overlap.size(); ++j) {
          allocated[cell.first_bin + j] += static_cast<double>(cell.count) *
                                           fit.rates[cell.first_bin + j] *
                                           cell.overlap[j] / rate;
        }
      }
    }
    fit.loglik_trajectory.push_back(loglik);
    for (std::size_t b = 0; b < fit.rates.size(); ++b) {
      fit.rates[b] = exposure[b] > 0.0 ? allocated[b] / exposure[b] : 0.0;
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Posterior intensity prediction

struct IntensityCurve {
  std::vector<double> x;
  std::vector<double> mean;   // E_q[f^2]
  std::vector<double> lower;  // credible band
  std::vector<double> upper;
};

inline IntensityCurve predict_intensity(const SparseVariationalGP& gp,
                                        const std::vector<double>& grid,
                                        double credible_mass, int mc_samples,
                                        std::uint64_t seed,
                                        double weight = 1.0) {
  if (!(credible_mass > 0.0 && credible_mass < 1.0)) {
    throw std::domain_error("predict_intensity: credible mass must be in (0,1)");
  }
  if (mc_samples < 2) {
    throw std::domain_error("predict_intensity: need at least 2 samples");
  }
  IntensityCurve curve;
  curve.x = grid;
  curve.mean.reserve(grid.size());
  for (const double x : grid) {
    const PosteriorMoments m = gp.posterior_moments_at(x);
    curve.mean.push_back(weight * (m.mean * m.mean + m.variance));
  }
  const Eigen::MatrixXd paths = gp.sample_function(grid, seed, mc_samples);
  const double lo_q = 0.5 * (1.0 - credible_mass);
  const double hi_q = 0.5 * (1.0 + credible_mass);
  std::vector<double> values(static_cast<std::size_t>(mc_samples));
  curve.lower.resize(grid.size());
  curve.upper.resize(grid.size());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const std::size_t i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, values.size() - 1);
    const double t = pos - static_cast<double>(i0);
    return values[i0] + t * (values[i1] - values[i0]);
  };
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (int s = 0; s < mc_samples; ++s) {
      const double f = paths(static_cast<Eigen::Index>(i), s);
      values[static_cast<std::size_t>(s)] = weight * f * f;
    }
    std::sort(values.begin(), values.end());
    curve.lower[i] = quantile(lo_q);
    curve.upper[i] = quantile(hi_q);
  }
  return curve;
}

}  // namespace panelgp
