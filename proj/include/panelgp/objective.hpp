#pragma once

// Panel-count objectives:
//   * the Poisson interval likelihood and quadrature panel log-likelihood,
//   * the tractable GP4C lower bound with analytic gradients in the
//     variational parameters (mu, L) and log hyperparameters (ln gamma, ln a),
//   * the recurrent-event ELBO whose per-event terms are exact through the
//     Poisson-weighted digamma series,
//   * a Monte-Carlo estimator of the intractable ELBO used as an oracle.
//
// Subjects may carry multiplicative weights (the random-effects variant);
// a weight w_k scales the subject's expected-count integral and shifts its
// data term by m ln w_k.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/quadrature.hpp"
#include "panelgp/sparse_gp.hpp"
#include "panelgp/special_functions.hpp"

namespace panelgp {

// ---------------------------------------------------------------------------
// Poisson likelihood pieces

inline double poisson_interval_loglik(double rate, long count) {
  if (rate < 0.0 || count < 0) {
    throw std::domain_error("poisson_interval_loglik: negative rate or count");
  }
  if (rate == 0.0) {
    if (count > 0) {
      throw std::domain_error(
          "poisson_interval_loglik: zero rate with positive count");
    }
    return 0.0;  // 0 ln 0 := 0
  }
  return static_cast<double>(count) * std::log(rate) - rate -
         log_gamma(static_cast<double>(count) + 1.0);
}

// Sum of interval Poisson log-likelihoods with each rate integral evaluated
// by Simpson's rule.
template <typename F>
double panel_loglik(F&& intensity, const PanelDataset& data, int quad_points) {
  check_simpson_points(quad_points);
  double total = 0.0;
  for (const auto& subject : data.subjects) {
    for (const auto& rec : subject.records) {
      const double rate =
          simpson(intensity, rec.interval.start, rec.interval.end, quad_points);
      total += poisson_interval_loglik(std::max(rate, 0.0), rec.count);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Bound bookkeeping

struct BoundValue {
  double total = 0.0;
  double data_term = 0.0;
  double integral_term = 0.0;
  double kl_term = 0.0;
  double constant_term = 0.0;
};

struct BoundConfig {
  double b = 0.3;
  bool include_constants = true;

  void validate() const {
    if (b < 0.0 || b > 1.0) {
      throw std::domain_error("BoundConfig: b must lie in [0, 1]");
    }
  }
};

struct BoundGradient {
  Eigen::VectorXd d_mu;
  Eigen::MatrixXd d_chol_sigma;  // lower triangle only
  double d_log_variance = 0.0;
  double d_log_lengthscale = 0.0;
};

struct GradientSelect {
  bool variational = true;
  bool hyper = true;
};

// ---------------------------------------------------------------------------
// Dataset preprocessing shared by the objectives

// Unique intervals/windows with an index map. Observed intervals with zero
// counts contribute nothing to any term beyond their window, so only
// positive-count records are kept.
struct PanelTerms {
  struct Obs {
    std::size_t interval = 0;  // into `intervals`
    long count = 0;
  };
  struct Subject {
    std::size_t window = 0;  // into `windows`
    std::vector<Obs> obs;
  };

  std::vector<Interval> intervals;
  std::vector<Interval> windows;
  std::vector<Subject> subjects;
  double constant_term = 0.0;  // sum of m (C + ln 2) + ln m!
  long total_count = 0;
};

inline PanelTerms build_panel_terms(const PanelDataset& data) {
  PanelTerms terms;
  std::map<std::pair<double, double>, std::size_t> interval_index;
  std::map<std::pair<double, double>, std::size_t> window_index;
  for (const auto& subject : data.subjects) {
    PanelTerms::Subject s;
    const auto wkey = std::make_pair(subject.window.start, subject.window.end);
    auto [wit, winserted] = window_index.try_emplace(wkey, terms.windows.size());
    if (winserted) terms.windows.push_back(subject.window);
    s.window = wit->second;
    for (const auto& rec : subject.records) {
      if (rec.count <= 0) continue;
      const auto key = std::make_pair(rec.interval.start, rec.interval.end);
      auto [it, inserted] = interval_index.try_emplace(key, terms.intervals.size());
      if (inserted) terms.intervals.push_back(rec.interval);
      s.obs.push_back({it->second, rec.count});
      const double m = static_cast<double>(rec.count);
      terms.constant_term += m * (kEulerGamma + kLn2) + log_gamma(m + 1.0);
      terms.total_count += rec.count;
    }
    terms.subjects.push_back(std::move(s));
  }
  return terms;
}

namespace detail {

// Per-kernel-setting cache of psi statistics for a list of intervals. The
// pair-level factors (midpoints, cross terms) are shared across intervals,
// and psi and its lengthscale derivative come out of one fused pass; this is
// the hot loop of every hyperparameter move.
struct PsiCache {
  std::vector<Eigen::MatrixXd> psi;
  std::vector<Eigen::MatrixXd> dpsi_da;  // only when hyper gradients wanted
  std::vector<double> trace_pk;          // tr(K^-1 psi)
  std::vector<double> lengths;

  void build(const ArdKernel& kernel, const std::vector<double>& pseudo,
             const Eigen::MatrixXd& kinv, const std::vector<Interval>& ivs,
             bool with_derivatives) {
    const std::size_t n = ivs.size();
    const Eigen::Index r = static_cast<Eigen::Index>(pseudo.size());
    psi.assign(n, Eigen::MatrixXd(r, r));
    trace_pk.assign(n, 0.0);
    lengths.assign(n, 0.0);
    dpsi_da.assign(with_derivatives ? n : 0, Eigen::MatrixXd(r, r));

    const double a = kernel.lengthscale;
    const double inv_a = 1.0 / a;
    const double g2 = kernel.variance * kernel.variance;
    const double scale = g2 * kSqrtPi * a * 0.5;

    // Pair-level factors, interval independent.
    const Eigen::Index n_pairs = r * (r + 1) / 2;
    Eigen::ArrayXd zbar(n_pairs), cross(n_pairs), dcoef(n_pairs);
    {
      Eigen::Index p = 0;
      for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j, ++p) {
          const double d = pseudo[static_cast<std::size_t>(i)] -
                           pseudo[static_cast<std::size_t>(j)];
          zbar[p] = 0.5 * (pseudo[static_cast<std::size_t>(i)] +
                           pseudo[static_cast<std::size_t>(j)]);
          cross[p] = std::exp(-d * d / (4.0 * a * a));
          dcoef[p] = d * d / (2.0 * a * a * a) + inv_a;
        }
      }
    }

    for (std::size_t m = 0; m < n; ++m) {
      lengths[m] = ivs[m].length();
      Eigen::MatrixXd& out = psi[m];
      Eigen::MatrixXd* dout = with_derivatives ? &dpsi_da[m] : nullptr;
      Eigen::Index p = 0;
      for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j, ++p) {
          const double ue = (ivs[m].end - zbar[p]) * inv_a;
          const double us = (ivs[m].start - zbar[p]) * inv_a;
          const double v = scale * cross[p] * (erf(ue) - erf(us));
          out(i, j) = v;
          out(j, i) = v;
          if (dout) {
            const double edge = (ivs[m].end - zbar[p]) * std::exp(-ue * ue) -
                                (ivs[m].start - zbar[p]) * std::exp(-us * us);
            const double dv = v * dcoef[p] - g2 * cross[p] * inv_a * edge;
            (*dout)(i, j) = dv;
            (*dout)(j, i) = dv;
          }
        }
      }
      trace_pk[m] = (kinv.array() * out.array()).sum();
    }
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// GP4C bound

// Evaluator that caches the per-interval psi statistics across objective
// evaluations with unchanged kernel hyperparameters (the variational inner
// loop), and rebuilds them when the kernel moves.
class PanelObjective {
 public:
  PanelObjective(PanelTerms terms, BoundConfig cfg)
      : terms_(std::move(terms)), cfg_(cfg) {
    cfg_.validate();
  }

  const PanelTerms& terms() const { return terms_; }
  const BoundConfig& config() const { return cfg_; }

  // Per-subject multiplicative weights (all ones for plain GP4C).
  void set_weights(std::vector<double> weights) {
    if (!weights.empty() && weights.size() != terms_.subjects.size()) {
      throw std::domain_error("PanelObjective: weight count mismatch");
    }
    weights_ = std::move(weights);
  }
  const std::vector<double>& weights() const { return weights_; }
  double weight(std::size_t subject) const {
    return weights_.empty() ? 1.0 : weights_[subject];
  }

  BoundValue value(const SparseVariationalGP& gp) const {
    refresh(gp, false);
    return assemble_value(gp).first;
  }

  std::pair<BoundValue, BoundGradient> value_and_gradient(
      const SparseVariationalGP& gp, const GradientSelect& select) const {
    refresh(gp, select.hyper);
    auto [value, coeffs] = assemble_value(gp);
    BoundGradient grad = assemble_gradient(gp, coeffs, select);
    return {value, std::move(grad)};
  }

  // Expected total count integral per subject, for the weight update.
  std::vector<double> subject_integrals(const SparseVariationalGP& gp) const {
    refresh(gp, false);
    std::vector<double> out(terms_.subjects.size());
    for (std::size_t k = 0; k < terms_.subjects.size(); ++k) {
      const std::size_t w = terms_.subjects[k].window;
      const IntegratedMoments m = gp.integrated_moments_from_psi(
          windows_.psi[w], windows_.lengths[w]);
      out[k] = m.sq_mean + m.variance;
    }
    return out;
  }

 private:
  struct Coefficients {
    // c_D = sum over observations on interval D of m / (S + b V);
    // u_W = sum over subjects with window W of their weight.
    Eigen::VectorXd interval_coeff;
    Eigen::VectorXd window_coeff;
  };

  void refresh(const SparseVariationalGP& gp, bool with_derivatives) const {
    const ArdKernel& k = gp.kernel();
    const bool stale = !cached_ || cached_gamma_ != k.variance ||
                       cached_a_ != k.lengthscale ||
                       (with_derivatives && !has_derivatives_);
    if (!stale) return;
    intervals_.build(k, gp.pseudo_inputs(), gp.kinv(), terms_.intervals,
                     with_derivatives);
    windows_.build(k, gp.pseudo_inputs(), gp.kinv(), terms_.windows,
                   with_derivatives);
    cached_ = true;
    has_derivatives_ = with_derivatives;
    cached_gamma_ = k.variance;
    cached_a_ = k.lengthscale;
  }

  std::pair<BoundValue, Coefficients> assemble_value(
      const SparseVariationalGP& gp) const {
    const double b = cfg_.b;
    const Eigen::VectorXd& w = gp.kinv_mu();
    const double gamma = gp.kernel().variance;
    const Eigen::MatrixXd psp = gp.kinv_sigma() * gp.kinv();  // K^-1 Sigma K^-1

    const std::size_t n_iv = terms_.intervals.size();
    Eigen::VectorXd sq_mean(static_cast<Eigen::Index>(n_iv)),
        var(static_cast<Eigen::Index>(n_iv));
    for (std::size_t d = 0; d < n_iv; ++d) {
      sq_mean[static_cast<Eigen::Index>(d)] = w.dot(intervals_.psi[d] * w);
      var[static_cast<Eigen::Index>(d)] =
          gamma * intervals_.lengths[d] - intervals_.trace_pk[d] +
          (intervals_.psi[d].array() * psp.array()).sum();
    }

    Coefficients coeffs;
    coeffs.interval_coeff = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_iv));
    coeffs.window_coeff =
        Eigen::VectorXd::Zero(static_cast<Eigen::Index>(terms_.windows.size()));

    BoundValue out;
    for (std::size_t k = 0; k < terms_.subjects.size(); ++k) {
      const auto& subject = terms_.subjects[k];
      const double w_k = weight(k);
      coeffs.window_coeff[static_cast<Eigen::Index>(subject.window)] += w_k;
      for (const auto& obs : subject.obs) {
        const Eigen::Index d = static_cast<Eigen::Index>(obs.interval);
        const double arg = sq_mean[d] + b * var[d];
        if (arg <= 1e-300) {
          throw FactorizationError(
              "gp4c_bound: vanishing integrated intensity under a positive "
              "count (interval " +
              std::to_string(obs.interval) + ")");
        }
        const double m = static_cast<double>(obs.count);
        out.data_term += m * (std::log(arg) + std::log(w_k));
        coeffs.interval_coeff[d] += m / arg;
      }
    }

    for (std::size_t w = 0; w < terms_.windows.size(); ++w) {
      const Eigen::Index wi = static_cast<Eigen::Index>(w);
      if (coeffs.window_coeff[wi] == 0.0) continue;
      const IntegratedMoments m =
          gp.integrated_moments_from_psi(windows_.psi[w], windows_.lengths[w]);
      out.integral_term += coeffs.window_coeff[wi] * (m.sq_mean + m.variance);
    }
    out.kl_term = gp.kl_divergence();
    out.constant_term = cfg_.include_constants ? terms_.constant_term : 0.0;
    out.total =
        out.data_term - out.integral_term - out.kl_term - out.constant_term;
    return {out, std::move(coeffs)};
  }

  BoundGradient assemble_gradient(const SparseVariationalGP& gp,
                                  const Coefficients& coeffs,
                                  const GradientSelect& select) const {
    const double b = cfg_.b;
    const Eigen::Index r = gp.size();
    const Eigen::VectorXd& mu = gp.mu();
    const Eigen::VectorXd& w = gp.kinv_mu();
    const Eigen::MatrixXd& p = gp.kinv();
    const Eigen::MatrixXd& sigma = gp.sigma();
    const Eigen::MatrixXd& l = gp.chol_sigma();

    // Weighted sums over intervals / windows; every gradient piece factors
    // through them, so no per-interval projections are needed.
    Eigen::MatrixXd phi_data = Eigen::MatrixXd::Zero(r, r);
    Eigen::MatrixXd phi_win = Eigen::MatrixXd::Zero(r, r);
    Eigen::MatrixXd dphi_data_da = Eigen::MatrixXd::Zero(r, r);
    Eigen::MatrixXd dphi_win_da = Eigen::MatrixXd::Zero(r, r);
    double data_len = 0.0;  // sum c_D |D|
    double win_len = 0.0;   // sum u_W |W|
    for (std::size_t d = 0; d < terms_.intervals.size(); ++d) {
      const double c = coeffs.interval_coeff[static_cast<Eigen::Index>(d)];
      if (c == 0.0) continue;
      phi_data.noalias() += c * intervals_.psi[d];
      if (select.hyper) dphi_data_da.noalias() += c * intervals_.dpsi_da[d];
      data_len += c * intervals_.lengths[d];
    }
    for (std::size_t wdx = 0; wdx < terms_.windows.size(); ++wdx) {
      const double u = coeffs.window_coeff[static_cast<Eigen::Index>(wdx)];
      if (u == 0.0) continue;
      phi_win.noalias() += u * windows_.psi[wdx];
      if (select.hyper) dphi_win_da.noalias() += u * windows_.dpsi_da[wdx];
      win_len += u * windows_.lengths[wdx];
    }

    BoundGradient grad;
    if (select.variational) {
      grad.d_mu = 2.0 * (p * (phi_data * w)) - 2.0 * (p * (phi_win * w)) - w;
      // d/dL of each trace term is 2 (P Psi P) L; the KL contributes
      // -(P L - L^{-T}).
      const Eigen::MatrixXd m_net = p * (b * phi_data - phi_win) * p;
      Eigen::MatrixXd d_l = 2.0 * ((m_net - 0.5 * p) * l);
      d_l += l.transpose()
                 .triangularView<Eigen::Upper>()
                 .solve(Eigen::MatrixXd::Identity(r, r));  // Sigma^{-1} L = L^{-T}
      grad.d_chol_sigma = d_l.triangularView<Eigen::Lower>();
    }

    if (select.hyper) {
      const ArdKernel& kernel = gp.kernel();
      const double gamma = kernel.variance;
      const double a = kernel.lengthscale;
      const Eigen::MatrixXd psp = gp.kinv_sigma() * p;  // P Sigma P

      // Adjoint of the objective in P (for dP = -P dK P) ...
      const Eigen::VectorXd phi_c_w = phi_data * w;
      Eigen::MatrixXd adj_p = phi_c_w * mu.transpose() +
                              mu * phi_c_w.transpose();
      const Eigen::MatrixXd phi_data_ps = phi_data * gp.kinv_sigma();
      adj_p.noalias() += b * (phi_data_ps + phi_data_ps.transpose());
      adj_p -= b * phi_data;
      const Eigen::MatrixXd mm_sigma = mu * mu.transpose() + sigma;
      const Eigen::MatrixXd phi_win_pm = phi_win * (p * mm_sigma);
      adj_p -= phi_win_pm + phi_win_pm.transpose();
      adj_p += phi_win;
      adj_p -= 0.5 * mm_sigma;
      // ... and in K (direct ln det K of the KL).
      Eigen::MatrixXd adj_k = -(p * adj_p * p);
      adj_k -= 0.5 * p;

      // Adjoints in the psi matrices: data intervals see c (w w^T) plus
      // c b (P Sigma P - P); windows see u (P - w w^T - P Sigma P).
      const Eigen::MatrixXd ww = w * w.transpose();
      const Eigen::MatrixXd e_data = psp - p;
      const Eigen::MatrixXd e_win = p - ww - psp;

      const std::vector<double>& pseudo = gp.pseudo_inputs();
      const Eigen::MatrixXd k_bare =
          gp.regularized_kuu() -
          gp.jitter() * Eigen::MatrixXd::Identity(r, r);

      // d/d gamma: K and every psi entry scale as gamma and gamma^2.
      {
        const Eigen::MatrixXd kdot = k_bare / gamma;
        double g = (adj_k.array() * kdot.array()).sum();
        g += (ww.array() * (2.0 * phi_data / gamma).array()).sum();
        g += b * (e_data.array() * (2.0 * phi_data / gamma).array()).sum();
        g += (e_win.array() * (2.0 * phi_win / gamma).array()).sum();
        g += b * data_len - win_len;  // direct gamma |D| terms
        grad.d_log_variance = gamma * g;
      }
      // d/d lengthscale.
      {
        const Eigen::MatrixXd kdot = gram_dlengthscale(kernel, pseudo, pseudo);
        double g = (adj_k.array() * kdot.array()).sum();
        g += (ww.array() * dphi_data_da.array()).sum();
        g += b * (e_data.array() * dphi_data_da.array()).sum();
        g += (e_win.array() * dphi_win_da.array()).sum();
        grad.d_log_lengthscale = a * g;
      }
    }
    return grad;
  }

  PanelTerms terms_;
  BoundConfig cfg_;
  std::vector<double> weights_;

  mutable detail::PsiCache intervals_;
  mutable detail::PsiCache windows_;
  mutable bool cached_ = false;
  mutable bool has_derivatives_ = false;
  mutable double cached_gamma_ = 0.0;
  mutable double cached_a_ = 0.0;
};

// Spec-level entry point: the Eq.-15-style tractable bound on a dataset.
inline BoundValue gp4c_bound(const SparseVariationalGP& gp,
                             const PanelDataset& data, const BoundConfig& cfg,
                             const std::vector<double>& weights = {}) {
  PanelObjective objective(build_panel_terms(data), cfg);
  if (!weights.empty()) objective.set_weights(weights);
  return objective.value(gp);
}

inline std::pair<BoundValue, BoundGradient> gp4c_bound_gradient(
    const SparseVariationalGP& gp, const PanelDataset& data,
    const BoundConfig& cfg, const GradientSelect& select = {},
    const std::vector<double>& weights = {}) {
  PanelObjective objective(build_panel_terms(data), cfg);
  if (!weights.empty()) objective.set_weights(weights);
  return objective.value_and_gradient(gp, select);
}

// ---------------------------------------------------------------------------
// Recurrent-event ELBO (exact per-event terms)

struct RecurrentTerms {
  std::vector<double> events;      // all timestamps, flattened
  std::vector<Interval> windows;   // unique subject windows
  Eigen::VectorXd window_mult;     // subjects per window
};

inline RecurrentTerms build_recurrent_terms(const RecurrentDataset& data) {
  RecurrentTerms terms;
  std::map<std::pair<double, double>, std::size_t> window_index;
  std::vector<double> mult;
  for (const auto& subject : data.subjects) {
    for (const double t : subject.timestamps) {
      if (t < subject.window.start || t > subject.window.end) {
        throw std::domain_error("gp3: timestamp outside its subject window");
      }
      terms.events.push_back(t);
    }
    const auto key = std::make_pair(subject.window.start, subject.window.end);
    auto [it, inserted] = window_index.try_emplace(key, terms.windows.size());
    if (inserted) {
      terms.windows.push_back(subject.window);
      mult.push_back(0.0);
    }
    mult[it->second] += 1.0;
  }
  terms.window_mult =
      Eigen::Map<Eigen::VectorXd>(mult.data(), static_cast<Eigen::Index>(mult.size()));
  return terms;
}

// ELBO for fully observed timestamps: per-event E_q[ln f^2] is exact via the
// Poisson-weighted digamma series; the integral and KL terms are shared with
// the panel bound.
class RecurrentObjective {
 public:
  explicit RecurrentObjective(RecurrentTerms terms) : terms_(std::move(terms)) {}

  const RecurrentTerms& terms() const { return terms_; }

  BoundValue value(const SparseVariationalGP& gp) const {
    refresh(gp, false);
    return assemble(gp, nullptr, {false, false});
  }

  std::pair<BoundValue, BoundGradient> value_and_gradient(
      const SparseVariationalGP& gp, const GradientSelect& select) const {
    refresh(gp, select.hyper);
    BoundGradient grad;
    BoundValue value = assemble(gp, &grad, select);
    return {value, std::move(grad)};
  }

 private:
  void refresh(const SparseVariationalGP& gp, bool with_derivatives) const {
    const ArdKernel& k = gp.kernel();
    const bool stale = !cached_ || cached_gamma_ != k.variance ||
                       cached_a_ != k.lengthscale ||
                       (with_derivatives && !has_derivatives_);
    if (!stale) return;
    windows_.build(k, gp.pseudo_inputs(), gp.kinv(), terms_.windows,
                   with_derivatives);
    const Eigen::Index n = static_cast<Eigen::Index>(terms_.events.size());
    if (n > 0) {
      k_events_ = gram(k, gp.pseudo_inputs(), terms_.events);
      alpha_ = gp.kuu_llt().solve(k_events_);
      quad_prior_ = (k_events_.array() * alpha_.array()).colwise().sum().transpose();
      if (with_derivatives) {
        dk_events_da_ = gram_dlengthscale(k, gp.pseudo_inputs(), terms_.events);
      }
    } else {
      k_events_.resize(gp.size(), 0);
      alpha_.resize(gp.size(), 0);
      quad_prior_.resize(0);
      dk_events_da_.resize(gp.size(), 0);
    }
    cached_ = true;
    has_derivatives_ = with_derivatives;
    cached_gamma_ = k.variance;
    cached_a_ = k.lengthscale;
  }

  BoundValue assemble(const SparseVariationalGP& gp, BoundGradient* grad,
                      const GradientSelect& select) const {
    const Eigen::Index r = gp.size();
    const Eigen::Index n = static_cast<Eigen::Index>(terms_.events.size());
    const Eigen::VectorXd& mu = gp.mu();
    const Eigen::VectorXd& w = gp.kinv_mu();
    const Eigen::MatrixXd& p = gp.kinv();
    const Eigen::MatrixXd& sigma = gp.sigma();
    const double gamma = gp.kernel().variance;

    BoundValue out;

    // Per-event moments under q.
    Eigen::MatrixXd sigma_alpha;  // Sigma * alpha, reused by the gradient
    Eigen::VectorXd means(n), vars(n);
    if (n > 0) {
      means = alpha_.transpose() * mu;
      sigma_alpha.noalias() = sigma * alpha_;
      const Eigen::ArrayXd quad_var =
          (alpha_.array() * sigma_alpha.array()).colwise().sum().transpose();
      for (Eigen::Index j = 0; j < n; ++j) {
        vars[j] = detail::clamp_nonnegative(
            gamma - quad_prior_[j] + quad_var[j], gamma, "gp3 event variance");
        if (vars[j] <= 0.0) {
          throw FactorizationError("gp3: degenerate posterior variance at event");
        }
        const double phi_half = 0.5 * means[j] * means[j] / vars[j];
        out.data_term += std::log(2.0 * vars[j]) +
                         poisson_digamma_series(0.5, phi_half);
      }
    }

    Eigen::MatrixXd phi_win = Eigen::MatrixXd::Zero(r, r);
    Eigen::MatrixXd dphi_win_da = Eigen::MatrixXd::Zero(r, r);
    double win_len = 0.0;
    for (std::size_t wdx = 0; wdx < terms_.windows.size(); ++wdx) {
      const double u = terms_.window_mult[static_cast<Eigen::Index>(wdx)];
      const IntegratedMoments m = gp.integrated_moments_from_psi(
          windows_.psi[wdx], windows_.lengths[wdx]);
      out.integral_term += u * (m.sq_mean + m.variance);
      phi_win.noalias() += u * windows_.psi[wdx];
      if (select.hyper) dphi_win_da.noalias() += u * windows_.dpsi_da[wdx];
      win_len += u * windows_.lengths[wdx];
    }
    out.kl_term = gp.kl_divergence();
    out.constant_term = 0.0;
    out.total = out.data_term - out.integral_term - out.kl_term;

    if (!grad) return out;

    // Chain-rule coefficients per event: d/d mean and d/d variance of
    // ln(2 v) + g_{1/2}(mean^2 / (2 v)).
    Eigen::VectorXd coef_mean(n), coef_var(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double phi_half = 0.5 * means[j] * means[j] / vars[j];
      const double gprime = poisson_digamma_series_derivative(0.5, phi_half);
      coef_mean[j] = gprime * means[j] / vars[j];
      coef_var[j] = 1.0 / vars[j] - gprime * phi_half / vars[j];
    }

    if (select.variational) {
      grad->d_mu = -2.0 * (p * (phi_win * w)) - w;
      if (n > 0) grad->d_mu.noalias() += alpha_ * coef_mean;
      Eigen::MatrixXd g_sigma = -(p * phi_win * p) - 0.5 * p;
      if (n > 0) {
        g_sigma.noalias() += alpha_ * coef_var.asDiagonal() * alpha_.transpose();
      }
      Eigen::MatrixXd d_l = 2.0 * (g_sigma * gp.chol_sigma());
      d_l += gp.chol_sigma()
                 .transpose()
                 .triangularView<Eigen::Upper>()
                 .solve(Eigen::MatrixXd::Identity(r, r));
      grad->d_chol_sigma = d_l.triangularView<Eigen::Lower>();
    }

    if (select.hyper) {
      const ArdKernel& kernel = gp.kernel();
      const double a = kernel.lengthscale;
      const Eigen::MatrixXd mm_sigma = mu * mu.transpose() + sigma;

      // Integral + KL adjoints, exactly as in the panel bound.
      Eigen::MatrixXd adj_p = Eigen::MatrixXd::Zero(r, r);
      const Eigen::MatrixXd phi_win_pm = phi_win * (p * mm_sigma);
      adj_p -= phi_win_pm + phi_win_pm.transpose();
      adj_p += phi_win;
      adj_p -= 0.5 * mm_sigma;
      Eigen::MatrixXd adj_k = -(p * adj_p * p);
      adj_k -= 0.5 * p;

      // Event terms: d mean = kdot^T w - alpha^T Kdot w,
      // d var = gammadot - 2 kdot^T alpha + alpha^T Kdot alpha
      //         + 2 kdot^T beta - 2 alpha^T Kdot beta,  beta = P Sigma alpha.
      Eigen::MatrixXd beta;
      if (n > 0) {
        beta.noalias() = gp.kuu_llt().solve(sigma_alpha);
        const Eigen::MatrixXd alpha_cv = alpha_ * coef_var.asDiagonal();
        adj_k.noalias() -= w * (alpha_ * coef_mean).transpose();
        adj_k.noalias() += alpha_cv * alpha_.transpose();
        adj_k.noalias() -= 2.0 * (beta * alpha_cv.transpose());
      }
      // Symmetrize: only the symmetric part survives contraction with the
      // symmetric Kdot.
      adj_k = 0.5 * (adj_k + adj_k.transpose()).eval();

      const std::vector<double>& pseudo = gp.pseudo_inputs();
      const Eigen::MatrixXd k_bare =
          gp.regularized_kuu() -
          gp.jitter() * Eigen::MatrixXd::Identity(r, r);
      const Eigen::MatrixXd e_win = p - w * w.transpose() - gp.kinv_sigma() * p;

      auto event_kdot_terms = [&](const Eigen::MatrixXd& kdot_events) {
        // sum_j cm_j kdot_j^T w + cv_j (-2 kdot_j^T alpha_j + 2 kdot_j^T beta_j)
        double g = coef_mean.dot(kdot_events.transpose() * w);
        const Eigen::ArrayXd da =
            (kdot_events.array() * alpha_.array()).colwise().sum().transpose();
        const Eigen::ArrayXd db =
            (kdot_events.array() * beta.array()).colwise().sum().transpose();
        g += 2.0 * (coef_var.array() * (db - da)).sum();
        return g;
      };

      {
        const Eigen::MatrixXd kdot = k_bare / gamma;
        double g = (adj_k.array() * kdot.array()).sum();
        g += (e_win.array() * (2.0 * phi_win / gamma).array()).sum();
        g -= win_len;
        if (n > 0) {
          g += event_kdot_terms(k_events_ / gamma);
          g += coef_var.sum();  // direct d var / d gamma = 1
        }
        grad->d_log_variance = gamma * g;
      }
      {
        const Eigen::MatrixXd kdot = gram_dlengthscale(kernel, pseudo, pseudo);
        double g = (adj_k.array() * kdot.array()).sum();
        g += (e_win.array() * dphi_win_da.array()).sum();
        if (n > 0) g += event_kdot_terms(dk_events_da_);
        grad->d_log_lengthscale = a * g;
      }
    }
    return out;
  }

  RecurrentTerms terms_;
  mutable detail::PsiCache windows_;
  mutable Eigen::MatrixXd k_events_;     // R x n cross-covariances
  mutable Eigen::MatrixXd alpha_;        // K^-1 k per event
  mutable Eigen::ArrayXd quad_prior_;    // k^T K^-1 k per event
  mutable Eigen::MatrixXd dk_events_da_;
  mutable bool cached_ = false;
  mutable bool has_derivatives_ = false;
  mutable double cached_gamma_ = 0.0;
  mutable double cached_a_ = 0.0;
};

inline BoundValue gp3_elbo(const SparseVariationalGP& gp,
                           const RecurrentDataset& data) {
  return RecurrentObjective(build_recurrent_terms(data)).value(gp);
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimate of the intractable ELBO

struct McElboResult {
  double estimate = 0.0;
  double std_error = 0.0;
};

// Replaces the analytic data term with sampled ln int f^2 values: joint
// paths on the union of per-interval Simpson grids, the remaining terms
// analytic. Deterministic in the seed.
inline McElboResult mc_elbo(const SparseVariationalGP& gp,
                            const PanelDataset& data, int samples,
                            int grid_points, std::uint64_t seed) {
  if (samples < 100) {
    throw std::domain_error("mc_elbo: need at least 100 samples");
  }
  check_simpson_points(grid_points);

  const PanelTerms terms = build_panel_terms(data);

  // Union grid of the Simpson nodes of every positive-count interval.
  std::vector<double> grid;
  for (const auto& iv : terms.intervals) {
    const auto nodes =
        linspace(iv.start, iv.end, static_cast<std::size_t>(grid_points));
    grid.insert(grid.end(), nodes.begin(), nodes.end());
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  // Index of each interval's nodes inside the union grid.
  std::vector<std::vector<Eigen::Index>> node_index(terms.intervals.size());
  for (std::size_t d = 0; d < terms.intervals.size(); ++d) {
    const auto nodes = linspace(terms.intervals[d].start, terms.intervals[d].end,
                                static_cast<std::size_t>(grid_points));
    for (const double x : nodes) {
      const auto it = std::lower_bound(grid.begin(), grid.end(), x);
      node_index[d].push_back(static_cast<Eigen::Index>(it - grid.begin()));
    }
  }

  // Aggregate count per unique interval.
  std::vector<double> counts(terms.intervals.size(), 0.0);
  double analytic = 0.0;
  for (std::size_t k = 0; k < terms.subjects.size(); ++k) {
    for (const auto& obs : terms.subjects[k].obs) {
      counts[obs.interval] += static_cast<double>(obs.count);
    }
  }

  {
    BoundValue base;
    for (std::size_t w = 0; w < terms.windows.size(); ++w) {
      double mult = 0.0;
      for (const auto& s : terms.subjects) {
        if (s.window == w) mult += 1.0;
      }
      base.integral_term += mult * gp.integrated_second_moment(terms.windows[w]);
    }
    base.kl_term = gp.kl_divergence();
    double log_factorials = 0.0;
    for (const auto& s : terms.subjects) {
      for (const auto& obs : s.obs) {
        log_factorials += log_gamma(static_cast<double>(obs.count) + 1.0);
      }
    }
    analytic = -base.integral_term - base.kl_term - log_factorials;
  }

  if (grid.empty()) {
    return {analytic, 0.0};  // no stochastic term remains
  }

  // Sample through the conditional decomposition f = A f_R + r with
  // r ~ N(0, K_gg - A K_Rg): for the SE kernel the residual covariance has
  // low numerical rank, so a truncated eigenbasis (directions below
  // 1e-12 of the leading eigenvalue dropped, far beneath the Monte-Carlo
  // error) makes the per-sample cost G (R + q) instead of G^2.
  const Eigen::Index g = static_cast<Eigen::Index>(grid.size());
  const Eigen::Index r = gp.size();
  const Eigen::MatrixXd kgr = gram(gp.kernel(), grid, gp.pseudo_inputs());
  const Eigen::MatrixXd a = gp.kuu_llt().solve(kgr.transpose()).transpose();
  Eigen::MatrixXd residual_cov = gram(gp.kernel(), grid, grid);
  residual_cov.noalias() -= a * kgr.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(residual_cov);
  if (eig.info() != Eigen::Success) {
    throw FactorizationError("mc_elbo: residual eigendecomposition failed");
  }
  const double lambda_max = std::max(eig.eigenvalues().maxCoeff(), 0.0);
  Eigen::Index q = 0;
  for (Eigen::Index i = 0; i < g; ++i) {
    if (eig.eigenvalues()[i] > 1e-12 * lambda_max) ++q;
  }
  Eigen::MatrixXd residual_basis(g, q);
  {
    Eigen::Index col = 0;
    for (Eigen::Index i = 0; i < g; ++i) {
      if (eig.eigenvalues()[i] > 1e-12 * lambda_max) {
        residual_basis.col(col++) =
            eig.eigenvectors().col(i) * std::sqrt(eig.eigenvalues()[i]);
      }
    }
  }
  const Eigen::VectorXd mean = a * gp.mu();

  Rng rng(seed);
  double sum = 0.0, sum_sq = 0.0;
  Eigen::VectorXd zeta(r), z(q), f_inducing(r), path(g);
  std::vector<double> node_values(static_cast<std::size_t>(grid_points));
  for (int s = 0; s < samples; ++s) {
    for (Eigen::Index i = 0; i < r; ++i) zeta[i] = rng.normal();
    for (Eigen::Index i = 0; i < q; ++i) z[i] = rng.normal();
    f_inducing = gp.chol_sigma() * zeta;
    path = mean + a * f_inducing;
    path.noalias() += residual_basis * z;
    double data_term = 0.0;
    for (std::size_t d = 0; d < terms.intervals.size(); ++d) {
      for (std::size_t i = 0; i < node_index[d].size(); ++i) {
        const double f = path(node_index[d][i]);
        node_values[i] = f * f;
      }
      const double integral = simpson_sampled(
          node_values, terms.intervals[d].start, terms.intervals[d].end);
      if (integral <= 0.0) {
        throw FactorizationError("mc_elbo: nonpositive sampled integral");
      }
      data_term += counts[d] * std::log(integral);
    }
    sum += data_term;
    sum_sq += data_term * data_term;
  }
  const double n = static_cast<double>(samples);
  const double mean_data = sum / n;
  const double var_data = std::max(0.0, sum_sq / n - mean_data * mean_data);
  return {mean_data + analytic, std::sqrt(var_data / n)};
}

}  // namespace panelgp
