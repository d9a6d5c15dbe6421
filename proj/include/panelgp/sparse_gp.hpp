#pragma once

// Sparse variational GP state and the Gaussian-moment computations the
// bounds consume. The variational family is q(f_R) = N(mu, Sigma) at R
// pseudo inputs with Sigma = L L^T; f elsewhere follows the conditional
// prior. All integrated quantities refer to the ARD-SE kernel's analytic
// interval integrals (psi_matrix).
//
// A constructed value is immutable: the regularized covariance
// K = K_RR + jitter I is factorized once, up front, so every operation is a
// read and safe to call concurrently.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "panelgp/kernel.hpp"
#include "panelgp/linalg.hpp"
#include "panelgp/rng.hpp"

namespace panelgp {

struct PosteriorMoments {
  double mean = 0.0;
  double variance = 0.0;
};

struct IntegratedMoments {
  double sq_mean = 0.0;  // int E_q[f]^2 over the interval
  double variance = 0.0;  // int Var_q[f] over the interval
};

namespace detail {

// Roundoff guard for quantities that are nonnegative in exact arithmetic.
inline double clamp_nonnegative(double value, double scale,
                                const char* context) {
  if (value >= 0.0) return value;
  if (value >= -1e-9 * std::max(1.0, scale)) return 0.0;
  throw FactorizationError(std::string(context) +
                           ": negative value beyond roundoff (" +
                           std::to_string(value) + ")");
}

}  // namespace detail

class SparseVariationalGP {
 public:
  SparseVariationalGP(std::vector<double> pseudo_inputs, Eigen::VectorXd mu,
                      Eigen::MatrixXd chol_sigma, const ArdKernel& kernel,
                      double jitter = 1e-6)
      : pseudo_inputs_(std::move(pseudo_inputs)),
        mu_(std::move(mu)),
        chol_sigma_(std::move(chol_sigma)),
        kernel_(kernel),
        jitter_(jitter) {
    const Eigen::Index r = static_cast<Eigen::Index>(pseudo_inputs_.size());
    if (r == 0 || mu_.size() != r || chol_sigma_.rows() != r ||
        chol_sigma_.cols() != r) {
      throw std::domain_error("SparseVariationalGP: inconsistent dimensions");
    }
    for (Eigen::Index i = 1; i < r; ++i) {
      if (!(pseudo_inputs_[static_cast<std::size_t>(i)] >
            pseudo_inputs_[static_cast<std::size_t>(i - 1)])) {
        throw std::domain_error(
            "SparseVariationalGP: pseudo inputs must be strictly increasing");
      }
    }
    for (Eigen::Index i = 0; i < r; ++i) {
      if (!(chol_sigma_(i, i) > 0.0)) {
        throw std::domain_error(
            "SparseVariationalGP: chol_sigma diagonal must be positive");
      }
    }
    if (!(jitter_ > 0.0)) {
      throw std::domain_error("SparseVariationalGP: jitter must be positive");
    }

    kuu_ = gram(kernel_, pseudo_inputs_, pseudo_inputs_);
    kuu_.diagonal().array() += jitter_;
    llt_.compute(kuu_);
    if (llt_.info() != Eigen::Success) {
      throw FactorizationError(
          "SparseVariationalGP: K_RR + jitter I is not factorizable");
    }
    kinv_ = llt_.solve(Eigen::MatrixXd::Identity(r, r));
    kinv_mu_ = llt_.solve(mu_);
    sigma_ = chol_sigma_ * chol_sigma_.transpose();
    kinv_sigma_ = llt_.solve(sigma_);
  }

  Eigen::Index size() const { return mu_.size(); }
  const std::vector<double>& pseudo_inputs() const { return pseudo_inputs_; }
  const Eigen::VectorXd& mu() const { return mu_; }
  const Eigen::MatrixXd& chol_sigma() const { return chol_sigma_; }
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  const ArdKernel& kernel() const { return kernel_; }
  double jitter() const { return jitter_; }
  const Eigen::MatrixXd& regularized_kuu() const { return kuu_; }
  const Eigen::MatrixXd& kinv() const { return kinv_; }
  const Eigen::VectorXd& kinv_mu() const { return kinv_mu_; }
  const Eigen::MatrixXd& kinv_sigma() const { return kinv_sigma_; }
  const Eigen::LLT<Eigen::MatrixXd>& kuu_llt() const { return llt_; }

  Eigen::VectorXd cross_covariance(double x) const {
    const Eigen::Index r = size();
    Eigen::VectorXd k(r);
    for (Eigen::Index i = 0; i < r; ++i) {
      k[i] = kernel_(x, pseudo_inputs_[static_cast<std::size_t>(i)]);
    }
    return k;
  }

  // Marginal q-moments of f(x).
  PosteriorMoments posterior_moments_at(double x) const {
    const Eigen::VectorXd kx = cross_covariance(x);
    const Eigen::VectorXd alpha = llt_.solve(kx);
    const double mean = alpha.dot(mu_);
    const double var = kernel_(x, x) - alpha.dot(kx) +
                       (chol_sigma_.transpose() * alpha).squaredNorm();
    return {mean, detail::clamp_nonnegative(var, kernel_.variance,
                                            "posterior_moments_at")};
  }

  // Integrated moments given the interval's psi matrix; callers that loop
  // over many intervals precompute the psi matrices once per kernel setting.
  IntegratedMoments integrated_moments_from_psi(const Eigen::MatrixXd& psi,
                                                double interval_length) const {
    const Eigen::MatrixXd b = llt_.solve(psi);
    const double sq_mean = kinv_mu_.dot(psi * kinv_mu_);
    const double var = kernel_.variance * interval_length - b.trace() +
                       (b.array() * kinv_sigma_.transpose().array()).sum();
    const double scale = kernel_.variance * std::max(1.0, interval_length);
    return {detail::clamp_nonnegative(sq_mean, scale, "integrated sq-mean"),
            detail::clamp_nonnegative(var, scale, "integrated variance")};
  }

  // E_q[ int_iv f^2 ] = gamma |iv| - tr(K^-1 Psi) + tr(K^-1 Psi K^-1 (mu mu^T + Sigma)).
  double integrated_second_moment(const Interval& iv) const {
    const IntegratedMoments m = integrated_moments(iv);
    return m.sq_mean + m.variance;
  }

  IntegratedMoments integrated_moments(const Interval& iv) const {
    return integrated_moments_from_psi(psi_matrix(kernel_, pseudo_inputs_, iv),
                                       iv.length());
  }

  // KL(q(f_R) || p(f_R)) with p = N(0, K_RR + jitter I), closed Gaussian form.
  double kl_divergence() const {
    const Eigen::Index r = size();
    const double trace_term = kinv_sigma_.trace();
    const double quad_term = mu_.dot(kinv_mu_);
    double logdet_k = 0.0;
    for (Eigen::Index i = 0; i < r; ++i) {
      logdet_k += 2.0 * std::log(llt_.matrixL()(i, i));
    }
    double logdet_sigma = 0.0;
    for (Eigen::Index i = 0; i < r; ++i) {
      logdet_sigma += 2.0 * std::log(chol_sigma_(i, i));
    }
    const double kl = 0.5 * (trace_term + quad_term -
                             static_cast<double>(r) + logdet_k - logdet_sigma);
    return detail::clamp_nonnegative(kl, std::abs(logdet_k) + 1.0,
                                     "kl_divergence");
  }

  // Joint q-mean and covariance of f on a grid.
  Eigen::VectorXd joint_mean(const std::vector<double>& grid) const {
    const Eigen::MatrixXd kgr = gram(kernel_, grid, pseudo_inputs_);
    return kgr * kinv_mu_;
  }

  Eigen::MatrixXd joint_covariance(const std::vector<double>& grid) const {
    const Eigen::MatrixXd kgr = gram(kernel_, grid, pseudo_inputs_);
    const Eigen::MatrixXd v = llt_.solve(kgr.transpose());  // K^-1 K_Rg
    Eigen::MatrixXd cov = gram(kernel_, grid, grid);
    cov.noalias() -= kgr * v;
    const Eigen::MatrixXd lv = chol_sigma_.transpose() * v;
    cov.noalias() += lv.transpose() * lv;
    return cov;
  }

  // count joint samples of f on the grid, one column per sample,
  // deterministic in the seed.
  Eigen::MatrixXd sample_function(const std::vector<double>& grid,
                                  std::uint64_t seed, int count) const {
    if (grid.empty() || count < 1) {
      throw std::domain_error("sample_function: need a grid and count >= 1");
    }
    for (std::size_t i = 1; i < grid.size(); ++i) {
      if (!(grid[i] >= grid[i - 1])) {
        throw std::domain_error("sample_function: grid must be sorted");
      }
    }
    const Eigen::Index g = static_cast<Eigen::Index>(grid.size());
    const Eigen::VectorXd mean = joint_mean(grid);
    const Eigen::MatrixXd chol =
        cholesky_with_escalation(joint_covariance(grid), jitter_);
    Rng rng(seed);
    Eigen::MatrixXd z(g, count);
    for (int s = 0; s < count; ++s) {
      for (Eigen::Index i = 0; i < g; ++i) {
        z(i, s) = rng.normal();
      }
    }
    Eigen::MatrixXd samples = chol * z;
    samples.colwise() += mean;
    return samples;
  }

 private:
  std::vector<double> pseudo_inputs_;
  Eigen::VectorXd mu_;
  Eigen::MatrixXd chol_sigma_;
  ArdKernel kernel_;
  double jitter_;

  Eigen::MatrixXd kuu_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd kinv_;
  Eigen::VectorXd kinv_mu_;
  Eigen::MatrixXd sigma_;
  Eigen::MatrixXd kinv_sigma_;
};

}  // namespace panelgp
