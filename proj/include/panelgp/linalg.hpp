#pragma once

#include <Eigen/Dense>

#include <stdexcept>

namespace panelgp {

struct FactorizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Lower Cholesky factor of a symmetric PSD matrix with adaptive diagonal
// loading: base jitter, doubled per retry, final attempt at 1e-4, at most
// five attempts. Dense SE-kernel grids are near-singular, so the escalation
// path is routinely exercised by joint sampling.
inline Eigen::MatrixXd cholesky_with_escalation(const Eigen::MatrixXd& m,
                                                double base_jitter) {
  double jitter = base_jitter;
  for (int attempt = 0; attempt < 5; ++attempt) {
    Eigen::MatrixXd loaded = m;
    loaded.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(loaded);
    if (llt.info() == Eigen::Success) {
      return llt.matrixL();
    }
    jitter = (attempt == 3) ? std::max(1e-4, 2.0 * jitter) : 2.0 * jitter;
  }
  throw FactorizationError(
      "cholesky_with_escalation: matrix not factorizable at jitter 1e-4");
}

}  // namespace panelgp
