#pragma once

// Fitted-model serialization: a versioned, line-oriented text format with
// magic header "PANELGP-MODEL v1". Floats carry 17 significant digits so a
// reloaded model reproduces in-memory predictions.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/fit.hpp"
#include "panelgp/sparse_gp.hpp"

namespace panelgp {

struct StoredModel {
  std::string model;  // gp4c | gp3 | gp4cw | pwc
  double b = 0.3;
  double jitter = 1e-6;
  Interval domain;
  bool converged = false;
  double wall_time_s = 0.0;
  std::optional<SparseVariationalGP> gp;
  std::vector<std::pair<std::string, double>> weights;
  std::vector<double> bound_trajectory;
  std::vector<std::pair<double, double>> hyper_trajectory;
  PiecewiseConstantFit pwc;
};

namespace detail {

inline void write_vector_line(std::ofstream& out, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    out << (i ? " " : "") << format_double(v[i]);
  }
  out << '\n';
}

struct ModelParser {
  std::ifstream in;
  std::string path;
  int row = 0;

  explicit ModelParser(const std::string& p) : in(p), path(p) {
    if (!in) throw InputError("cannot open model file '" + p + "'");
  }

  std::string next_line() {
    std::string line;
    if (!std::getline(in, line)) {
      throw InputError(path + ": truncated model file (line " +
                       std::to_string(row + 1) + ")");
    }
    ++row;
    strip_cr(line);
    return line;
  }

  std::vector<std::string> next_tokens() {
    std::istringstream ss(next_line());
    std::vector<std::string> tokens;
    std::string t;
    while (ss >> t) tokens.push_back(t);
    return tokens;
  }

  double to_double(const std::string& s) {
    return parse_double(s, path, row, "value");
  }

  // "key v1 v2 ..." with an exact key match.
  std::vector<std::string> expect(const std::string& key, std::size_t n_values) {
    const auto tokens = next_tokens();
    if (tokens.empty() || tokens[0] != key ||
        (n_values != static_cast<std::size_t>(-1) &&
         tokens.size() != n_values + 1)) {
      throw InputError(path + ":" + std::to_string(row) + ": expected '" + key +
                       "' record");
    }
    return {tokens.begin() + 1, tokens.end()};
  }
};

}  // namespace detail

inline void write_model(const StoredModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  using detail::format_double;
  out << "PANELGP-MODEL v1\n";
  out << "model " << model.model << '\n';
  out << "domain " << format_double(model.domain.start) << ' '
      << format_double(model.domain.end) << '\n';
  out << "converged " << (model.converged ? 1 : 0) << '\n';
  out << "wall_time_s " << format_double(model.wall_time_s) << '\n';
  if (model.model == "pwc") {
    out << "bin_edges " << model.pwc.edges.size() << '\n';
    detail::write_vector_line(out, model.pwc.edges);
    out << "bin_rates " << model.pwc.rates.size() << '\n';
    detail::write_vector_line(out, model.pwc.rates);
  } else {
    const SparseVariationalGP& gp = *model.gp;
    out << "b " << format_double(model.b) << '\n';
    out << "jitter " << format_double(model.jitter) << '\n';
    out << "gamma " << format_double(gp.kernel().variance) << '\n';
    out << "lengthscale " << format_double(gp.kernel().lengthscale) << '\n';
    out << "pseudo_inputs " << gp.pseudo_inputs().size() << '\n';
    detail::write_vector_line(out, gp.pseudo_inputs());
    out << "mu " << gp.mu().size() << '\n';
    std::vector<double> mu(gp.mu().data(), gp.mu().data() + gp.mu().size());
    detail::write_vector_line(out, mu);
    out << "chol_sigma " << gp.size() << '\n';
    for (Eigen::Index i = 0; i < gp.size(); ++i) {
      std::vector<double> rowv;
      for (Eigen::Index j = 0; j <= i; ++j) rowv.push_back(gp.chol_sigma()(i, j));
      detail::write_vector_line(out, rowv);
    }
    out << "weights " << model.weights.size() << '\n';
    for (const auto& [id, w] : model.weights) {
      out << id << ' ' << format_double(w) << '\n';
    }
  }
  out << "bound_trajectory " << model.bound_trajectory.size() << '\n';
  for (const double v : model.bound_trajectory) out << format_double(v) << '\n';
  out << "hyper_trajectory " << model.hyper_trajectory.size() << '\n';
  for (const auto& [g, a] : model.hyper_trajectory) {
    out << format_double(g) << ' ' << format_double(a) << '\n';
  }
  out << "END\n";
}

inline StoredModel read_model(const std::string& path) {
  detail::ModelParser p(path);
  if (p.next_line() != "PANELGP-MODEL v1") {
    throw InputError(path + ": not a PANELGP-MODEL v1 file");
  }
  StoredModel model;
  model.model = p.expect("model", 1)[0];
  {
    const auto d = p.expect("domain", 2);
    model.domain = Interval(p.to_double(d[0]), p.to_double(d[1]));
  }
  model.converged = p.expect("converged", 1)[0] == "1";
  model.wall_time_s = p.to_double(p.expect("wall_time_s", 1)[0]);
  if (model.model == "pwc") {
    const std::size_t n_edges =
        static_cast<std::size_t>(p.to_double(p.expect("bin_edges", 1)[0]));
    auto edge_tokens = p.next_tokens();
    if (edge_tokens.size() != n_edges) {
      throw InputError(path + ": bin_edges length mismatch");
    }
    for (const auto& t : edge_tokens) model.pwc.edges.push_back(p.to_double(t));
    const std::size_t n_rates =
        static_cast<std::size_t>(p.to_double(p.expect("bin_rates", 1)[0]));
    auto rate_tokens = p.next_tokens();
    if (rate_tokens.size() != n_rates) {
      throw InputError(path + ": bin_rates length mismatch");
    }
    for (const auto& t : rate_tokens) model.pwc.rates.push_back(p.to_double(t));
  } else {
    model.b = p.to_double(p.expect("b", 1)[0]);
    model.jitter = p.to_double(p.expect("jitter", 1)[0]);
    const double gamma = p.to_double(p.expect("gamma", 1)[0]);
    const double lengthscale = p.to_double(p.expect("lengthscale", 1)[0]);
    const std::size_t r =
        static_cast<std::size_t>(p.to_double(p.expect("pseudo_inputs", 1)[0]));
    auto pseudo_tokens = p.next_tokens();
    if (pseudo_tokens.size() != r) {
      throw InputError(path + ": pseudo_inputs length mismatch");
    }
    std::vector<double> pseudo;
    for (const auto& t : pseudo_tokens) pseudo.push_back(p.to_double(t));
    const std::size_t r_mu =
        static_cast<std::size_t>(p.to_double(p.expect("mu", 1)[0]));
    auto mu_tokens = p.next_tokens();
    if (r_mu != r || mu_tokens.size() != r) {
      throw InputError(path + ": mu length mismatch");
    }
    Eigen::VectorXd mu(static_cast<Eigen::Index>(r));
    for (std::size_t i = 0; i < r; ++i) {
      mu[static_cast<Eigen::Index>(i)] = p.to_double(mu_tokens[i]);
    }
    const std::size_t r_l =
        static_cast<std::size_t>(p.to_double(p.expect("chol_sigma", 1)[0]));
    if (r_l != r) throw InputError(path + ": chol_sigma size mismatch");
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(r),
                                                 static_cast<Eigen::Index>(r));
    for (std::size_t i = 0; i < r; ++i) {
      auto rowt = p.next_tokens();
      if (rowt.size() != i + 1) {
        throw InputError(path + ": chol_sigma row length mismatch");
      }
      for (std::size_t j = 0; j <= i; ++j) {
        chol(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            p.to_double(rowt[j]);
      }
    }
    const std::size_t n_weights =
        static_cast<std::size_t>(p.to_double(p.expect("weights", 1)[0]));
    for (std::size_t i = 0; i < n_weights; ++i) {
      auto wt = p.next_tokens();
      if (wt.size() != 2) throw InputError(path + ": malformed weight row");
      model.weights.emplace_back(wt[0], p.to_double(wt[1]));
    }
    model.gp.emplace(std::move(pseudo), std::move(mu), std::move(chol),
                     ArdKernel(gamma, lengthscale), model.jitter);
  }
  const std::size_t n_bound =
      static_cast<std::size_t>(p.to_double(p.expect("bound_trajectory", 1)[0]));
  for (std::size_t i = 0; i < n_bound; ++i) {
    model.bound_trajectory.push_back(p.to_double(p.next_tokens().at(0)));
  }
  const std::size_t n_hyper =
      static_cast<std::size_t>(p.to_double(p.expect("hyper_trajectory", 1)[0]));
  for (std::size_t i = 0; i < n_hyper; ++i) {
    auto ht = p.next_tokens();
    if (ht.size() != 2) throw InputError(path + ": malformed hyper row");
    model.hyper_trajectory.emplace_back(p.to_double(ht[0]), p.to_double(ht[1]));
  }
  if (p.next_line() != "END") {
    throw InputError(path + ": missing END marker");
  }
  return model;
}

}  // namespace panelgp
