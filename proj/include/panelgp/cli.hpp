#pragma once

// Command implementations behind the panelgp executable: simulate, fit,
// evaluate, select-b, bench. Each command takes a resolved key/value
// configuration (config file merged with command-line overrides, flags
// winning), rejects unknown keys, and drops a reproducible snapshot of the
// resolved configuration next to its outputs.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "panelgp/dataset.hpp"
#include "panelgp/evaluate.hpp"
#include "panelgp/fit.hpp"
#include "panelgp/model_io.hpp"
#include "panelgp/objective.hpp"
#include "panelgp/special_functions.hpp"

namespace panelgp::cli {

// Sub-seed derivation for independent streams (SplitMix64 mix of the base
// seed and the stream index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  return rng.next_u64();
}

class Config {
 public:
  Config() = default;
  explicit Config(std::map<std::string, std::string> values)
      : values_(std::move(values)) {}

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> values;
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
      ++row;
      detail::strip_cr(line);
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t");
        return s.substr(b, e - b + 1);
      };
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw InputError(path + ":" + std::to_string(row) +
                         ": expected 'key = value'");
      }
      values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return Config(std::move(values));
  }

  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key,
                         const std::string& fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string require_string(const std::string& key) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) {
      throw InputError("missing required config key '" + key + "'");
    }
    return it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument(it->second);
      return v;
    } catch (const std::exception&) {
      throw InputError("config key '" + key + "': cannot parse number '" +
                       it->second + "'");
    }
  }
  long get_long(const std::string& key, long fallback) const {
    const double v = get_double(key, static_cast<double>(fallback));
    return static_cast<long>(v);
  }
  std::uint64_t get_seed(const std::string& key, std::uint64_t fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw InputError("config key '" + key + "': cannot parse seed '" +
                       it->second + "'");
    }
  }
  std::vector<double> get_list(const std::string& key,
                               std::vector<double> fallback) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        out.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw InputError("config key '" + key + "': cannot parse list entry '" +
                         tok + "'");
      }
    }
    if (out.empty()) throw InputError("config key '" + key + "': empty list");
    return out;
  }

  // No silent typos: everything supplied must have been consumed.
  void reject_unknown_keys(const std::string& command) const {
    for (const auto& [key, value] : values_) {
      if (!used_.count(key)) {
        throw InputError("unknown config key '" + key + "' for command '" +
                         command + "'");
      }
    }
  }

  void write_snapshot(const std::filesystem::path& dir,
                      const std::string& command) const {
    std::ofstream out(dir / "config_resolved.txt");
    out << "# command: " << command << '\n';
    for (const auto& [key, value] : values_) {
      out << key << " = " << value << '\n';
    }
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

inline std::filesystem::path prepare_out_dir(const Config& config) {
  const std::filesystem::path dir = config.get_string("out", "out");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir.string() + "'");
  return dir;
}

inline int worker_count(std::size_t jobs) {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("PANELGP_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    } catch (const std::exception&) {
      throw InputError("PANELGP_THREADS: cannot parse value");
    }
  }
  return static_cast<int>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// ---------------------------------------------------------------------------
// simulate

struct SimulatedData {
  RecurrentDataset recurrent;
  PanelDataset panel;
  IntensitySpec intensity;
  Interval domain;
};

inline SimulatedData simulate_dataset(const Config& config) {
  const double t0 = config.get_double("domain_start", 0.0);
  const double t1 = config.get_double("domain_end", 60.0);
  const Interval domain(t0, t1);
  const long subjects = config.get_long("subjects", 100);
  const long n_intervals = config.get_long("n_intervals", 10);
  const double theta = config.get_double("theta", 1.0);
  const std::uint64_t seed = config.get_seed("seed", 1);
  if (subjects < 1) throw InputError("simulate: subjects must be >= 1");
  if (n_intervals < 1) throw InputError("simulate: n_intervals must be >= 1");

  SimulatedData out;
  out.domain = domain;
  const std::string kind = config.get_string("intensity", "square_wave");
  if (kind == "square_wave") {
    out.intensity = IntensitySpec::square_wave();
  } else if (kind == "constant") {
    out.intensity = IntensitySpec::constant(config.get_double("constant_value", 4.0));
  } else if (kind == "gp") {
    const ArdKernel kernel(config.get_double("gp_gamma", 2.0),
                           config.get_double("gp_lengthscale", 5.0));
    out.intensity = draw_gp_intensity(
        kernel, domain, static_cast<int>(config.get_long("gp_grid_size", 3001)),
        derive_seed(seed, 0));
  } else {
    throw InputError("simulate: unknown intensity '" + kind + "'");
  }

  const std::vector<double> concentration(static_cast<std::size_t>(n_intervals),
                                          theta);
  const int width = static_cast<int>(std::to_string(subjects).size());
  for (long k = 0; k < subjects; ++k) {
    std::string id = std::to_string(k + 1);
    id = "s" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    const auto events =
        sample_ipp(out.intensity, domain, derive_seed(seed, 2 * k + 1));
    out.recurrent.subjects.push_back(RecurrentSubject{id, domain, events});
    out.panel.subjects.push_back(
        censor_to_panel(events, domain, static_cast<int>(n_intervals),
                        concentration, derive_seed(seed, 2 * k + 2), id));
  }
  return out;
}

inline void cmd_simulate(const Config& config) {
  const auto dir = prepare_out_dir(config);
  const long truth_grid = config.get_long("truth_grid", 6001);
  const SimulatedData sim = simulate_dataset(config);
  config.reject_unknown_keys("simulate");
  write_recurrent_csv(sim.recurrent, (dir / "recurrent.csv").string());
  write_panel_csv(sim.panel, (dir / "panel.csv").string());
  write_truth_csv(sim.intensity, sim.domain,
                  static_cast<std::size_t>(truth_grid),
                  (dir / "truth.csv").string());
  config.write_snapshot(dir, "simulate");
}

// ---------------------------------------------------------------------------
// fit

inline FitConfig fit_config_from(const Config& config) {
  FitConfig cfg;
  cfg.n_pseudo = static_cast<int>(config.get_long("n_pseudo", 20));
  cfg.b = config.get_double("b", 0.3);
  cfg.max_vem_iters = static_cast<int>(config.get_long("max_vem_iters", 100));
  cfg.inner_opt_iters = static_cast<int>(config.get_long("inner_opt_iters", 50));
  cfg.rel_tol = config.get_double("rel_tol", 1e-6);
  cfg.jitter = config.get_double("jitter", 1e-6);
  cfg.seed = config.get_seed("seed", 0);
  cfg.weight_floor = config.get_double("weight_floor", 1e-6);
  return cfg;
}

inline StoredModel stored_from_fit(const FitResult& fit, const std::string& model,
                                   double b, double jitter, const Interval& domain,
                                   const std::vector<std::string>& subject_ids) {
  StoredModel stored;
  stored.model = model;
  stored.b = b;
  stored.jitter = jitter;
  stored.domain = domain;
  stored.converged = fit.converged;
  stored.wall_time_s = fit.wall_time_s;
  stored.gp = fit.gp;
  stored.bound_trajectory = fit.bound_trajectory;
  stored.hyper_trajectory = fit.hyper_trajectory;
  for (std::size_t k = 0; k < fit.weights.size(); ++k) {
    stored.weights.emplace_back(subject_ids[k], fit.weights[k]);
  }
  return stored;
}

inline void cmd_fit(const Config& config) {
  const auto dir = prepare_out_dir(config);
  const std::string model = config.get_string("model", "gp4c");
  const std::string train = config.require_string("train");
  const FitConfig cfg = fit_config_from(config);

  StoredModel stored;
  nlohmann::json summary;
  if (model == "gp3") {
    config.reject_unknown_keys("fit");
    const RecurrentDataset data = read_recurrent_csv(train);
    const FitResult fit = fit_gp3(data, cfg);
    stored = stored_from_fit(fit, model, cfg.b, cfg.jitter, data.hull(), {});
    summary["final_bound"] = fit.final_bound.total;
    summary["gamma"] = fit.gp.kernel().variance;
    summary["lengthscale"] = fit.gp.kernel().lengthscale;
    summary["iterations"] = fit.bound_trajectory.size() - 1;
    summary["converged"] = fit.converged;
    summary["wall_time_s"] = fit.wall_time_s;
  } else if (model == "gp4c" || model == "gp4cw") {
    config.reject_unknown_keys("fit");
    const PanelDataset data = read_panel_csv(train);
    const FitResult fit =
        model == "gp4c" ? fit_gp4c(data, cfg) : fit_gp4cw(data, cfg);
    std::vector<std::string> ids;
    for (const auto& s : data.subjects) ids.push_back(s.id);
    stored = stored_from_fit(fit, model, cfg.b, cfg.jitter, data.hull(), ids);
    summary["final_bound"] = fit.final_bound.total;
    summary["gamma"] = fit.gp.kernel().variance;
    summary["lengthscale"] = fit.gp.kernel().lengthscale;
    summary["iterations"] = fit.bound_trajectory.size() - 1;
    summary["converged"] = fit.converged;
    summary["wall_time_s"] = fit.wall_time_s;
  } else if (model == "pwc") {
    const long n_bins_cfg = config.get_long("n_bins", 0);
    const long pwc_iters = config.get_long("pwc_iters", 200);
    config.reject_unknown_keys("fit");
    const PanelDataset data = read_panel_csv(train);
    std::size_t n_records = 0;
    for (const auto& s : data.subjects) n_records += s.records.size();
    const int n_bins =
        n_bins_cfg > 0
            ? static_cast<int>(n_bins_cfg)
            : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(
                  std::max<std::size_t>(n_records, 1)))));
    const auto t_start = std::chrono::steady_clock::now();
    PiecewiseConstantFit fit =
        fit_piecewise_constant(data, n_bins, static_cast<int>(pwc_iters));
    stored.model = "pwc";
    stored.domain = data.hull();
    stored.converged = true;
    stored.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    stored.bound_trajectory = fit.loglik_trajectory;
    stored.pwc = std::move(fit);
    summary["final_bound"] = stored.bound_trajectory.back();
    summary["n_bins"] = n_bins;
    summary["iterations"] = stored.bound_trajectory.size();
    summary["wall_time_s"] = stored.wall_time_s;
  } else {
    throw InputError("fit: unknown model '" + model + "'");
  }

  write_model(stored, (dir / "model.txt").string());
  std::ofstream json_out(dir / "summary.json");
  json_out << summary.dump(2) << '\n';
  config.write_snapshot(dir, "fit");
}

// ---------------------------------------------------------------------------
// evaluate

inline void cmd_evaluate(const Config& config) {
  const auto dir = prepare_out_dir(config);
  const std::string model_path = config.require_string("model");
  const std::string test_path = config.require_string("test");
  const std::string truth_path = config.get_string("truth", "");
  EvalSettings settings;
  settings.u_samples = static_cast<int>(config.get_long("u_samples", 50));
  settings.path_grid = static_cast<int>(config.get_long("path_grid", 3001));
  settings.quad_points = static_cast<int>(config.get_long("quad_points", 501));
  settings.seed = config.get_seed("seed", 0);
  const long mise_points = config.get_long("mise_points", 6001);
  const long curve_grid = config.get_long("curve_grid", 0);
  const double credible_mass = config.get_double("credible_mass", 0.75);
  const long curve_samples = config.get_long("curve_samples", 2000);
  config.reject_unknown_keys("evaluate");

  const StoredModel model = read_model(model_path);
  const PanelDataset test = read_panel_csv(test_path);

  EvalReport report;
  if (model.model == "pwc") {
    // Point estimate: deterministic plug-in likelihood.
    const auto t_start = std::chrono::steady_clock::now();
    report.settings = settings;
    for (const auto& subject : test.subjects) {
      double ll = -simpson(model.pwc, subject.window.start, subject.window.end,
                           settings.quad_points);
      for (const auto& rec : subject.records) {
        if (rec.count == 0) continue;
        const double rate = simpson(model.pwc, rec.interval.start,
                                    rec.interval.end, settings.quad_points);
        ll += static_cast<double>(rec.count) * std::log(rate);
      }
      report.per_subject_ll.emplace_back(subject.id, ll);
      report.test_ll += ll;
    }
    report.wall_time_s = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - t_start)
                             .count();
  } else {
    report = test_log_likelihood(*model.gp, test, model.domain, settings,
                                 model.model == "gp4cw");
  }

  const auto intensity_mean = [&](double x) {
    if (model.model == "pwc") return model.pwc(x);
    const PosteriorMoments m = model.gp->posterior_moments_at(x);
    return m.mean * m.mean + m.variance;
  };

  if (!truth_path.empty()) {
    const IntensitySpec truth = read_truth_csv(truth_path);
    report.mise = mise(intensity_mean, truth, model.domain,
                       static_cast<int>(mise_points));
  }

  nlohmann::json json;
  if (report.mise) json["mise"] = *report.mise;
  json["test_ll"] = report.test_ll;
  json["wall_time_s"] = report.wall_time_s;
  json["settings"] = {{"u_samples", settings.u_samples},
                      {"path_grid", settings.path_grid},
                      {"quad_points", settings.quad_points},
                      {"seed", settings.seed}};
  std::ofstream json_out(dir / "eval.json");
  json_out << json.dump(2) << '\n';

  {
    std::ofstream per_subject(dir / "per_subject.csv");
    per_subject << "subject_id,test_ll\n";
    for (const auto& [id, ll] : report.per_subject_ll) {
      per_subject << id << ',' << detail::format_double(ll) << '\n';
    }
  }

  if (curve_grid > 1) {
    const std::vector<double> grid =
        linspace(model.domain.start, model.domain.end,
                 static_cast<std::size_t>(curve_grid));
    std::ofstream curve(dir / "curve.csv");
    curve << "x,mean,lower,upper\n";
    if (model.model == "pwc") {
      for (const double x : grid) {
        const double v = model.pwc(x);
        curve << detail::format_double(x) << ',' << detail::format_double(v)
              << ',' << detail::format_double(v) << ','
              << detail::format_double(v) << '\n';
      }
    } else {
      const IntensityCurve c =
          predict_intensity(*model.gp, grid, credible_mass,
                            static_cast<int>(curve_samples), settings.seed);
      for (std::size_t i = 0; i < grid.size(); ++i) {
        curve << detail::format_double(c.x[i]) << ','
              << detail::format_double(c.mean[i]) << ','
              << detail::format_double(c.lower[i]) << ','
              << detail::format_double(c.upper[i]) << '\n';
      }
    }
  }
  config.write_snapshot(dir, "evaluate");
}

// ---------------------------------------------------------------------------
// select-b

inline void cmd_select_b(const Config& config) {
  const auto dir = prepare_out_dir(config);
  const long phi_points = config.get_long("phi_points", 5000);
  const double phi_min = config.get_double("phi_min", 1e-6);
  const double phi_max = config.get_double("phi_max", 1e6);
  const long b_points = config.get_long("b_points", 50);
  const double b_min = config.get_double("b_min", 0.0);
  const double b_max = config.get_double("b_max", 1.0);
  config.reject_unknown_keys("select-b");

  const SelectBResult result =
      select_b(logspace(phi_min, phi_max, static_cast<std::size_t>(phi_points)),
               linspace(b_min, b_max, static_cast<std::size_t>(b_points)));

  {
    std::ofstream csv(dir / "gapgrid.csv");
    csv << "b,variance\n";
    for (std::size_t i = 0; i < result.grid.b_values.size(); ++i) {
      csv << detail::format_double(result.grid.b_values[i]) << ','
          << detail::format_double(result.grid.variances[i]) << '\n';
    }
  }
  nlohmann::json json;
  json["b_star"] = result.b_star;
  std::ofstream json_out(dir / "b_star.json");
  json_out << json.dump(2) << '\n';
  config.write_snapshot(dir, "select-b");
}

// ---------------------------------------------------------------------------
// bench

struct BenchCell {
  double value = 0.0;  // sweep point
  std::vector<double> wall_s;
  std::vector<double> per_iter_s;
  std::vector<double> bound;
  std::vector<double> mise_values;
  int errors = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double quantile_of(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(pos);
  const std::size_t j = std::min(i + 1, v.size() - 1);
  const double t = pos - static_cast<double>(i);
  return v[i] + t * (v[j] - v[i]);
}

inline void cmd_bench(const Config& config) {
  const auto dir = prepare_out_dir(config);
  const std::string sweep = config.get_string("sweep", "pseudo");
  const std::vector<double> sweep_values =
      config.get_list("values", {10.0, 20.0, 40.0});
  const long trials = config.get_long("trials", 5);
  const double split = config.get_double("split", 0.5);
  const bool compute_mise = config.get_long("compute_mise", 1) != 0;
  const std::uint64_t seed = config.get_seed("seed", 1);

  // Simulation settings reuse the simulate keys.
  Config sim_template(config);

  FitConfig base_cfg = fit_config_from(config);
  // Bench clocks per-iteration cost, so every run performs the same number
  // of vEM iterations.
  base_cfg.max_vem_iters = static_cast<int>(config.get_long("max_vem_iters", 3));
  base_cfg.rel_tol = config.get_double("rel_tol", 1e-300);
  const long base_subjects = config.get_long("subjects", 100);
  config.get_string("intensity", "square_wave");
  config.get_double("domain_start", 0.0);
  config.get_double("domain_end", 60.0);
  config.get_long("n_intervals", 10);
  config.get_double("theta", 1.0);
  config.get_double("constant_value", 4.0);
  config.get_double("gp_gamma", 2.0);
  config.get_double("gp_lengthscale", 5.0);
  config.get_long("gp_grid_size", 3001);
  const long mise_points = config.get_long("mise_points", 6001);
  config.reject_unknown_keys("bench");
  if (sweep != "pseudo" && sweep != "ratio") {
    throw InputError("bench: sweep must be 'pseudo' or 'ratio'");
  }

  std::vector<BenchCell> cells;
  for (const double value : sweep_values) {
    BenchCell cell;
    cell.value = value;

    struct TrialOutcome {
      bool ok = false;
      double wall = 0.0, per_iter = 0.0, bound = 0.0, mise_v = 0.0;
    };
    std::vector<TrialOutcome> outcomes(static_cast<std::size_t>(trials));
    const int workers = worker_count(static_cast<std::size_t>(trials));

    const auto run_trial = [&](long trial) {
      TrialOutcome outcome;
      try {
        Config sim_cfg(sim_template);
        const long subjects = sweep == "ratio"
                                  ? std::max<long>(4, static_cast<long>(
                                        std::lround(base_subjects * value)))
                                  : base_subjects;
        sim_cfg.set("subjects", std::to_string(subjects));
        sim_cfg.set("seed", std::to_string(seed + static_cast<std::uint64_t>(trial)));
        const SimulatedData sim = simulate_dataset(sim_cfg);
        auto [train, test] = train_test_split(
            sim.panel, split, derive_seed(seed + static_cast<std::uint64_t>(trial), 99));

        FitConfig cfg = base_cfg;
        cfg.seed = seed + static_cast<std::uint64_t>(trial);
        if (sweep == "pseudo") cfg.n_pseudo = static_cast<int>(value);
        const FitResult fit = fit_gp4c(train, cfg);
        outcome.wall = fit.wall_time_s;
        const std::size_t iters = fit.bound_trajectory.size() - 1;
        outcome.per_iter = fit.wall_time_s / static_cast<double>(std::max<std::size_t>(iters, 1));
        outcome.bound = fit.final_bound.total;
        if (compute_mise) {
          const auto est = [&](double x) {
            const PosteriorMoments m = fit.gp.posterior_moments_at(x);
            return m.mean * m.mean + m.variance;
          };
          outcome.mise_v = mise(est, sim.intensity, sim.domain,
                                static_cast<int>(mise_points));
        }
        outcome.ok = true;
      } catch (const std::exception&) {
        outcome.ok = false;
      }
      return outcome;
    };

    for (long first = 0; first < trials; first += workers) {
      std::vector<std::future<TrialOutcome>> futures;
      const long last = std::min<long>(trials, first + workers);
      for (long t = first; t < last; ++t) {
        futures.push_back(std::async(std::launch::async, run_trial, t));
      }
      for (long t = first; t < last; ++t) {
        outcomes[static_cast<std::size_t>(t)] =
            futures[static_cast<std::size_t>(t - first)].get();
      }
    }

    for (const auto& outcome : outcomes) {
      if (!outcome.ok) {
        ++cell.errors;
        continue;
      }
      cell.wall_s.push_back(outcome.wall);
      cell.per_iter_s.push_back(outcome.per_iter);
      cell.bound.push_back(outcome.bound);
      if (compute_mise) cell.mise_values.push_back(outcome.mise_v);
    }
    cells.push_back(std::move(cell));
  }

  std::ofstream csv(dir / "bench.csv");
  csv << "sweep,value,trials,errors,median_wall_s,q25_wall_s,q75_wall_s,"
         "median_per_iter_s,median_bound";
  if (compute_mise) csv << ",median_mise";
  csv << '\n';
  for (const auto& cell : cells) {
    csv << sweep << ',' << detail::format_double(cell.value) << ',' << trials
        << ',' << cell.errors << ','
        << detail::format_double(median_of(cell.wall_s)) << ','
        << detail::format_double(quantile_of(cell.wall_s, 0.25)) << ','
        << detail::format_double(quantile_of(cell.wall_s, 0.75)) << ','
        << detail::format_double(median_of(cell.per_iter_s)) << ','
        << detail::format_double(median_of(cell.bound));
    if (compute_mise) csv << ',' << detail::format_double(median_of(cell.mise_values));
    csv << '\n';
  }
  config.write_snapshot(dir, "bench");
}

}  // namespace panelgp::cli
