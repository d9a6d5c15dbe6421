#pragma once

// Dataset types, CSV ingestion/serialization and the synthetic generators:
// square-wave and GP-drawn intensities, inhomogeneous Poisson sampling by
// thinning, and Dirichlet interval censoring.
//
// Panel CSV:     header "subject_id,t_start,t_end,count", one record per row,
//                rows need not be grouped by subject.
// Recurrent CSV: header "subject_id,t", one timestamp per row, followed by a
//                "#windows" marker line and rows "subject_id,start,end".
// Truth CSV:     header "x,lambda", the intensity tabulated on a grid.
// All files are UTF-8 with LF endings; floats carry 17 significant digits.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "panelgp/kernel.hpp"
#include "panelgp/linalg.hpp"
#include "panelgp/quadrature.hpp"
#include "panelgp/rng.hpp"

namespace panelgp {

// Errors caused by bad user input (malformed files, invalid configuration).
// The CLI maps these to exit code 2; numerical failures stay exit code 1.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CsvError : InputError {
  CsvError(const std::string& path, int row, const std::string& what)
      : InputError(path + ":" + std::to_string(row) + ": " + what), row(row) {}
  int row;
};

struct PanelRecord {
  Interval interval;
  long count = 0;
};

struct PanelSubject {
  std::string id;
  Interval window;
  std::vector<PanelRecord> records;

  long total_count() const {
    long t = 0;
    for (const auto& r : records) t += r.count;
    return t;
  }
};

struct PanelDataset {
  std::vector<PanelSubject> subjects;

  bool empty() const { return subjects.empty(); }
  long total_count() const {
    long t = 0;
    for (const auto& s : subjects) t += s.total_count();
    return t;
  }
  double total_observed_length() const {
    double t = 0.0;
    for (const auto& s : subjects) t += s.window.length();
    return t;
  }
  // Smallest interval covering every subject window.
  Interval hull() const {
    if (subjects.empty()) return {};
    double lo = subjects.front().window.start;
    double hi = subjects.front().window.end;
    for (const auto& s : subjects) {
      lo = std::min(lo, s.window.start);
      hi = std::max(hi, s.window.end);
    }
    return {lo, hi};
  }
};

struct RecurrentSubject {
  std::string id;
  Interval window;
  std::vector<double> timestamps;  // sorted
};

struct RecurrentDataset {
  std::vector<RecurrentSubject> subjects;

  bool empty() const { return subjects.empty(); }
  Interval hull() const {
    if (subjects.empty()) return {};
    double lo = subjects.front().window.start;
    double hi = subjects.front().window.end;
    for (const auto& s : subjects) {
      lo = std::min(lo, s.window.start);
      hi = std::max(hi, s.window.end);
    }
    return {lo, hi};
  }
};

// ---------------------------------------------------------------------------
// Intensity specifications

// A nonnegative intensity function with enough structure to expose an upper
// bound for thinning. Tables are evaluated by linear interpolation.
struct IntensitySpec {
  enum class Kind { SquareWave, Constant, Table };

  Kind kind = Kind::Constant;
  double constant_value = 0.0;
  std::vector<double> xs;      // table nodes, strictly increasing
  std::vector<double> values;  // nonnegative

  static IntensitySpec square_wave() {
    IntensitySpec s;
    s.kind = Kind::SquareWave;
    return s;
  }
  static IntensitySpec constant(double value) {
    if (value < 0.0) throw std::domain_error("IntensitySpec: negative constant");
    IntensitySpec s;
    s.kind = Kind::Constant;
    s.constant_value = value;
    return s;
  }
  static IntensitySpec table(std::vector<double> xs, std::vector<double> values) {
    if (xs.size() != values.size() || xs.size() < 2) {
      throw std::domain_error("IntensitySpec: table needs >= 2 matching nodes");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] < 0.0) {
        throw std::domain_error("IntensitySpec: table values must be nonnegative");
      }
      if (i > 0 && !(xs[i] > xs[i - 1])) {
        throw std::domain_error("IntensitySpec: table nodes must increase");
      }
    }
    IntensitySpec s;
    s.kind = Kind::Table;
    s.xs = std::move(xs);
    s.values = std::move(values);
    return s;
  }

  double operator()(double x) const {
    switch (kind) {
      case Kind::SquareWave:
        return square_wave_value(x);
      case Kind::Constant:
        return constant_value;
      case Kind::Table: {
        if (x <= xs.front()) return values.front();
        if (x >= xs.back()) return values.back();
        const auto it = std::upper_bound(xs.begin(), xs.end(), x);
        const std::size_t j = static_cast<std::size_t>(it - xs.begin());
        const double t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
        return values[j - 1] + t * (values[j] - values[j - 1]);
      }
    }
    return 0.0;
  }

  // Upper bound of the intensity over the window (linear interpolation
  // attains its maximum at a node).
  double max_on(const Interval& window) const {
    switch (kind) {
      case Kind::SquareWave:
        return 7.0;
      case Kind::Constant:
        return constant_value;
      case Kind::Table: {
        double m = std::max((*this)(window.start), (*this)(window.end));
        for (std::size_t i = 0; i < xs.size(); ++i) {
          if (xs[i] >= window.start && xs[i] <= window.end) {
            m = std::max(m, values[i]);
          }
        }
        return m;
      }
    }
    return 0.0;
  }

  static double square_wave_value(double x) {
    const long long block = static_cast<long long>(std::floor(x / 10.0));
    return (block % 2 == 0) ? 7.0 : 2.0;
  }
};

// The square-wave test intensity: 7 on [0,10), 2 on [10,20), repeating.
inline double square_wave_h1(double x) {
  return IntensitySpec::square_wave_value(x);
}

// Draws a zero-mean GP path on an evenly spaced grid, squares it, and
// returns it as a table spec (linear interpolation elsewhere).
inline IntensitySpec draw_gp_intensity(const ArdKernel& kernel,
                                       const Interval& domain, int grid_size,
                                       std::uint64_t seed) {
  if (grid_size < 2) {
    throw std::domain_error("draw_gp_intensity: grid_size must be >= 2");
  }
  const std::vector<double> grid =
      linspace(domain.start, domain.end, static_cast<std::size_t>(grid_size));
  Eigen::MatrixXd cov = gram(kernel, grid, grid);
  const Eigen::MatrixXd chol = cholesky_with_escalation(cov, 1e-6);
  Rng rng(seed);
  Eigen::VectorXd z(grid_size);
  for (int i = 0; i < grid_size; ++i) z[i] = rng.normal();
  Eigen::VectorXd path = chol * z;
  std::vector<double> values(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    values[i] = path[static_cast<Eigen::Index>(i)] *
                path[static_cast<Eigen::Index>(i)];
  }
  return IntensitySpec::table(grid, values);
}

// ---------------------------------------------------------------------------
// Point-process sampling

// Lewis thinning: homogeneous candidates at the intensity's upper bound,
// each kept with probability lambda(t)/lambda_max.
inline std::vector<double> sample_ipp(const IntensitySpec& intensity,
                                      const Interval& window,
                                      std::uint64_t seed) {
  std::vector<double> events;
  const double lambda_max = intensity.max_on(window);
  if (lambda_max <= 0.0) return events;
  Rng rng(seed);
  double t = window.start;
  for (;;) {
    t += rng.exponential() / lambda_max;
    if (t >= window.end) break;
    if (rng.uniform() < intensity(t) / lambda_max) {
      events.push_back(t);
    }
  }
  return events;
}

// Partitions the window at cumulative Dirichlet weights and counts events
// per interval. The event total is preserved exactly.
inline PanelSubject censor_to_panel(const std::vector<double>& events,
                                    const Interval& window, int n_intervals,
                                    const std::vector<double>& theta,
                                    std::uint64_t seed,
                                    const std::string& id = "s0") {
  if (n_intervals < 1 ||
      static_cast<std::size_t>(n_intervals) != theta.size()) {
    throw std::domain_error(
        "censor_to_panel: n_intervals must match the concentration vector");
  }
  Rng rng(seed);
  const std::vector<double> w = rng.dirichlet(theta);
  std::vector<double> edges(static_cast<std::size_t>(n_intervals) + 1);
  edges.front() = window.start;
  double cum = 0.0;
  for (int i = 0; i < n_intervals; ++i) {
    cum += w[static_cast<std::size_t>(i)];
    edges[static_cast<std::size_t>(i) + 1] = window.start + cum * window.length();
  }
  edges.back() = window.end;

  PanelSubject subject;
  subject.id = id;
  subject.window = window;
  subject.records.reserve(static_cast<std::size_t>(n_intervals));
  for (int i = 0; i < n_intervals; ++i) {
    const double lo = edges[static_cast<std::size_t>(i)];
    const double hi = edges[static_cast<std::size_t>(i) + 1];
    long count = 0;
    for (const double t : events) {
      const bool in = (i + 1 == n_intervals) ? (t >= lo && t <= hi)
                                             : (t >= lo && t < hi);
      if (in) ++count;
    }
    subject.records.push_back({Interval(lo, hi), count});
  }
  return subject;
}

// ---------------------------------------------------------------------------
// CSV I/O

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& path,
                           int row, const std::string& col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw CsvError(path, row, "cannot parse " + col + " value '" + s + "'");
  }
}

inline long parse_count(const std::string& s, const std::string& path,
                        int row) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    if (v < 0) throw CsvError(path, row, "negative count '" + s + "'");
    return v;
  } catch (const CsvError&) {
    throw;
  } catch (const std::exception&) {
    throw CsvError(path, row, "cannot parse count value '" + s + "'");
  }
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

// Sorts the records of one subject, closes sub-1e-9 gaps, and checks the
// disjoint-cover invariant.
inline void finalize_panel_subject(PanelSubject& s, const std::string& path) {
  std::sort(s.records.begin(), s.records.end(),
            [](const PanelRecord& a, const PanelRecord& b) {
              return a.interval.start < b.interval.start;
            });
  for (std::size_t i = 1; i < s.records.size(); ++i) {
    const double gap =
        s.records[i].interval.start - s.records[i - 1].interval.end;
    if (gap < -1e-9) {
      throw InputError(path + ": subject '" + s.id +
                       "' has overlapping intervals");
    }
    if (std::abs(gap) >= 1e-9) {
      throw InputError(path + ": subject '" + s.id +
                       "' has a gap between intervals (union must equal the "
                       "observation window)");
    }
    s.records[i].interval.start = s.records[i - 1].interval.end;
  }
  if (!s.records.empty()) {
    s.window = Interval(s.records.front().interval.start,
                        s.records.back().interval.end);
  }
}

}  // namespace detail

inline PanelDataset read_panel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) {
    throw CsvError(path, 1, "missing header");
  }
  ++row;
  detail::strip_cr(line);
  if (line != "subject_id,t_start,t_end,count") {
    throw CsvError(path, row,
                   "expected header 'subject_id,t_start,t_end,count'");
  }
  PanelDataset data;
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    ++row;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_csv_row(line);
    if (fields.size() != 4) {
      throw CsvError(path, row, "expected 4 fields, got " +
                                    std::to_string(fields.size()));
    }
    const double t0 = detail::parse_double(fields[1], path, row, "t_start");
    const double t1 = detail::parse_double(fields[2], path, row, "t_end");
    if (!(t0 <= t1)) throw CsvError(path, row, "t_start exceeds t_end");
    const long count = detail::parse_count(fields[3], path, row);
    auto [it, inserted] = index.try_emplace(fields[0], data.subjects.size());
    if (inserted) {
      data.subjects.push_back(PanelSubject{fields[0], Interval(t0, t1), {}});
    }
    data.subjects[it->second].records.push_back({Interval(t0, t1), count});
  }
  for (auto& s : data.subjects) detail::finalize_panel_subject(s, path);
  return data;
}

inline void write_panel_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "subject_id,t_start,t_end,count\n";
  for (const auto& s : data.subjects) {
    for (const auto& r : s.records) {
      out << s.id << ',' << detail::format_double(r.interval.start) << ','
          << detail::format_double(r.interval.end) << ',' << r.count << '\n';
    }
  }
}

inline RecurrentDataset read_recurrent_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) throw CsvError(path, 1, "missing header");
  ++row;
  detail::strip_cr(line);
  if (line != "subject_id,t") {
    throw CsvError(path, row, "expected header 'subject_id,t'");
  }
  std::map<std::string, std::vector<double>> stamps;
  std::vector<std::string> order;
  bool in_windows = false;
  RecurrentDataset data;
  std::map<std::string, std::size_t> window_index;
  while (std::getline(in, line)) {
    ++row;
    detail::strip_cr(line);
    if (line.empty()) continue;
    if (line == "#windows") {
      in_windows = true;
      continue;
    }
    const auto fields = detail::split_csv_row(line);
    if (!in_windows) {
      if (fields.size() != 2) {
        throw CsvError(path, row, "expected 2 fields before #windows");
      }
      auto [it, inserted] = stamps.try_emplace(fields[0]);
      if (inserted) order.push_back(fields[0]);
      it->second.push_back(detail::parse_double(fields[1], path, row, "t"));
    } else {
      if (fields.size() != 3) {
        throw CsvError(path, row, "expected 3 fields after #windows");
      }
      const double w0 =
          detail::parse_double(fields[1], path, row, "window_start");
      const double w1 = detail::parse_double(fields[2], path, row, "window_end");
      if (!(w0 <= w1)) throw CsvError(path, row, "window_start exceeds window_end");
      auto [it, inserted] =
          window_index.try_emplace(fields[0], data.subjects.size());
      if (!inserted) {
        throw CsvError(path, row, "duplicate window for subject '" + fields[0] + "'");
      }
      data.subjects.push_back(RecurrentSubject{fields[0], Interval(w0, w1), {}});
    }
  }
  if (!in_windows) {
    throw InputError(path + ": missing #windows section");
  }
  // Subjects that emitted no events still need their window row; events for
  // unknown subjects are an error.
  for (const auto& id : order) {
    if (!window_index.count(id)) {
      throw InputError(path + ": subject '" + id + "' has events but no window");
    }
  }
  for (auto& s : data.subjects) {
    auto it = stamps.find(s.id);
    if (it != stamps.end()) {
      s.timestamps = std::move(it->second);
      std::sort(s.timestamps.begin(), s.timestamps.end());
      for (const double t : s.timestamps) {
        if (t < s.window.start || t > s.window.end) {
          throw InputError(path + ": subject '" + s.id +
                           "' has a timestamp outside its window");
        }
      }
    }
  }
  return data;
}

inline void write_recurrent_csv(const RecurrentDataset& data,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "subject_id,t\n";
  for (const auto& s : data.subjects) {
    for (const double t : s.timestamps) {
      out << s.id << ',' << detail::format_double(t) << '\n';
    }
  }
  out << "#windows\n";
  for (const auto& s : data.subjects) {
    out << s.id << ',' << detail::format_double(s.window.start) << ','
        << detail::format_double(s.window.end) << '\n';
  }
}

// Truth table for MISE: the intensity tabulated on a grid.
inline void write_truth_csv(const IntensitySpec& intensity,
                            const Interval& domain, std::size_t grid_size,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "x,lambda\n";
  for (const double x : linspace(domain.start, domain.end, grid_size)) {
    out << detail::format_double(x) << ',' << detail::format_double(intensity(x))
        << '\n';
  }
}

inline IntensitySpec read_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::string line;
  int row = 0;
  if (!std::getline(in, line)) throw CsvError(path, 1, "missing header");
  ++row;
  detail::strip_cr(line);
  if (line != "x,lambda") throw CsvError(path, row, "expected header 'x,lambda'");
  std::vector<double> xs, vals;
  while (std::getline(in, line)) {
    ++row;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_csv_row(line);
    if (fields.size() != 2) throw CsvError(path, row, "expected 2 fields");
    xs.push_back(detail::parse_double(fields[0], path, row, "x"));
    vals.push_back(detail::parse_double(fields[1], path, row, "lambda"));
  }
  if (xs.size() < 2) throw InputError(path + ": truth table needs >= 2 rows");
  return IntensitySpec::table(std::move(xs), std::move(vals));
}

// ---------------------------------------------------------------------------

// Subject-level split; the train side holds round(K * fraction) subjects.
// Both sides keep the original subject order.
inline std::pair<PanelDataset, PanelDataset> train_test_split(
    const PanelDataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::domain_error("train_test_split: fraction must be in (0, 1)");
  }
  const std::size_t k = data.subjects.size();
  if (k < 2) {
    throw std::domain_error("train_test_split: need at least 2 subjects");
  }
  std::size_t n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(k) * train_fraction));
  n_train = std::clamp<std::size_t>(n_train, 1, k - 1);

  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  std::vector<bool> in_train(k, false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[idx[i]] = true;

  std::pair<PanelDataset, PanelDataset> out;
  for (std::size_t i = 0; i < k; ++i) {
    (in_train[i] ? out.first : out.second).subjects.push_back(data.subjects[i]);
  }
  return out;
}

}  // namespace panelgp
