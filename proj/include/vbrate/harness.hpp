#pragma once

// Experiment plumbing: configs, replication loops, rate tables, exponent
// fits and CSV/JSON emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vbrate/core.hpp"
#include "vbrate/regression.hpp"

namespace vbrate {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------- config

struct PriorSpec {
  std::string family = "gaussian";  // gaussian | rescaled_cauchy | rescaled_gaussian
                                    // | markov | uniform_positions
  double variance = 1.0;
  double scale = 1.0;
  double tau = 1.0;   // geometric rate of the sieve weights
  int k_max = 0;      // 0 picks a size from n
  double c = 1.0;     // change probability n^{-c}
  int grid_size = 64;
};

struct ExperimentConfig {
  std::string model = "gsm";  // gsm | trunc_gauss | piecewise | mixture | expfam | divergence
  double alpha = 1.0;
  double beta = 1.0;
  double B = 1.0;
  double sigma = 1.0;
  int k_star = 4;
  PriorSpec prior;
  std::string signal = "boundary";  // boundary | zero | spike | ladder
  std::vector<int> n_grid;
  int replications = 1;
  std::uint64_t master_seed = 1;
  std::string output;
  std::vector<double> t_grid;
  std::vector<int> candidates;
  int samples = 64;
  bool with_loglog = false;
  std::vector<double> truth_mu;
  std::vector<double> truth_w;
  std::vector<double> truth_theta;

  /// Checks shared invariants; fits need at least min_points values of n.
  void validate(std::size_t min_points = 3) const {
    require(n_grid.size() >= min_points,
            "n_grid needs at least " + std::to_string(min_points) + " values");
    for (std::size_t i = 0; i < n_grid.size(); ++i) {
      require(n_grid[i] >= 1, "n_grid values must be positive");
      if (i > 0) require(n_grid[i] > n_grid[i - 1], "n_grid must be strictly increasing");
    }
    require(replications >= 1, "replications must be positive");
    require(alpha > 0.0 && std::isfinite(alpha), "alpha must be positive");
    require(beta >= 0.0 && std::isfinite(beta), "beta must be non-negative");
    require(B > 0.0 && std::isfinite(B), "B must be positive");
    require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
    require(k_star >= 1, "k_star must be positive");
    require(samples >= 1, "samples must be positive");
    require(prior.variance > 0.0 && prior.scale > 0.0 && prior.tau >= 0.0,
            "prior variance and scale must be positive, tau non-negative");
    require(prior.k_max >= 0 && prior.grid_size >= 2 && prior.c > 0.0,
            "prior k_max, grid_size or c out of range");
  }
};

namespace detail {

inline void reject_unknown(const Json& j, std::initializer_list<const char*> keys,
                           const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    require(known, "unknown key '" + item.key() + "' in " + where);
  }
}

template <class T>
void read_field(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InputError(std::string("config field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
  detail::reject_unknown(
      j,
      {"model", "alpha", "beta", "B", "sigma", "k_star", "prior", "signal", "n_grid",
       "replications", "master_seed", "output", "t_grid", "candidates", "samples",
       "with_loglog", "truth_mu", "truth_w", "truth_theta"},
      "config");
  ExperimentConfig c;
  detail::read_field(j, "model", c.model);
  detail::read_field(j, "alpha", c.alpha);
  detail::read_field(j, "beta", c.beta);
  detail::read_field(j, "B", c.B);
  detail::read_field(j, "sigma", c.sigma);
  detail::read_field(j, "k_star", c.k_star);
  detail::read_field(j, "signal", c.signal);
  detail::read_field(j, "n_grid", c.n_grid);
  detail::read_field(j, "replications", c.replications);
  detail::read_field(j, "master_seed", c.master_seed);
  detail::read_field(j, "output", c.output);
  detail::read_field(j, "t_grid", c.t_grid);
  detail::read_field(j, "candidates", c.candidates);
  detail::read_field(j, "samples", c.samples);
  detail::read_field(j, "with_loglog", c.with_loglog);
  detail::read_field(j, "truth_mu", c.truth_mu);
  detail::read_field(j, "truth_w", c.truth_w);
  detail::read_field(j, "truth_theta", c.truth_theta);
  if (j.contains("prior")) {
    const Json& p = j.at("prior");
    detail::reject_unknown(p, {"family", "variance", "scale", "tau", "k_max", "c", "grid_size"},
                           "prior");
    detail::read_field(p, "family", c.prior.family);
    detail::read_field(p, "variance", c.prior.variance);
    detail::read_field(p, "scale", c.prior.scale);
    detail::read_field(p, "tau", c.prior.tau);
    detail::read_field(p, "k_max", c.prior.k_max);
    detail::read_field(p, "c", c.prior.c);
    detail::read_field(p, "grid_size", c.prior.grid_size);
  }
  return c;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------- tables

struct RateRow {
  double n = 0.0;
  double mean_risk = 0.0;
  double stderr = 0.0;
  int replications = 0;

  bool operator==(const RateRow&) const = default;
};

struct RateTable {
  std::vector<RateRow> rows;

  bool operator==(const RateTable&) const = default;
};

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::optional<double> loglog_coefficient;
};

/// Mean and standard error (sample sd / sqrt(reps)) of one design point.
inline RateRow summarize(double n, std::span<const double> values) {
  require(!values.empty(), "no replications to summarize");
  const double m = compensated_sum(values) / static_cast<double>(values.size());
  CompensatedSum ss;
  for (double v : values) ss.add((v - m) * (v - m));
  const std::size_t r = values.size();
  const double se = r > 1 ? std::sqrt(ss.value() / static_cast<double>(r - 1) / r) : 0.0;
  return {n, m, se, static_cast<int>(r)};
}

/// Least squares of log(mean_risk) on log n, plus log log n when requested.
inline RateFit fit_rate_exponent(const RateTable& table, bool with_loglog) {
  require(table.rows.size() >= 3, "exponent fits need at least 3 rows");
  std::vector<double> ln, lln, lr;
  for (const auto& row : table.rows) {
    require(row.mean_risk > 0.0 && std::isfinite(row.mean_risk),
            "exponent fits need positive risks");
    require(row.n > 1.0, "exponent fits need n > 1");
    ln.push_back(std::log(row.n));
    lln.push_back(std::log(std::log(row.n)));
    lr.push_back(std::log(row.mean_risk));
  }
  if (with_loglog) require(table.rows.front().n > std::exp(1.0), "log log n needs n > e");
  const LinearFit f = with_loglog ? least_squares({ln, lln}, lr) : least_squares({ln}, lr);
  RateFit out{f.coefficients[0], f.intercept, f.r_squared, std::nullopt};
  if (with_loglog) out.loglog_coefficient = f.coefficients[1];
  return out;
}

// ---------------------------------------------------------------- emission

/// Shortest decimal text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// A plain numeric table with named columns.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    out += (c ? "," : "") + t.columns[c];
  }
  out += "\n";
  for (const auto& row : t.rows) {
    require(row.size() == t.columns.size(), "table row width differs from header");
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += (c ? "," : "") + format_number(row[c]);
    }
    out += "\n";
  }
  return out;
}

inline Table to_table(const RateTable& t) {
  Table out{{"n", "mean_risk", "stderr", "replications"}, {}};
  for (const auto& r : t.rows) {
    out.rows.push_back({r.n, r.mean_risk, r.stderr, static_cast<double>(r.replications)});
  }
  return out;
}

inline std::string to_csv(const RateTable& t) { return to_csv(to_table(t)); }

inline RateTable rate_table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "n,mean_risk,stderr,replications") {
    throw InputError("rate table CSV header must be n,mean_risk,stderr,replications");
  }
  RateTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      v.push_back(std::strtod(cell.c_str(), &end));
      require(end && *end == '\0' && !cell.empty(), "malformed number '" + cell + "'");
    }
    require(v.size() == 4, "rate table rows need 4 columns");
    t.rows.push_back({v[0], v[1], v[2], static_cast<int>(v[3])});
  }
  return t;
}

inline Json to_json(const RateTable& t) {
  Json rows = Json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"n", r.n},
                    {"mean_risk", r.mean_risk},
                    {"stderr", r.stderr},
                    {"replications", r.replications}});
  }
  return Json{{"rows", rows}};
}

inline RateTable rate_table_from_json(const Json& j) {
  RateTable t;
  try {
    for (const auto& r : j.at("rows")) {
      t.rows.push_back({r.at("n").get<double>(), r.at("mean_risk").get<double>(),
                        r.at("stderr").get<double>(), r.at("replications").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed rate table JSON: ") + e.what());
  }
  return t;
}

inline Json to_json(const RateFit& f) {
  Json j{{"slope", f.slope}, {"intercept", f.intercept}, {"r_squared", f.r_squared}};
  if (f.loglog_coefficient) j["loglog_coefficient"] = *f.loglog_coefficient;
  return j;
}

inline RateFit rate_fit_from_json(const Json& j) {
  RateFit f;
  try {
    f.slope = j.at("slope").get<double>();
    f.intercept = j.at("intercept").get<double>();
    f.r_squared = j.at("r_squared").get<double>();
    if (j.contains("loglog_coefficient")) {
      f.loglog_coefficient = j.at("loglog_coefficient").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed rate fit JSON: ") + e.what());
  }
  return f;
}

inline Json to_json(const Table& t) {
  Json rows = Json::array();
  for (const auto& row : t.rows) {
    Json r = Json::object();
    for (std::size_t c = 0; c < t.columns.size(); ++c) r[t.columns[c]] = row[c];
    rows.push_back(r);
  }
  return Json{{"columns", t.columns}, {"rows", rows}};
}

/// Writes text to path, or to stdout when path is empty or "-".
inline void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path + " for writing");
  out << text;
  out.close();
  if (!out) throw InputError("failed writing " + path);
}

enum class Format { Csv, Json };

inline Format parse_format(const std::string& s) {
  if (s == "csv") return Format::Csv;
  if (s == "json") return Format::Json;
  throw InputError("format must be csv or json");
}

inline void emit(const RateTable& t, Format f, const std::string& path) {
  write_text(path, f == Format::Csv ? to_csv(t) : to_json(t).dump(2) + "\n");
}

inline void emit(const RateFit& fit, Format f, const std::string& path) {
  if (f == Format::Json) {
    write_text(path, to_json(fit).dump(2) + "\n");
    return;
  }
  Table t{{"slope", "intercept", "r_squared"}, {{fit.slope, fit.intercept, fit.r_squared}}};
  if (fit.loglog_coefficient) {
    t.columns.push_back("loglog_coefficient");
    t.rows[0].push_back(*fit.loglog_coefficient);
  }
  write_text(path, to_csv(t));
}

// ---------------------------------------------------------------- replication

/// Raw per-replication values, values[i][r] for n_grid[i].
struct Replications {
  std::vector<int> n;
  std::vector<std::vector<double>> values;
};

/// Runs metric(n, rep, seed) for every design point with
/// seed = derive_seed(master_seed, n, rep). Slots are filled independently,
/// so results do not depend on scheduling. Errors carry (n, rep) context.
inline Replications replicate(const std::vector<int>& n_grid, int replications,
                              std::uint64_t master_seed,
                              const std::function<double(int, int, std::uint64_t)>& metric) {
  require(replications >= 1, "replications must be positive");
  Replications out;
  out.n = n_grid;
  out.values.assign(n_grid.size(), std::vector<double>(replications));
  const std::size_t total = n_grid.size() * static_cast<std::size_t>(replications);
  parallel_for(total, [&](std::size_t idx) {
    const std::size_t i = idx / replications;
    const int r = static_cast<int>(idx % replications);
    const int n = n_grid[i];
    const std::string where = " (n=" + std::to_string(n) + ", rep=" + std::to_string(r) + ")";
    try {
      out.values[i][r] = metric(n, r, derive_seed(master_seed, n, r));
    } catch (const InputError& e) {
      throw InputError(e.what() + where);
    } catch (const DomainError& e) {
      throw DomainError(e.what() + where);
    } catch (const NumericError& e) {
      throw NumericError(e.what() + where);
    }
  });
  return out;
}

inline RateTable summarize(const Replications& reps) {
  RateTable t;
  for (std::size_t i = 0; i < reps.n.size(); ++i) {
    t.rows.push_back(summarize(static_cast<double>(reps.n[i]), reps.values[i]));
  }
  return t;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace vbrate
