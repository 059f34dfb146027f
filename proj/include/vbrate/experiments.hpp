#pragma once

// Experiment drivers behind the CLI subcommands. Each returns a primary
// table (for CSV) and a JSON document with tables, fits and extras.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "vbrate/divergence.hpp"
#include "vbrate/expfam.hpp"
#include "vbrate/gsm.hpp"
#include "vbrate/harness.hpp"
#include "vbrate/mixture.hpp"
#include "vbrate/piecewise.hpp"
#include "vbrate/trunc_gauss.hpp"

namespace vbrate {

struct ExperimentOutput {
  Table table;
  Json document;
};

inline std::string render(const ExperimentOutput& out, Format f) {
  return f == Format::Csv ? to_csv(out.table) : out.document.dump(2) + "\n";
}

inline Json to_json(const ExperimentConfig& c) {
  return Json{{"model", c.model},
              {"alpha", c.alpha},
              {"beta", c.beta},
              {"B", c.B},
              {"sigma", c.sigma},
              {"k_star", c.k_star},
              {"prior",
               {{"family", c.prior.family},
                {"variance", c.prior.variance},
                {"scale", c.prior.scale},
                {"tau", c.prior.tau},
                {"k_max", c.prior.k_max},
                {"c", c.prior.c},
                {"grid_size", c.prior.grid_size}}},
              {"signal", c.signal},
              {"n_grid", c.n_grid},
              {"replications", c.replications},
              {"master_seed", c.master_seed},
              {"t_grid", c.t_grid},
              {"candidates", c.candidates},
              {"samples", c.samples},
              {"with_loglog", c.with_loglog},
              {"truth_mu", c.truth_mu},
              {"truth_w", c.truth_w},
              {"truth_theta", c.truth_theta}};
}

// ---------------------------------------------------------------- sequence model

inline constexpr int kDefaultSieveKMax = 104;

inline SievePrior make_sieve_prior(const ExperimentConfig& c, int n) {
  const int k_max = c.prior.k_max > 0 ? c.prior.k_max : kDefaultSieveKMax;
  CoordinateSpec coord;
  if (c.prior.family == "gaussian") {
    coord = CoordinateSpec::gaussian(c.prior.variance);
  } else if (c.prior.family == "rescaled_cauchy") {
    coord = CoordinateSpec::rescaled_cauchy(c.prior.scale, n);
  } else if (c.prior.family == "rescaled_gaussian") {
    coord = CoordinateSpec::rescaled_gaussian(c.prior.variance, n);
  } else {
    throw InputError("sequence-model prior family must be gaussian, rescaled_cauchy or "
                     "rescaled_gaussian");
  }
  return SievePrior::geometric(k_max, c.prior.tau, coord);
}

/// ceil(2 kbar) with kbar = (n / log n)^{1/(2 alpha + 1)}.
inline int lower_bound_spike_index(int n, double alpha) {
  const double kbar = std::pow(n / std::log(static_cast<double>(n)), 1.0 / (2.0 * alpha + 1.0));
  return static_cast<int>(std::ceil(2.0 * kbar - 1e-9));
}

inline SobolevSignal make_sequence_signal(const ExperimentConfig& c, int n, int k_max) {
  if (c.signal == "boundary") return make_signal(SignalKind::SobolevBoundary, c.alpha, c.B, k_max);
  if (c.signal == "zero") return make_signal(SignalKind::Zero, c.alpha, c.B, k_max);
  if (c.signal == "spike") {
    const int j0 = lower_bound_spike_index(n, c.alpha);
    require(j0 <= k_max, "spike index exceeds K_max");
    return make_signal(SignalKind::Spike, c.alpha, c.B, k_max, j0);
  }
  throw InputError("sequence-model signal must be boundary, zero or spike");
}

enum class SequenceMetric { Risk, Dimension };

inline Replications run_sequence(const ExperimentConfig& c, SequenceMetric metric) {
  return replicate(c.n_grid, c.replications, c.master_seed,
                   [&](int n, int, std::uint64_t seed) {
                     const SievePrior prior = make_sieve_prior(c, n);
                     const SobolevSignal s = make_sequence_signal(c, n, prior.k_max());
                     const auto post = fit_mean_field(prior, sample_observation(s, n, seed));
                     return metric == SequenceMetric::Risk ? expected_risk(post, s)
                                                           : static_cast<double>(post.k_tilde);
                   });
}

inline ExperimentOutput rate_output(const std::string& command, const ExperimentConfig& c,
                                    const RateTable& table, const std::string& metric,
                                    std::optional<RateFit> fit) {
  ExperimentOutput out{to_table(table), Json::object()};
  out.document["command"] = command;
  out.document["metric"] = metric;
  out.document["config"] = to_json(c);
  out.document["table"] = to_json(table);
  if (fit) out.document["fit"] = to_json(*fit);
  return out;
}

inline ExperimentOutput gsm_rate(const ExperimentConfig& c) {
  c.validate();
  const RateTable t = summarize(run_sequence(c, SequenceMetric::Risk));
  return rate_output("gsm-rate", c, t, "risk", fit_rate_exponent(t, c.with_loglog));
}

inline ExperimentOutput gsm_dim(const ExperimentConfig& c) {
  c.validate();
  const RateTable t = summarize(run_sequence(c, SequenceMetric::Dimension));
  return rate_output("gsm-dim", c, t, "k_tilde", fit_rate_exponent(t, false));
}

inline ExperimentOutput gsm_lower(const ExperimentConfig& c) {
  c.validate(1);
  ExperimentConfig spike = c;
  spike.signal = "spike";
  const RateTable t = summarize(run_sequence(spike, SequenceMetric::Risk));
  auto out = rate_output("gsm-lower", spike, t, "risk", std::nullopt);
  Json refs = Json::array();
  for (int n : c.n_grid) {
    const double e = 2.0 * c.alpha / (2.0 * c.alpha + 1.0);
    refs.push_back({{"n", n},
                    {"spike_index", lower_bound_spike_index(n, c.alpha)},
                    {"reference", std::pow(n, -e) * std::pow(std::log(double(n)), e)}});
  }
  out.document["reference"] = refs;
  return out;
}

// ---------------------------------------------------------------- truncated prior

inline std::vector<double> default_t_grid() {
  std::vector<double> t;
  for (int i = 1; i <= 10; ++i) t.push_back(i / 10.0);
  return t;
}

inline ExperimentOutput trunc_curve(const ExperimentConfig& c) {
  c.validate();
  const auto ts = c.t_grid.empty() ? default_t_grid() : c.t_grid;
  std::vector<double> ns(c.n_grid.begin(), c.n_grid.end());
  const auto curve = rate_exponent_curve(c.alpha, c.beta, ts, ns, c.B);
  ExperimentOutput out{{{"t", "fitted_exponent", "theory_exponent"}, {}}, Json::object()};
  for (const auto& p : curve) out.table.rows.push_back({p.t, p.fitted_exponent, p.theory_exponent});
  out.document["command"] = "trunc-curve";
  out.document["config"] = to_json(c);
  out.document["curve"] = to_json(out.table);
  return out;
}

/// Worst-case exact risk of Q_[k] with k = ceil(n^t); t defaults to
/// 1/(2 beta + 1). No sampling, so every replication agrees.
inline RateTable trunc_rate_table(const ExperimentConfig& c) {
  c.validate(1);
  const double t = c.t_grid.empty() ? 1.0 / (2.0 * c.beta + 1.0) : c.t_grid.front();
  RateTable table;
  for (int n : c.n_grid) {
    const double r = worst_case_risk(n, c.alpha, c.beta, truncation_for(n, t), c.B);
    table.rows.push_back({static_cast<double>(n), r, 0.0, c.replications});
  }
  return table;
}

// ---------------------------------------------------------------- piecewise

inline const std::vector<int>& jump_ladder() {
  static const std::vector<int> ladder{1, 2, 3, 4, 6, 8, 12, 16};
  return ladder;
}

struct PiecewiseSetup {
  SiteDensity g;
  std::vector<double> grid;
  std::vector<PiecewiseSignal> signals;
};

/// g uniform on [-2B, 2B]. Signals: zero, or the ladder of k_star equal
/// pieces alternating between grid[G/2 - m] and grid[G/2 - 1 + m].
inline PiecewiseSetup make_piecewise_setup(const ExperimentConfig& c, int n) {
  PiecewiseSetup s;
  s.g = SiteDensity::uniform(-2.0 * c.B, 2.0 * c.B);
  s.grid = make_grid(c.B, c.sigma, c.prior.grid_size, s.g);
  const int G = c.prior.grid_size;
  if (c.signal == "zero") {
    s.signals.push_back({std::vector<double>(n, 0.0), 1, 2.0 * c.B});
  } else if (c.signal == "ladder") {
    require(n >= c.k_star, "n must be at least k_star");
    for (int m : jump_ladder()) {
      if (G / 2 - m < 0 || G / 2 - 1 + m >= G) continue;
      std::vector<double> levels(c.k_star);
      for (int p = 0; p < c.k_star; ++p) {
        levels[p] = p % 2 == 0 ? s.grid[G / 2 - m] : s.grid[G / 2 - 1 + m];
      }
      if (c.k_star > 1 && levels[0] == levels[1]) continue;
      s.signals.push_back(make_piecewise_signal(levels, n, 2.0 * c.B));
    }
  } else {
    throw InputError("piecewise signal must be zero or ladder");
  }
  return s;
}

inline ChangePointPrior make_change_point_prior(const ExperimentConfig& c, int n,
                                                const SiteDensity& g) {
  if (c.prior.family == "uniform_positions") return make_uniform_positions_prior(n, g);
  if (c.prior.family == "markov" || c.prior.family == "mean_field" ||
      c.prior.family == "gaussian") {
    return make_markov_prior(n, c.prior.c, g);
  }
  throw InputError("piecewise prior family must be markov or uniform_positions");
}

inline std::vector<double> noisy_observation(const PiecewiseSignal& s, double sigma,
                                             std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z;
  std::vector<double> X(s.values.size());
  for (std::size_t i = 0; i < X.size(); ++i) X[i] = s.values[i] + sigma * z(rng);
  return X;
}

enum class PiecewiseMethod { MeanField, Chain };

/// Per-signal replications; signals share noise draws at each (n, rep).
inline std::vector<Replications> run_piecewise(const ExperimentConfig& c,
                                               PiecewiseMethod method) {
  const std::size_t count = make_piecewise_setup(c, c.n_grid.front()).signals.size();
  require(count >= 1, "no piecewise signals fit on this grid");
  std::vector<Replications> out;
  for (std::size_t si = 0; si < count; ++si) {
    out.push_back(replicate(c.n_grid, c.replications, c.master_seed,
                            [&](int n, int, std::uint64_t seed) {
                              const auto setup = make_piecewise_setup(c, n);
                              const auto& s = setup.signals.at(si);
                              const auto X = noisy_observation(s, c.sigma, seed);
                              const auto prior = make_change_point_prior(c, n, setup.g);
                              if (method == PiecewiseMethod::MeanField) {
                                return risk(fit_mean_field(X, c.sigma, prior), s);
                              }
                              return risk(fit_markov_vb(X, c.sigma, prior, setup.grid).chain, s);
                            }));
  }
  return out;
}

/// Row-wise worst signal by mean risk; its index is reported in `argmax`.
inline RateTable worst_case_table(const std::vector<Replications>& per_signal,
                                  std::vector<int>* argmax = nullptr) {
  RateTable t;
  const std::size_t rows = per_signal.front().n.size();
  for (std::size_t i = 0; i < rows; ++i) {
    RateRow best;
    int which = -1;
    for (std::size_t s = 0; s < per_signal.size(); ++s) {
      const RateRow r = summarize(static_cast<double>(per_signal[s].n[i]), per_signal[s].values[i]);
      if (which < 0 || r.mean_risk > best.mean_risk) {
        best = r;
        which = static_cast<int>(s);
      }
    }
    t.rows.push_back(best);
    if (argmax) argmax->push_back(which);
  }
  return t;
}

/// Divides each row by k_star log n.
inline RateTable normalize_by_k_log_n(const RateTable& t, int k_star) {
  RateTable out = t;
  for (auto& r : out.rows) {
    const double d = k_star * std::log(r.n);
    r.mean_risk /= d;
    r.stderr /= d;
  }
  return out;
}

inline ExperimentOutput pc_compare(const ExperimentConfig& c) {
  c.validate();
  std::vector<int> mf_arg, mc_arg;
  const RateTable mf = worst_case_table(run_piecewise(c, PiecewiseMethod::MeanField), &mf_arg);
  const RateTable mc = worst_case_table(run_piecewise(c, PiecewiseMethod::Chain), &mc_arg);
  const int k_star = c.signal == "zero" ? 1 : c.k_star;
  const RateTable mc_norm = normalize_by_k_log_n(mc, k_star);
  ExperimentOutput out{{{"n", "mf_mean_risk", "mf_stderr", "mc_mean_risk", "mc_stderr",
                         "replications"},
                        {}},
                       Json::object()};
  for (std::size_t i = 0; i < mf.rows.size(); ++i) {
    out.table.rows.push_back({mf.rows[i].n, mf.rows[i].mean_risk, mf.rows[i].stderr,
                              mc.rows[i].mean_risk, mc.rows[i].stderr,
                              static_cast<double>(mf.rows[i].replications)});
  }
  out.document["command"] = "pc-compare";
  out.document["config"] = to_json(c);
  out.document["mean_field"] = {{"table", to_json(mf)},
                                {"fit", to_json(fit_rate_exponent(mf, false))},
                                {"worst_signal", mf_arg}};
  out.document["markov_chain"] = {{"table", to_json(mc)},
                                  {"normalized_table", to_json(mc_norm)},
                                  {"normalized_fit", to_json(fit_rate_exponent(mc_norm, false))},
                                  {"worst_signal", mc_arg}};
  return out;
}

// ---------------------------------------------------------------- mixture

inline MixtureModel mixture_truth(const ExperimentConfig& c) {
  MixtureModel m;
  m.mu = c.truth_mu.empty() ? std::vector<double>{-1.5, 1.5} : c.truth_mu;
  m.w = c.truth_w.empty() ? std::vector<double>(m.mu.size(), 1.0 / m.mu.size()) : c.truth_w;
  m.sigma = c.sigma;
  m.p = 2;
  m.validate();
  return m;
}

inline DensityGrid mixture_truth_grid(const MixtureModel& truth) {
  const auto [lo, hi] = std::minmax_element(truth.mu.begin(), truth.mu.end());
  const double pad = 10.0 * truth.sigma + 5.0;
  return tabulate(truth, *lo - pad, *hi + pad, 40001);
}

struct MixtureRun {
  Replications hellinger;
  std::vector<std::vector<int>> selected;  // selected[i][r]
};

inline MixtureRun run_mixture(const ExperimentConfig& c) {
  const MixtureModel truth = mixture_truth(c);
  const DensityGrid grid = mixture_truth_grid(truth);
  const std::vector<int> ks = c.candidates.empty() ? std::vector<int>{1, 2, 3, 4} : c.candidates;
  MixtureRun run;
  run.selected.assign(c.n_grid.size(), std::vector<int>(c.replications, 0));
  run.hellinger = replicate(c.n_grid, c.replications, c.master_seed,
                            [&](int n, int r, std::uint64_t seed) {
                              const auto x = sample_mixture(truth, n, seed);
                              const auto sel = select_k(x, ks, MixtureHyper{}, splitmix64(seed));
                              const auto idx = std::find(c.n_grid.begin(), c.n_grid.end(), n) -
                                               c.n_grid.begin();
                              run.selected[idx][r] = sel.k_selected;
                              return hellinger_to_truth(sel.state, grid);
                            });
  return run;
}

inline ExperimentOutput mix_fit(const ExperimentConfig& c) {
  c.validate(1);
  const MixtureRun run = run_mixture(c);
  const RateTable t = summarize(run.hellinger);
  auto out = rate_output("mix-fit", c, t, "hellinger_sq", std::nullopt);
  Json medians = Json::array();
  for (std::size_t i = 0; i < c.n_grid.size(); ++i) {
    medians.push_back({{"n", c.n_grid[i]},
                       {"median_hellinger_sq", median(run.hellinger.values[i])},
                       {"selected_k", run.selected[i]}});
  }
  out.document["medians"] = medians;
  return out;
}

// ---------------------------------------------------------------- exponential family

inline std::vector<double> expfam_truth(const ExperimentConfig& c) {
  if (!c.truth_theta.empty()) return c.truth_theta;
  std::vector<double> t(8);
  for (int j = 1; j <= 8; ++j) t[j - 1] = 0.8 / (j * j);
  return t;
}

inline int expfam_dimension(int n, double alpha) {
  return std::max(1, static_cast<int>(std::ceil(std::pow(n, 1.0 / (2.0 * alpha + 1.0)) - 1e-9)));
}

inline Replications run_expfam(const ExperimentConfig& c) {
  const FourierDensity truth(expfam_truth(c));
  return replicate(c.n_grid, c.replications, c.master_seed,
                   [&](int n, int, std::uint64_t seed) {
                     const int k = expfam_dimension(n, c.alpha);
                     const auto prior = SievePrior::poisson(std::max(k, c.prior.k_max), 1.0,
                                                            CoordinateSpec::gaussian(c.prior.variance));
                     const auto data = sample(truth, n, seed);
                     FitOptions opt;
                     opt.elbo.samples = c.samples;
                     opt.elbo.seed = splitmix64(seed);
                     const auto fit = fit_gaussian_mf(data, prior, k, opt);
                     const double h = hellinger_numeric(FourierDensity(fit.q.mu), truth);
                     return h * h;
                   });
}

inline ExperimentOutput expfam_fit(const ExperimentConfig& c) {
  c.validate(1);
  const Replications reps = run_expfam(c);
  const RateTable t = summarize(reps);
  auto out = rate_output("expfam-fit", c, t, "hellinger_sq", std::nullopt);
  out.document["basis"] = kFourierBasis;
  Json medians = Json::array();
  for (std::size_t i = 0; i < c.n_grid.size(); ++i) {
    medians.push_back({{"n", c.n_grid[i]},
                       {"k", expfam_dimension(c.n_grid[i], c.alpha)},
                       {"median_hellinger_sq", median(reps.values[i])}});
  }
  out.document["medians"] = medians;
  return out;
}

// ---------------------------------------------------------------- divergence chain

struct DivCheckSummary {
  int pairs = 0;
  int chain_violations = 0;
  int monotonicity_violations = 0;
};

inline DiscreteDistribution dirichlet_one(std::size_t k, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> v(k);
  double total = 0.0;
  for (auto& x : v) total += x = g(rng);
  for (auto& x : v) x /= total;
  return DiscreteDistribution(std::move(v));
}

/// Random Dirichlet(1) pairs of size 2..64; checks the divergence chain and
/// monotonicity of D_rho over a rho grid.
inline DivCheckSummary run_divcheck(int pairs, std::uint64_t master_seed, double slack = 1e-10) {
  require(pairs >= 1, "need at least one pair");
  static const std::vector<double> rhos{0.1, 0.25, 0.5, 0.75, 0.9, 1.5, 2.0, 3.0, 5.0};
  std::vector<int> chain(pairs, 0), mono(pairs, 0);
  parallel_for(static_cast<std::size_t>(pairs), [&](std::size_t i) {
    Rng rng(derive_seed(master_seed, 0, i));
    std::uniform_int_distribution<int> size(2, 64);
    const std::size_t k = size(rng);
    const auto p = dirichlet_one(k, rng);
    const auto q = dirichlet_one(k, rng);
    chain[i] = !chain_holds(chain_report(p, q), slack);
    mono[i] = !renyi_monotonicity_check(p, q, rhos, slack);
  });
  DivCheckSummary s;
  s.pairs = pairs;
  for (int i = 0; i < pairs; ++i) {
    s.chain_violations += chain[i];
    s.monotonicity_violations += mono[i];
  }
  return s;
}

inline ExperimentOutput divcheck(const ExperimentConfig& c) {
  require(c.replications >= 1, "replications (number of pairs) must be positive");
  const auto s = run_divcheck(c.replications, c.master_seed);
  ExperimentOutput out{{{"pairs", "chain_violations", "monotonicity_violations"},
                        {{double(s.pairs), double(s.chain_violations),
                          double(s.monotonicity_violations)}}},
                       Json::object()};
  out.document["command"] = "divcheck";
  out.document["config"] = to_json(c);
  out.document["summary"] = to_json(out.table);
  return out;
}

// ---------------------------------------------------------------- generic entry

/// Mean risk per n for the configured model.
inline RateTable run_experiment(const ExperimentConfig& c) {
  c.validate(1);
  if (c.model == "gsm") return summarize(run_sequence(c, SequenceMetric::Risk));
  if (c.model == "trunc_gauss") return trunc_rate_table(c);
  if (c.model == "piecewise") {
    return worst_case_table(run_piecewise(
        c, c.prior.family == "mean_field" ? PiecewiseMethod::MeanField : PiecewiseMethod::Chain));
  }
  if (c.model == "mixture") return summarize(run_mixture(c).hellinger);
  if (c.model == "expfam") return summarize(run_expfam(c));
  throw InputError("unknown model '" + c.model + "'");
}

}  // namespace vbrate
