#pragma once

// Location-scale mixtures with kernel psi_sigma(x) = exp(-(|x|/sigma)^p) /
// (2 sigma Gamma(1 + 1/p)), and coordinate-ascent variational fits for p = 2.
//
// For p = 2 with tau = sigma^{-2}, each component is N(mu_j, 1 / (2 tau)).
// Priors: mu_j ~ N(0, sigma0^2), w ~ Dir(alpha0), tau ~ Gamma(a0, b0),
// k ~ Poisson(xi0). Variational factors: q(z) q(w) q(tau) prod_j q(mu_j).

#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "vbrate/core.hpp"
#include "vbrate/divergence.hpp"

namespace vbrate {

inline double kernel_psi(double x, double sigma, int p) {
  require(p > 0 && p % 2 == 0, "kernel power must be a positive even integer");
  require(sigma > 0.0 && std::isfinite(sigma), "kernel scale must be positive");
  return std::exp(-std::pow(std::abs(x) / sigma, p)) /
         (2.0 * sigma * std::tgamma(1.0 + 1.0 / p));
}

struct MixtureModel {
  std::vector<double> mu;
  std::vector<double> w;
  double sigma = 1.0;
  int p = 2;

  int k() const { return static_cast<int>(mu.size()); }

  void validate() const {
    require(!mu.empty(), "mixture needs at least one component");
    require(w.size() == mu.size(), "weights and locations differ in length");
    require(sigma > 0.0 && std::isfinite(sigma), "kernel scale must be positive");
    require(p > 0 && p % 2 == 0, "kernel power must be a positive even integer");
    for (double m : mu) require(std::isfinite(m), "locations must be finite");
    for (double v : w) require(v >= 0.0 && std::isfinite(v), "weights must be non-negative");
    require(std::abs(compensated_sum(w) - 1.0) <= 1e-12, "weights must sum to 1");
  }
};

inline double mixture_pdf(const MixtureModel& model, double x) {
  double s = 0.0;
  for (int j = 0; j < model.k(); ++j) {
    s += model.w[j] * kernel_psi(x - model.mu[j], model.sigma, model.p);
  }
  return s;
}

/// Draws m points; component j is N(mu_j, sigma^2 / 2) when p = 2.
inline std::vector<double> sample_mixture(const MixtureModel& model, std::size_t m,
                                          std::uint64_t seed) {
  model.validate();
  require(model.p == 2, "sampling is implemented for the Gaussian kernel");
  Rng rng(seed);
  std::discrete_distribution<int> pick(model.w.begin(), model.w.end());
  std::normal_distribution<double> z(0.0, model.sigma / std::sqrt(2.0));
  std::vector<double> out(m);
  for (auto& x : out) {
    const int j = pick(rng);
    x = model.mu[j] + z(rng);
  }
  return out;
}

struct MixtureHyper {
  double xi0 = 1.0;      // Poisson rate on k
  double sigma0_sq = 25.0;
  double alpha0 = 1.0;
  double a0 = 1.0;       // Gamma shape on tau
  double b0 = 1.0;       // Gamma rate on tau

  void validate() const {
    require(xi0 > 0.0 && std::isfinite(xi0), "xi0 must be positive");
    require(sigma0_sq > 0.0 && std::isfinite(sigma0_sq), "sigma0^2 must be positive");
    require(alpha0 > 0.0 && std::isfinite(alpha0), "alpha0 must be positive");
    require(a0 > 0.0 && b0 > 0.0 && std::isfinite(a0) && std::isfinite(b0),
            "Gamma hyperparameters must be positive");
  }
};

struct CaviOptions {
  double rel_tol = 1e-8;
  int max_sweeps = 1000;
};

struct GMFState {
  std::vector<ScalarGaussian> q_mu;
  std::vector<double> q_w;        // Dirichlet concentrations
  double tau_shape = 1.0;         // Gamma shape for tau
  double tau_rate = 1.0;          // Gamma rate for tau
  std::vector<double> responsibilities;  // row-major n x k
  std::vector<double> elbo_trace;
  bool converged = false;

  int k() const { return static_cast<int>(q_mu.size()); }
  double elbo() const { return elbo_trace.empty() ? -kInf : elbo_trace.back(); }
  double mean_tau() const { return tau_shape / tau_rate; }

  /// Posterior-mean plug-in: E w, E mu, sigma = (E tau)^{-1/2}.
  MixtureModel plug_in() const {
    MixtureModel m;
    const double total = compensated_sum(q_w);
    for (int j = 0; j < k(); ++j) {
      m.mu.push_back(q_mu[j].mean);
      m.w.push_back(q_w[j] / total);
    }
    m.sigma = 1.0 / std::sqrt(mean_tau());
    m.p = 2;
    return m;
  }
};

namespace detail {

struct MixtureExpectations {
  std::vector<double> log_w;  // E log w_j
  double log_tau = 0.0;       // E log tau
  double tau = 0.0;           // E tau
};

inline MixtureExpectations mixture_expectations(const GMFState& s) {
  using boost::math::digamma;
  MixtureExpectations e;
  const double total = compensated_sum(s.q_w);
  const double dg_total = digamma(total);
  for (double a : s.q_w) e.log_w.push_back(digamma(a) - dg_total);
  e.log_tau = digamma(s.tau_shape) - std::log(s.tau_rate);
  e.tau = s.tau_shape / s.tau_rate;
  return e;
}

inline void update_responsibilities(std::span<const double> x, GMFState& s) {
  const auto e = mixture_expectations(s);
  const int k = s.k();
  std::vector<double> row(k);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (int j = 0; j < k; ++j) {
      const double d = x[i] - s.q_mu[j].mean;
      row[j] = e.log_w[j] - e.tau * (d * d + s.q_mu[j].variance);
    }
    const double norm = log_sum_exp(row);
    for (int j = 0; j < k; ++j) s.responsibilities[i * k + j] = std::exp(row[j] - norm);
  }
}

inline std::vector<double> component_counts(const GMFState& s, std::size_t n) {
  const int k = s.k();
  std::vector<CompensatedSum> acc(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) acc[j].add(s.responsibilities[i * k + j]);
  }
  std::vector<double> out(k);
  for (int j = 0; j < k; ++j) out[j] = acc[j].value();
  return out;
}

inline void update_weights(const GMFState& s, std::size_t n, double alpha0,
                           std::vector<double>& q_w) {
  const auto counts = component_counts(s, n);
  for (int j = 0; j < s.k(); ++j) q_w[j] = alpha0 + counts[j];
}

inline void update_locations(std::span<const double> x, const MixtureHyper& h,
                             GMFState& s) {
  const int k = s.k();
  const double tau = s.mean_tau();
  for (int j = 0; j < k; ++j) {
    CompensatedSum nk;
    CompensatedSum sx;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = s.responsibilities[i * k + j];
      nk.add(r);
      sx.add(r * x[i]);
    }
    const double prec = 1.0 / h.sigma0_sq + 2.0 * tau * nk.value();
    s.q_mu[j] = {2.0 * tau * sx.value() / prec, 1.0 / prec};
  }
}

inline void update_precision(std::span<const double> x, const MixtureHyper& h,
                             GMFState& s) {
  const int k = s.k();
  CompensatedSum b;
  b.add(h.b0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (int j = 0; j < k; ++j) {
      const double d = x[i] - s.q_mu[j].mean;
      b.add(s.responsibilities[i * k + j] * (d * d + s.q_mu[j].variance));
    }
  }
  s.tau_shape = h.a0 + 0.5 * static_cast<double>(x.size());
  s.tau_rate = b.value();
}

inline double log_dirichlet_norm(std::span<const double> a) {
  double s = std::lgamma(compensated_sum(a));
  for (double v : a) s -= std::lgamma(v);
  return s;
}

}  // namespace detail

/// ELBO of the factorized posterior for fixed k (no log pi(k) term).
inline double mixture_elbo(std::span<const double> x, const MixtureHyper& h,
                           const GMFState& s) {
  const auto e = detail::mixture_expectations(s);
  const int k = s.k();
  const std::size_t n = x.size();
  CompensatedSum total;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const double r = s.responsibilities[i * k + j];
      if (r <= 0.0) continue;
      const double d = x[i] - s.q_mu[j].mean;
      total.add(r * (0.5 * std::log(2.0) + 0.5 * e.log_tau - 0.5 * std::log(2.0 * kPi) -
                     e.tau * (d * d + s.q_mu[j].variance) + e.log_w[j] - std::log(r)));
    }
  }
  const std::vector<double> prior_w(k, h.alpha0);
  total.add(detail::log_dirichlet_norm(prior_w) - detail::log_dirichlet_norm(s.q_w));
  for (int j = 0; j < k; ++j) total.add((h.alpha0 - s.q_w[j]) * e.log_w[j]);
  for (const auto& q : s.q_mu) {
    total.add(-0.5 * std::log(h.sigma0_sq) - (q.mean * q.mean + q.variance) / (2.0 * h.sigma0_sq) +
              0.5 * std::log(q.variance) + 0.5);
  }
  total.add(h.a0 * std::log(h.b0) - std::lgamma(h.a0) + (h.a0 - 1.0) * e.log_tau - h.b0 * e.tau);
  total.add(-(s.tau_shape * std::log(s.tau_rate) - std::lgamma(s.tau_shape) +
              (s.tau_shape - 1.0) * e.log_tau - s.tau_shape));
  return total.value();
}

/// Coordinate ascent for fixed k and p = 2. Sweeps cycle responsibilities,
/// Dirichlet weights, locations, precision; the ELBO is recorded after each.
/// Centers start at spread quantiles with seeded jitter.
inline GMFState cavi_fixed_k(std::span<const double> x, int k, const MixtureHyper& h,
                             std::uint64_t seed, const CaviOptions& options = {}) {
  require(!x.empty(), "data must be non-empty");
  require(k >= 1, "k must be positive");
  require(options.max_sweeps >= 1, "sweep budget must be positive");
  h.validate();
  for (double v : x) require(std::isfinite(v), "data must be finite");
  const std::size_t n = x.size();

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var = std::max(var / static_cast<double>(n), 1e-8);

  Rng rng(seed);
  std::normal_distribution<double> z;
  GMFState s;
  for (int j = 0; j < k; ++j) {
    const double q = (j + 0.5) / k;
    const std::size_t idx = std::min(n - 1, static_cast<std::size_t>(q * n));
    s.q_mu.push_back({sorted[idx] + 0.1 * std::sqrt(var) * z(rng), var / k});
  }
  s.q_w.assign(k, h.alpha0 + static_cast<double>(n) / k);
  s.tau_shape = h.a0 + 0.5 * static_cast<double>(n);
  s.tau_rate = s.tau_shape * 2.0 * var / (k * k);
  s.responsibilities.assign(n * k, 1.0 / k);

  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    detail::update_responsibilities(x, s);
    detail::update_weights(s, n, h.alpha0, s.q_w);
    detail::update_locations(x, h, s);
    detail::update_precision(x, h, s);
    const double value = mixture_elbo(x, h, s);
    if (!std::isfinite(value)) throw NumericError("mixture ELBO is not finite");
    const double previous = s.elbo_trace.empty() ? -kInf : s.elbo_trace.back();
    s.elbo_trace.push_back(value);
    if (std::abs(value - previous) < options.rel_tol * std::abs(value)) {
      s.converged = true;
      break;
    }
  }
  return s;
}

inline double log_poisson(int k, double rate) {
  return k * std::log(rate) - rate - std::lgamma(k + 1.0);
}

struct Selection {
  int k_selected = 0;
  GMFState state;
  std::vector<int> candidates;
  std::vector<double> penalized_elbo;  // ELBO + log Poisson(k; xi0), -inf on failure
};

/// Maximizes ELBO_k + log pi(k) over the candidates; ties go to the smaller k.
inline Selection select_k(std::span<const double> x, std::span<const int> candidates,
                          const MixtureHyper& h, std::uint64_t seed,
                          const CaviOptions& options = {}) {
  require(!candidates.empty(), "candidate set must be non-empty");
  for (int k : candidates) require(k >= 1, "candidate k must be positive");
  std::vector<std::optional<GMFState>> fits(candidates.size());
  std::vector<int> failed(candidates.size(), 0);
  parallel_for(candidates.size(), [&](std::size_t i) {
    try {
      fits[i] = cavi_fixed_k(x, candidates[i], h, derive_seed(seed, candidates[i], 0), options);
    } catch (const NumericError&) {
      failed[i] = 1;
    }
  });
  Selection out;
  out.candidates.assign(candidates.begin(), candidates.end());
  int best = -1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double v = fits[i] ? fits[i]->elbo() + log_poisson(candidates[i], h.xi0) : -kInf;
    out.penalized_elbo.push_back(v);
    if (!fits[i]) continue;
    if (best < 0 || v > out.penalized_elbo[best] ||
        (v == out.penalized_elbo[best] && candidates[i] < candidates[best])) {
      best = static_cast<int>(i);
    }
  }
  if (best < 0) throw NumericError("all mixture fits failed");
  out.k_selected = candidates[best];
  out.state = std::move(*fits[best]);
  return out;
}

/// A density tabulated on an increasing grid.
struct DensityGrid {
  std::vector<double> x;
  std::vector<double> values;
};

inline DensityGrid tabulate(const MixtureModel& model, double lo, double hi, int points) {
  require(points >= 2 && hi > lo, "grid needs at least two points on a proper interval");
  DensityGrid g;
  for (int i = 0; i < points; ++i) {
    const double t = lo + (hi - lo) * i / (points - 1);
    g.x.push_back(t);
    g.values.push_back(mixture_pdf(model, t));
  }
  return g;
}

namespace detail {

template <class F>
double trapezoid(const std::vector<double>& x, F&& f) {
  CompensatedSum s;
  for (std::size_t i = 1; i < x.size(); ++i) s.add(0.5 * (x[i] - x[i - 1]) * (f(i - 1) + f(i)));
  return s.value();
}

}  // namespace detail

/// 0.5 int (sqrt f - sqrt f0)^2 by the trapezoid rule on f0's grid.
inline double hellinger_sq_on_grid(const MixtureModel& model, const DensityGrid& f0) {
  require(f0.x.size() == f0.values.size() && f0.x.size() >= 2,
          "density grid needs matching x and values");
  for (std::size_t i = 1; i < f0.x.size(); ++i) {
    require(f0.x[i] > f0.x[i - 1], "density grid must be increasing");
  }
  std::vector<double> f(f0.x.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = mixture_pdf(model, f0.x[i]);
  const double mass0 = detail::trapezoid(f0.x, [&](std::size_t i) { return f0.values[i]; });
  const double mass = detail::trapezoid(f0.x, [&](std::size_t i) { return f[i]; });
  require(std::abs(mass0 - 1.0) <= 1e-3 && std::abs(mass - 1.0) <= 1e-3,
          "density grid too coarse or too narrow");
  return detail::trapezoid(f0.x, [&](std::size_t i) {
    const double d = std::sqrt(f[i]) - std::sqrt(std::max(f0.values[i], 0.0));
    return 0.5 * d * d;
  });
}

/// Squared Hellinger distance between the plug-in posterior-mean mixture and f0.
inline double hellinger_to_truth(const GMFState& state, const DensityGrid& f0) {
  return hellinger_sq_on_grid(state.plug_in(), f0);
}

/// Average squared Hellinger distance over `draws` samples from the
/// variational posterior.
inline double expected_hellinger_to_truth(const GMFState& state, const DensityGrid& f0,
                                          int draws, std::uint64_t seed) {
  require(draws >= 1, "need at least one posterior draw");
  Rng rng(seed);
  std::normal_distribution<double> z;
  std::gamma_distribution<double> tau(state.tau_shape, 1.0 / state.tau_rate);
  CompensatedSum acc;
  for (int s = 0; s < draws; ++s) {
    MixtureModel m;
    double total = 0.0;
    for (int j = 0; j < state.k(); ++j) {
      std::gamma_distribution<double> g(state.q_w[j], 1.0);
      m.w.push_back(g(rng));
      total += m.w.back();
      m.mu.push_back(state.q_mu[j].mean + std::sqrt(state.q_mu[j].variance) * z(rng));
    }
    for (double& w : m.w) w /= total;
    m.sigma = 1.0 / std::sqrt(tau(rng));
    acc.add(hellinger_sq_on_grid(m, f0));
  }
  return acc.value() / draws;
}

}  // namespace vbrate
