#pragma once

// Sequence model under the prior prod_j N(0, j^{-2beta-1}) and the explicit
// variational posterior Q_[k]: conjugate coordinates up to k, N(0, e^{-jn})
// for k < j <= n, delta_0 beyond n.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "vbrate/core.hpp"
#include "vbrate/gsm.hpp"
#include "vbrate/regression.hpp"

namespace vbrate {

struct TruncVBPosterior {
  int k = 0;
  double n = 1.0;
  double beta = 1.0;
  std::vector<double> coord_means;  // j = 1..k
  std::vector<double> coord_vars;   // j = 1..k

  /// Largest index with a non-degenerate coordinate.
  int last_index() const { return static_cast<int>(std::floor(n)); }

  /// e^{-jn} for k < j <= n, 0 beyond; may underflow to 0.
  double tail_variance(int j) const {
    if (j <= k || j > last_index()) return 0.0;
    return std::exp(-static_cast<double>(j) * n);
  }
};

namespace detail {

inline double prior_precision(int j, double beta) {
  return std::pow(static_cast<double>(j), 2.0 * beta + 1.0);
}

inline void check_trunc_args(double n, double beta, int k) {
  require(n > 0.0 && std::isfinite(n), "n must be positive");
  require(beta >= 0.0 && std::isfinite(beta), "beta must be non-negative");
  require(k >= 0 && k <= static_cast<int>(std::floor(n)),
          "k must lie in 0..floor(n)");
}

}  // namespace detail

inline TruncVBPosterior fit_vb_k(const SequenceObservation& obs, double beta,
                                 int k) {
  detail::check_trunc_args(obs.n, beta, k);
  require(static_cast<int>(obs.y.size()) >= k,
          "observation shorter than the requested k");
  TruncVBPosterior q;
  q.k = k;
  q.n = obs.n;
  q.beta = beta;
  q.coord_means.resize(k);
  q.coord_vars.resize(k);
  for (int j = 1; j <= k; ++j) {
    const double denom = obs.n + detail::prior_precision(j, beta);
    q.coord_means[j - 1] = obs.n * obs.y[j - 1] / denom;
    q.coord_vars[j - 1] = 1.0 / denom;
  }
  return q;
}

/// Sum_{j=k+1}^{floor(n)} e^{-jn}, evaluated in log space and stopped once the
/// terms underflow.
inline double tail_variance_sum(double n, int k) {
  const int last = static_cast<int>(std::floor(n));
  double s = 0.0;
  for (int j = k + 1; j <= last; ++j) {
    const double log_term = -static_cast<double>(j) * n;
    if (log_term < -745.0) break;
    s += std::exp(log_term);
  }
  return s;
}

struct RiskTerms {
  double shrink_bias = 0.0;  // sum_{j<=k} (lambda_j / (n + lambda_j))^2 theta_j^2
  double tail_bias = 0.0;    // sum_{j>k} theta_j^2
  double noise = 0.0;        // sum_{j<=k} n / (n + lambda_j)^2
  double spread = 0.0;       // sum_{j<=k} 1 / (n + lambda_j)
  double tail_var = 0.0;     // sum_{k<j<=n} e^{-jn}

  double total() const { return shrink_bias + tail_bias + noise + spread + tail_var; }
};

/// E_{theta*} Q_[k] ||theta - theta*||^2, split into its five terms.
inline RiskTerms exact_risk_terms(std::span<const double> theta, double n,
                                  double beta, int k) {
  detail::check_trunc_args(n, beta, k);
  RiskTerms r;
  CompensatedSum shrink;
  CompensatedSum tail;
  CompensatedSum noise;
  CompensatedSum spread;
  for (int j = 1; j <= k; ++j) {
    const double lam = detail::prior_precision(j, beta);
    const double denom = n + lam;
    noise.add(n / (denom * denom));
    spread.add(1.0 / denom);
    if (j <= static_cast<int>(theta.size())) {
      const double f = lam / denom;
      shrink.add(f * f * theta[j - 1] * theta[j - 1]);
    }
  }
  for (std::size_t j = static_cast<std::size_t>(k); j < theta.size(); ++j) {
    tail.add(theta[j] * theta[j]);
  }
  r.shrink_bias = shrink.value();
  r.tail_bias = tail.value();
  r.noise = noise.value();
  r.spread = spread.value();
  r.tail_var = tail_variance_sum(n, k);
  return r;
}

inline double exact_risk(const SobolevSignal& signal, double n, double beta,
                         int k) {
  return exact_risk_terms(signal.theta, n, beta, k).total();
}

/// max(t - 1, -2 alpha t) for t <= 1/(2beta+1), else -2 min(alpha, beta)/(2beta+1).
inline double theory_exponent(double t, double alpha, double beta) {
  if (t <= 1.0 / (2.0 * beta + 1.0)) return std::max(t - 1.0, -2.0 * alpha * t);
  return -2.0 * std::min(alpha, beta) / (2.0 * beta + 1.0);
}

/// k = ceil(n^t), clamped to 0..floor(n).
inline int truncation_for(double n, double t) {
  const int k = static_cast<int>(std::ceil(std::pow(n, t) - 1e-9));
  return std::clamp(k, 0, static_cast<int>(std::floor(n)));
}

/// Worst exact risk over the two spike constructions (at ceil(n^{1/(2beta+1)})
/// and at k+1) and the Sobolev boundary signal, all with radius B.
inline double worst_case_risk(double n, double alpha, double beta, int k,
                              double B = 1.0) {
  const int j1 = static_cast<int>(std::ceil(std::pow(n, 1.0 / (2.0 * beta + 1.0)) - 1e-9));
  const int len = std::max(j1, k + 1) + 1;
  const double r1 =
      exact_risk(make_signal(SignalKind::Spike, alpha, B, len, j1), n, beta, k);
  const double r2 =
      exact_risk(make_signal(SignalKind::Spike, alpha, B, len, k + 1), n, beta, k);
  const double r3 = exact_risk(
      make_signal(SignalKind::SobolevBoundary, alpha, B, std::max(len, 4096)), n,
      beta, k);
  return std::max({r1, r2, r3});
}

struct CurvePoint {
  double t = 0.0;
  double fitted_exponent = 0.0;
  double theory_exponent = 0.0;
};

inline std::vector<CurvePoint> rate_exponent_curve(double alpha, double beta,
                                                   std::span<const double> t_grid,
                                                   std::span<const double> n_grid,
                                                   double B = 1.0) {
  require(!t_grid.empty(), "t grid is empty");
  require(n_grid.size() >= 3, "exponent fits need at least 3 values of n");
  for (double t : t_grid) require(t > 0.0 && t <= 1.0, "t must lie in (0, 1]");
  for (double n : n_grid) require(n >= 64.0, "curve n values must be >= 64");
  std::vector<CurvePoint> out(t_grid.size());
  parallel_for(t_grid.size(), [&](std::size_t i) {
    const double t = t_grid[i];
    std::vector<double> log_n;
    std::vector<double> log_r;
    for (double n : n_grid) {
      log_n.push_back(std::log(n));
      log_r.push_back(std::log(worst_case_risk(n, alpha, beta, truncation_for(n, t), B)));
    }
    const LinearFit fit = least_squares({log_n}, log_r);
    out[i] = {t, fit.coefficients[0], theory_exponent(t, alpha, beta)};
  });
  return out;
}

}  // namespace vbrate
