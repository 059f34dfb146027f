#pragma once

// Gaussian sequence model Y_j = theta_j + Z_j / sqrt(n) under a sieve prior
// sum_k pi(k) (prod_{j<=k} f_j) x (prod_{j>k} delta_0).

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vbrate/core.hpp"
#include "vbrate/divergence.hpp"
#include "vbrate/quadrature.hpp"

namespace vbrate {

enum class CoordinateFamily { Gaussian, RescaledCauchy, RescaledGaussian };

/// Prior density of every active coordinate.
///   Gaussian:         N(0, variance)
///   RescaledCauchy:   sqrt(n) g(sqrt(n) x), g = Cauchy(0, scale)
///   RescaledGaussian: sqrt(n) g(sqrt(n) x), g = N(0, variance)
struct CoordinateSpec {
  CoordinateFamily family = CoordinateFamily::Gaussian;
  double variance = 1.0;
  double scale = 1.0;
  double noise_level = 1.0;

  static CoordinateSpec gaussian(double variance) {
    return {CoordinateFamily::Gaussian, variance, 1.0, 1.0};
  }
  static CoordinateSpec rescaled_cauchy(double scale, double n) {
    return {CoordinateFamily::RescaledCauchy, 1.0, scale, n};
  }
  static CoordinateSpec rescaled_gaussian(double variance, double n) {
    return {CoordinateFamily::RescaledGaussian, variance, 1.0, n};
  }

  bool conjugate() const { return family != CoordinateFamily::RescaledCauchy; }

  /// Variance of the equivalent Gaussian for the conjugate families.
  double gaussian_variance() const {
    return family == CoordinateFamily::RescaledGaussian ? variance / noise_level
                                                        : variance;
  }

  /// Width used to size quadrature windows.
  double spread() const {
    if (family == CoordinateFamily::RescaledCauchy) {
      return scale / std::sqrt(noise_level);
    }
    return std::sqrt(gaussian_variance());
  }

  double log_density(double x) const {
    if (family == CoordinateFamily::RescaledCauchy) {
      const double s = scale / std::sqrt(noise_level);
      const double z = x / s;
      return -std::log(kPi * s) - std::log1p(z * z);
    }
    const double v = gaussian_variance();
    return -0.5 * std::log(2.0 * kPi * v) - 0.5 * x * x / v;
  }

  void validate() const {
    require(variance > 0.0 && std::isfinite(variance),
            "coordinate variance must be positive");
    require(scale > 0.0 && std::isfinite(scale),
            "coordinate scale must be positive");
    require(noise_level > 0.0 && std::isfinite(noise_level),
            "coordinate noise level must be positive");
  }
};

/// Total mass of the coordinate density, by quadrature after x = s tan(u).
inline double coordinate_total_mass(const CoordinateSpec& spec) {
  const double s = spec.spread();
  const double edge = 0.5 * kPi * (1.0 - 1e-12);
  auto f = [&](double u) {
    const double t = std::tan(u);
    const double c = std::cos(u);
    return std::exp(spec.log_density(s * t)) * s / (c * c);
  };
  return integrate(f, -edge, edge, 1e-12).value;
}

class SievePrior {
 public:
  SievePrior() = default;

  /// weights[k] = pi(k) for k = 0..K_max. Drift up to 1e-9 is renormalized.
  SievePrior(std::vector<double> weights, CoordinateSpec coordinate)
      : weights_(std::move(weights)), coordinate_(coordinate) {
    require(weights_.size() >= 2, "sieve prior needs K_max >= 1");
    for (double w : weights_) {
      require(std::isfinite(w) && w >= 0.0,
              "dimension weights must be non-negative");
    }
    const double total = compensated_sum(weights_);
    require(std::abs(total - 1.0) <= 1e-9, "dimension weights must sum to 1");
    for (double& w : weights_) w /= total;
    coordinate_.validate();
  }

  /// pi(k) proportional to exp(-tau k) on 0..k_max.
  static SievePrior geometric(int k_max, double tau, CoordinateSpec coordinate) {
    require(k_max >= 1, "K_max must be at least 1");
    require(tau >= 0.0 && std::isfinite(tau), "tau must be non-negative");
    std::vector<double> w(k_max + 1);
    double total = 0.0;
    for (int k = 0; k <= k_max; ++k) {
      w[k] = std::exp(-tau * k);
      total += w[k];
    }
    for (double& x : w) x /= total;
    return SievePrior(std::move(w), coordinate);
  }

  /// pi(k) proportional to Poisson(k; rate) on 0..k_max.
  static SievePrior poisson(int k_max, double rate, CoordinateSpec coordinate) {
    require(k_max >= 1, "K_max must be at least 1");
    require(rate > 0.0 && std::isfinite(rate), "Poisson rate must be positive");
    std::vector<double> lw(k_max + 1);
    for (int k = 0; k <= k_max; ++k) {
      lw[k] = k * std::log(rate) - rate - std::lgamma(k + 1.0);
    }
    const double norm = log_sum_exp(lw);
    std::vector<double> w(k_max + 1);
    for (int k = 0; k <= k_max; ++k) w[k] = std::exp(lw[k] - norm);
    const double total = compensated_sum(w);
    for (double& x : w) x /= total;
    return SievePrior(std::move(w), coordinate);
  }

  int k_max() const { return static_cast<int>(weights_.size()) - 1; }
  std::span<const double> dimension_weights() const { return weights_; }
  const CoordinateSpec& coordinate() const { return coordinate_; }

 private:
  std::vector<double> weights_;
  CoordinateSpec coordinate_;
};

struct SobolevSignal {
  std::vector<double> theta;  // theta[j-1] is coordinate j
  double alpha = 1.0;
  double B = 1.0;

  double ball_sum() const {
    CompensatedSum s;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      s.add(std::pow(static_cast<double>(i + 1), 2.0 * alpha) * theta[i] *
            theta[i]);
    }
    return s.value();
  }
  double norm_sq() const {
    CompensatedSum s;
    for (double t : theta) s.add(t * t);
    return s.value();
  }
};

struct SequenceObservation {
  std::vector<double> y;
  double n = 1.0;
};

enum class SignalKind { Zero, Spike, SobolevBoundary };

inline SobolevSignal make_signal(SignalKind kind, double alpha, double B,
                                 int k_max, int j0 = 1) {
  require(alpha > 0.0 && B > 0.0, "alpha and B must be positive");
  require(k_max >= 1, "K_max must be at least 1");
  SobolevSignal s{std::vector<double>(k_max, 0.0), alpha, B};
  switch (kind) {
    case SignalKind::Zero:
      break;
    case SignalKind::Spike:
      require(j0 >= 1 && j0 <= k_max, "spike index outside 1..K_max");
      s.theta[j0 - 1] = B * std::pow(static_cast<double>(j0), -alpha);
      break;
    case SignalKind::SobolevBoundary: {
      CompensatedSum ball;
      for (int j = 1; j <= k_max; ++j) {
        const double t = std::pow(static_cast<double>(j), -alpha - 0.51);
        s.theta[j - 1] = t;
        ball.add(std::pow(static_cast<double>(j), 2.0 * alpha) * t * t);
      }
      const double c = std::sqrt(0.95 * B * B / ball.value());
      for (double& t : s.theta) t *= c;
      break;
    }
  }
  if (s.ball_sum() > B * B * (1.0 + 1e-12)) {
    throw InputError("signal lies outside the Sobolev ball");
  }
  return s;
}

inline SequenceObservation sample_observation(const SobolevSignal& signal,
                                              double n, std::uint64_t seed) {
  require(n > 0.0 && std::isfinite(n), "n must be positive");
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  SequenceObservation obs{std::vector<double>(signal.theta.size()), n};
  const double sd = 1.0 / std::sqrt(n);
  for (std::size_t j = 0; j < obs.y.size(); ++j) {
    obs.y[j] = signal.theta[j] + sd * z(rng);
  }
  return obs;
}

/// f_j reweighted by the Gaussian likelihood at Y_j: either a Gaussian or a
/// normalized probability vector on a uniform grid.
struct CoordinateTilt {
  std::optional<ScalarGaussian> gaussian;
  std::vector<double> grid;
  std::vector<double> probabilities;
  double log_evidence = 0.0;  // log W_j

  double mean() const {
    if (gaussian) return gaussian->mean;
    CompensatedSum s;
    for (std::size_t i = 0; i < grid.size(); ++i) s.add(probabilities[i] * grid[i]);
    return s.value();
  }
  double variance() const {
    if (gaussian) return gaussian->variance;
    const double m = mean();
    CompensatedSum s;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const double d = grid[i] - m;
      s.add(probabilities[i] * d * d);
    }
    return s.value();
  }
  double second_moment_about(double c) const {
    const double d = mean() - c;
    return variance() + d * d;
  }
  double sample(Rng& rng) const {
    if (gaussian) {
      std::normal_distribution<double> z(gaussian->mean,
                                         std::sqrt(gaussian->variance));
      return z(rng);
    }
    std::discrete_distribution<std::size_t> pick(probabilities.begin(),
                                                 probabilities.end());
    return grid[pick(rng)];
  }
};

namespace detail {

/// Integrates h(theta) f(theta) exp(-n (theta - y)^2 / 2 - shift) over the
/// window y +- (10/sqrt(n) + 10 spread), split at the likelihood and prior
/// peaks so panel doubling resolves both.
template <class H>
double tilt_integral(const CoordinateSpec& spec, double y, double n,
                     double shift, H&& h, double abs_tol = 0.0) {
  const double lik = 10.0 / std::sqrt(n);
  const double half = lik + 10.0 * spec.spread();
  const double lo = y - half;
  const double hi = y + half;
  std::vector<double> cuts{lo, hi, y - lik, y + lik};
  const double ps = 10.0 * spec.spread();
  for (double c : {-ps, ps}) cuts.push_back(c);
  std::vector<double> edges;
  for (double c : cuts) {
    if (c >= lo && c <= hi) edges.push_back(c);
  }
  std::sort(edges.begin(), edges.end());
  const double merge = 1e-9 * (hi - lo);
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [&](double a, double b) { return b - a < merge; }),
              edges.end());
  edges.back() = hi;
  auto f = [&](double t) {
    const double d = t - y;
    return h(t) * std::exp(spec.log_density(t) - 0.5 * n * d * d - shift);
  };
  double total = 0.0;
  double scale = 0.0;
  double error = 0.0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    const QuadratureResult r =
        integrate(f, edges[i], edges[i + 1], 1e-11, abs_tol);
    total += r.value;
    scale += std::abs(r.value);
    if (!r.converged) error += r.error;
  }
  if (error > 1e-8 * scale && error > abs_tol) {
    throw NumericError("coordinate evidence quadrature did not converge");
  }
  return total;
}

inline double tilt_shift(const CoordinateSpec& spec, double y, double n) {
  double shift = spec.log_density(y);
  const double lik = 10.0 / std::sqrt(n) + 10.0 * spec.spread();
  if (std::abs(y) <= lik) {
    shift = std::max(shift, spec.log_density(0.0) - 0.5 * n * y * y);
  }
  return shift;
}

}  // namespace detail

/// log W_j, W_j = int f_j(theta) exp(-n (theta - y_j)^2 / 2) d theta.
inline double log_coordinate_evidence(const SievePrior& prior, int j, double y,
                                      double n) {
  require(j >= 1 && j <= prior.k_max(), "coordinate index outside 1..K_max");
  require(n > 0.0 && std::isfinite(n), "n must be positive");
  const CoordinateSpec& spec = prior.coordinate();
  if (spec.conjugate()) {
    const double v = spec.gaussian_variance() + 1.0 / n;
    return 0.5 * std::log(2.0 * kPi / n) - 0.5 * std::log(2.0 * kPi * v) -
           0.5 * y * y / v;
  }
  const double shift = detail::tilt_shift(spec, y, n);
  const double w =
      detail::tilt_integral(spec, y, n, shift, [](double) { return 1.0; });
  if (!(w > 0.0)) throw NumericError("coordinate evidence underflowed");
  return shift + std::log(w);
}

inline CoordinateTilt make_tilt(const SievePrior& prior, int j, double y,
                                double n) {
  CoordinateTilt tilt;
  tilt.log_evidence = log_coordinate_evidence(prior, j, y, n);
  const CoordinateSpec& spec = prior.coordinate();
  if (spec.conjugate()) {
    const double v0 = spec.gaussian_variance();
    const double precision = n + 1.0 / v0;
    tilt.gaussian = ScalarGaussian{n * y / precision, 1.0 / precision};
    return tilt;
  }
  const double shift = detail::tilt_shift(spec, y, n);
  const double z = detail::tilt_integral(spec, y, n, shift,
                                         [](double) { return 1.0; });
  // The first moment can cancel to ~0, so it gets an absolute tolerance.
  const double tol = 1e-13 * z * (std::abs(y) + spec.spread() + 1.0 / std::sqrt(n));
  const double m1 =
      detail::tilt_integral(spec, y, n, shift, [](double t) { return t; }, tol) /
      z;
  const double m2 = detail::tilt_integral(spec, y, n, shift, [&](double t) {
                      return (t - m1) * (t - m1);
                    }) / z;
  const double sd = std::sqrt(std::max(m2, 1e-300));
  constexpr int kPoints = 2001;
  tilt.grid.resize(kPoints);
  tilt.probabilities.resize(kPoints);
  std::vector<double> logs(kPoints);
  for (int i = 0; i < kPoints; ++i) {
    const double t = m1 + sd * (-10.0 + 20.0 * i / (kPoints - 1));
    tilt.grid[i] = t;
    logs[i] = spec.log_density(t) - 0.5 * n * (t - y) * (t - y);
  }
  const double lse = log_sum_exp(logs);
  for (int i = 0; i < kPoints; ++i) {
    tilt.probabilities[i] = std::exp(logs[i] - lse);
  }
  return tilt;
}

/// Normalized log pi(k | Y) for k = 0..K_max.
inline std::vector<double> log_model_weights(const SievePrior& prior,
                                             const SequenceObservation& obs) {
  const int K = prior.k_max();
  require(static_cast<int>(obs.y.size()) == K,
          "observation length must equal K_max");
  require(obs.n > 0.0 && std::isfinite(obs.n), "n must be positive");
  for (double v : obs.y) require(std::isfinite(v), "observations must be finite");
  // log pi(k) + sum_{j<=k} (log W_j + n y_j^2 / 2), dropping the shared
  // sum_j -n y_j^2 / 2.
  std::vector<double> out(K + 1);
  const auto pi = prior.dimension_weights();
  double running = 0.0;
  for (int k = 0; k <= K; ++k) {
    if (k >= 1) {
      const double y = obs.y[k - 1];
      running += log_coordinate_evidence(prior, k, y, obs.n) + 0.5 * obs.n * y * y;
    }
    out[k] = pi[k] > 0.0 ? std::log(pi[k]) + running : -kInf;
  }
  const double lse = log_sum_exp(out);
  if (!std::isfinite(lse)) throw NumericError("all model weights vanish");
  for (double& v : out) v -= lse;
  return out;
}

struct MeanFieldSeqPosterior {
  int k_tilde = 0;
  double p_tilde = 0.0;
  std::vector<CoordinateTilt> tilts;  // coordinates 1..k_tilde
  std::vector<double> log_weights;
};

struct EmpiricalBayesPosterior {
  int k_hat = 0;
  std::vector<CoordinateTilt> tilts;  // coordinates 1..k_hat
  std::vector<double> log_weights;
};

namespace detail {

inline std::vector<CoordinateTilt> tilts_up_to(const SievePrior& prior,
                                               const SequenceObservation& obs,
                                               int k) {
  std::vector<CoordinateTilt> out;
  out.reserve(k);
  for (int j = 1; j <= k; ++j) out.push_back(make_tilt(prior, j, obs.y[j - 1], obs.n));
  return out;
}

/// log(pi(k-1|Y) + pi(k|Y)) with pi(-1|Y) = 0.
inline double log_pair_mass(const std::vector<double>& lw, int k) {
  return k == 0 ? lw[0] : log_add_exp(lw[k - 1], lw[k]);
}

}  // namespace detail

inline MeanFieldSeqPosterior fit_mean_field(const SievePrior& prior,
                                            const SequenceObservation& obs) {
  MeanFieldSeqPosterior post;
  post.log_weights = log_model_weights(prior, obs);
  const auto& lw = post.log_weights;
  double best = -kInf;
  for (int k = 0; k <= prior.k_max(); ++k) {
    const double v = detail::log_pair_mass(lw, k);
    if (v > best) {
      best = v;
      post.k_tilde = k;
    }
  }
  const int k = post.k_tilde;
  post.p_tilde = k == 0 ? 0.0 : std::exp(lw[k - 1] - best);
  post.tilts = detail::tilts_up_to(prior, obs, k);
  return post;
}

inline EmpiricalBayesPosterior fit_empirical_bayes(const SievePrior& prior,
                                                   const SequenceObservation& obs) {
  EmpiricalBayesPosterior post;
  post.log_weights = log_model_weights(prior, obs);
  post.k_hat = static_cast<int>(
      std::max_element(post.log_weights.begin(), post.log_weights.end()) -
      post.log_weights.begin());
  post.tilts = detail::tilts_up_to(prior, obs, post.k_hat);
  return post;
}

enum class ObjectiveKind { VB, EB };

/// KL(Q_k || posterior) of the best member of the k-th structural family:
/// -log(pi(k-1|Y) + pi(k|Y)) for VB and -log pi(k|Y) for EB.
inline double vb_objective(std::span<const double> log_weights, int k,
                           ObjectiveKind kind) {
  require(k >= 0 && k < static_cast<int>(log_weights.size()),
          "k outside 0..K_max");
  const std::vector<double> lw(log_weights.begin(), log_weights.end());
  if (kind == ObjectiveKind::EB) return -lw[k];
  return -detail::log_pair_mass(lw, k);
}

inline double vb_objective(const SievePrior& prior, const SequenceObservation& obs,
                           int k, ObjectiveKind kind) {
  return vb_objective(log_model_weights(prior, obs), k, kind);
}

namespace detail {

inline double risk_from(int k, double p, const std::vector<CoordinateTilt>& tilts,
                        const SobolevSignal& signal) {
  const int K = static_cast<int>(signal.theta.size());
  require(k <= K, "posterior dimension exceeds signal length");
  CompensatedSum s;
  for (int j = 1; j <= K; ++j) {
    const double t = signal.theta[j - 1];
    if (j < k) {
      s.add(tilts[j - 1].second_moment_about(t));
    } else if (j == k) {
      s.add((1.0 - p) * tilts[j - 1].second_moment_about(t) + p * t * t);
    } else {
      s.add(t * t);
    }
  }
  return s.value();
}

}  // namespace detail

/// E_Q ||theta - theta*||^2.
inline double expected_risk(const MeanFieldSeqPosterior& post,
                            const SobolevSignal& signal) {
  return detail::risk_from(post.k_tilde, post.p_tilde, post.tilts, signal);
}

inline double expected_risk(const EmpiricalBayesPosterior& post,
                            const SobolevSignal& signal) {
  return detail::risk_from(post.k_hat, 0.0, post.tilts, signal);
}

/// Product-measure candidate over shells {k-1, k}: coordinates 1..k are g_j,
/// coordinate k is mixed with delta_0 at weight shell_masses[k-1].
struct CandidateCoordinate {
  bool exact_tilt = true;   // g_j = f~_j
  ScalarGaussian gaussian;  // used when exact_tilt is false
};

struct ProductCandidate {
  std::vector<double> shell_masses;  // length K_max + 1
  std::vector<CandidateCoordinate> coordinates;
};

namespace detail {

/// KL(g || f~_j) for a Gaussian g.
inline double gaussian_to_tilt_kl(const SievePrior& prior, int j, double y,
                                  double n, const ScalarGaussian& g) {
  const CoordinateSpec& spec = prior.coordinate();
  if (spec.conjugate()) {
    const CoordinateTilt t = make_tilt(prior, j, y, n);
    return kl_gaussian(g, *t.gaussian);
  }
  if (g.variance == 0.0) return kInf;
  // KL = -H(g) - E_g log f - E_g[-n (theta - y)^2 / 2] + log W_j
  const double log_w = log_coordinate_evidence(prior, j, y, n);
  const double entropy = 0.5 * std::log(2.0 * kPi * std::exp(1.0) * g.variance);
  const double sd = std::sqrt(g.variance);
  auto integrand = [&](double z) {
    const double t = g.mean + sd * z;
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi) * spec.log_density(t);
  };
  const double e_log_f = integrate_checked(integrand, -12.0, 12.0, 1e-11, 1e-8,
                                           "expected log prior density");
  const double d = g.mean - y;
  const double e_quad = 0.5 * n * (g.variance + d * d);
  return std::max(0.0, -entropy - e_log_f + e_quad + log_w);
}

}  // namespace detail

/// KL(candidate || Pi(. | Y)) for candidates in the two-shell product family.
inline double posterior_kl_gap(const SievePrior& prior,
                               const SequenceObservation& obs,
                               const ProductCandidate& cand) {
  const int K = prior.k_max();
  require(static_cast<int>(cand.shell_masses.size()) == K + 1,
          "shell masses must have length K_max + 1");
  int first = -1;
  int last = -1;
  double total = 0.0;
  for (int m = 0; m <= K; ++m) {
    const double q = cand.shell_masses[m];
    require(std::isfinite(q) && q >= 0.0, "shell masses must be non-negative");
    total += q;
    if (q > 0.0) {
      if (first < 0) first = m;
      last = m;
    }
  }
  require(std::abs(total - 1.0) <= 1e-9, "shell masses must sum to 1");
  if (last - first > 1) {
    throw InputError("candidate is not a product measure: more than two "
                     "adjacent shells carry mass");
  }
  const int k = last;
  require(static_cast<int>(cand.coordinates.size()) >= k,
          "candidate needs a coordinate density for every active index");
  const auto lw = log_model_weights(prior, obs);
  CompensatedSum kl;
  for (int m = first; m <= last; ++m) {
    const double q = cand.shell_masses[m];
    if (q > 0.0) kl.add(q * (std::log(q) - lw[m]));
  }
  const double mass_k = cand.shell_masses[k];
  for (int j = 1; j <= k; ++j) {
    const CandidateCoordinate& c = cand.coordinates[j - 1];
    if (c.exact_tilt) continue;
    const double weight = j < k ? 1.0 : mass_k;
    if (weight == 0.0) continue;
    kl.add(weight *
           detail::gaussian_to_tilt_kl(prior, j, obs.y[j - 1], obs.n, c.gaussian));
  }
  return kl.value();
}

/// The candidate that fit_mean_field returns, in ProductCandidate form.
inline ProductCandidate as_candidate(const MeanFieldSeqPosterior& post,
                                     int k_max) {
  ProductCandidate c;
  c.shell_masses.assign(k_max + 1, 0.0);
  c.shell_masses[post.k_tilde] = 1.0 - post.p_tilde;
  if (post.k_tilde > 0) c.shell_masses[post.k_tilde - 1] = post.p_tilde;
  c.coordinates.assign(post.k_tilde, CandidateCoordinate{});
  return c;
}

}  // namespace vbrate
