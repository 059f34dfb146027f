#pragma once

// Divergences between finite distributions and between Gaussians.
// Infinite values are returned in band as +inf.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vbrate/core.hpp"

namespace vbrate {

class DiscreteDistribution {
 public:
  DiscreteDistribution() = default;

  /// Renormalizes inputs whose total drifts from 1 by at most 1e-9.
  explicit DiscreteDistribution(std::vector<double> probabilities)
      : p_(std::move(probabilities)) {
    require(!p_.empty(), "distribution must have at least one atom");
    for (double x : p_) {
      require(std::isfinite(x) && x >= 0.0,
              "probabilities must be finite and non-negative");
    }
    const double total = compensated_sum(p_);
    require(std::abs(total - 1.0) <= 1e-9,
            "probabilities must sum to 1 (got " + std::to_string(total) + ")");
    if (total != 1.0) {
      for (double& x : p_) x /= total;
    }
  }

  std::size_t size() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  std::span<const double> probabilities() const { return p_; }

 private:
  std::vector<double> p_;
};

struct ScalarGaussian {
  double mean = 0.0;
  double variance = 1.0;  // 0 is a point mass
};

struct DivergenceReport {
  double tv = 0.0;
  double hellinger_sq = 0.0;
  double d_half = 0.0;
  double kl = 0.0;
  double d2 = 0.0;
  double chi2 = 0.0;
};

namespace detail {

inline void check_same_length(const DiscreteDistribution& p,
                              const DiscreteDistribution& q) {
  if (p.size() != q.size()) {
    throw InputError("distributions have different lengths (" +
                     std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()) + ")");
  }
}

inline void check_rho(double rho) {
  if (!(rho > 0.0) || rho == 1.0 || !std::isfinite(rho)) {
    throw DomainError("Renyi order must be positive, finite and not 1");
  }
}

}  // namespace detail

/// D_rho(p || q) = log(sum p^rho q^(1-rho)) / (rho - 1). Atoms where either
/// side is zero contribute nothing, except p > 0 = q with rho > 1 which gives
/// +inf.
inline double renyi_discrete(const DiscreteDistribution& p,
                             const DiscreteDistribution& q, double rho) {
  detail::check_same_length(p, q);
  detail::check_rho(rho);
  std::vector<double> logs;
  logs.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    const double qi = q[i];
    if (pi > 0.0 && qi == 0.0 && rho > 1.0) return kInf;
    if (pi > 0.0 && qi > 0.0) {
      logs.push_back(rho * std::log(pi) + (1.0 - rho) * std::log(qi));
    }
  }
  const double lse = log_sum_exp(logs);
  if (lse == -kInf) return kInf;  // rho < 1 with disjoint supports
  const double d = lse / (rho - 1.0);
  return d < 0.0 ? 0.0 : d;
}

inline double kl_discrete(const DiscreteDistribution& p,
                          const DiscreteDistribution& q) {
  detail::check_same_length(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return kInf;
    s.add(p[i] * (std::log(p[i]) - std::log(q[i])));
  }
  return std::max(0.0, s.value());
}

/// H^2 = 0.5 * sum (sqrt p - sqrt q)^2, in [0, 1].
inline double hellinger_sq_discrete(const DiscreteDistribution& p,
                                    const DiscreteDistribution& q) {
  detail::check_same_length(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::sqrt(p[i]) - std::sqrt(q[i]);
    s.add(d * d);
  }
  return std::clamp(0.5 * s.value(), 0.0, 1.0);
}

inline double hellinger_discrete(const DiscreteDistribution& p,
                                 const DiscreteDistribution& q) {
  return std::sqrt(hellinger_sq_discrete(p, q));
}

inline double tv_discrete(const DiscreteDistribution& p,
                          const DiscreteDistribution& q) {
  detail::check_same_length(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.size(); ++i) s.add(std::abs(p[i] - q[i]));
  return std::clamp(0.5 * s.value(), 0.0, 1.0);
}

inline double chi2_discrete(const DiscreteDistribution& p,
                            const DiscreteDistribution& q) {
  detail::check_same_length(p, q);
  CompensatedSum s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return kInf;
    s.add(p[i] * (p[i] / q[i]));
  }
  return std::max(0.0, s.value() - 1.0);
}

inline DivergenceReport chain_report(const DiscreteDistribution& p,
                                     const DiscreteDistribution& q) {
  detail::check_same_length(p, q);
  DivergenceReport r;
  r.tv = tv_discrete(p, q);
  r.hellinger_sq = hellinger_sq_discrete(p, q);
  r.d_half = renyi_discrete(p, q, 0.5);
  r.kl = kl_discrete(p, q);
  r.d2 = renyi_discrete(p, q, 2.0);
  r.chi2 = chi2_discrete(p, q);
  return r;
}

/// tv^2 <= 2 H^2 <= D_1/2 <= KL <= D_2 <= chi^2, +inf treated as maximal.
inline bool chain_holds(const DivergenceReport& r, double slack = 1e-10) {
  const double v[] = {r.tv * r.tv, 2.0 * r.hellinger_sq, r.d_half,
                      r.kl,        r.d2,                 r.chi2};
  for (int i = 0; i + 1 < 6; ++i) {
    if (v[i] == kInf && v[i + 1] == kInf) continue;
    if (!(v[i] <= v[i + 1] + slack)) return false;
  }
  return true;
}

inline bool renyi_monotonicity_check(const DiscreteDistribution& p,
                                     const DiscreteDistribution& q,
                                     std::span<const double> rho_grid,
                                     double slack = 1e-10) {
  require(!rho_grid.empty(), "rho grid is empty");
  double previous = -kInf;
  double previous_rho = -kInf;
  for (double rho : rho_grid) {
    require(rho > previous_rho, "rho grid must be strictly increasing");
    const double d = renyi_discrete(p, q, rho);
    if (previous == kInf && d == kInf) continue;
    if (!(d >= previous - slack)) return false;
    previous = d;
    previous_rho = rho;
  }
  return true;
}

/// Closed form for N(ma, va) against N(mb, vb). Mutually singular pairs and a
/// non-positive mixed variance give +inf.
inline double renyi_gaussian(const ScalarGaussian& a, const ScalarGaussian& b,
                             double rho) {
  detail::check_rho(rho);
  require(a.variance >= 0.0 && b.variance >= 0.0,
          "Gaussian variance must be non-negative");
  if (a.variance == 0.0 || b.variance == 0.0) {
    if (a.variance == b.variance && a.mean == b.mean) return 0.0;
    return kInf;
  }
  const double delta = a.mean - b.mean;
  if (a.variance == b.variance) {
    return rho * delta * delta / (2.0 * a.variance);
  }
  const double v_rho = rho * b.variance + (1.0 - rho) * a.variance;
  if (!(v_rho > 0.0)) return kInf;
  const double log_ratio = std::log(v_rho) - (1.0 - rho) * std::log(a.variance) -
                           rho * std::log(b.variance);
  const double d = rho * delta * delta / (2.0 * v_rho) -
                   log_ratio / (2.0 * (rho - 1.0));
  return std::max(0.0, d);
}

inline double kl_gaussian(const ScalarGaussian& a, const ScalarGaussian& b) {
  require(a.variance >= 0.0 && b.variance >= 0.0,
          "Gaussian variance must be non-negative");
  if (a.variance == 0.0 || b.variance == 0.0) {
    if (a.variance == b.variance && a.mean == b.mean) return 0.0;
    return kInf;
  }
  const double delta = a.mean - b.mean;
  const double r = a.variance / b.variance;
  return 0.5 * (r - 1.0 - std::log(r) + delta * delta / b.variance);
}

/// D_rho between the laws of independent N(theta_j, 1/n) vectors. rho = 1
/// gives the KL divergence.
inline double product_gaussian_divergence(std::span<const double> theta_a,
                                          std::span<const double> theta_b,
                                          double n, double rho) {
  require(theta_a.size() == theta_b.size(),
          "coefficient sequences have different lengths");
  require(n > 0.0 && std::isfinite(n), "n must be positive");
  if (!(rho > 0.0) || !std::isfinite(rho)) {
    throw DomainError("Renyi order must be positive and finite");
  }
  CompensatedSum s;
  for (std::size_t j = 0; j < theta_a.size(); ++j) {
    const double d = theta_a[j] - theta_b[j];
    s.add(d * d);
  }
  return rho * n * 0.5 * s.value();
}

}  // namespace vbrate
