#pragma once

// Exponential family on [0, 1] in a Fourier basis, numeric divergences, and
// Gaussian mean-field variational fits under a sieve prior.
//
// Basis: phi_{2l-1}(x) = sqrt(2) cos(2 pi l x), phi_{2l}(x) = sqrt(2) sin(2 pi l x),
// phi_0 = 1 with theta_0 = 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vbrate/core.hpp"
#include "vbrate/gsm.hpp"
#include "vbrate/quadrature.hpp"

namespace vbrate {

inline constexpr const char* kFourierBasis =
    "phi_{2l-1}(x)=sqrt(2)cos(2 pi l x), phi_{2l}(x)=sqrt(2)sin(2 pi l x), theta_0=0";

/// phi_j(x) for j >= 1.
inline double fourier_basis(int j, double x) {
  require(j >= 1, "basis index must be >= 1");
  const double l = static_cast<double>((j + 1) / 2);
  const double arg = 2.0 * kPi * l * x;
  return std::sqrt(2.0) * (j % 2 == 1 ? std::cos(arg) : std::sin(arg));
}

/// Writes phi_1(x)..phi_k(x) into out.
inline void fourier_basis_all(double x, std::span<double> out) {
  const int k = static_cast<int>(out.size());
  for (int l = 1; 2 * l - 1 <= k; ++l) {
    const double arg = 2.0 * kPi * l * x;
    out[2 * l - 2] = std::sqrt(2.0) * std::cos(arg);
    if (2 * l <= k) out[2 * l - 1] = std::sqrt(2.0) * std::sin(arg);
  }
}

/// sum_j theta_j phi_j(x).
inline double fourier_sum(std::span<const double> theta, double x) {
  double s = 0.0;
  for (std::size_t l = 1; 2 * l - 1 <= theta.size(); ++l) {
    const double arg = 2.0 * kPi * static_cast<double>(l) * x;
    s += theta[2 * l - 2] * std::cos(arg);
    if (2 * l <= theta.size()) s += theta[2 * l - 1] * std::sin(arg);
  }
  return std::sqrt(2.0) * s;
}

namespace detail {

inline void check_theta(std::span<const double> theta) {
  for (double t : theta) require(std::isfinite(t), "coefficients must be finite");
}

inline bool all_zero(std::span<const double> theta) {
  return std::all_of(theta.begin(), theta.end(), [](double t) { return t == 0.0; });
}

/// Max of the exponent over a uniform grid, used as an overflow shift.
inline double exponent_shift(std::span<const double> theta) {
  double m = -kInf;
  for (int i = 0; i <= 1024; ++i) m = std::max(m, fourier_sum(theta, i / 1024.0));
  return m;
}

}  // namespace detail

/// c(theta) = log int_0^1 exp(sum theta_j phi_j), adaptive to 1e-10 relative.
inline double log_normalizer(std::span<const double> theta) {
  detail::check_theta(theta);
  if (detail::all_zero(theta)) return 0.0;
  const double shift = detail::exponent_shift(theta);
  const auto r = integrate(
      [&](double x) { return std::exp(fourier_sum(theta, x) - shift); }, 0.0, 1.0,
      1e-10);
  if (!r.converged) throw NumericError("log normalizer quadrature did not converge");
  return shift + std::log(r.value);
}

class FourierDensity {
 public:
  explicit FourierDensity(std::vector<double> theta) : theta_(std::move(theta)) {
    log_norm_ = vbrate::log_normalizer(theta_);
  }

  std::span<const double> theta() const { return theta_; }
  double log_normalizer() const { return log_norm_; }
  static const char* basis() { return kFourierBasis; }

  double log_pdf(double x) const {
    require(x >= 0.0 && x <= 1.0, "density argument must lie in [0, 1]");
    return fourier_sum(theta_, x) - log_norm_;
  }
  double pdf(double x) const { return std::exp(log_pdf(x)); }

 private:
  std::vector<double> theta_;
  double log_norm_ = 0.0;
};

/// Inverse-CDF draws from a 4096-cell grid, linear within each cell.
inline std::vector<double> sample(const FourierDensity& density, std::size_t m,
                                  std::uint64_t seed) {
  constexpr int cells = 4096;
  std::vector<double> cdf(cells + 1, 0.0);
  double prev = density.pdf(0.0);
  for (int i = 1; i <= cells; ++i) {
    const double cur = density.pdf(static_cast<double>(i) / cells);
    cdf[i] = cdf[i - 1] + 0.5 * (prev + cur) / cells;
    prev = cur;
  }
  const double total = cdf[cells];
  for (double& c : cdf) c /= total;
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> out(m);
  for (auto& x : out) {
    const double u = unif(rng);
    const auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    const int i = std::min<int>(static_cast<int>(it - cdf.begin()), cells) - 1;
    const double width = cdf[i + 1] - cdf[i];
    const double frac = width > 0.0 ? (u - cdf[i]) / width : 0.0;
    x = std::clamp((i + frac) / cells, 0.0, 1.0);
  }
  return out;
}

namespace detail {

template <class F>
double divergence_integral(F&& f, const char* what) {
  const auto r = integrate(f, 0.0, 1.0, 1e-10, 1e-15);
  if (!r.converged) throw NumericError(std::string("quadrature did not converge: ") + what);
  return r.value;
}

}  // namespace detail

/// H = sqrt(0.5 int (sqrt p - sqrt q)^2).
inline double hellinger_numeric(const FourierDensity& a, const FourierDensity& b) {
  const double v = detail::divergence_integral(
      [&](double x) {
        const double d = std::exp(0.5 * a.log_pdf(x)) - std::exp(0.5 * b.log_pdf(x));
        return 0.5 * d * d;
      },
      "Hellinger");
  return std::sqrt(std::max(v, 0.0));
}

inline double kl_numeric(const FourierDensity& a, const FourierDensity& b) {
  const double v = detail::divergence_integral(
      [&](double x) {
        const double la = a.log_pdf(x);
        return std::exp(la) * (la - b.log_pdf(x));
      },
      "KL");
  return std::max(v, 0.0);
}

/// D_2 = log int p^2 / q.
inline double d2_numeric(const FourierDensity& a, const FourierDensity& b) {
  const double v = detail::divergence_integral(
      [&](double x) { return std::exp(2.0 * a.log_pdf(x) - b.log_pdf(x)); }, "D2");
  return std::max(std::log(v), 0.0);
}

/// Product of N(mu_j, sigma2_j) over j = 1..k; sigma2_j = 0 is a point mass.
struct GaussMFVariational {
  std::vector<double> mu;
  std::vector<double> sigma2;

  int k() const { return static_cast<int>(mu.size()); }

  void validate() const {
    require(mu.size() == sigma2.size(), "mu and sigma2 lengths differ");
    for (std::size_t j = 0; j < mu.size(); ++j) {
      require(std::isfinite(mu[j]), "variational means must be finite");
      require(std::isfinite(sigma2[j]) && sigma2[j] >= 0.0,
              "variational variances must be non-negative");
    }
  }
};

struct ElboOptions {
  int samples = 64;         // reparameterized draws for E_Q c(theta)
  std::uint64_t seed = 0;   // common random numbers
  int panels = 64;          // fixed 20-point panels for c(theta) inside the ELBO
};

struct ElboEvaluation {
  double value = 0.0;
  bool degenerate = false;  // point-mass coordinate against a continuous prior
  std::vector<double> grad_mu;
  std::vector<double> grad_log_sigma;
};

/// ELBO on the k-shell of a sieve prior with Gaussian coordinates:
///   log pi(k) + E_Q sum_i log p_theta(X_i) - KL(q || N(0, v)^k).
/// E_Q c(theta) uses fixed standard-normal draws, so the objective and its
/// gradient are deterministic per seed; the gradient is exact for that
/// objective.
class ExpFamElbo {
 public:
  ExpFamElbo(std::span<const double> data, const SievePrior& prior, int k,
             ElboOptions options = {})
      : k_(k), n_(static_cast<double>(data.size())) {
    require(!data.empty(), "data must be non-empty");
    require(k >= 1 && k <= prior.k_max(), "k must lie in 1..K_max");
    require(prior.coordinate().conjugate(),
            "the exponential-family ELBO needs Gaussian coordinate priors");
    require(options.samples >= 1, "ELBO needs at least one Monte Carlo draw");
    require(options.panels >= 1, "ELBO quadrature needs at least one panel");
    const double pk = prior.dimension_weights()[k];
    require(pk > 0.0, "prior gives zero mass to the requested k");
    log_prior_k_ = std::log(pk);
    prior_var_ = prior.coordinate().gaussian_variance();

    score_.assign(k, 0.0);
    std::vector<double> phi(k);
    for (double x : data) {
      require(x >= 0.0 && x <= 1.0, "observations must lie in [0, 1]");
      fourier_basis_all(x, phi);
      for (int j = 0; j < k; ++j) score_[j] += phi[j];
    }

    const auto& rule = gauss_legendre_20();
    const double width = 1.0 / options.panels;
    for (int p = 0; p < options.panels; ++p) {
      for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
        const double x = (p + 0.5) * width + 0.5 * width * rule.nodes[i];
        node_weights_.push_back(0.5 * width * rule.weights[i]);
        fourier_basis_all(x, phi);
        basis_.insert(basis_.end(), phi.begin(), phi.end());
      }
    }

    Rng rng(options.seed);
    std::normal_distribution<double> z;
    eps_.resize(static_cast<std::size_t>(options.samples) * k);
    for (auto& e : eps_) e = z(rng);
    samples_ = options.samples;
  }

  int k() const { return k_; }
  double n() const { return n_; }
  double prior_variance() const { return prior_var_; }

  /// c(theta) and E_theta phi_j under the fixed rule.
  double fixed_log_normalizer(std::span<const double> theta,
                              std::vector<double>* mean_phi = nullptr) const {
    const std::size_t nodes = node_weights_.size();
    std::vector<double> g(nodes);
    double shift = -kInf;
    for (std::size_t m = 0; m < nodes; ++m) {
      const double* b = &basis_[m * k_];
      double s = 0.0;
      for (int j = 0; j < k_; ++j) s += theta[j] * b[j];
      g[m] = s;
      shift = std::max(shift, s);
    }
    double z = 0.0;
    if (mean_phi) mean_phi->assign(k_, 0.0);
    for (std::size_t m = 0; m < nodes; ++m) {
      const double w = node_weights_[m] * std::exp(g[m] - shift);
      z += w;
      if (mean_phi) {
        const double* b = &basis_[m * k_];
        for (int j = 0; j < k_; ++j) (*mean_phi)[j] += w * b[j];
      }
    }
    if (mean_phi) {
      for (double& v : *mean_phi) v /= z;
    }
    return shift + std::log(z);
  }

  /// sum_i log p_theta(X_i) with the fixed-rule normalizer.
  double log_likelihood(std::span<const double> theta) const {
    require(static_cast<int>(theta.size()) == k_, "theta length must equal k");
    double s = 0.0;
    for (int j = 0; j < k_; ++j) s += theta[j] * score_[j];
    return s - n_ * fixed_log_normalizer(theta);
  }

  ElboEvaluation evaluate(const GaussMFVariational& q, bool with_gradient = true) const {
    q.validate();
    require(q.k() == k_, "variational length must equal k");
    ElboEvaluation out;
    if (std::any_of(q.sigma2.begin(), q.sigma2.end(), [](double v) { return v == 0.0; })) {
      out.value = -kInf;
      out.degenerate = true;
      return out;
    }
    std::vector<double> sd(k_);
    for (int j = 0; j < k_; ++j) sd[j] = std::sqrt(q.sigma2[j]);

    CompensatedSum value;
    value.add(log_prior_k_);
    for (int j = 0; j < k_; ++j) {
      value.add(q.mu[j] * score_[j]);
      const double r = q.sigma2[j] / prior_var_;
      value.add(-0.5 * (r + q.mu[j] * q.mu[j] / prior_var_ - 1.0 - std::log(r)));
    }
    std::vector<double> grad_c_mu(k_, 0.0);
    std::vector<double> grad_c_ls(k_, 0.0);
    std::vector<double> theta(k_);
    std::vector<double> mean_phi;
    double c_sum = 0.0;
    for (int s = 0; s < samples_; ++s) {
      const double* e = &eps_[static_cast<std::size_t>(s) * k_];
      for (int j = 0; j < k_; ++j) theta[j] = q.mu[j] + sd[j] * e[j];
      c_sum += fixed_log_normalizer(theta, with_gradient ? &mean_phi : nullptr);
      if (with_gradient) {
        for (int j = 0; j < k_; ++j) {
          grad_c_mu[j] += mean_phi[j];
          grad_c_ls[j] += mean_phi[j] * e[j] * sd[j];
        }
      }
    }
    value.add(-n_ * c_sum / samples_);
    out.value = value.value();
    if (with_gradient) {
      out.grad_mu.resize(k_);
      out.grad_log_sigma.resize(k_);
      for (int j = 0; j < k_; ++j) {
        out.grad_mu[j] = score_[j] - n_ * grad_c_mu[j] / samples_ - q.mu[j] / prior_var_;
        out.grad_log_sigma[j] =
            -n_ * grad_c_ls[j] / samples_ - (q.sigma2[j] / prior_var_ - 1.0);
      }
    }
    return out;
  }

 private:
  int k_;
  double n_;
  int samples_ = 0;
  double log_prior_k_ = 0.0;
  double prior_var_ = 1.0;
  std::vector<double> score_;         // sum_i phi_j(X_i)
  std::vector<double> node_weights_;  // fixed rule on [0, 1]
  std::vector<double> basis_;         // node-major phi_j at the rule nodes
  std::vector<double> eps_;           // sample-major standard normals
};

inline double elbo(const GaussMFVariational& q, std::span<const double> data,
                   const SievePrior& prior, const ElboOptions& options = {}) {
  return ExpFamElbo(data, prior, q.k(), options).evaluate(q, false).value;
}

struct FitOptions {
  ElboOptions elbo;
  int max_iterations = 500;
  double initial_step = 1.0;  // multiplies a diagonal Newton-like scaling
  double tolerance = 1e-9;    // stop when the gain falls below tol * (1 + |ELBO|)
};

struct ExpFamFit {
  GaussMFVariational q;
  double elbo = 0.0;
  double initial_elbo = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Gradient ascent on (mu, log sigma) with backtracking; returns the best
/// iterate. Starts at mu = 0, sigma^2 = 1 / (n + 1/v).
inline ExpFamFit fit_gaussian_mf(std::span<const double> data, const SievePrior& prior,
                                 int k, const FitOptions& options = {}) {
  require(options.max_iterations >= 1, "iteration budget must be positive");
  require(options.initial_step > 0.0, "step size must be positive");
  const ExpFamElbo objective(data, prior, k, options.elbo);
  const double v = objective.prior_variance();
  const double n = objective.n();
  constexpr double kLogSigmaFloor = -6.0 * 2.302585092994046;  // sigma^2 >= 1e-12

  GaussMFVariational q{std::vector<double>(k, 0.0),
                       std::vector<double>(k, 1.0 / (n + 1.0 / v))};
  ElboEvaluation cur = objective.evaluate(q);
  ExpFamFit fit;
  fit.initial_elbo = cur.value;
  double step = options.initial_step;
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving) {
      GaussMFVariational trial = q;
      for (int j = 0; j < k; ++j) {
        trial.mu[j] += step * cur.grad_mu[j] / (n + 1.0 / v);
        const double ls = std::max(0.5 * std::log(q.sigma2[j]) +
                                       0.5 * step * cur.grad_log_sigma[j],
                                   kLogSigmaFloor);
        trial.sigma2[j] = std::exp(2.0 * ls);
      }
      ElboEvaluation next = objective.evaluate(trial);
      if (next.value < -1e12) throw NumericError("ELBO optimization diverged");
      if (next.value > cur.value) {
        const double gain = next.value - cur.value;
        q = std::move(trial);
        cur = std::move(next);
        accepted = true;
        step = std::min(options.initial_step, 2.0 * step);
        if (gain < options.tolerance * (1.0 + std::abs(cur.value))) fit.converged = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) fit.converged = true;
    if (fit.converged) break;
  }
  fit.q = std::move(q);
  fit.elbo = cur.value;
  fit.iterations = it;
  return fit;
}

}  // namespace vbrate
