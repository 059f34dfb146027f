#pragma once

// Change-point model X_i = theta_i + sigma Z_i with piecewise constant theta.
//
// Grid chains store transitions in the factored form
//   Q_t(i, j) = r_t(i) * (i == j ? s_t(i) : c_t(j)),
// which is what exact inference gives for pairwise factors of the form
// K(i, j) = (i == j ? a(i) : b(j)). Every prior used here has that form, so
// forward-backward, marginals and free energies all cost O(n G).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vbrate/core.hpp"
#include "vbrate/quadrature.hpp"

namespace vbrate {

struct PiecewiseSignal {
  std::vector<double> values;
  int k_star = 1;
  double B = 1.0;

  int change_count() const {
    int c = 0;
    for (std::size_t i = 1; i < values.size(); ++i) c += values[i] != values[i - 1];
    return c;
  }
  void validate() const {
    require(!values.empty(), "signal is empty");
    require(change_count() == k_star - 1,
            "signal change count does not match k_star - 1");
    for (double v : values) require(std::abs(v) <= B, "signal exceeds its bound B");
  }
};

/// levels[p] on the p-th of levels.size() near-equal blocks of length n.
inline PiecewiseSignal make_piecewise_signal(std::span<const double> levels,
                                             int n, double B) {
  require(!levels.empty() && n >= static_cast<int>(levels.size()),
          "need at least one level and n >= number of levels");
  const int k = static_cast<int>(levels.size());
  PiecewiseSignal s{std::vector<double>(n), k, B};
  for (int i = 0; i < n; ++i) {
    s.values[i] = levels[std::min<long>(static_cast<long>(i) * k / n, k - 1)];
  }
  s.validate();
  return s;
}

/// Value density on [lo, hi]; uniform unless log_shape is set.
struct SiteDensity {
  double lo = -2.0;
  double hi = 2.0;
  std::function<double(double)> log_shape;  // unnormalized

  static SiteDensity uniform(double lo, double hi) {
    require(lo < hi, "density support must be a non-empty interval");
    return {lo, hi, {}};
  }
  bool is_uniform() const { return !log_shape; }
  double log_unnormalized(double x) const {
    if (x < lo || x > hi) return -kInf;
    return log_shape ? log_shape(x) : 0.0;
  }
};

/// theta_1 ~ g; theta_t = theta_{t-1} with probability 1 - p, else a fresh
/// draw from g.
struct MarkovPrior {
  double p = 0.01;
  SiteDensity g;
};

/// k ~ pi, k - 1 change points uniform over the n - 1 gaps, piece values iid g.
struct UniformPositionsPrior {
  std::vector<double> log_pi;  // log_pi[k - 1] = log pi(k), k = 1..n
  SiteDensity g;
};

using ChangePointPrior = std::variant<UniformPositionsPrior, MarkovPrior>;

/// p = n^{-c}.
inline MarkovPrior make_markov_prior(int n, double c, SiteDensity g) {
  require(n >= 2, "need n >= 2");
  const double p = std::pow(static_cast<double>(n), -c);
  require(p > 0.0 && p < 1.0, "change probability must lie in (0, 1)");
  return {p, std::move(g)};
}

/// pi(k) proportional to n^{-k}, k = 1..n.
inline UniformPositionsPrior make_uniform_positions_prior(int n, SiteDensity g) {
  require(n >= 1, "need n >= 1");
  std::vector<double> lp(n);
  const double ln = std::log(static_cast<double>(n));
  for (int k = 1; k <= n; ++k) lp[k - 1] = -ln * k;
  const double z = log_sum_exp(lp);
  for (double& v : lp) v -= z;
  return {std::move(lp), std::move(g)};
}

inline const SiteDensity& site_density(const ChangePointPrior& prior) {
  return std::visit([](const auto& p) -> const SiteDensity& { return p.g; }, prior);
}

/// G uniform nodes on [-B-1-4 sigma, B+1+4 sigma] intersected with the
/// support of g.
inline std::vector<double> make_grid(double B, double sigma, int G,
                                     const SiteDensity& g) {
  require(G >= 2, "grid needs at least two nodes");
  const double lo = std::max(-B - 1.0 - 4.0 * sigma, g.lo);
  const double hi = std::min(B + 1.0 + 4.0 * sigma, g.hi);
  require(lo < hi, "grid window and prior support do not overlap");
  std::vector<double> grid(G);
  for (int i = 0; i < G; ++i) grid[i] = lo + (hi - lo) * i / (G - 1);
  return grid;
}

/// Nearest grid node.
inline double snap_to_grid(double x, std::span<const double> grid) {
  auto it = std::lower_bound(grid.begin(), grid.end(), x);
  if (it == grid.begin()) return *it;
  if (it == grid.end()) return grid.back();
  return (x - *(it - 1) <= *it - x) ? *(it - 1) : *it;
}

struct GridChain {
  std::vector<double> grid;
  std::vector<double> initial;
  // (n - 1) x G each, row-major by step.
  std::vector<double> row_scale;
  std::vector<double> diag;
  std::vector<double> col;
  std::vector<double> marginals;  // n x G
  double log_normalizer = 0.0;    // log Z of the target the chain is exact for

  int length() const {
    return grid.empty() ? 0 : static_cast<int>(marginals.size() / grid.size());
  }
  int grid_size() const { return static_cast<int>(grid.size()); }

  double transition(int t, int i, int j) const {
    const std::size_t G = grid.size();
    const std::size_t o = static_cast<std::size_t>(t) * G;
    return row_scale[o + i] * (i == j ? diag[o + i] : col[o + j]);
  }
  /// Dense G x G matrix of step t -> t+1.
  std::vector<double> transition_matrix(int t) const {
    const int G = grid_size();
    std::vector<double> m(static_cast<std::size_t>(G) * G);
    for (int i = 0; i < G; ++i) {
      for (int j = 0; j < G; ++j) m[i * G + j] = transition(t, i, j);
    }
    return m;
  }
  std::span<const double> marginal(int t) const {
    return {marginals.data() + static_cast<std::size_t>(t) * grid.size(), grid.size()};
  }
};

struct CoordinatewisePosterior {
  std::vector<double> means;
  std::vector<double> variances;
};

namespace detail {

inline double std_normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi);
}

/// Phi(b) - Phi(a) for a < b without cancellation in either tail.
inline double normal_interval_mass(double a, double b) {
  if (a >= 0.0) return 0.5 * (std::erfc(a / std::sqrt(2.0)) - std::erfc(b / std::sqrt(2.0)));
  if (b <= 0.0) return 0.5 * (std::erfc(-b / std::sqrt(2.0)) - std::erfc(-a / std::sqrt(2.0)));
  return 1.0 - 0.5 * std::erfc(-a / std::sqrt(2.0)) - 0.5 * std::erfc(b / std::sqrt(2.0));
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Mean and variance of exp(log_w(x)) on [lo, hi] by quadrature, shifted by
/// the maximum over a coarse scan.
template <class F>
Moments quadrature_moments(F&& log_w, double lo, double hi) {
  double shift = -kInf;
  for (int i = 0; i <= 256; ++i) shift = std::max(shift, log_w(lo + (hi - lo) * i / 256.0));
  auto w = [&](double x) { return std::exp(log_w(x) - shift); };
  const double z = integrate_checked(w, lo, hi, 1e-12, 1e-8, "site normalizer");
  const double m =
      integrate(([&](double x) { return x * w(x); }), lo, hi, 1e-12,
                1e-14 * z * (std::abs(lo) + std::abs(hi))).value / z;
  const double v =
      integrate(([&](double x) { return (x - m) * (x - m) * w(x); }), lo, hi, 1e-12).value / z;
  return {m, v};
}

/// N(mu, sigma^2) restricted to [lo, hi].
inline Moments truncated_normal_moments(double mu, double sigma, double lo,
                                        double hi) {
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double z = normal_interval_mass(a, b);
  // deep in a tail the closed form cancels badly
  if (z < 1e-200 || a > 6.0 || b < -6.0) {
    return quadrature_moments(
        [&](double x) { return -0.5 * (x - mu) * (x - mu) / (sigma * sigma); }, lo, hi);
  }
  const double pa = std_normal_pdf(a);
  const double pb = std_normal_pdf(b);
  const double d = (pa - pb) / z;
  return {mu + sigma * d, sigma * sigma * (1.0 + (a * pa - b * pb) / z - d * d)};
}

/// Normalized masses of g at the grid nodes.
inline std::vector<double> grid_masses(const SiteDensity& g,
                                       std::span<const double> grid) {
  std::vector<double> lw(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) lw[i] = g.log_unnormalized(grid[i]);
  const double z = log_sum_exp(lw);
  if (!std::isfinite(z)) throw InputError("prior puts no mass on the grid");
  std::vector<double> w(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) w[i] = std::exp(lw[i] - z);
  return w;
}

inline void check_grid(std::span<const double> grid) {
  require(grid.size() >= 2, "grid needs at least two nodes");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    require(grid[i] > grid[i - 1], "grid must be strictly increasing");
  }
}

/// log N(x_t; grid_i, sigma^2), n x G.
inline std::vector<double> log_likelihood_table(std::span<const double> X,
                                                double sigma,
                                                std::span<const double> grid) {
  const std::size_t G = grid.size();
  std::vector<double> ll(X.size() * G);
  const double c = -std::log(sigma * std::sqrt(2.0 * kPi));
  for (std::size_t t = 0; t < X.size(); ++t) {
    for (std::size_t i = 0; i < G; ++i) {
      const double d = X[t] - grid[i];
      ll[t * G + i] = c - 0.5 * d * d / (sigma * sigma);
    }
  }
  return ll;
}

/// Exact chain for P(x) proportional to
///   u(x_1) prod_t e_t(x_t) prod_t K(x_t, x_{t+1}),
/// K(i, j) = (i == j ? a(i) : b(j)), with log e_t given as an n x G table.
inline GridChain exact_chain(std::span<const double> grid,
                             std::span<const double> u,
                             std::span<const double> log_unary,
                             std::span<const double> a,
                             std::span<const double> b) {
  const std::size_t G = grid.size();
  const std::size_t n = log_unary.size() / G;
  require(n >= 1, "need at least one site");
  GridChain q;
  q.grid.assign(grid.begin(), grid.end());
  q.row_scale.resize((n - 1) * G);
  q.diag.resize((n - 1) * G);
  q.col.resize((n - 1) * G);
  q.marginals.resize(n * G);

  // e_t(i) = exp(log_unary - max_t); the shifts go into log Z.
  std::vector<double> e(n * G);
  double log_z = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    double m = -kInf;
    for (std::size_t i = 0; i < G; ++i) m = std::max(m, log_unary[t * G + i]);
    if (!std::isfinite(m)) throw NumericError("likelihood vanishes on the grid");
    log_z += m;
    for (std::size_t i = 0; i < G; ++i) e[t * G + i] = std::exp(log_unary[t * G + i] - m);
  }

  std::vector<double> beta(G, 1.0);
  std::vector<double> w(G);
  for (std::size_t t = n - 1; t-- > 0;) {
    double bsum = 0.0;
    for (std::size_t j = 0; j < G; ++j) {
      w[j] = e[(t + 1) * G + j] * beta[j];
      bsum += b[j] * w[j];
    }
    double norm = 0.0;
    const std::size_t o = t * G;
    for (std::size_t i = 0; i < G; ++i) {
      const double bt = (a[i] - b[i]) * w[i] + bsum;
      q.diag[o + i] = a[i] * w[i];
      q.col[o + i] = b[i] * w[i];
      q.row_scale[o + i] = bt > 0.0 ? 1.0 / bt : 0.0;
      beta[i] = bt;
      norm = std::max(norm, bt);
    }
    if (!(norm > 0.0)) throw NumericError("backward messages vanished");
    for (std::size_t i = 0; i < G; ++i) beta[i] /= norm;
    log_z += std::log(norm);
  }
  double s = 0.0;
  q.initial.resize(G);
  for (std::size_t i = 0; i < G; ++i) {
    q.initial[i] = u[i] * e[i] * beta[i];
    s += q.initial[i];
  }
  if (!(s > 0.0)) throw NumericError("initial distribution vanished");
  for (double& v : q.initial) v /= s;
  q.log_normalizer = log_z + std::log(s);

  std::copy(q.initial.begin(), q.initial.end(), q.marginals.begin());
  for (std::size_t t = 0; t + 1 < n; ++t) {
    const std::size_t o = t * G;
    const double* m = q.marginals.data() + o;
    double* next = q.marginals.data() + o + G;
    double mr = 0.0;
    for (std::size_t i = 0; i < G; ++i) mr += m[i] * q.row_scale[o + i];
    double total = 0.0;
    for (std::size_t j = 0; j < G; ++j) {
      const double mj = m[j] * q.row_scale[o + j];
      next[j] = mj * q.diag[o + j] + q.col[o + j] * (mr - mj);
      next[j] = std::max(next[j], 0.0);
      total += next[j];
    }
    for (std::size_t j = 0; j < G; ++j) next[j] /= total;
  }
  return q;
}

inline double xlogy(double x, double y) {
  return x == 0.0 ? 0.0 : x * std::log(y);
}

/// E_Q log Q.
inline double chain_neg_entropy(const GridChain& q) {
  const int G = q.grid_size();
  const int n = q.length();
  CompensatedSum s;
  for (int i = 0; i < G; ++i) s.add(xlogy(q.initial[i], q.initial[i]));
  for (int t = 0; t + 1 < n; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * G;
    double c_sum = 0.0;
    double c_log = 0.0;
    for (int j = 0; j < G; ++j) {
      c_sum += q.col[o + j];
      c_log += xlogy(q.col[o + j], q.col[o + j]);
    }
    const auto m = q.marginal(t);
    double acc = 0.0;
    for (int i = 0; i < G; ++i) {
      if (m[i] == 0.0) continue;
      const double r = q.row_scale[o + i];
      const double qii = r * q.diag[o + i];
      const double ci = q.col[o + i];
      // sum_{j != i} r c_j log(r c_j)
      const double off = r * ((c_sum - ci) * (r > 0 ? std::log(r) : 0.0) +
                              (c_log - xlogy(ci, ci)));
      acc += m[i] * (xlogy(qii, qii) + off);
    }
    s.add(acc);
  }
  return s.value();
}

/// sum_t E_Q log K(x_t, x_{t+1}) with K(i, j) = (i == j ? e^{log_a(i)} : e^{log_b(j)}).
inline double expected_log_pairwise(const GridChain& q, std::span<const double> log_a,
                                    std::span<const double> log_b) {
  const int G = q.grid_size();
  const int n = q.length();
  CompensatedSum s;
  for (int t = 0; t + 1 < n; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * G;
    double e = 0.0;
    for (int j = 0; j < G; ++j) {
      if (q.col[o + j] > 0.0) e += q.col[o + j] * log_b[j];
    }
    const auto m = q.marginal(t);
    double acc = 0.0;
    for (int i = 0; i < G; ++i) {
      if (m[i] == 0.0) continue;
      const double r = q.row_scale[o + i];
      const double qii = r * q.diag[o + i];
      const double ci = q.col[o + i];
      double term = qii > 0.0 ? qii * log_a[i] : 0.0;
      term += r * (e - (ci > 0.0 ? ci * log_b[i] : 0.0));
      acc += m[i] * term;
    }
    s.add(acc);
  }
  return s.value();
}

inline double expected_log_unary(const GridChain& q, std::span<const double> log_u0,
                                 std::span<const double> log_unary) {
  const int G = q.grid_size();
  const int n = q.length();
  CompensatedSum s;
  for (int i = 0; i < G; ++i) {
    if (q.initial[i] > 0.0) s.add(q.initial[i] * log_u0[i]);
  }
  for (int t = 0; t < n; ++t) {
    const auto m = q.marginal(t);
    double acc = 0.0;
    for (int i = 0; i < G; ++i) {
      if (m[i] > 0.0) acc += m[i] * log_unary[static_cast<std::size_t>(t) * G + i];
    }
    s.add(acc);
  }
  return s.value();
}

/// Law of the number of changes M = #{t : x_t != x_{t+1}} under Q. Levels
/// whose mass falls below 1e-30 at the top are pruned.
inline std::vector<double> change_count_distribution(const GridChain& q) {
  const int G = q.grid_size();
  const int n = q.length();
  std::vector<std::vector<double>> f{q.initial};
  for (int t = 0; t + 1 < n; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * G;
    const int levels = static_cast<int>(f.size());
    std::vector<std::vector<double>> next(levels + 1, std::vector<double>(G, 0.0));
    for (int m = 0; m < levels; ++m) {
      double sr = 0.0;
      for (int i = 0; i < G; ++i) sr += f[m][i] * q.row_scale[o + i];
      for (int j = 0; j < G; ++j) {
        const double fr = f[m][j] * q.row_scale[o + j];
        next[m][j] += fr * q.diag[o + j];
        next[m + 1][j] += q.col[o + j] * (sr - fr);
      }
    }
    while (next.size() > 1) {
      double top = 0.0;
      for (double v : next.back()) top += std::abs(v);
      if (top >= 1e-30) break;
      next.pop_back();
    }
    f = std::move(next);
  }
  std::vector<double> dist(f.size());
  double total = 0.0;
  for (std::size_t m = 0; m < f.size(); ++m) {
    for (double v : f[m]) dist[m] += std::max(v, 0.0);
    total += dist[m];
  }
  for (double& v : dist) v /= total;
  return dist;
}

}  // namespace detail

/// Product of per-site tilts q_i proportional to g(theta) N(X_i; theta, sigma^2).
/// Uniform g gives truncated Gaussians in closed form.
inline CoordinatewisePosterior fit_mean_field(std::span<const double> X,
                                              double sigma,
                                              const ChangePointPrior& prior) {
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
  const SiteDensity& g = site_density(prior);
  CoordinatewisePosterior q;
  q.means.resize(X.size());
  q.variances.resize(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    require(std::isfinite(X[i]), "observations must be finite");
    detail::Moments m;
    if (g.is_uniform()) {
      m = detail::truncated_normal_moments(X[i], sigma, g.lo, g.hi);
    } else {
      const double x = X[i];
      m = detail::quadrature_moments(
          [&](double t) {
            return g.log_unnormalized(t) - 0.5 * (t - x) * (t - x) / (sigma * sigma);
          },
          g.lo, g.hi);
    }
    q.means[i] = m.mean;
    q.variances[i] = m.variance;
  }
  return q;
}

/// Exact posterior of the grid-discretized model under the Markov prior.
inline GridChain grid_posterior(std::span<const double> X, double sigma,
                                const MarkovPrior& prior,
                                std::span<const double> grid) {
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
  require(prior.p > 0.0 && prior.p < 1.0, "change probability must lie in (0, 1)");
  require(!X.empty(), "no observations");
  detail::check_grid(grid);
  const double h = grid[1] - grid[0];
  require(grid.front() <= prior.g.lo + 0.5 * h + 1e-12 &&
              grid.back() >= prior.g.hi - 0.5 * h - 1e-12,
          "grid does not cover the prior support");
  const auto gh = detail::grid_masses(prior.g, grid);
  const std::size_t G = grid.size();
  std::vector<double> a(G), b(G);
  for (std::size_t i = 0; i < G; ++i) {
    a[i] = 1.0 - prior.p + prior.p * gh[i];
    b[i] = prior.p * gh[i];
  }
  const auto ll = detail::log_likelihood_table(X, sigma, grid);
  return detail::exact_chain(grid, gh, ll, a, b);
}

/// KL(Q || target) - log Z_target, i.e. E_Q log Q - E_Q log p~(theta, X) for
/// the grid-discretized joint.
inline double free_energy(const GridChain& q, std::span<const double> X,
                          double sigma, const ChangePointPrior& prior) {
  require(static_cast<int>(X.size()) == q.length(), "chain length differs from data");
  const auto gh = detail::grid_masses(site_density(prior), q.grid);
  const std::size_t G = gh.size();
  std::vector<double> log_g(G);
  for (std::size_t i = 0; i < G; ++i) log_g[i] = gh[i] > 0 ? std::log(gh[i]) : -kInf;
  const auto ll = detail::log_likelihood_table(X, sigma, q.grid);
  double energy = detail::expected_log_unary(q, log_g, ll);
  if (const auto* mp = std::get_if<MarkovPrior>(&prior)) {
    std::vector<double> la(G), lb(G);
    for (std::size_t i = 0; i < G; ++i) {
      la[i] = std::log(1.0 - mp->p + mp->p * gh[i]);
      lb[i] = std::log(mp->p) + log_g[i];
    }
    energy += detail::expected_log_pairwise(q, la, lb);
  } else {
    const auto& pp = std::get<UniformPositionsPrior>(prior);
    const int n = q.length();
    const std::vector<double> zero(G, 0.0);
    energy += detail::expected_log_pairwise(q, zero, log_g);
    const auto dist = detail::change_count_distribution(q);
    const double lc = std::lgamma(static_cast<double>(n));
    for (std::size_t m = 0; m < dist.size(); ++m) {
      if (dist[m] == 0.0) continue;
      const double h = pp.log_pi[m] - (lc - std::lgamma(m + 1.0) - std::lgamma(n - static_cast<double>(m)));
      energy += dist[m] * h;
    }
  }
  return detail::chain_neg_entropy(q) - energy;
}

struct MarkovVBResult {
  GridChain chain;
  bool converged = false;
  int sweeps = 0;
  std::vector<double> objective_trace;  // free energy after each accepted sweep
};

struct MarkovVBOptions {
  double rel_tol = 1e-8;
  int max_sweeps = 500;
};

/// Variational posterior over first-order Markov chains on the grid. Under the
/// Markov prior this is the exact grid posterior. Under the uniform-positions
/// prior, each sweep linearizes h(M) = log pi(M+1) - log C(n-1, M) in the
/// change count at the current iterate, solves the resulting chain exactly and
/// backtracks on the slope so the free energy never increases.
inline MarkovVBResult fit_markov_vb(std::span<const double> X, double sigma,
                                    const ChangePointPrior& prior,
                                    std::span<const double> grid,
                                    MarkovVBOptions opt = {}) {
  MarkovVBResult res;
  if (const auto* mp = std::get_if<MarkovPrior>(&prior)) {
    res.chain = grid_posterior(X, sigma, *mp, grid);
    res.converged = true;
    res.objective_trace.push_back(free_energy(res.chain, X, sigma, prior));
    return res;
  }
  const auto& pp = std::get<UniformPositionsPrior>(prior);
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
  require(!X.empty(), "no observations");
  detail::check_grid(grid);
  const int n = static_cast<int>(X.size());
  require(static_cast<int>(pp.log_pi.size()) == n,
          "prior over k must have one entry per possible piece count");
  const auto gh = detail::grid_masses(pp.g, grid);
  const std::size_t G = grid.size();
  const auto ll = detail::log_likelihood_table(X, sigma, grid);
  const double lc = std::lgamma(static_cast<double>(n));
  auto h = [&](int m) {
    return pp.log_pi[m] - (lc - std::lgamma(m + 1.0) - std::lgamma(n - static_cast<double>(m)));
  };
  auto slope_at = [&](int m) { return n == 1 ? 0.0 : h(std::min(m, n - 2) + 1) - h(std::min(m, n - 2)); };
  auto chain_for = [&](double lambda, std::span<const double> unary) {
    std::vector<double> a(G, 1.0), b(G);
    for (std::size_t j = 0; j < G; ++j) b[j] = std::exp(lambda) * gh[j];
    return detail::exact_chain(grid, gh, unary, a, b);
  };
  auto expected_slope = [&](const GridChain& q) {
    const auto dist = detail::change_count_distribution(q);
    double s = 0.0;
    for (std::size_t m = 0; m < dist.size(); ++m) s += dist[m] * slope_at(static_cast<int>(m));
    return s;
  };

  const std::vector<double> flat(static_cast<std::size_t>(n) * G, 0.0);
  double lambda = slope_at(0);
  GridChain current = chain_for(lambda, flat);
  double f_cur = free_energy(current, X, sigma, prior);
  res.objective_trace.push_back(f_cur);
  while (res.sweeps < opt.max_sweeps) {
    ++res.sweeps;
    const double target = expected_slope(current);
    double step = 1.0;
    bool accepted = false;
    for (int half = 0; half < 40 && !accepted; ++half, step *= 0.5) {
      const double trial = lambda + step * (target - lambda);
      GridChain cand = chain_for(trial, ll);
      const double f = free_energy(cand, X, sigma, prior);
      if (f <= f_cur) {
        accepted = true;
        const double change = f_cur - f;
        current = std::move(cand);
        lambda = trial;
        f_cur = f;
        res.objective_trace.push_back(f);
        if (change <= opt.rel_tol * std::max(1.0, std::abs(f))) res.converged = true;
      }
    }
    // no improving slope along the search direction means a fixed point
    if (!accepted) res.converged = true;
    if (res.converged) break;
  }
  res.chain = std::move(current);
  return res;
}

/// E_Q ||theta - theta*||^2.
inline double risk(const GridChain& q, const PiecewiseSignal& signal) {
  require(static_cast<int>(signal.values.size()) == q.length(),
          "signal length differs from chain length");
  const int G = q.grid_size();
  CompensatedSum s;
  for (int t = 0; t < q.length(); ++t) {
    const auto m = q.marginal(t);
    double acc = 0.0;
    for (int i = 0; i < G; ++i) {
      const double d = q.grid[i] - signal.values[t];
      acc += m[i] * d * d;
    }
    s.add(acc);
  }
  return s.value();
}

inline double risk(const CoordinatewisePosterior& q, const PiecewiseSignal& signal) {
  require(signal.values.size() == q.means.size(),
          "signal length differs from posterior length");
  CompensatedSum s;
  for (std::size_t i = 0; i < q.means.size(); ++i) {
    const double d = q.means[i] - signal.values[i];
    s.add(q.variances[i] + d * d);
  }
  return s.value();
}

struct Segmentation {
  std::vector<double> theta_hat;
  double sse = 0.0;
};

/// Least-squares fit with at most m constant pieces, by dynamic programming
/// over the last boundary with prefix-sum segment costs.
inline Segmentation mle_segmentation(std::span<const double> X, int m) {
  const int n = static_cast<int>(X.size());
  require(n >= 1, "no observations");
  require(m >= 1 && m <= n, "piece count must lie in 1..n");
  std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (int i = 0; i < n; ++i) {
    s1[i + 1] = s1[i] + X[i];
    s2[i + 1] = s2[i] + X[i] * X[i];
  }
  auto cost = [&](int a, int b) {
    const double len = b - a;
    const double s = s1[b] - s1[a];
    return std::max(0.0, (s2[b] - s2[a]) - s * s / len);
  };
  const double inf = std::numeric_limits<double>::infinity();
  // D[p][b]: best cost of X[0, b) with exactly p pieces.
  std::vector<std::vector<double>> D(m + 1, std::vector<double>(n + 1, inf));
  std::vector<std::vector<int>> arg(m + 1, std::vector<int>(n + 1, -1));
  D[0][0] = 0.0;
  for (int p = 1; p <= m; ++p) {
    for (int b = p; b <= n; ++b) {
      for (int a = p - 1; a < b; ++a) {
        if (D[p - 1][a] == inf) continue;
        const double c = D[p - 1][a] + cost(a, b);
        if (c < D[p][b]) {
          D[p][b] = c;
          arg[p][b] = a;
        }
      }
    }
  }
  int best_p = 1;
  for (int p = 2; p <= m; ++p) {
    if (D[p][n] < D[best_p][n]) best_p = p;
  }
  Segmentation out;
  out.theta_hat.resize(n);
  out.sse = D[best_p][n];
  int b = n;
  for (int p = best_p; p >= 1; --p) {
    const int a = arg[p][b];
    const double mean = (s1[b] - s1[a]) / (b - a);
    for (int i = a; i < b; ++i) out.theta_hat[i] = mean;
    b = a;
  }
  return out;
}

}  // namespace vbrate
