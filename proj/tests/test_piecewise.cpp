#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "vbrate/piecewise.hpp"

using namespace vbrate;

namespace {

std::vector<double> uniform_grid(int G, double lo, double hi) {
  std::vector<double> g(G);
  for (int i = 0; i < G; ++i) g[i] = lo + (hi - lo) * i / (G - 1);
  return g;
}

std::vector<double> noisy(const std::vector<double>& theta, double sigma,
                          std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z;
  std::vector<double> x(theta.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = theta[i] + sigma * z(rng);
  return x;
}

using oracle::enumerate_markov;
using oracle::for_each_path;

// E_Q log Q - E_Q log p~ by enumeration, for either prior.
double enumerate_free_energy(const GridChain& q, const std::vector<double>& X,
                             double sigma, const ChangePointPrior& prior) {
  const int G = q.grid_size();
  const int n = q.length();
  std::vector<double> ghat(G);
  double s = 0.0;
  const auto& g = site_density(prior);
  for (int i = 0; i < G; ++i) s += ghat[i] = std::exp(g.log_unnormalized(q.grid[i]));
  for (auto& v : ghat) v /= s;
  double f = 0.0;
  for_each_path(G, n, [&](const std::vector<int>& x) {
    double lq = std::log(q.initial[x[0]]);
    for (int t = 0; t + 1 < n; ++t) lq += std::log(q.transition(t, x[t], x[t + 1]));
    const double w = std::exp(lq);
    if (w == 0.0) return;
    double lp = std::log(ghat[x[0]]);
    int changes = 0;
    for (int t = 1; t < n; ++t) {
      if (const auto* mp = std::get_if<MarkovPrior>(&prior)) {
        lp += std::log((x[t] == x[t - 1] ? 1 - mp->p : 0.0) + mp->p * ghat[x[t]]);
      } else if (x[t] != x[t - 1]) {
        lp += std::log(ghat[x[t]]);
        ++changes;
      }
    }
    if (const auto* pp = std::get_if<UniformPositionsPrior>(&prior)) {
      const double lchoose = std::lgamma(n) - std::lgamma(changes + 1.0) -
                             std::lgamma(n - changes);
      lp += pp->log_pi[changes] - lchoose;
    }
    for (int t = 0; t < n; ++t) {
      const double d = X[t] - q.grid[x[t]];
      lp += -0.5 * d * d / (sigma * sigma) - std::log(sigma * std::sqrt(2 * M_PI));
    }
    f += w * (lq - lp);
  });
  return f;
}

}  // namespace

TEST(Signal, Construction) {
  const std::vector<double> levels{0.5, -0.5, 0.5, -0.5};
  const auto s = make_piecewise_signal(levels, 10, 1.0);
  EXPECT_EQ(s.change_count(), 3);
  EXPECT_EQ(s.values[0], 0.5);
  EXPECT_EQ(s.values[9], -0.5);
  const std::vector<double> bad{0.5, 0.5};
  EXPECT_THROW(make_piecewise_signal(bad, 4, 1.0), InputError);
  const std::vector<double> big{2.0};
  EXPECT_THROW(make_piecewise_signal(big, 4, 1.0), InputError);
}

TEST(Grid, IntersectsSupport) {
  const auto g = SiteDensity::uniform(-2, 2);
  const auto grid = make_grid(1.0, 1.0, 64, g);
  EXPECT_DOUBLE_EQ(grid.front(), -2.0);
  EXPECT_DOUBLE_EQ(grid.back(), 2.0);
  EXPECT_EQ(grid.size(), 64u);
  EXPECT_DOUBLE_EQ(snap_to_grid(0.01, grid), grid[32]);
}

TEST(MeanField, SymmetricSite) {
  const std::vector<double> X{0.0};
  const ChangePointPrior prior = MarkovPrior{0.1, SiteDensity::uniform(-2, 2)};
  const auto q = fit_mean_field(X, 1.0, prior);
  EXPECT_NEAR(q.means[0], 0.0, 1e-15);
}

TEST(MeanField, TruncatedMomentsMatchGrid) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  const ChangePointPrior prior = MarkovPrior{0.1, SiteDensity::uniform(-2, 2)};
  for (int t = 0; t < 30; ++t) {
    const double x = u(rng);
    const double sigma = 0.3 + 0.1 * (t % 10);
    const auto q = fit_mean_field(std::vector<double>{x}, sigma, prior);
    const int m = 100000;
    double z = 0, s1 = 0, s2 = 0;
    for (int i = 0; i <= m; ++i) {
      const double th = -2.0 + 4.0 * i / m;
      const double w = (i == 0 || i == m ? 0.5 : 1.0) *
                       std::exp(-0.5 * (th - x) * (th - x) / (sigma * sigma));
      z += w;
      s1 += w * th;
      s2 += w * th * th;
    }
    const double mean = s1 / z;
    EXPECT_NEAR(q.means[0], mean, 1e-6);
    EXPECT_NEAR(q.variances[0], s2 / z - mean * mean, 1e-6);
  }
}

TEST(MeanField, ShapedDensityUsesQuadrature) {
  SiteDensity g{-2, 2, [](double x) { return -x * x; }};
  const ChangePointPrior prior = MarkovPrior{0.1, g};
  const auto q = fit_mean_field(std::vector<double>{0.7}, 1.0, prior);
  // N(0, 1/2) x N(0.7, 1) is N(0.7/3, 1/3), truncated to [-2, 2]
  const auto m = detail::truncated_normal_moments(0.7 / 3.0, std::sqrt(1.0 / 3.0), -2, 2);
  EXPECT_NEAR(q.means[0], m.mean, 1e-9);
  EXPECT_NEAR(q.variances[0], m.variance, 1e-9);
}

TEST(MeanField, RiskIsLinearInN) {
  const int n = 512;
  const ChangePointPrior prior = MarkovPrior{1.0 / n, SiteDensity::uniform(-2, 2)};
  const std::vector<double> zero(n, 0.0);
  const PiecewiseSignal s{zero, 1, 1.0};
  const double var0 = detail::truncated_normal_moments(0.0, 1.0, -2, 2).variance;
  double total = 0.0;
  for (int r = 0; r < 200; ++r) {
    total += risk(fit_mean_field(noisy(zero, 1.0, derive_seed(5, n, r)), 1.0, prior), s);
  }
  EXPECT_GE(total / 200, 0.5 * n * var0);
}

TEST(GridPosterior, SingleSite) {
  const auto grid = uniform_grid(16, -2, 2);
  const MarkovPrior prior{0.2, SiteDensity::uniform(-2, 2)};
  const std::vector<double> X{0.4};
  const auto q = grid_posterior(X, 1.0, prior, grid);
  double z = 0.0;
  std::vector<double> w(16);
  for (int i = 0; i < 16; ++i) z += w[i] = std::exp(-0.5 * (0.4 - grid[i]) * (0.4 - grid[i]));
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(q.marginal(0)[i], w[i] / z, 1e-14);
}

TEST(GridPosterior, NearZeroChangeProbability) {
  const auto grid = uniform_grid(16, -2, 2);
  const MarkovPrior prior{1e-12, SiteDensity::uniform(-2, 2)};
  const std::vector<double> X{0.9, -0.3};
  const auto q = grid_posterior(X, 1.0, prior, grid);
  const auto e = enumerate_markov(X, 1.0, 1e-12, grid, std::vector<double>(16, 1.0 / 16));
  double off = 0.0;
  for (int i = 0; i < 16; ++i) {
    EXPECT_NEAR(q.marginal(0)[i], q.marginal(1)[i], 1e-6);
    for (int j = 0; j < 16; ++j) if (i != j) off += e.pair01[i][j];
  }
  EXPECT_LT(off, 1e-9);
}

TEST(GridPosterior, MatchesEnumeration) {
  struct Case { int G; int n; };
  const Case cases[] = {{8, 3}, {16, 4}, {10, 6}, {32, 2}, {100, 3}, {4, 9}};
  int seed = 0;
  for (const auto& c : cases) {
    const auto grid = uniform_grid(c.G, -2, 2);
    const double p = 0.3;
    const MarkovPrior prior{p, SiteDensity::uniform(-2, 2)};
    std::vector<double> theta(c.n);
    for (int i = 0; i < c.n; ++i) theta[i] = i < c.n / 2 ? 0.8 : -0.5;
    const auto X = noisy(theta, 0.7, ++seed);
    const auto q = grid_posterior(X, 0.7, prior, grid);
    const auto e = enumerate_markov(X, 0.7, p, grid, std::vector<double>(c.G, 1.0 / c.G));
    for (int t = 0; t < c.n; ++t) {
      for (int i = 0; i < c.G; ++i) {
        ASSERT_NEAR(q.marginal(t)[i], e.marginals[t][i], 1e-10)
            << "G " << c.G << " n " << c.n << " t " << t;
      }
    }
    for (int i = 0; i < c.G; ++i) {
      for (int j = 0; j < c.G; ++j) {
        ASSERT_NEAR(q.initial[i] * q.transition(0, i, j), e.pair01[i][j], 1e-10);
      }
    }
    EXPECT_NEAR(q.log_normalizer, e.log_z, 1e-10);
  }
}

TEST(GridPosterior, ShapedPriorMatchesEnumeration) {
  SiteDensity g{-2, 2, [](double x) { return -0.5 * x * x; }};
  const auto grid = uniform_grid(12, -2, 2);
  const MarkovPrior prior{0.15, g};
  const std::vector<double> X{1.1, 0.2, -0.9, 0.4};
  const auto q = grid_posterior(X, 0.8, prior, grid);
  std::vector<double> ghat(12);
  double s = 0;
  for (int i = 0; i < 12; ++i) s += ghat[i] = std::exp(-0.5 * grid[i] * grid[i]);
  for (auto& v : ghat) v /= s;
  const auto e = enumerate_markov(X, 0.8, 0.15, grid, ghat);
  for (int t = 0; t < 4; ++t) {
    for (int i = 0; i < 12; ++i) EXPECT_NEAR(q.marginal(t)[i], e.marginals[t][i], 1e-10);
  }
}

TEST(GridPosterior, RowsAreStochastic) {
  const auto grid = uniform_grid(64, -2, 2);
  const MarkovPrior prior{1.0 / 300, SiteDensity::uniform(-2, 2)};
  const auto X = noisy(std::vector<double>(300, 0.5), 1.0, 9);
  const auto q = grid_posterior(X, 1.0, prior, grid);
  for (int t : {0, 150, 298}) {
    const auto m = q.transition_matrix(t);
    for (int i = 0; i < 64; ++i) {
      double s = 0;
      for (int j = 0; j < 64; ++j) s += m[i * 64 + j];
      EXPECT_NEAR(s, 1.0, 1e-10);
    }
  }
  for (int t = 0; t < 300; ++t) {
    double s = 0;
    for (double v : q.marginal(t)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-10);
  }
}

TEST(GridPosterior, LongSeriesStaysFinite) {
  const auto grid = uniform_grid(64, -2, 2);
  const int n = 4096;
  const MarkovPrior prior{1.0 / n, SiteDensity::uniform(-2, 2)};
  const auto X = noisy(std::vector<double>(n, -0.7), 1.0, 10);
  const auto q = grid_posterior(X, 1.0, prior, grid);
  EXPECT_TRUE(std::isfinite(q.log_normalizer));
  for (double v : q.marginals) ASSERT_TRUE(std::isfinite(v));
}

TEST(FreeEnergy, ExactChainGivesMinusLogZ) {
  const auto grid = uniform_grid(10, -2, 2);
  const MarkovPrior mp{0.2, SiteDensity::uniform(-2, 2)};
  const std::vector<double> X{0.3, 1.2, -0.4, 0.0, 0.8};
  const auto q = grid_posterior(X, 1.0, mp, grid);
  EXPECT_NEAR(free_energy(q, X, 1.0, mp), -q.log_normalizer, 1e-10);
}

TEST(FreeEnergy, StructuredFormulasMatchEnumeration) {
  const auto grid = uniform_grid(7, -2, 2);
  const std::vector<double> X{0.3, 1.2, -0.4, 0.0, 0.8};
  const int n = X.size();
  // an arbitrary chain: exact posterior of a different Markov prior
  const MarkovPrior other{0.45, SiteDensity::uniform(-2, 2)};
  const auto q = grid_posterior(X, 1.3, other, grid);
  const ChangePointPrior markov = MarkovPrior{0.1, SiteDensity::uniform(-2, 2)};
  const ChangePointPrior positions_prior = make_uniform_positions_prior(n, SiteDensity::uniform(-2, 2));
  EXPECT_NEAR(free_energy(q, X, 1.0, markov), enumerate_free_energy(q, X, 1.0, markov), 1e-10);
  EXPECT_NEAR(free_energy(q, X, 1.0, positions_prior), enumerate_free_energy(q, X, 1.0, positions_prior), 1e-10);
}

TEST(MarkovVB, MarkovPriorIsExact) {
  const auto grid = uniform_grid(32, -2, 2);
  const MarkovPrior mp{0.05, SiteDensity::uniform(-2, 2)};
  const auto X = noisy(std::vector<double>(40, 0.2), 1.0, 11);
  const auto a = grid_posterior(X, 1.0, mp, grid);
  const auto b = fit_markov_vb(X, 1.0, mp, grid);
  EXPECT_TRUE(b.converged);
  EXPECT_EQ(a.marginals, b.chain.marginals);
  EXPECT_EQ(a.row_scale, b.chain.row_scale);
}

TEST(MarkovVB, UniformPositionsPriorFreeEnergyMonotone) {
  for (int r = 0; r < 50; ++r) {
    const int n = 20 + r % 30;
    const int G = 16 + (r % 3) * 8;
    const auto g = SiteDensity::uniform(-2, 2);
    const auto grid = make_grid(1.0, 1.0, G, g);
    std::vector<double> theta(n);
    for (int i = 0; i < n; ++i) theta[i] = i < n / 3 ? 0.9 : (i < 2 * n / 3 ? -0.6 : 0.3);
    const auto X = noisy(theta, 1.0, derive_seed(12, n, r));
    const auto res = fit_markov_vb(X, 1.0, make_uniform_positions_prior(n, g), grid);
    ASSERT_GE(res.objective_trace.size(), 2u);
    for (std::size_t i = 1; i < res.objective_trace.size(); ++i) {
      EXPECT_LE(res.objective_trace[i], res.objective_trace[i - 1]) << "run " << r;
    }
  }
}

TEST(MarkovVB, UniformPositionsPriorBoundedByEvidence) {
  const auto g = SiteDensity::uniform(-2, 2);
  const auto grid = uniform_grid(6, -2, 2);
  const std::vector<double> X{0.9, 1.1, 0.7, -0.8, -1.2, -0.5};
  const int n = X.size();
  const ChangePointPrior prior = make_uniform_positions_prior(n, g);
  const auto res = fit_markov_vb(X, 1.0, prior, grid);
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(res.objective_trace.back(), free_energy(res.chain, X, 1.0, prior), 1e-12);
  // F(Q) = KL(Q || target) - log Z >= -log Z, with Z by enumeration
  double z = 0.0;
  const auto& pp = std::get<UniformPositionsPrior>(prior);
  for_each_path(6, n, [&](const std::vector<int>& x) {
    double lp = std::log(1.0 / 6);
    int changes = 0;
    for (int t = 1; t < n; ++t) {
      if (x[t] != x[t - 1]) {
        lp += std::log(1.0 / 6);
        ++changes;
      }
    }
    lp += pp.log_pi[changes] -
          (std::lgamma(n) - std::lgamma(changes + 1.0) - std::lgamma(n - changes));
    for (int t = 0; t < n; ++t) {
      const double d = X[t] - grid[x[t]];
      lp += -0.5 * d * d - std::log(std::sqrt(2 * M_PI));
    }
    z += std::exp(lp);
  });
  EXPECT_GE(res.objective_trace.back(), -std::log(z) - 1e-12);
  EXPECT_LT(res.objective_trace.back(), -std::log(z) + 0.5);
}

TEST(MarkovVB, RiskOfOrderKLogN) {
  const int n = 256;
  const int k = 4;
  const auto g = SiteDensity::uniform(-2, 2);
  const auto grid = make_grid(1.0, 1.0, 64, g);
  const ChangePointPrior prior = make_markov_prior(n, 1.0, g);
  const double lv[] = {snap_to_grid(0.8, grid), snap_to_grid(-0.5, grid),
                       snap_to_grid(0.4, grid), snap_to_grid(-0.9, grid)};
  const auto s = make_piecewise_signal(lv, n, 1.0);
  double total = 0.0;
  for (int r = 0; r < 100; ++r) {
    const auto X = noisy(s.values, 1.0, derive_seed(13, n, r));
    total += risk(fit_markov_vb(X, 1.0, prior, grid).chain, s);
  }
  EXPECT_LE(total / 100, 8.0 * k * std::log(double(n)));
}

TEST(Risk, PointMassIsZero) {
  GridChain q;
  q.grid = {-1.0, 0.0, 1.0};
  q.initial = {0, 1, 0};
  q.marginals = {0, 1, 0, 0, 0, 1};
  const PiecewiseSignal s{{0.0, 1.0}, 2, 1.0};
  EXPECT_EQ(risk(q, s), 0.0);
  const PiecewiseSignal bad{{0.0}, 1, 1.0};
  EXPECT_THROW(risk(q, bad), InputError);
}

TEST(Risk, ProductMatchesGrid) {
  const ChangePointPrior prior = MarkovPrior{0.1, SiteDensity::uniform(-2, 2)};
  const std::vector<double> X{0.4, -1.3, 2.5};
  const auto q = fit_mean_field(X, 0.8, prior);
  const PiecewiseSignal s{{0.5, 0.5, 0.5}, 1, 1.0};
  double expected = 0.0;
  const int m = 200000;
  for (std::size_t i = 0; i < X.size(); ++i) {
    double z = 0, acc = 0;
    for (int k = 0; k <= m; ++k) {
      const double th = -2.0 + 4.0 * k / m;
      const double w = (k == 0 || k == m ? 0.5 : 1.0) *
                       std::exp(-0.5 * (th - X[i]) * (th - X[i]) / 0.64);
      z += w;
      acc += w * (th - 0.5) * (th - 0.5);
    }
    expected += acc / z;
  }
  EXPECT_NEAR(risk(q, s), expected, 1e-8);
}

TEST(Segmentation, SmallCases) {
  const std::vector<double> X{1, 1, 5, 5};
  const auto two = mle_segmentation(X, 2);
  EXPECT_EQ(two.theta_hat, X);
  EXPECT_NEAR(two.sse, 0.0, 1e-12);
  const auto one = mle_segmentation(X, 1);
  EXPECT_EQ(one.theta_hat, (std::vector<double>{3, 3, 3, 3}));
  EXPECT_NEAR(one.sse, 16.0, 1e-12);
  EXPECT_THROW(mle_segmentation(X, 0), InputError);
  EXPECT_THROW(mle_segmentation(X, 5), InputError);
}

TEST(Segmentation, MatchesBruteForce) {
  Rng rng(14);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> X(12);
    for (auto& x : X) x = z(rng);
    auto sse = [&](int a, int b) {
      double m = 0;
      for (int i = a; i < b; ++i) m += X[i];
      m /= (b - a);
      double s = 0;
      for (int i = a; i < b; ++i) s += (X[i] - m) * (X[i] - m);
      return s;
    };
    double best = sse(0, 12);
    for (int a = 1; a < 12; ++a) {
      best = std::min(best, sse(0, a) + sse(a, 12));
      for (int b = a + 1; b < 12; ++b) {
        best = std::min(best, sse(0, a) + sse(a, b) + sse(b, 12));
      }
    }
    EXPECT_NEAR(mle_segmentation(X, 3).sse, best, 1e-10);
  }
}
