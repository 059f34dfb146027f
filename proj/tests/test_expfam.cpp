#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "vbrate/expfam.hpp"

using namespace vbrate;

namespace {

using oracle::periodic_trapezoid;

double oracle_log_normalizer(const std::vector<double>& theta, int m = 1000000) {
  return std::log(periodic_trapezoid(
      [&](double x) {
        double g = 0.0;
        for (std::size_t j = 0; j < theta.size(); ++j) {
          const double l = static_cast<double>(j / 2 + 1);
          g += theta[j] * std::sqrt(2.0) *
               (j % 2 == 0 ? std::cos(2 * kPi * l * x) : std::sin(2 * kPi * l * x));
        }
        return std::exp(g);
      },
      m));
}

std::vector<double> random_theta(Rng& rng, int k, double scale) {
  std::normal_distribution<double> z;
  std::vector<double> t(k);
  for (auto& v : t) v = scale * z(rng);
  return t;
}

SievePrior toy_prior(int k_max, double variance = 1.0) {
  return SievePrior::poisson(k_max, 1.0, CoordinateSpec::gaussian(variance));
}

}  // namespace

TEST(Basis, Convention) {
  EXPECT_NEAR(fourier_basis(1, 0.1), std::sqrt(2.0) * std::cos(2 * kPi * 0.1), 1e-15);
  EXPECT_NEAR(fourier_basis(2, 0.1), std::sqrt(2.0) * std::sin(2 * kPi * 0.1), 1e-15);
  EXPECT_NEAR(fourier_basis(5, 0.3), std::sqrt(2.0) * std::cos(6 * kPi * 0.3), 1e-15);
  std::vector<double> all(5);
  fourier_basis_all(0.37, all);
  for (int j = 1; j <= 5; ++j) EXPECT_NEAR(all[j - 1], fourier_basis(j, 0.37), 1e-14);
  EXPECT_THROW(fourier_basis(0, 0.1), InputError);
}

TEST(LogNormalizer, ZeroIsExact) {
  EXPECT_EQ(log_normalizer(std::vector<double>{}), 0.0);
  EXPECT_EQ(log_normalizer(std::vector<double>{0.0, 0.0, 0.0}), 0.0);
}

TEST(LogNormalizer, MatchesTrapezoidAndBessel) {
  const std::vector<double> theta{0.5};
  const double c = log_normalizer(theta);
  EXPECT_NEAR(c, oracle_log_normalizer(theta), 1e-12);
  // int_0^1 exp(a cos 2 pi x) dx = I_0(a)
  EXPECT_NEAR(c, std::log(std::cyl_bessel_i(0.0, 0.5 * std::sqrt(2.0))), 1e-12);
}

TEST(LogNormalizer, RandomCoefficientsAgainstOracle) {
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    const auto theta = random_theta(rng, 1 + t, 0.6);
    EXPECT_NEAR(log_normalizer(theta), oracle_log_normalizer(theta, 20000), 1e-10);
  }
}

TEST(LogNormalizer, JensenPositive) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    EXPECT_GT(log_normalizer(random_theta(rng, 1 + t % 9, 0.3)), 0.0);
  }
  EXPECT_THROW(log_normalizer(std::vector<double>{std::nan("")}), InputError);
}

TEST(Density, Normalization) {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    const FourierDensity d(random_theta(rng, 1 + t % 10, 0.5));
    EXPECT_NEAR(periodic_trapezoid([&](double x) { return d.pdf(x); }, 100000), 1.0, 1e-8);
  }
  const FourierDensity u(std::vector<double>{});
  EXPECT_EQ(u.pdf(0.3), 1.0);
  EXPECT_THROW(u.pdf(-0.01), InputError);
  EXPECT_THROW(u.pdf(1.01), InputError);
}

namespace {

double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double m = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = cdf(xs[i]);
    d = std::max({d, (i + 1) / m - f, f - i / m});
  }
  return d;
}

}  // namespace

TEST(Sampling, UniformKs) {
  const FourierDensity u(std::vector<double>{0.0, 0.0});
  const std::size_t m = 20000;
  const auto xs = sample(u, m, 5);
  EXPECT_LT(ks_statistic(xs, [](double x) { return x; }), 1.63 / std::sqrt(double(m)));
}

TEST(Sampling, RandomThetaKsAgainstQuadratureCdf) {
  // Five instances at a family-wise 1% level: per-test level 0.002 and the
  // asymptotic critical value sqrt(-log(0.001) / 2).
  Rng rng(14);
  const std::size_t m = 5000;
  const double critical = std::sqrt(-std::log(0.001) / 2.0);
  for (int t = 0; t < 5; ++t) {
    const FourierDensity d(random_theta(rng, 4, 0.5));
    const auto xs = sample(d, m, derive_seed(3, t, 0));
    const auto cdf = [&](double x) {
      return integrate([&](double s) { return d.pdf(s); }, 0.0, x, 1e-12).value;
    };
    EXPECT_LT(ks_statistic(xs, cdf), critical / std::sqrt(double(m))) << "instance " << t;
  }
}

TEST(Sampling, Deterministic) {
  const FourierDensity d(std::vector<double>{0.3, -0.2});
  EXPECT_EQ(sample(d, 100, 9), sample(d, 100, 9));
  EXPECT_NE(sample(d, 100, 9), sample(d, 100, 10));
}

TEST(Sampling, ScoreMatchesNormalizerDerivative) {
  const std::vector<double> theta{0.4, -0.3, 0.2};
  const FourierDensity d(theta);
  const std::size_t m = 100000;
  const auto xs = sample(d, m, 21);
  double s = 0.0;
  double ss = 0.0;
  for (double x : xs) {
    const double v = fourier_basis(1, x);
    s += v;
    ss += v * v;
  }
  const double mean = s / m;
  const double se = std::sqrt((ss / m - mean * mean) / m);
  const double h = 1e-5;
  auto up = theta;
  auto down = theta;
  up[0] += h;
  down[0] -= h;
  const double deriv = (log_normalizer(up) - log_normalizer(down)) / (2 * h);
  EXPECT_NEAR(mean, deriv, 4 * se);
}

TEST(Divergences, IdenticalAreZero) {
  const FourierDensity d(std::vector<double>{0.3, -0.1, 0.2});
  EXPECT_EQ(hellinger_numeric(d, d), 0.0);
  EXPECT_NEAR(kl_numeric(d, d), 0.0, 1e-14);
  EXPECT_NEAR(d2_numeric(d, d), 0.0, 1e-14);
}

TEST(Divergences, MatchTrapezoidOracle) {
  Rng rng(15);
  for (int t = 0; t < 5; ++t) {
    const FourierDensity a(random_theta(rng, 3, 0.5));
    const FourierDensity b(random_theta(rng, 5, 0.5));
    const auto f = [&](auto g) { return periodic_trapezoid(g, 20000); };
    const double h2 = f([&](double x) {
      const double d = std::sqrt(a.pdf(x)) - std::sqrt(b.pdf(x));
      return 0.5 * d * d;
    });
    const double kl = f([&](double x) { return a.pdf(x) * std::log(a.pdf(x) / b.pdf(x)); });
    const double d2 = std::log(f([&](double x) { return a.pdf(x) * a.pdf(x) / b.pdf(x); }));
    EXPECT_NEAR(std::pow(hellinger_numeric(a, b), 2), h2, 1e-11);
    EXPECT_NEAR(kl_numeric(a, b), kl, 1e-11);
    EXPECT_NEAR(d2_numeric(a, b), d2, 1e-11);
  }
}

TEST(Divergences, OrderingOnRandomPairs) {
  Rng rng(16);
  for (int t = 0; t < 200; ++t) {
    const FourierDensity a(random_theta(rng, 1 + t % 8, 0.6));
    const FourierDensity b(random_theta(rng, 1 + (t / 8) % 8, 0.6));
    const double h = hellinger_numeric(a, b);
    const double kl = kl_numeric(a, b);
    const double d2 = d2_numeric(a, b);
    EXPECT_LE(2 * h * h, kl + 1e-12) << t;
    EXPECT_LE(kl, d2 + 1e-12) << t;
  }
}

TEST(Divergences, HellingerL1BoundOnClosePairs) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    const int k = 1 + t % 8;
    const auto base = random_theta(rng, k, 0.6);
    auto dir = random_theta(rng, k, 1.0);
    double l1 = 0.0;
    for (double v : dir) l1 += std::abs(v);
    const double target = u(rng) / std::sqrt(2.0);
    auto other = base;
    for (int j = 0; j < k; ++j) other[j] += dir[j] * target / l1;
    const double h = hellinger_numeric(FourierDensity(base), FourierDensity(other));
    EXPECT_LE(h, 2 * std::sqrt(2.0) * target + 1e-12) << t;
  }
}

TEST(Elbo, PointMassIsFlagged) {
  const std::vector<double> data{0.1, 0.5, 0.9};
  ExpFamElbo obj(data, toy_prior(4), 2);
  const auto e = obj.evaluate({{0.1, 0.2}, {0.0, 0.01}});
  EXPECT_TRUE(e.degenerate);
  EXPECT_EQ(e.value, -kInf);
}

TEST(Elbo, DeterministicPerSeed) {
  Rng rng(18);
  const auto data = sample(FourierDensity(std::vector<double>{0.5}), 50, 1);
  const GaussMFVariational q{{0.3, 0.1}, {0.02, 0.03}};
  const auto prior = toy_prior(4);
  EXPECT_EQ(elbo(q, data, prior, {64, 7, 64}), elbo(q, data, prior, {64, 7, 64}));
  EXPECT_NE(elbo(q, data, prior, {64, 7, 64}), elbo(q, data, prior, {64, 8, 64}));
}

TEST(Elbo, FixedRuleNormalizerIsAccurate) {
  const auto data = sample(FourierDensity(std::vector<double>{0.5}), 50, 1);
  ExpFamElbo obj(data, toy_prior(8), 6);
  Rng rng(19);
  for (int t = 0; t < 10; ++t) {
    const auto theta = random_theta(rng, 6, 0.8);
    EXPECT_NEAR(obj.fixed_log_normalizer(theta), log_normalizer(theta), 1e-10);
  }
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  const auto data = sample(FourierDensity(std::vector<double>{0.6, -0.3, 0.2}), 300, 2);
  ExpFamElbo obj(data, toy_prior(6), 4, {64, 3, 64});
  const GaussMFVariational q{{0.2, -0.1, 0.05, 0.0}, {0.01, 0.02, 0.005, 0.03}};
  const auto e = obj.evaluate(q);
  const double h = 1e-5;
  for (int j = 0; j < 4; ++j) {
    auto up = q;
    auto down = q;
    up.mu[j] += h;
    down.mu[j] -= h;
    const double fd = (obj.evaluate(up, false).value - obj.evaluate(down, false).value) / (2 * h);
    EXPECT_LT(std::abs(fd - e.grad_mu[j]), 1e-3 * std::max(1.0, std::abs(fd))) << j;
    up = q;
    down = q;
    up.sigma2[j] *= std::exp(2 * h);
    down.sigma2[j] *= std::exp(-2 * h);
    const double fs = (obj.evaluate(up, false).value - obj.evaluate(down, false).value) / (2 * h);
    EXPECT_LT(std::abs(fs - e.grad_log_sigma[j]), 1e-3 * std::max(1.0, std::abs(fs))) << j;
  }
}

TEST(Elbo, BelowImportanceSampledEvidence) {
  // k = 2 shell, 20 points: log pi(2) + log int L(theta) N(theta; 0, I) dtheta
  // by importance sampling from the prior.
  const auto data = sample(FourierDensity(std::vector<double>{0.7, 0.4}), 20, 4);
  const auto prior = toy_prior(4);
  const auto fit = fit_gaussian_mf(data, prior, 2);
  Rng rng(20);
  std::normal_distribution<double> z;
  const int draws = 100000;
  std::vector<double> logw(draws);
  for (int s = 0; s < draws; ++s) {
    std::vector<double> theta{z(rng), z(rng)};
    const double c = oracle_log_normalizer(theta, 256);
    double ll = 0.0;
    for (double x : data) {
      ll += theta[0] * std::sqrt(2.0) * std::cos(2 * kPi * x) +
            theta[1] * std::sqrt(2.0) * std::sin(2 * kPi * x) - c;
    }
    logw[s] = ll;
  }
  const double m = *std::max_element(logw.begin(), logw.end());
  double s1 = 0.0;
  double s2 = 0.0;
  for (double l : logw) {
    const double w = std::exp(l - m);
    s1 += w;
    s2 += w * w;
  }
  const double mean = s1 / draws;
  const double se_rel = std::sqrt((s2 / draws - mean * mean) / draws) / mean;
  const double log_evidence = std::log(prior.dimension_weights()[2]) + m + std::log(mean);
  EXPECT_LE(fit.elbo, log_evidence + 3 * se_rel);
  EXPECT_GT(fit.elbo, log_evidence - 1.0);
}

TEST(Fit, UniformDataGivesSmallCoefficients) {
  const auto data = sample(FourierDensity(std::vector<double>{}), 500, 31);
  const auto fit = fit_gaussian_mf(data, toy_prior(6), 3);
  for (double m : fit.q.mu) EXPECT_LE(std::abs(m), 0.3);
  for (double v : fit.q.sigma2) EXPECT_GT(v, 0.0);
}

TEST(Fit, ImprovesOnInitialization) {
  const std::vector<double> truth{0.8, -0.4, 0.3};
  for (int r = 0; r < 20; ++r) {
    const auto data = sample(FourierDensity(truth), 200, derive_seed(40, 200, r));
    FitOptions opt;
    opt.elbo.seed = r;
    const auto fit = fit_gaussian_mf(data, toy_prior(8), 4, opt);
    EXPECT_GE(fit.elbo, fit.initial_elbo) << r;
    EXPECT_TRUE(fit.converged) << r;
  }
}

TEST(Fit, RecoversCoefficients) {
  const std::vector<double> truth{0.8, -0.4, 0.3};
  const auto data = sample(FourierDensity(truth), 5000, 41);
  const auto fit = fit_gaussian_mf(data, toy_prior(8), 3);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(fit.q.mu[j], truth[j], 0.1) << j;
  EXPECT_LT(hellinger_numeric(FourierDensity(fit.q.mu), FourierDensity(truth)), 0.05);
}

TEST(Fit, RejectsBadInputs) {
  const std::vector<double> data{0.2, 1.5};
  EXPECT_THROW(fit_gaussian_mf(data, toy_prior(4), 2), InputError);
  const std::vector<double> ok{0.2, 0.5};
  EXPECT_THROW(fit_gaussian_mf(ok, toy_prior(4), 5), InputError);
  EXPECT_THROW(fit_gaussian_mf(ok, toy_prior(4), 0), InputError);
  const auto cauchy = SievePrior::geometric(4, 1.0, CoordinateSpec::rescaled_cauchy(1.0, 10));
  EXPECT_THROW(fit_gaussian_mf(ok, cauchy, 2), InputError);
}
