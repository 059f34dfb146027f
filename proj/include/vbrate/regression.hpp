#pragma once

// Ordinary least squares with an intercept, for the handful of regressors
// used in exponent fits.

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "vbrate/core.hpp"

namespace vbrate {

struct LinearFit {
  double intercept = 0.0;
  std::vector<double> coefficients;  // one per regressor column
  double r_squared = 0.0;
};

/// Regresses y on the given columns plus an intercept. Normal equations are
/// solved by Gaussian elimination with partial pivoting after centering.
inline LinearFit least_squares(const std::vector<std::vector<double>>& columns,
                               std::span<const double> y) {
  const std::size_t m = y.size();
  const std::size_t p = columns.size();
  require(m >= p + 1, "not enough observations for the regression");
  for (const auto& c : columns) {
    require(c.size() == m, "regressor length does not match response");
  }
  double y_mean = 0.0;
  for (double v : y) y_mean += v;
  y_mean /= static_cast<double>(m);
  std::vector<double> x_mean(p, 0.0);
  for (std::size_t a = 0; a < p; ++a) {
    for (double v : columns[a]) x_mean[a] += v;
    x_mean[a] /= static_cast<double>(m);
  }
  std::vector<std::vector<double>> A(p, std::vector<double>(p + 1, 0.0));
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < p; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        A[a][b] += (columns[a][i] - x_mean[a]) * (columns[b][i] - x_mean[b]);
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      A[a][p] += (columns[a][i] - x_mean[a]) * (y[i] - y_mean);
    }
  }
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r) {
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    }
    std::swap(A[c], A[piv]);
    if (std::abs(A[c][c]) < 1e-300) {
      throw NumericError("regressors are linearly dependent");
    }
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const double f = A[r][c] / A[c][c];
      for (std::size_t k = c; k <= p; ++k) A[r][k] -= f * A[c][k];
    }
  }
  LinearFit fit;
  fit.coefficients.resize(p);
  fit.intercept = y_mean;
  for (std::size_t a = 0; a < p; ++a) {
    fit.coefficients[a] = A[a][p] / A[a][a];
    fit.intercept -= fit.coefficients[a] * x_mean[a];
  }
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double pred = fit.intercept;
    for (std::size_t a = 0; a < p; ++a) pred += fit.coefficients[a] * columns[a][i];
    ss_res += (y[i] - pred) * (y[i] - pred);
    ss_tot += (y[i] - y_mean) * (y[i] - y_mean);
  }
  fit.r_squared = ss_tot > 0.0 ? std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0) : 1.0;
  return fit;
}

}  // namespace vbrate
