#pragma once

// Composite Gauss-Legendre quadrature with panel doubling.

#include <cmath>
#include <string>
#include <vector>

#include "vbrate/core.hpp"

namespace vbrate {

struct GaussLegendreRule {
  std::vector<double> nodes;    // on [-1, 1]
  std::vector<double> weights;
};

/// Newton iteration on the Legendre recurrence; accurate to ~1e-15 for the
/// orders used here.
inline GaussLegendreRule make_gauss_legendre(int order) {
  require(order >= 1, "Gauss-Legendre order must be positive");
  GaussLegendreRule rule;
  rule.nodes.assign(order, 0.0);
  rule.weights.assign(order, 0.0);
  const int half = (order + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (order + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = 1.0;
      double p2 = 0.0;
      for (int j = 1; j <= order; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
      }
      dp = order * (z * p1 - p2) / (z * z - 1.0);
      const double z_prev = z;
      z = z_prev - p1 / dp;
      if (std::abs(z - z_prev) < 1e-15) break;
    }
    rule.nodes[i] = -z;
    rule.nodes[order - 1 - i] = z;
    const double w = 2.0 / ((1.0 - z * z) * dp * dp);
    rule.weights[i] = w;
    rule.weights[order - 1 - i] = w;
  }
  return rule;
}

inline const GaussLegendreRule& gauss_legendre_20() {
  static const GaussLegendreRule rule = make_gauss_legendre(20);
  return rule;
}

struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;  // |I(2m) - I(m)| at termination
  int panels = 0;
  bool converged = false;
};

/// Composite 20-point rule over `panels` equal panels of [a, b].
template <class F>
double integrate_panels(F&& f, double a, double b, int panels) {
  const auto& rule = gauss_legendre_20();
  const double width = (b - a) / panels;
  CompensatedSum total;
  for (int p = 0; p < panels; ++p) {
    const double lo = a + p * width;
    const double mid = lo + 0.5 * width;
    double s = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      s += rule.weights[i] * f(mid + 0.5 * width * rule.nodes[i]);
    }
    total.add(0.5 * width * s);
  }
  return total.value();
}

/// Doubles the panel count until successive estimates agree to rel_tol, or
/// to abs_tol for integrals that cancel to near zero.
template <class F>
QuadratureResult integrate(F&& f, double a, double b, double rel_tol = 1e-10,
                           double abs_tol = 0.0, int initial_panels = 4,
                           int max_panels = 1 << 14) {
  QuadratureResult out;
  int panels = initial_panels;
  double previous = integrate_panels(f, a, b, panels);
  while (panels < max_panels) {
    panels *= 2;
    const double current = integrate_panels(f, a, b, panels);
    out.value = current;
    out.error = std::abs(current - previous);
    out.panels = panels;
    if (out.error <= rel_tol * std::abs(current) || out.error <= abs_tol ||
        out.error <= 1e-300) {
      out.converged = true;
      return out;
    }
    previous = current;
  }
  return out;
}

/// integrate() that raises NumericError when the relative change stays above
/// fail_tol.
template <class F>
double integrate_checked(F&& f, double a, double b, double rel_tol,
                         double fail_tol, const char* what) {
  const QuadratureResult r = integrate(f, a, b, rel_tol);
  if (!r.converged && r.error > fail_tol * std::abs(r.value)) {
    throw NumericError(std::string("quadrature did not converge: ") + what);
  }
  return r.value;
}

}  // namespace vbrate
