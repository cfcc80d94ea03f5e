#pragma once

#include <vector>

namespace corrgress {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

double norm_pdf(double x);
double log_norm_pdf(double x);

/// Standard normal CDF through erfc; absolute error well below 1e-15.
double norm_cdf(double x);

/// log Phi(x), accurate in the far left tail where Phi underflows.
double log_norm_cdf(double x);

/// d/dx log Phi(x) = phi(x) / Phi(x), stable for large negative x.
double norm_mills_inverse(double x);

/// Inverse of norm_cdf on (0, 1).
double norm_quantile(double p);

/// P(X > h, Y > k) for a standard bivariate normal with correlation r (Genz's method).
double bvn_upper(double h, double k, double r);

/// P(X < h, Y < k).
double bvn_cdf(double h, double k, double r);

/// Gauss-Hermite rule for a standard normal weight: sum_i w_i f(z_i) ~ E f(Z).
struct NormalQuadrature {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Rule with n nodes; cached per n. Throws std::invalid_argument for n < 1.
const NormalQuadrature& normal_quadrature(int n);

}  // namespace corrgress
