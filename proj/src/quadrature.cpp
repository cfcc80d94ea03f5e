#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include <gsl/gsl_integration.h>

#include "corrgress/normal.hpp"

namespace corrgress {

namespace {

NormalQuadrature compute_rule(int n) {
  // Physicists' Hermite rule for exp(-x^2), rescaled to the standard normal weight.
  gsl_integration_fixed_workspace* ws =
      gsl_integration_fixed_alloc(gsl_integration_fixed_hermite, static_cast<size_t>(n), 0.0,
                                  1.0, 0.0, 0.0);
  if (ws == nullptr) throw std::runtime_error("failed to build Gauss-Hermite rule");
  const double* x = gsl_integration_fixed_nodes(ws);
  const double* w = gsl_integration_fixed_weights(ws);
  NormalQuadrature q;
  const double norm = 1.0 / std::sqrt(M_PI);
  for (int i = 0; i < n; ++i) {
    q.nodes.push_back(std::sqrt(2.0) * x[i]);
    q.weights.push_back(w[i] * norm);
  }
  gsl_integration_fixed_free(ws);
  return q;
}

}  // namespace

const NormalQuadrature& normal_quadrature(int n) {
  if (n < 1) throw std::invalid_argument("quadrature needs at least one node");
  static std::mutex mu;
  static std::map<int, NormalQuadrature> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, compute_rule(n)).first;
  return it->second;
}

}  // namespace corrgress
