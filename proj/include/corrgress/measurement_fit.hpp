#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corrgress/model.hpp"

namespace corrgress {

/// Responses of one side: a multi-item block and optionally one threshold item.
struct SideItems {
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> multi;  ///< N x J
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, 1> single;              ///< N, or empty

  Index n() const { return multi.rows(); }
  int items() const { return static_cast<int>(multi.cols()); }
  bool has_single() const { return single.size() > 0; }
};

/// Extracts the items of one side. Requires exactly one multi-item dim and at most one
/// single-item dim on that side.
SideItems side_items(const ModelSpec& spec, const Dataset& data, Side side);

struct Step1Params {
  Eigen::VectorXd tau;     ///< J, tau(0) = 0
  Eigen::VectorXd lambda;  ///< J, lambda(0) = 1
  double pi = 0.7;         ///< probability of the non-zero class
  double mu_p = 0.0;
  double mu_f = 0.0;  ///< unused without a single item
  double sigma2_p = 1.0;
  double rho = 0.0;  ///< unused without a single item

  static Step1Params initial(const SideItems& data);
  void validate(int items) const;
};

/// Marginal log-likelihood of one side. Missing items are left out of the product;
/// identical response patterns are evaluated once.
double step1_loglik(const Step1Params& params, const SideItems& data, int quad_nodes = 32);

struct Step1Report {
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;
  double gradient_norm = 0.0;  ///< infinity norm in the unconstrained parameters
  double condition_number = 0.0;  ///< of the observed information
  bool negative_definite = false;
  bool ill_conditioned = false;
  std::vector<double> trace;  ///< log-likelihood at accepted iterates
  std::string message;
};

struct Step1Fit {
  Step1Params params;
  Step1Report report;
};

/// Quasi-Newton (BFGS) ascent in (tau_2.., lambda_2.., logit pi, mu_p, log sigma2_p[, mu_f,
/// atanh rho]) with central-difference gradients, finished by Newton steps on a
/// finite-difference Hessian. Converged when the gradient infinity norm is below `tol`.
/// Throws std::invalid_argument when no unit has a nonzero response.
Step1Fit fit_measurement(const SideItems& data, const Step1Params& init, int quad_nodes = 32,
                         double tol = 1e-5, int max_iterations = 500);

/// Combines per-side fits into measurement parameters for `spec`.
MeasurementParams measurement_from_fits(const ModelSpec& spec, const Step1Fit& giving,
                                        const Step1Fit& receiving);

}  // namespace corrgress
