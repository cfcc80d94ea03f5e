#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "corrgress/measurement_fit.hpp"
#include "corrgress/model.hpp"

namespace corrgress::testing {

/// Four latent dims shaped like the giving/receiving application: GP and RP with seven
/// probit items and free scale, GF and RF with one threshold item each. Base covariates
/// are (const, binary, uniform(-1, 1)); all three enter means and correlations, the class
/// model uses (const, binary).
struct Scenario {
  ModelSpec spec;
  MeasurementParams phi;
  StructuralParams truth;
};

Scenario four_dim_scenario();

/// n x 3 base covariates (1, Bernoulli(0.5), U(-1, 1)).
Eigen::MatrixXd scenario_covariates(Index n, std::uint64_t seed);

/// Two-dim correlation-only data: eps rows ~ N(0, R(rho)).
Eigen::MatrixXd bivariate_residuals(Index n, double rho, std::uint64_t seed);

/// Generating values for a seven-item side with a threshold item.
Step1Params step1_truth();

/// Draws one side directly from the step-1 mixture; unit i uses stream i of `seed`.
SideItems simulate_side(const Step1Params& p, Index n, bool single, std::uint64_t seed);

}  // namespace corrgress::testing
