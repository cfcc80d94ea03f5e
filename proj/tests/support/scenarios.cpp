#include "scenarios.hpp"

#include <cmath>

#include "corrgress/normal.hpp"
#include "corrgress/random_stream.hpp"

namespace corrgress::testing {

Scenario four_dim_scenario() {
  Scenario s;
  auto items = [](const std::string& prefix, int n) {
    std::vector<std::string> out;
    for (int j = 1; j <= n; ++j) out.push_back(prefix + std::to_string(j));
    return out;
  };
  s.spec.dims = {{"GP", Side::G, items("gp", 7), true},
                 {"RP", Side::R, items("rp", 7), true},
                 {"GF", Side::G, {"gf"}, false},
                 {"RF", Side::R, {"rf"}, false}};
  s.spec.expansion = CovariateExpansion::affine({"const", "female", "age"});
  s.spec.mean_covariates = {0, 1, 2};
  s.spec.corr_covariates = {0, 1, 2};
  s.spec.class_covariates = {0, 1};

  s.phi = MeasurementParams::defaults(s.spec);
  s.phi.dims[0].lambda << 1.0, 2.4, 1.2, 1.3, 1.3, 0.6, 1.1;
  s.phi.dims[0].tau << 0.0, 1.0, -0.3, -1.3, -0.8, -0.2, 0.8;
  s.phi.dims[1].lambda << 1.0, 1.7, 1.15, 0.9, 1.15, 0.75, 1.15;
  s.phi.dims[1].tau << 0.0, 2.0, 1.5, 2.2, 0.8, 0.4, 1.5;

  StructuralParams& t = s.truth;
  t = StructuralParams::zeros(s.spec);
  t.beta.col(0) << 0.0, 0.3, -0.2;
  t.beta.col(1) << 0.2, -0.3, 0.1;
  t.beta.col(2) << -0.3, 0.2, 0.2;
  t.beta.col(3) << 0.1, 0.2, -0.3;
  t.sigma << 0.73, 1.1, 1.0, 1.0;
  // Pairs: GP:RP, GP:GF, GP:RF, RP:GF, RP:RF, GF:RF.
  t.alpha << 0.25, 0.10, -0.05,
             0.30, -0.05, 0.05,
             0.20, 0.05, 0.05,
             0.20, 0.05, -0.05,
             0.30, -0.10, 0.05,
             0.25, 0.05, 0.10;
  t.gamma << 0.4, 0.3,
             0.4, -0.2,
             1.8, 0.4;
  return s;
}

Eigen::MatrixXd scenario_covariates(Index n, std::uint64_t seed) {
  Eigen::MatrixXd z(n, 3);
  for (Index i = 0; i < n; ++i) {
    RandomStream rs(seed, make_stream_id(0, 200, static_cast<std::uint64_t>(i)));
    z(i, 0) = 1.0;
    z(i, 1) = rs.uniform() < 0.5 ? 1.0 : 0.0;
    z(i, 2) = 2.0 * rs.uniform() - 1.0;
  }
  return z;
}

Eigen::MatrixXd bivariate_residuals(Index n, double rho, std::uint64_t seed) {
  Eigen::MatrixXd e(n, 2);
  const double c = std::sqrt(1.0 - rho * rho);
  for (Index i = 0; i < n; ++i) {
    RandomStream rs(seed, make_stream_id(0, 201, static_cast<std::uint64_t>(i)));
    const double a = rs.normal(), b = rs.normal();
    e(i, 0) = a;
    e(i, 1) = rho * a + c * b;
  }
  return e;
}

Step1Params step1_truth() {
  Step1Params p;
  p.tau.resize(7);
  p.lambda.resize(7);
  p.tau << 0.0, 1.0, -0.3, -1.3, -0.8, -0.2, 0.8;
  p.lambda << 1.0, 2.4, 1.2, 1.3, 1.3, 0.6, 1.1;
  p.pi = 0.7;
  p.mu_p = 0.2;
  p.mu_f = -0.3;
  p.sigma2_p = 0.6;
  p.rho = 0.3;
  return p;
}

SideItems simulate_side(const Step1Params& p, Index n, bool single, std::uint64_t seed) {
  const int j = static_cast<int>(p.tau.size());
  SideItems s;
  s.multi = Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, j);
  if (single) s.single = Eigen::Matrix<std::int8_t, Eigen::Dynamic, 1>::Zero(n);
  for (Index i = 0; i < n; ++i) {
    RandomStream rs(seed, static_cast<std::uint64_t>(i));
    const bool on = rs.uniform() < p.pi;
    const double z1 = rs.normal(), z2 = rs.normal();
    const double eta_p = p.mu_p + std::sqrt(p.sigma2_p) * z1;
    const double eta_f = p.mu_f + p.rho * z1 + std::sqrt(1 - p.rho * p.rho) * z2;
    for (int c = 0; c < j; ++c) {
      const double u = rs.uniform();
      if (on) s.multi(i, c) = u < norm_cdf(p.tau(c) + p.lambda(c) * eta_p) ? 1 : 0;
    }
    if (single && on) s.single(i) = eta_f > 0.0 ? 1 : 0;
  }
  return s;
}

}  // namespace corrgress::testing
