#include "corrgress/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include <Eigen/Cholesky>

#include "corrgress/normal.hpp"
#include "corrgress/random_stream.hpp"

namespace corrgress {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& m, const std::vector<int>& cols) {
  Eigen::MatrixXd out(m.rows(), static_cast<Index>(cols.size()));
  for (size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = m.col(cols[c]);
  return out;
}

// Log probability that each listed coordinate of a normal vector falls on the side of zero
// selected by its response (y = 1: positive).
double log_orthant(const std::vector<double>& mean, const Eigen::MatrixXd& cov,
                   const std::vector<int>& y) {
  if (mean.empty()) return 0.0;
  if (mean.size() == 1) {
    const double t = y[0] ? 1.0 : -1.0;
    return log_norm_cdf(t * mean[0] / std::sqrt(cov(0, 0)));
  }
  if (mean.size() == 2) {
    const double s1 = std::sqrt(cov(0, 0)), s2 = std::sqrt(cov(1, 1));
    const double t1 = y[0] ? 1.0 : -1.0, t2 = y[1] ? 1.0 : -1.0;
    const double r = std::clamp(cov(0, 1) / (s1 * s2), -1.0, 1.0);
    const double p = bvn_upper(-t1 * mean[0] / s1, -t2 * mean[1] / s2, t1 * t2 * r);
    return p > 0.0 ? std::log(p) : kNegInf;
  }
  throw std::invalid_argument(
      "marginal likelihood supports at most two single-item dimensions per class side pair");
}

}  // namespace

int ModelSpec::total_items() const {
  int n = 0;
  for (const auto& d : dims) n += d.item_count();
  return n;
}

std::vector<int> ModelSpec::item_offsets() const {
  std::vector<int> off;
  int acc = 0;
  for (const auto& d : dims) {
    off.push_back(acc);
    acc += d.item_count();
  }
  return off;
}

std::vector<int> ModelSpec::dims_on_side(Side s) const {
  std::vector<int> out;
  for (int k = 0; k < K(); ++k)
    if (dims[k].side == s) out.push_back(k);
  return out;
}

bool ModelSpec::alpha_is_free(int l, int m) const {
  return alpha_free.size() == 0 || alpha_free(l, m);
}

std::string ModelSpec::pair_name(int l) const {
  const auto pos = linalg::pair_position(K(), l);
  return dims[pos.col].name + ":" + dims[pos.row].name;
}

std::vector<std::string> ModelSpec::covariate_names(const std::vector<int>& idx) const {
  std::vector<std::string> out;
  for (int i : idx) out.push_back(expansion.terms().at(i).name);
  return out;
}

void ModelSpec::validate() const {
  require(K() >= 2, "model needs at least two latent dimensions");
  std::set<std::string> names, items;
  bool side_seen[2] = {false, false};
  for (const auto& d : dims) {
    require(!d.name.empty(), "latent dimension with empty name");
    require(names.insert(d.name).second, "duplicate latent dimension '" + d.name + "'");
    require(!d.items.empty(), "dimension '" + d.name + "' has no items");
    for (const auto& it : d.items) {
      require(items.insert(it).second, "item '" + it + "' used more than once");
    }
    require(d.multi_item() || !d.free_scale,
            "single-item dimension '" + d.name + "' must have its scale fixed at 1");
    side_seen[static_cast<int>(d.side)] = true;
  }
  require(side_seen[0] && side_seen[1], "each class side needs at least one dimension");
  const int q = expansion.expanded_dim();
  require(q >= 1, "covariate expansion is empty");
  auto check_list = [&](const std::vector<int>& v, const char* what) {
    require(!v.empty(), std::string(what) + " covariate list is empty");
    std::set<int> seen;
    for (int i : v) {
      require(i >= 0 && i < q, std::string(what) + " covariate index out of range");
      require(seen.insert(i).second, std::string(what) + " covariate listed twice");
    }
  };
  check_list(mean_covariates, "mean");
  check_list(corr_covariates, "correlation");
  check_list(class_covariates, "class");
  require(expansion.terms()[corr_covariates[0]].kind == ExpansionTerm::Kind::Constant,
          "the first correlation covariate must be the constant term");
  if (alpha_free.size() != 0) {
    require(alpha_free.rows() == L() && alpha_free.cols() == q_corr(),
            "alpha mask has the wrong shape");
  }
}

MeasurementParams MeasurementParams::defaults(const ModelSpec& spec) {
  MeasurementParams p;
  for (const auto& d : spec.dims) {
    DimMeasurement m;
    if (d.multi_item()) {
      m.tau = Eigen::VectorXd::Zero(d.item_count());
      m.lambda = Eigen::VectorXd::Ones(d.item_count());
    }
    p.dims.push_back(std::move(m));
  }
  return p;
}

void MeasurementParams::validate(const ModelSpec& spec) const {
  require(static_cast<int>(dims.size()) == spec.K(), "measurement parameters: wrong dim count");
  for (int k = 0; k < spec.K(); ++k) {
    const auto& d = spec.dims[k];
    const auto& m = dims[k];
    if (!d.multi_item()) continue;
    require(m.tau.size() == d.item_count() && m.lambda.size() == d.item_count(),
            "measurement parameters for '" + d.name + "' have the wrong length");
    require(m.tau(0) == 0.0 && m.lambda(0) == 1.0,
            "first item of '" + d.name + "' must have intercept 0 and loading 1");
    require(m.tau.allFinite() && m.lambda.allFinite(),
            "measurement parameters for '" + d.name + "' are not finite");
  }
}

StructuralParams StructuralParams::zeros(const ModelSpec& spec) {
  StructuralParams p;
  p.beta = Eigen::MatrixXd::Zero(spec.q_mean(), spec.K());
  p.sigma = Eigen::VectorXd::Ones(spec.K());
  p.alpha = Eigen::MatrixXd::Zero(spec.L(), spec.q_corr());
  p.gamma = Eigen::MatrixXd::Zero(3, spec.q_class());
  return p;
}

void StructuralParams::validate(const ModelSpec& spec) const {
  require(beta.rows() == spec.q_mean() && beta.cols() == spec.K(), "beta has the wrong shape");
  require(sigma.size() == spec.K(), "sigma has the wrong length");
  require(alpha.rows() == spec.L() && alpha.cols() == spec.q_corr(), "alpha has the wrong shape");
  require(gamma.rows() == 3 && gamma.cols() == spec.q_class(), "gamma has the wrong shape");
  require(beta.allFinite() && alpha.allFinite() && gamma.allFinite(), "non-finite coefficient");
  for (int k = 0; k < spec.K(); ++k) {
    require(sigma(k) > 0.0 && std::isfinite(sigma(k)), "sigma must be positive");
    if (!spec.dims[k].free_scale) {
      require(sigma(k) == 1.0, "fixed-scale dimension '" + spec.dims[k].name + "' needs sigma 1");
    }
  }
  for (int l = 0; l < spec.L(); ++l)
    for (int m = 0; m < spec.q_corr(); ++m)
      require(spec.alpha_is_free(l, m) || alpha(l, m) == 0.0,
              "alpha coefficient fixed at zero has a nonzero value");
}

Dataset make_dataset(const ModelSpec& spec,
                     Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> items,
                     Eigen::MatrixXd z) {
  require(items.cols() == spec.total_items(), "item matrix has the wrong number of columns");
  require(z.rows() == items.rows(), "items and covariates have different row counts");
  require(z.cols() == spec.expansion.base_dim(), "covariate matrix has the wrong width");
  require(z.allFinite(), "covariates must be finite and complete");
  for (Index i = 0; i < items.rows(); ++i)
    for (Index j = 0; j < items.cols(); ++j) {
      const int v = items(i, j);
      require(v == 0 || v == 1 || v == kMissing, "item codes must be 0, 1 or missing");
    }
  Dataset d;
  d.items = std::move(items);
  d.z = std::move(z);
  d.x = spec.expansion.apply_rows(d.z);
  d.x_mean = select_columns(d.x, spec.mean_covariates);
  d.x_corr = select_columns(d.x, spec.corr_covariates);
  d.x_class = select_columns(d.x, spec.class_covariates);
  d.nonzero.setZero(d.items.rows(), 2);
  const auto off = spec.item_offsets();
  for (int k = 0; k < spec.K(); ++k) {
    const int s = static_cast<int>(spec.dims[k].side);
    for (int j = 0; j < spec.dims[k].item_count(); ++j)
      for (Index i = 0; i < d.items.rows(); ++i)
        if (d.items(i, off[k] + j) == 1) d.nonzero(i, s) = 1;
  }
  return d;
}

double item_prob(double tau, double lambda, double eta) { return norm_cdf(tau + lambda * eta); }

double item_log_prob(double tau, double lambda, double eta, int y) {
  const double lin = tau + lambda * eta;
  return log_norm_cdf(y ? lin : -lin);
}

Eigen::Array4d class_probs_from_predictors(const Eigen::Array4d& lp) {
  const double m = lp.maxCoeff();
  // std::exp rather than Eigen's packet exp, which clamps instead of underflowing to 0.
  Eigen::Array4d e;
  for (int c = 0; c < 4; ++c) e(c) = std::exp(lp(c) - m);
  return e / e.sum();
}

Eigen::Array4d class_probs(const Eigen::Ref<const Eigen::MatrixXd>& gamma,
                           const Eigen::Ref<const Eigen::VectorXd>& x_class) {
  Eigen::Array4d lp;
  lp(0) = 0.0;
  lp.tail<3>() = (gamma * x_class).array();
  return class_probs_from_predictors(lp);
}

Moments structural_moments(const ModelSpec& spec, const StructuralParams& params,
                           const Eigen::Ref<const Eigen::VectorXd>& x_mean,
                           const Eigen::Ref<const Eigen::VectorXd>& x_corr) {
  const int k = spec.K();
  Moments m;
  m.mu = params.beta.transpose() * x_mean;
  const Eigen::MatrixXd r = correlation_at(params.alpha, x_corr, k);
  if (!linalg::try_cholesky(r)) {
    throw linalg::NotPositiveDefinite("correlation matrix is not positive definite at this covariate value");
  }
  m.sigma.resize(k, k);
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < k; ++i) m.sigma(i, j) = (params.sigma(i) * params.sigma(j)) * r(i, j);
  return m;
}

Simulation simulate_dataset(const ModelSpec& spec, const MeasurementParams& phi,
                            const StructuralParams& params, const Eigen::MatrixXd& z,
                            std::uint64_t seed) {
  spec.validate();
  phi.validate(spec);
  params.validate(spec);
  const Index n = z.rows();
  const int k = spec.K();
  const Eigen::MatrixXd x = spec.expansion.apply_rows(z);
  const Eigen::MatrixXd xm = select_columns(x, spec.mean_covariates);
  const Eigen::MatrixXd xc = select_columns(x, spec.corr_covariates);
  const Eigen::MatrixXd xg = select_columns(x, spec.class_covariates);
  const auto off = spec.item_offsets();

  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> items(n, spec.total_items());
  LatentState latent;
  latent.xi.resize(n, 2);
  latent.eta.resize(n, k);

  // Up-front feasibility check so no unit fails midway.
  for (Index i = 0; i < n; ++i) {
    if (!linalg::try_cholesky(correlation_at(params.alpha, xc.row(i).transpose(), k))) {
      throw std::invalid_argument("alpha is infeasible at covariate row " + std::to_string(i));
    }
  }

  for (Index i = 0; i < n; ++i) {
    RandomStream rs(seed, make_stream_id(0, 100, static_cast<std::uint64_t>(i)));
    const Eigen::Array4d pi = class_probs(params.gamma, xg.row(i).transpose());
    const double u = rs.uniform();
    int cell = 0;
    double acc = pi(0);
    while (cell < 3 && u > acc) acc += pi(++cell);
    latent.xi(i, 0) = static_cast<std::uint8_t>(cell >> 1);
    latent.xi(i, 1) = static_cast<std::uint8_t>(cell & 1);

    const Moments mo = structural_moments(spec, params, xm.row(i).transpose(), xc.row(i).transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(mo.sigma);
    Eigen::VectorXd zz(k);
    for (int d = 0; d < k; ++d) zz(d) = rs.normal();
    latent.eta.row(i) = (mo.mu + llt.matrixL() * zz).transpose();

    for (int d = 0; d < k; ++d) {
      const auto& dim = spec.dims[d];
      const bool active = latent.xi(i, static_cast<int>(dim.side)) == 1;
      const double eta = latent.eta(i, d);
      for (int j = 0; j < dim.item_count(); ++j) {
        std::int8_t y = 0;
        if (dim.multi_item()) {
          const double uj = rs.uniform();
          if (active) y = uj < item_prob(phi.dims[d].tau(j), phi.dims[d].lambda(j), eta) ? 1 : 0;
        } else if (active) {
          y = eta > 0.0 ? 1 : 0;
        }
        items(i, off[d] + j) = y;
      }
    }
  }
  Simulation sim;
  sim.data = make_dataset(spec, std::move(items), z);
  sim.latent = std::move(latent);
  return sim;
}

double unit_loglik(const ModelSpec& spec, const MeasurementParams& phi,
                   const StructuralParams& params, const Dataset& data, Index i,
                   int quad_nodes) {
  if (quad_nodes < 1) throw std::invalid_argument("quad_nodes must be positive");
  const int k = spec.K();
  const auto off = spec.item_offsets();
  const Moments mo =
      structural_moments(spec, params, data.x_mean.row(i).transpose(), data.x_corr.row(i).transpose());
  const Eigen::Array4d pi = class_probs(params.gamma, data.x_class.row(i).transpose());
  const NormalQuadrature& rule = normal_quadrature(quad_nodes);

  auto observed = [&](int d, int j) { return data.items(i, off[d] + j) != kMissing; };

  double total = kNegInf;
  for (int cell = 0; cell < 4; ++cell) {
    const int on[2] = {cell >> 1, cell & 1};
    if ((on[0] == 0 && data.nonzero(i, 0)) || (on[1] == 0 && data.nonzero(i, 1))) continue;
    if (pi(cell) <= 0.0) continue;
    const double log_pi = std::log(pi(cell));

    std::vector<int> quad_dims, orthant_dims;
    for (int d = 0; d < k; ++d) {
      if (!on[static_cast<int>(spec.dims[d].side)]) continue;
      bool any = false;
      for (int j = 0; j < spec.dims[d].item_count(); ++j) any = any || observed(d, j);
      if (!any) continue;
      (spec.dims[d].multi_item() ? quad_dims : orthant_dims).push_back(d);
    }
    const int p = static_cast<int>(quad_dims.size());
    const int s = static_cast<int>(orthant_dims.size());
    std::vector<int> ys(s);
    for (int a = 0; a < s; ++a) ys[a] = data.items(i, off[orthant_dims[a]]);

    if (p == 0) {
      std::vector<double> mean(s);
      Eigen::MatrixXd cov(s, s);
      for (int a = 0; a < s; ++a) {
        mean[a] = mo.mu(orthant_dims[a]);
        for (int b = 0; b < s; ++b) cov(a, b) = mo.sigma(orthant_dims[a], orthant_dims[b]);
      }
      total = log_sum_exp(total, log_pi + log_orthant(mean, cov, ys));
      continue;
    }

    Eigen::MatrixXd spp(p, p), ssp(s, p), sss(s, s);
    Eigen::VectorXd mup(p), mus(s);
    for (int a = 0; a < p; ++a) {
      mup(a) = mo.mu(quad_dims[a]);
      for (int b = 0; b < p; ++b) spp(a, b) = mo.sigma(quad_dims[a], quad_dims[b]);
    }
    for (int a = 0; a < s; ++a) {
      mus(a) = mo.mu(orthant_dims[a]);
      for (int b = 0; b < p; ++b) ssp(a, b) = mo.sigma(orthant_dims[a], quad_dims[b]);
      for (int b = 0; b < s; ++b) sss(a, b) = mo.sigma(orthant_dims[a], orthant_dims[b]);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(spp);
    const Eigen::MatrixXd lp = llt.matrixL();
    // Conditional moments of the orthant dims given eta_P = mu_P + L z.
    const Eigen::MatrixXd a_map = llt.matrixL().solve(ssp.transpose()).transpose();
    const Eigen::MatrixXd cond_cov = sss - a_map * a_map.transpose();

    std::vector<int> idx(p, 0);
    Eigen::VectorXd z(p);
    double cell_total = kNegInf;
    for (;;) {
      double log_w = 0.0;
      for (int a = 0; a < p; ++a) {
        z(a) = rule.nodes[idx[a]];
        log_w += std::log(rule.weights[idx[a]]);
      }
      const Eigen::VectorXd eta_p = mup + lp * z;
      double lv = log_w;
      for (int a = 0; a < p; ++a) {
        const int d = quad_dims[a];
        for (int j = 0; j < spec.dims[d].item_count(); ++j) {
          if (!observed(d, j)) continue;
          lv += item_log_prob(phi.dims[d].tau(j), phi.dims[d].lambda(j), eta_p(a),
                              data.items(i, off[d] + j));
        }
      }
      if (s > 0) {
        const Eigen::VectorXd cm = mus + a_map * z;
        lv += log_orthant(std::vector<double>(cm.data(), cm.data() + s), cond_cov, ys);
      }
      cell_total = log_sum_exp(cell_total, lv);
      int a = 0;
      while (a < p && ++idx[a] == quad_nodes) idx[a++] = 0;
      if (a == p) break;
    }
    total = log_sum_exp(total, log_pi + cell_total);
  }
  return total;
}

double total_loglik(const ModelSpec& spec, const MeasurementParams& phi,
                    const StructuralParams& params, const Dataset& data, int quad_nodes) {
  std::vector<double> parts(static_cast<size_t>(data.n()));
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < data.n(); ++i) parts[i] = unit_loglik(spec, phi, params, data, i, quad_nodes);
  double acc = 0.0;
  for (double v : parts) acc += v;
  return acc;
}

}  // namespace corrgress
