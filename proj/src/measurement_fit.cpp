#include "corrgress/measurement_fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include "corrgress/normal.hpp"

namespace corrgress {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kGradStep = 1e-5;
constexpr double kHessStep = 1e-4;
constexpr double kIllConditioned = 1e8;

double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Distinct response patterns with multiplicities.
struct Patterns {
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> rows;  // P x (J [+1])
  Eigen::VectorXd counts;
  std::vector<bool> nonzero;
  int items = 0;
  bool single = false;
  double total = 0.0;
};

Patterns collapse(const SideItems& d) {
  const int j = d.items();
  const int w = j + (d.has_single() ? 1 : 0);
  std::map<std::vector<std::int8_t>, int> seen;
  for (Index i = 0; i < d.n(); ++i) {
    std::vector<std::int8_t> key(static_cast<size_t>(w));
    for (int c = 0; c < j; ++c) key[c] = d.multi(i, c);
    if (d.has_single()) key[j] = d.single(i);
    ++seen[key];
  }
  Patterns p;
  p.items = j;
  p.single = d.has_single();
  p.rows.resize(static_cast<Index>(seen.size()), w);
  p.counts.resize(static_cast<Index>(seen.size()));
  Index r = 0;
  for (const auto& [key, count] : seen) {
    bool nz = false;
    for (int c = 0; c < w; ++c) {
      p.rows(r, c) = key[c];
      nz = nz || key[c] == 1;
    }
    p.counts(r) = count;
    p.nonzero.push_back(nz);
    p.total += count;
    ++r;
  }
  return p;
}

double pattern_loglik(const Step1Params& prm, const Patterns& pat, const NormalQuadrature& rule) {
  const double log_pi = std::log(prm.pi);
  const double log_off = std::log1p(-prm.pi);
  const double sd_p = std::sqrt(prm.sigma2_p);
  const double cond_sd = std::sqrt(std::max(0.0, 1.0 - prm.rho * prm.rho));
  const int j = pat.items;
  const int nodes = static_cast<int>(rule.nodes.size());
  // Per-node tables: log weight and log P(y | node) for each item and response.
  Eigen::MatrixXd item_log(2 * (j + 1), nodes);
  Eigen::VectorXd log_w(nodes);
  for (int k = 0; k < nodes; ++k) {
    const double z = rule.nodes[k];
    const double eta = prm.mu_p + sd_p * z;
    log_w(k) = std::log(rule.weights[k]);
    for (int c = 0; c < j; ++c) {
      item_log(2 * c, k) = item_log_prob(prm.tau(c), prm.lambda(c), eta, 0);
      item_log(2 * c + 1, k) = item_log_prob(prm.tau(c), prm.lambda(c), eta, 1);
    }
    if (pat.single) {
      const double m = prm.mu_f + prm.rho * z;
      if (cond_sd > 0.0) {
        item_log(2 * j, k) = log_norm_cdf(-m / cond_sd);
        item_log(2 * j + 1, k) = log_norm_cdf(m / cond_sd);
      } else {
        item_log(2 * j, k) = m > 0.0 ? kNegInf : 0.0;
        item_log(2 * j + 1, k) = m > 0.0 ? 0.0 : kNegInf;
      }
    }
  }
  const int width = j + (pat.single ? 1 : 0);
  const Index np = pat.rows.rows();
  std::vector<double> terms(static_cast<size_t>(np));
#pragma omp parallel for schedule(static) if (np >= 64)
  for (Index r = 0; r < np; ++r) {
    double acc = kNegInf;
    for (int k = 0; k < nodes; ++k) {
      double v = log_w(k);
      for (int c = 0; c < width; ++c) {
        const int y = pat.rows(r, c);
        if (y != kMissing) v += item_log(2 * c + y, k);
      }
      acc = log_add_exp(acc, v);
    }
    const double on = log_pi + acc;
    terms[r] = pat.counts(r) * (pat.nonzero[r] ? on : log_add_exp(on, log_off));
  }
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

// Unconstrained coordinates.
struct Mapping {
  int items;
  bool single;

  int size() const { return 2 * (items - 1) + 3 + (single ? 2 : 0); }

  Eigen::VectorXd to_theta(const Step1Params& p) const {
    Eigen::VectorXd t(size());
    int k = 0;
    for (int c = 1; c < items; ++c) t(k++) = p.tau(c);
    for (int c = 1; c < items; ++c) t(k++) = p.lambda(c);
    t(k++) = std::log(p.pi / (1.0 - p.pi));
    t(k++) = p.mu_p;
    t(k++) = std::log(p.sigma2_p);
    if (single) {
      t(k++) = p.mu_f;
      t(k++) = std::atanh(p.rho);
    }
    return t;
  }

  Step1Params from_theta(const Eigen::Ref<const Eigen::VectorXd>& t) const {
    Step1Params p;
    p.tau = Eigen::VectorXd::Zero(items);
    p.lambda = Eigen::VectorXd::Ones(items);
    int k = 0;
    for (int c = 1; c < items; ++c) p.tau(c) = t(k++);
    for (int c = 1; c < items; ++c) p.lambda(c) = t(k++);
    p.pi = 1.0 / (1.0 + std::exp(-t(k++)));
    p.mu_p = t(k++);
    p.sigma2_p = std::exp(t(k++));
    if (single) {
      p.mu_f = t(k++);
      p.rho = std::tanh(t(k++));
    }
    return p;
  }
};

struct Objective {
  const Patterns& pat;
  const NormalQuadrature& rule;
  Mapping map;
  long evaluations = 0;

  double loglik(const Eigen::Ref<const Eigen::VectorXd>& theta) {
    ++evaluations;
    const double v = pattern_loglik(map.from_theta(theta), pat, rule);
    return std::isfinite(v) ? v : kNegInf;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) {
    Eigen::VectorXd g(theta.size());
    Eigen::VectorXd t = theta;
    for (Index k = 0; k < theta.size(); ++k) {
      t(k) = theta(k) + kGradStep;
      const double up = loglik(t);
      t(k) = theta(k) - kGradStep;
      const double dn = loglik(t);
      t(k) = theta(k);
      g(k) = (up - dn) / (2.0 * kGradStep);
    }
    return g;
  }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& theta) {
    const Index p = theta.size();
    Eigen::MatrixXd h(p, p);
    Eigen::VectorXd t = theta;
    for (Index k = 0; k < p; ++k) {
      t(k) = theta(k) + kHessStep;
      const Eigen::VectorXd gu = gradient(t);
      t(k) = theta(k) - kHessStep;
      const Eigen::VectorXd gd = gradient(t);
      t(k) = theta(k);
      h.col(k) = (gu - gd) / (2.0 * kHessStep);
    }
    return 0.5 * (h + h.transpose());
  }
};

// GSL callbacks minimize the negative mean log-likelihood.
double gsl_f(const gsl_vector* x, void* ctx) {
  auto* obj = static_cast<Objective*>(ctx);
  const Eigen::Map<const Eigen::VectorXd> t(x->data, static_cast<Index>(x->size));
  const double v = obj->loglik(t);
  return std::isfinite(v) ? -v / obj->pat.total : 1e300;
}

void gsl_df(const gsl_vector* x, void* ctx, gsl_vector* g) {
  auto* obj = static_cast<Objective*>(ctx);
  const Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(x->data, static_cast<Index>(x->size));
  const Eigen::VectorXd grad = obj->gradient(t);
  for (Index k = 0; k < grad.size(); ++k) {
    gsl_vector_set(g, static_cast<size_t>(k), std::isfinite(grad(k)) ? -grad(k) / obj->pat.total : 0.0);
  }
}

void gsl_fdf(const gsl_vector* x, void* ctx, double* f, gsl_vector* g) {
  *f = gsl_f(x, ctx);
  gsl_df(x, ctx, g);
}

}  // namespace

SideItems side_items(const ModelSpec& spec, const Dataset& data, Side side) {
  const auto dims = spec.dims_on_side(side);
  const auto off = spec.item_offsets();
  int multi = -1, single = -1;
  for (int d : dims) {
    if (spec.dims[d].multi_item()) {
      if (multi >= 0) throw std::invalid_argument("step-1 fitting needs exactly one multi-item dim per side");
      multi = d;
    } else {
      if (single >= 0) throw std::invalid_argument("step-1 fitting allows at most one single-item dim per side");
      single = d;
    }
  }
  if (multi < 0) throw std::invalid_argument("step-1 fitting needs exactly one multi-item dim per side");
  SideItems s;
  s.multi = data.items.middleCols(off[multi], spec.dims[multi].item_count());
  if (single >= 0) s.single = data.items.col(off[single]);
  return s;
}

Step1Params Step1Params::initial(const SideItems& data) {
  Step1Params p;
  const int j = data.items();
  p.tau = Eigen::VectorXd::Zero(j);
  p.lambda = Eigen::VectorXd::Ones(j);
  double nz = 0.0;
  for (Index i = 0; i < data.n(); ++i) {
    bool any = (data.multi.row(i).array() == 1).any();
    if (data.has_single()) any = any || data.single(i) == 1;
    nz += any ? 1.0 : 0.0;
  }
  const double frac = data.n() > 0 ? nz / static_cast<double>(data.n()) : 0.5;
  p.pi = std::clamp(1.1 * frac, 0.05, 0.95);
  return p;
}

void Step1Params::validate(int items) const {
  auto req = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  req(items >= 2, "step-1 fitting needs at least two items in the multi-item block");
  req(tau.size() == items && lambda.size() == items, "tau/lambda length does not match the items");
  req(tau(0) == 0.0 && lambda(0) == 1.0, "first item must have intercept 0 and loading 1");
  req(pi >= 0.0 && pi <= 1.0, "pi must lie in [0, 1]");
  req(sigma2_p > 0.0, "sigma2_p must be positive");
  req(rho > -1.0 && rho < 1.0, "rho must lie in (-1, 1)");
}

double step1_loglik(const Step1Params& params, const SideItems& data, int quad_nodes) {
  params.validate(data.items());
  if (quad_nodes < 1) throw std::invalid_argument("quad_nodes must be positive");
  if (data.has_single() && data.single.size() != data.n()) {
    throw std::invalid_argument("single item has the wrong length");
  }
  return pattern_loglik(params, collapse(data), normal_quadrature(quad_nodes));
}

Step1Fit fit_measurement(const SideItems& data, const Step1Params& init, int quad_nodes, double tol,
                         int max_iterations) {
  init.validate(data.items());
  if (!(init.pi > 0.0 && init.pi < 1.0)) throw std::invalid_argument("initial pi must lie in (0, 1)");
  const Patterns pat = collapse(data);
  if (std::none_of(pat.nonzero.begin(), pat.nonzero.end(), [](bool b) { return b; })) {
    throw std::invalid_argument("no unit has a nonzero response on this side");
  }
  Objective obj{pat, normal_quadrature(quad_nodes), Mapping{data.items(), data.has_single()}};
  const Mapping& map = obj.map;
  Eigen::VectorXd theta = map.to_theta(init);
  const size_t p = static_cast<size_t>(map.size());

  Step1Fit fit;
  Step1Report& rep = fit.report;
  double best = obj.loglik(theta);
  rep.trace.push_back(best);

  // Quasi-Newton phase.
  gsl_set_error_handler_off();
  gsl_multimin_function_fdf fdf{&gsl_f, &gsl_df, &gsl_fdf, p, &obj};
  gsl_vector* x = gsl_vector_alloc(p);
  for (size_t k = 0; k < p; ++k) gsl_vector_set(x, k, theta(static_cast<Index>(k)));
  gsl_multimin_fdfminimizer* s = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, p);
  gsl_multimin_fdfminimizer_set(s, &fdf, x, 0.1, 0.1);
  int it = 0;
  for (; it < max_iterations; ++it) {
    if (gsl_multimin_fdfminimizer_iterate(s) != GSL_SUCCESS) break;
    const double ll = -s->f * pat.total;
    if (ll >= best) {
      best = ll;
      for (size_t k = 0; k < p; ++k) theta(static_cast<Index>(k)) = gsl_vector_get(s->x, k);
      rep.trace.push_back(ll);
    }
    if (gsl_multimin_test_gradient(s->gradient, 0.1 * tol / pat.total) == GSL_SUCCESS) break;
  }
  gsl_multimin_fdfminimizer_free(s);
  gsl_vector_free(x);
  rep.iterations = it;

  // Newton polishing on the total log-likelihood.
  Eigen::VectorXd grad = obj.gradient(theta);
  for (int nt = 0; nt < 50 && grad.lpNorm<Eigen::Infinity>() >= tol; ++nt) {
    const Eigen::MatrixXd h = obj.hessian(theta);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    Eigen::VectorXd ev = es.eigenvalues();
    const double floor = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Index k = 0; k < ev.size(); ++k) ev(k) = -std::max(std::abs(ev(k)), floor);
    const Eigen::VectorXd step =
        -es.eigenvectors() * (ev.cwiseInverse().asDiagonal() * (es.eigenvectors().transpose() * grad));
    double t = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 40; ++bt, t *= 0.5) {
      const Eigen::VectorXd cand = theta + t * step;
      const double ll = obj.loglik(cand);
      if (ll >= best) {
        theta = cand;
        best = ll;
        rep.trace.push_back(ll);
        moved = true;
        break;
      }
    }
    ++rep.iterations;
    if (!moved) break;
    grad = obj.gradient(theta);
  }

  rep.loglik = best;
  rep.gradient_norm = grad.lpNorm<Eigen::Infinity>();
  rep.converged = rep.gradient_norm < tol;
  const Eigen::MatrixXd h = obj.hessian(theta);
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(h, Eigen::EigenvaluesOnly).eigenvalues();
  rep.negative_definite = ev.maxCoeff() < 0.0;
  rep.condition_number = rep.negative_definite ? ev.minCoeff() / ev.maxCoeff()
                                               : std::numeric_limits<double>::infinity();
  rep.ill_conditioned = !rep.negative_definite || rep.condition_number > kIllConditioned;
  if (!rep.converged) {
    rep.message = "gradient norm " + std::to_string(rep.gradient_norm) + " above tolerance";
  } else if (rep.ill_conditioned) {
    rep.message = "observed information is ill-conditioned; pi and the latent means may be weakly identified";
  } else {
    rep.message = "converged";
  }
  fit.params = map.from_theta(theta);
  return fit;
}

MeasurementParams measurement_from_fits(const ModelSpec& spec, const Step1Fit& giving,
                                        const Step1Fit& receiving) {
  MeasurementParams phi = MeasurementParams::defaults(spec);
  for (int d = 0; d < spec.K(); ++d) {
    if (!spec.dims[d].multi_item()) continue;
    const Step1Fit& f = spec.dims[d].side == Side::G ? giving : receiving;
    if (f.params.tau.size() != spec.dims[d].item_count()) {
      throw std::invalid_argument("step-1 fit for dimension '" + spec.dims[d].name + "' has the wrong length");
    }
    phi.dims[d].tau = f.params.tau;
    phi.dims[d].lambda = f.params.lambda;
  }
  phi.validate(spec);
  return phi;
}

}  // namespace corrgress
