#include "corrgress/mcmc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "corrgress/normal.hpp"
#include "corrgress/samplers.hpp"

namespace corrgress {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Block ids for make_stream_id.
constexpr std::uint32_t kBlockInit = 1;
constexpr std::uint32_t kBlockXi = 2;
constexpr std::uint32_t kBlockEta = 3;
constexpr std::uint32_t kBlockGamma = 4;
constexpr std::uint32_t kBlockBeta = 5;
constexpr std::uint32_t kBlockSigma = 6;
constexpr std::uint32_t kBlockAlpha = 7;

// Iteration slot used by the initial eta sweep; chains never reach it.
constexpr std::uint64_t kInitIteration = 0x7fffffffull;

// Below this many active units the per-unit loops stay serial.
constexpr Index kParallelThreshold = 256;

template <class F>
void parallel_for(Index n, F&& body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(static) if (n >= kParallelThreshold)
  for (Index i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(corrgress_parallel_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

double max_abs(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

// log(exp(a) + exp(b)).
double log_add_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

struct ProbitItem {
  double tau;
  double lambda;
  int y;
};

// Conditional of one multi-item coordinate: probit items times N(mean, var).
struct EtaConditional {
  const std::vector<ProbitItem>& items;
  double mean;
  double var;

  double log_density(double x) const {
    double s = -0.5 * (x - mean) * (x - mean) / var;
    for (const auto& it : items) s += item_log_prob(it.tau, it.lambda, x, it.y);
    return s;
  }
  // First and second derivatives of log_density.
  void derivatives(double x, double& d1, double& d2) const {
    d1 = -(x - mean) / var;
    d2 = -1.0 / var;
    for (const auto& it : items) {
      const double t = it.y ? 1.0 : -1.0;
      const double u = t * (it.tau + it.lambda * x);
      const double h = norm_mills_inverse(u);
      d1 += t * it.lambda * h;
      d2 -= it.lambda * it.lambda * h * (u + h);
    }
  }
};

// A few damped Newton steps towards the mode of a concave function; returns the final point
// and a curvature-based scale. Only used to place the initial abscissae of ARS.
template <class Deriv>
std::pair<double, double> approximate_mode(double x, double max_step, Deriv&& deriv) {
  double d1 = 0.0, d2 = -1.0;
  for (int it = 0; it < 3; ++it) {
    deriv(x, d1, d2);
    if (!(d2 < 0.0) || !std::isfinite(d1)) break;
    const double step = std::clamp(-d1 / d2, -max_step, max_step);
    x += step;
    if (std::abs(step) < 0.05 / std::sqrt(-d2)) break;
  }
  double scale = (d2 < 0.0 && std::isfinite(d2)) ? 1.0 / std::sqrt(-d2) : max_step;
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  return {x, std::min(scale, max_step)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PriorConfig::validate() const {
  auto pos = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("prior ") + name + " must be positive and finite");
    }
  };
  pos(sigma2_gamma, "sigma2_gamma");
  pos(sigma2_beta, "sigma2_beta");
  pos(ig_a0, "ig_a0");
  pos(ig_b0, "ig_b0");
}

void SamplerConfig::validate() const {
  auto req = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  req(chains >= 1 && chains <= 0xffff, "chains must be between 1 and 65535");
  req(iterations >= 1 && iterations < static_cast<long>(kInitIteration),
      "iterations must be positive");
  req(burn_in >= 0 && burn_in < iterations, "burn_in must satisfy 0 <= burn_in < iterations");
  req(thin >= 1, "thin must be at least 1");
  req(iterations - burn_in >= thin, "no draw would be retained (iterations - burn_in < thin)");
  req(rw_constant_C > 0.0 && std::isfinite(rw_constant_C), "rw_constant_C must be positive");
  req(target_rejection_lo > 0.0 && target_rejection_lo < target_rejection_hi &&
          target_rejection_hi < 1.0,
      "target rejection band must satisfy 0 < lo < hi < 1");
  req(tune_window >= 0, "tune_window must be non-negative");
  req(rebaseline_every >= 0, "rebaseline_every must be non-negative");
  req(workers >= 0, "workers must be non-negative");
}

long SamplerConfig::effective_tune_window() const {
  if (tune_window > 0) return tune_window;
  return std::min<long>(2000, std::max<long>(50, burn_in / 10));
}

int configure_workers(int requested) {
  int w = requested;
  if (w <= 0) {
    if (const char* env = std::getenv("CORRGRESS_WORKERS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end != env && *end == '\0' && v > 0 && v < 4096) w = static_cast<int>(v);
    }
  }
#ifdef _OPENMP
  if (w > 0) omp_set_num_threads(w);
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// ---------------------------------------------------------------------------
// CorrelationBlock

CorrelationBlock::CorrelationBlock(Index dim, Eigen::MatrixXd x_corr, TestSet test_set,
                                   Eigen::MatrixXd alpha, Mask free_mask, KernelMode mode)
    : dim_(dim),
      x_(std::move(x_corr)),
      test_set_(std::move(test_set)),
      alpha_(std::move(alpha)),
      free_(std::move(free_mask)),
      mode_(mode) {
  if (dim_ < 2) throw std::invalid_argument("correlation block needs dim >= 2");
  const Index q = alpha_.cols();
  if (alpha_.rows() != linalg::pair_count(dim_)) {
    throw std::invalid_argument("alpha must have dim*(dim-1)/2 rows");
  }
  if (x_.cols() != q || test_set_.width() != q) {
    throw std::invalid_argument("covariate width does not match alpha");
  }
  if (test_set_.size() == 0) throw std::invalid_argument("test set is empty");
  if (free_.size() != 0) {
    if (free_.rows() != alpha_.rows() || free_.cols() != q) {
      throw std::invalid_argument("alpha mask has the wrong shape");
    }
    for (Index l = 0; l < alpha_.rows(); ++l)
      for (Index m = 0; m < q; ++m)
        if (!free_(l, m) && alpha_(l, m) != 0.0) {
          throw std::invalid_argument("alpha coefficient fixed at zero has a nonzero value");
        }
  }
  const Index n = x_.rows();
  const Index t = test_set_.size();
  eps_t_ = Eigen::MatrixXd::Zero(dim_, n);
  active_units_.assign(static_cast<size_t>(q), {});
  active_points_.assign(static_cast<size_t>(q), {});
  step_scale_.resize(q);
  for (Index m = 0; m < q; ++m) {
    for (Index i = 0; i < n; ++i)
      if (x_(i, m) != 0.0) active_units_[m].push_back(i);
    for (Index j = 0; j < t; ++j)
      if (test_set_.points(j, m) != 0.0) active_points_[m].push_back(j);
    const double mx = n > 0 ? max_abs(x_.col(m)) : max_abs(test_set_.points.col(m));
    const double root_n = std::sqrt(static_cast<double>(std::max<Index>(n, 1)));
    step_scale_(m) = mx > 0.0 ? 1.0 / (root_n * mx) : 1.0 / root_n;
  }
  proposals_ = Counts::Zero(alpha_.rows(), q);
  accepted_ = Counts::Zero(alpha_.rows(), q);
  inv_.resize(dim_, n * dim_);
  det_.resize(n);
  quad_ = Eigen::VectorXd::Zero(n);
  quad_new_.resize(n);
  logdet_new_.resize(n);
  factors_.resize(dim_, t * dim_);
  factor_scratch_.resize(dim_, t * dim_);
  perm_scratch_.resize(dim_, dim_);
  work_.resize(dim_);
  rho_bounds_.assign(static_cast<size_t>(t), RhoInterval{0.0, 0.0});
  build_caches();
}

void CorrelationBlock::build_caches() {
  const Index t = test_set_.size();
  for (Index j = 0; j < t; ++j) {
    auto f = linalg::try_cholesky(correlation_at(alpha_, test_set_.points.row(j).transpose(), dim_));
    if (!f) {
      throw InfeasibleState("alpha is infeasible at test point " + std::to_string(j));
    }
    factors_.middleCols(j * dim_, dim_) = f->gamma;
  }
  parallel_for(units(), [&](Index i) {
    linalg::CorrelationState st;
    try {
      st = linalg::CorrelationState::from_matrix(correlation_at(alpha_, x_.row(i).transpose(), dim_));
    } catch (const linalg::NotPositiveDefinite&) {
      throw std::invalid_argument("correlation matrix of unit " + std::to_string(i) +
                                  " is not positive definite; the test set does not cover the data");
    }
    inv_.middleCols(i * dim_, dim_) = st.inverse;
    det_(i) = st.det;
  });
  refresh_quadratic_forms();
}

void CorrelationBlock::refresh_quadratic_forms() {
  parallel_for(units(), [&](Index i) {
    const auto e = eps_t_.col(i);
    quad_(i) = e.dot(inverse(i) * e);
  });
}

void CorrelationBlock::set_residuals(const Eigen::Ref<const Eigen::MatrixXd>& eps) {
  if (eps.rows() != units() || eps.cols() != dim_) {
    throw std::invalid_argument("residual matrix has the wrong shape");
  }
  eps_t_ = eps.transpose();
  refresh_quadratic_forms();
}

Eigen::Map<const Eigen::MatrixXd> CorrelationBlock::inverse(Index i) const {
  return Eigen::Map<const Eigen::MatrixXd>(inv_.data() + i * dim_ * dim_, dim_, dim_);
}

Eigen::Map<const Eigen::MatrixXd> CorrelationBlock::factor(Index j) const {
  return Eigen::Map<const Eigen::MatrixXd>(factors_.data() + j * dim_ * dim_, dim_, dim_);
}

void CorrelationBlock::set_constant(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw std::invalid_argument("C must be positive");
  c_ = c;
}

FeasibleInterval CorrelationBlock::interval(Index l, Index m) {
  const auto pos = linalg::pair_position(dim_, l);
  const Index k1 = pos.row, k2 = pos.col;
  for (Index j : active_points_[m]) {
    if (mode_ == KernelMode::Incremental) {
      linalg::move_target_to_last_into(factor(j), k1, k2, perm_scratch_);
      rho_bounds_[j] = linalg::rho_interval_from_factor(perm_scratch_);
    } else {
      rho_bounds_[j] = rho_interval_by_determinant(
          correlation_at(alpha_, test_set_.points.row(j).transpose(), dim_), k1, k2);
    }
  }
  return intersect_alpha_interval(alpha_, l, m, test_set_.points, rho_bounds_);
}

double CorrelationBlock::log_ratio(Index l, Index m, double delta) {
  const auto pos = linalg::pair_position(dim_, l);
  const Index k1 = pos.row, k2 = pos.col;
  const auto& units = active_units_[m];
  const Index na = static_cast<Index>(units.size());
  std::vector<double> terms(static_cast<size_t>(na));

  if (mode_ == KernelMode::Incremental) {
    parallel_for(na, [&](Index a) {
      const Index i = units[a];
      const double e = delta * x_(i, m);
      const auto b = inverse(i);
      const auto eps = eps_t_.col(i);
      const double b11 = b(k1, k1), b22 = b(k2, k2);
      const double den1 = 1.0 + e * b(k2, k1);
      const double b12_after = b(k1, k2) - e * b11 * b22 / den1;
      const double den2 = 1.0 + e * b12_after;
      const double ratio = den1 * den2;
      if (std::abs(den1) < linalg::kSingularFloor || std::abs(den2) < linalg::kSingularFloor ||
          !(ratio > 0.0)) {
        terms[a] = -kInf;
        return;
      }
      const double v1 = b.col(k1).dot(eps);
      const double v2 = b.col(k2).dot(eps);
      const double q = quad_(i);
      const double q1 = q - e * v1 * v2 / den1;
      const double c2 = v2 - e * v1 * b22 / den1;
      const double r1 = v1 - e * b11 * v2 / den1;
      const double qn = q1 - e * c2 * r1 / den2;
      quad_new_(i) = qn;
      terms[a] = -0.5 * std::log(ratio) - 0.5 * (qn - q);
    });
  } else {
    Eigen::MatrixXd alpha_new = alpha_;
    alpha_new(l, m) += delta;
    parallel_for(na, [&](Index a) {
      const Index i = units[a];
      const Eigen::LLT<Eigen::MatrixXd> llt(correlation_at(alpha_new, x_.row(i).transpose(), dim_));
      const Eigen::VectorXd diag = llt.matrixLLT().diagonal();
      if (llt.info() != Eigen::Success || !(diag.minCoeff() > 0.0)) {
        terms[a] = -kInf;
        return;
      }
      const double logdet = 2.0 * diag.array().log().sum();
      const double qn = llt.matrixL().solve(eps_t_.col(i)).squaredNorm();
      quad_new_(i) = qn;
      logdet_new_(i) = logdet;
      terms[a] = -0.5 * (logdet - std::log(det_(i))) - 0.5 * (qn - quad_(i));
    });
  }
  double total = 0.0;
  for (double v : terms) {
    if (v == -kInf) return -kInf;
    total += v;
  }
  return total;
}

bool CorrelationBlock::commit(Index l, Index m, double delta, Index k1, Index k2) {
  const double proposed = alpha_(l, m) + delta;
  const auto& points = active_points_[m];
  const auto& units = active_units_[m];

  if (mode_ == KernelMode::Incremental) {
    for (Index j : points) {
      auto dst = factor_scratch_.middleCols(j * dim_, dim_);
      dst = factors_.middleCols(j * dim_, dim_);
      if (!linalg::perturb_chol_inplace(dst, k1, k2, delta * test_set_.points(j, m), work_)) {
        Eigen::MatrixXd alpha_new = alpha_;
        alpha_new(l, m) = proposed;
        auto f = linalg::try_cholesky(
            correlation_at(alpha_new, test_set_.points.row(j).transpose(), dim_));
        if (!f) return false;  // numerically on the boundary
        dst = f->gamma;
      }
    }
    for (Index j : points) {
      factors_.middleCols(j * dim_, dim_) = factor_scratch_.middleCols(j * dim_, dim_);
    }
    const Index na = static_cast<Index>(units.size());
    std::exception_ptr error;
#pragma omp parallel if (na >= kParallelThreshold)
    {
      Eigen::VectorXd col(dim_), row(dim_);
#pragma omp for schedule(static)
      for (Index a = 0; a < na; ++a) {
        const Index i = units[a];
        Eigen::Map<Eigen::MatrixXd> b(inv_.data() + i * dim_ * dim_, dim_, dim_);
        if (!linalg::perturb_inverse_inplace(b, det_(i), k1, k2, delta * x_(i, m), col, row)) {
          try {
            Eigen::MatrixXd an = alpha_;
            an(l, m) = proposed;
            const auto st =
                linalg::CorrelationState::from_matrix(correlation_at(an, x_.row(i).transpose(), dim_));
            b = st.inverse;
            det_(i) = st.det;
          } catch (...) {
#pragma omp critical(corrgress_parallel_error)
            if (!error) error = std::current_exception();
          }
        }
        quad_(i) = quad_new_(i);
      }
    }
    if (error) std::rethrow_exception(error);
  } else {
    Eigen::MatrixXd alpha_new = alpha_;
    alpha_new(l, m) = proposed;
    parallel_for(static_cast<Index>(units.size()), [&](Index a) {
      const Index i = units[a];
      const auto st =
          linalg::CorrelationState::from_matrix(correlation_at(alpha_new, x_.row(i).transpose(), dim_));
      inv_.middleCols(i * dim_, dim_) = st.inverse;
      det_(i) = st.det;
      quad_(i) = quad_new_(i);
    });
  }
  alpha_(l, m) = proposed;
  return true;
}

bool CorrelationBlock::update(Index l, Index m, RandomStream& stream) {
  if (!is_free(l, m)) return false;
  ++proposals_(l, m);
  const FeasibleInterval iv = interval(l, m);
  const double z = stream.normal();
  const double log_u = std::log(stream.uniform());
  const double current = alpha_(l, m);
  const double proposed = current + step_size(m) * z;
  if (!iv.contains(proposed)) return false;
  const double delta = proposed - current;
  const double lr = log_ratio(l, m, delta);
  if (!(log_u < lr)) return false;
  const auto pos = linalg::pair_position(dim_, l);
  if (!commit(l, m, delta, pos.row, pos.col)) return false;
  ++accepted_(l, m);
  if (rebaseline_every_ > 0 && ++accepted_since_rebaseline_ >= rebaseline_every_) rebaseline();
  return true;
}

void CorrelationBlock::sweep(RandomStream& stream) {
  for (Index l = 0; l < pairs(); ++l)
    for (Index m = 0; m < covariates(); ++m)
      if (is_free(l, m)) update(l, m, stream);
}

void CorrelationBlock::reset_tallies() {
  proposals_.setZero();
  accepted_.setZero();
}

double CorrelationBlock::rebaseline(double tolerance) {
  double drift = 0.0;
  const Index t = test_set_.size();
  for (Index j = 0; j < t; ++j) {
    auto f = linalg::try_cholesky(correlation_at(alpha_, test_set_.points.row(j).transpose(), dim_));
    if (!f) throw std::runtime_error("test point " + std::to_string(j) + " lost positive definiteness");
    if (mode_ == KernelMode::Incremental) drift = std::max(drift, max_abs(f->gamma - factor(j)));
    factors_.middleCols(j * dim_, dim_) = f->gamma;
  }
  std::vector<double> unit_drift(static_cast<size_t>(units()), 0.0);
  parallel_for(units(), [&](Index i) {
    const auto st =
        linalg::CorrelationState::from_matrix(correlation_at(alpha_, x_.row(i).transpose(), dim_));
    const double scale = std::max(1.0, max_abs(st.inverse));
    const double q = eps_t_.col(i).dot(st.inverse * eps_t_.col(i));
    double d = max_abs(st.inverse - inverse(i)) / scale;
    d = std::max(d, std::abs(st.det - det_(i)) / st.det);
    d = std::max(d, std::abs(q - quad_(i)) / std::max(1.0, std::abs(q)));
    unit_drift[i] = d;
    inv_.middleCols(i * dim_, dim_) = st.inverse;
    det_(i) = st.det;
    quad_(i) = q;
  });
  for (double d : unit_drift) drift = std::max(drift, d);
  max_drift_ = std::max(max_drift_, drift);
  ++rebaselines_;
  accepted_since_rebaseline_ = 0;
  if (!(drift <= tolerance)) {
    std::ostringstream os;
    os << "cached inverses/determinants/factors drifted by " << drift << " (tolerance "
       << tolerance << ") at re-baseline " << rebaselines_;
    throw std::runtime_error(os.str());
  }
  return drift;
}

// ---------------------------------------------------------------------------
// Flattening

std::vector<std::string> parameter_columns(const ModelSpec& spec) {
  std::vector<std::string> cols;
  const auto mean_names = spec.covariate_names(spec.mean_covariates);
  const auto corr_names = spec.covariate_names(spec.corr_covariates);
  const auto class_names = spec.covariate_names(spec.class_covariates);
  for (const auto& d : spec.dims)
    for (const auto& c : mean_names) cols.push_back("beta." + d.name + "." + c);
  for (int l = 0; l < spec.L(); ++l)
    for (const auto& c : corr_names) cols.push_back("alpha." + spec.pair_name(l) + "." + c);
  for (const auto& d : spec.dims)
    if (d.free_scale) cols.push_back("sigma." + d.name);
  for (int cell = 1; cell < 4; ++cell)
    for (const auto& c : class_names) cols.push_back(std::string("gamma.") + kCellNames[cell] + "." + c);
  return cols;
}

Eigen::VectorXd flatten_params(const ModelSpec& spec, const StructuralParams& p) {
  std::vector<double> v;
  for (int k = 0; k < spec.K(); ++k)
    for (int r = 0; r < spec.q_mean(); ++r) v.push_back(p.beta(r, k));
  for (int l = 0; l < spec.L(); ++l)
    for (int m = 0; m < spec.q_corr(); ++m) v.push_back(p.alpha(l, m));
  for (int k = 0; k < spec.K(); ++k)
    if (spec.dims[k].free_scale) v.push_back(p.sigma(k));
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < spec.q_class(); ++r) v.push_back(p.gamma(c, r));
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

StructuralParams unflatten_params(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& row) {
  StructuralParams p = StructuralParams::zeros(spec);
  Index pos = 0;
  auto next = [&]() {
    if (pos >= row.size()) throw std::invalid_argument("parameter row is too short");
    return row(pos++);
  };
  for (int k = 0; k < spec.K(); ++k)
    for (int r = 0; r < spec.q_mean(); ++r) p.beta(r, k) = next();
  for (int l = 0; l < spec.L(); ++l)
    for (int m = 0; m < spec.q_corr(); ++m) p.alpha(l, m) = next();
  for (int k = 0; k < spec.K(); ++k)
    if (spec.dims[k].free_scale) p.sigma(k) = next();
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < spec.q_class(); ++r) p.gamma(c, r) = next();
  if (pos != row.size()) throw std::invalid_argument("parameter row is too long");
  return p;
}

Eigen::MatrixXd ChainTally::alpha_rejection_rates() const {
  Eigen::MatrixXd r(alpha_proposals.rows(), alpha_proposals.cols());
  for (Index l = 0; l < r.rows(); ++l)
    for (Index m = 0; m < r.cols(); ++m) {
      const long n = alpha_proposals(l, m);
      r(l, m) = n > 0 ? 1.0 - static_cast<double>(alpha_accepted(l, m)) / static_cast<double>(n) : kNaN;
    }
  return r;
}

Eigen::MatrixXd DrawStore::chain_values(int c) const {
  std::vector<Index> rows_of;
  for (size_t r = 0; r < chain.size(); ++r)
    if (chain[r] == c) rows_of.push_back(static_cast<Index>(r));
  Eigen::MatrixXd out(static_cast<Index>(rows_of.size()), values.cols());
  for (size_t r = 0; r < rows_of.size(); ++r) out.row(static_cast<Index>(r)) = values.row(rows_of[r]);
  return out;
}

int DrawStore::column_index(const std::string& name) const {
  for (size_t c = 0; c < columns.size(); ++c)
    if (columns[c] == name) return static_cast<int>(c);
  return -1;
}

// ---------------------------------------------------------------------------
// Sampler

Sampler::Sampler(const ModelSpec& spec, const MeasurementParams& phi, const Dataset& data,
                 const TestSet& test_set, const PriorConfig& priors, const SamplerConfig& config,
                 int chain)
    : spec_(spec),
      phi_(phi),
      data_(data),
      test_set_(test_set),
      priors_(priors),
      config_(config),
      chain_(chain),
      log_c_lo_(-kInf),
      log_c_hi_(kInf) {
  spec_.validate();
  phi_.validate(spec_);
  priors_.validate();
  config_.validate();
  if (data_.x_corr.cols() != spec_.q_corr() || data_.items.cols() != spec_.total_items()) {
    throw std::invalid_argument("dataset does not match the model");
  }
  if (test_set_.width() != spec_.q_corr()) {
    throw std::invalid_argument("test set width does not match the correlation covariates");
  }
  offsets_ = spec_.item_offsets();
  params_ = StructuralParams::zeros(spec_);
  sigma_prop_ = Eigen::VectorXi::Zero(spec_.K());
  sigma_acc_ = Eigen::VectorXi::Zero(spec_.K());
}

RandomStream Sampler::stream(std::uint32_t block, std::uint64_t unit, std::uint64_t iteration) const {
  return RandomStream(config_.seed, make_stream_id(static_cast<std::uint32_t>(chain_), block, unit),
                      iteration << 32);
}

void Sampler::refresh_residuals() {
  mu_ = data_.x_mean * params_.beta;
  eps_ = (latent_.eta - mu_) * params_.sigma.cwiseInverse().asDiagonal();
}

void Sampler::initialize() {
  const Index n = data_.n();
  const int k = spec_.K();
  params_ = StructuralParams::zeros(spec_);
  block_ = std::make_unique<CorrelationBlock>(k, data_.x_corr, test_set_, params_.alpha,
                                              spec_.alpha_free, config_.kernel);
  block_->set_constant(config_.rw_constant_C);
  block_->set_rebaseline_every(config_.rebaseline_every);
  latent_.xi.setOnes(n, 2);
  latent_.eta.resize(n, k);
  refresh_residuals();
  parallel_for(n, [&](Index i) {
    RandomStream rs = stream(kBlockInit, static_cast<std::uint64_t>(i), 0);
    const Eigen::LLT<Eigen::MatrixXd> llt(
        params_.sigma.asDiagonal() * block_->inverse(i).inverse() * params_.sigma.asDiagonal());
    Eigen::VectorXd z(k);
    for (int d = 0; d < k; ++d) z(d) = rs.normal();
    latent_.eta.row(i) = (mu_.row(i).transpose() + llt.matrixL() * z).transpose();
  });
  refresh_residuals();
  sample_eta(kInitIteration);
  log_c_lo_ = -kInf;
  log_c_hi_ = kInf;
  tune_windows_ = 0;
  expand_step_ = kFirstExpandStep;
  expansions_ = 0;
  reset_tallies();
}

void Sampler::set_state(const StructuralParams& params, const LatentState& latent) {
  params.validate(spec_);
  if (latent.xi.rows() != data_.n() || latent.eta.rows() != data_.n() || latent.eta.cols() != spec_.K()) {
    throw std::invalid_argument("latent state does not match the dataset");
  }
  const double c = block_ ? block_->constant() : config_.rw_constant_C;
  params_ = params;
  latent_ = latent;
  block_ = std::make_unique<CorrelationBlock>(spec_.K(), data_.x_corr, test_set_, params_.alpha,
                                              spec_.alpha_free, config_.kernel);
  block_->set_constant(c);
  block_->set_rebaseline_every(config_.rebaseline_every);
  refresh_residuals();
  reset_tallies();
}

void Sampler::reset_tallies() {
  if (block_) {
    block_->reset_tallies();
    window_prop_ = block_->proposals();
    window_acc_ = block_->accepted();
  }
  sigma_prop_.setZero();
  sigma_acc_.setZero();
}

void Sampler::iterate(std::uint64_t iteration) {
  sample_xi(iteration);
  sample_eta(iteration);
  sample_gamma(iteration);
  sample_beta(iteration);
  sample_sigma(iteration);
  sample_alpha(iteration);
  if (config_.check_every_draw && !is_feasible(params_.alpha, test_set_)) {
    throw std::logic_error("alpha left the feasible set at iteration " + std::to_string(iteration));
  }
}

void Sampler::sample_xi(std::uint64_t iteration) {
  const int k = spec_.K();
  parallel_for(data_.n(), [&](Index i) {
    RandomStream rs = stream(kBlockXi, static_cast<std::uint64_t>(i), iteration);
    const Eigen::Array4d pi = class_probs(params_.gamma, data_.x_class.row(i).transpose());
    // Log measurement likelihood of each side when its class indicator is 1.
    double on[2] = {0.0, 0.0};
    for (int d = 0; d < k; ++d) {
      const auto& dim = spec_.dims[d];
      const int s = static_cast<int>(dim.side);
      const double eta = latent_.eta(i, d);
      for (int j = 0; j < dim.item_count(); ++j) {
        const int y = data_.items(i, offsets_[d] + j);
        if (y == kMissing) continue;
        if (dim.multi_item()) {
          on[s] += item_log_prob(phi_.dims[d].tau(j), phi_.dims[d].lambda(j), eta, y);
        } else if ((y == 1) != (eta > 0.0)) {
          on[s] = -kInf;
        }
      }
    }
    double w[4];
    double top = -kInf;
    for (int c = 0; c < 4; ++c) {
      const int side_on[2] = {c >> 1, c & 1};
      double v = std::log(pi(c));
      for (int s = 0; s < 2; ++s) {
        if (side_on[s]) {
          v += on[s];
        } else if (data_.nonzero(i, s)) {
          v = -kInf;
        }
      }
      w[c] = v;
      top = std::max(top, v);
    }
    if (top == -kInf) {
      throw std::runtime_error("all class weights vanish at unit " + std::to_string(i));
    }
    double total = 0.0;
    for (double& v : w) total += (v = std::exp(v - top));
    const double u = rs.uniform() * total;
    int cell = 0;
    double acc = w[0];
    while (cell < 3 && (u >= acc || w[cell] == 0.0)) acc += w[++cell];
    while (w[cell] == 0.0) --cell;  // rounding at the top end
    latent_.xi(i, 0) = static_cast<std::uint8_t>(cell >> 1);
    latent_.xi(i, 1) = static_cast<std::uint8_t>(cell & 1);
  });
}

void Sampler::eta_unit(Index i, RandomStream& rs) {
  const int k = spec_.K();
  const auto b = block_->inverse(i);
  std::vector<ProbitItem> items;
  for (int d = 0; d < k; ++d) {
    const auto& dim = spec_.dims[d];
    const double sigma = params_.sigma(d);
    const double wkk = b(d, d);
    double cross = 0.0;
    for (int j = 0; j < k; ++j)
      if (j != d) cross += b(d, j) * eps_(i, j);
    const double mean = mu_(i, d) - sigma / wkk * cross;
    const double var = sigma * sigma / wkk;
    const double sd = std::sqrt(var);
    const bool active = latent_.xi(i, static_cast<int>(dim.side)) == 1;

    double eta;
    if (!active) {
      eta = mean + sd * rs.normal();
    } else if (dim.multi_item()) {
      items.clear();
      for (int j = 0; j < dim.item_count(); ++j) {
        const int y = data_.items(i, offsets_[d] + j);
        if (y != kMissing) items.push_back({phi_.dims[d].tau(j), phi_.dims[d].lambda(j), y});
      }
      if (items.empty()) {
        eta = mean + sd * rs.normal();
      } else {
        const EtaConditional cond{items, mean, var};
        const auto [mode, scale] = approximate_mode(
            mean, 5.0 * sd, [&](double x, double& d1, double& d2) { cond.derivatives(x, d1, d2); });
        LogDensity target;
        target.eval = [&](double x) { return cond.log_density(x); };
        eta = ars_sample(target, {mode - scale, mode, mode + scale}, rs, nullptr, scale);
      }
    } else {
      const int y = data_.items(i, offsets_[d]);
      if (y == kMissing) {
        eta = mean + sd * rs.normal();
      } else if (y == 1) {
        eta = truncated_normal(mean, sd, 0.0, kInf, rs);
      } else {
        eta = truncated_normal(mean, sd, -kInf, 0.0, rs);
      }
    }
    latent_.eta(i, d) = eta;
    eps_(i, d) = (eta - mu_(i, d)) / sigma;
  }
}

void Sampler::sample_eta(std::uint64_t iteration) {
  parallel_for(data_.n(), [&](Index i) {
    RandomStream rs = stream(kBlockEta, static_cast<std::uint64_t>(i), iteration);
    eta_unit(i, rs);
  });
}

void Sampler::sample_gamma(std::uint64_t iteration) {
  RandomStream rs = stream(kBlockGamma, 0, iteration);
  const Index n = data_.n();
  const int qg = spec_.q_class();
  const double prior_var = priors_.sigma2_gamma;
  Eigen::MatrixXd lp(n, 4);
  lp.col(0).setZero();
  lp.rightCols(3) = data_.x_class * params_.gamma.transpose();
  std::vector<int> cell_of(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) cell_of[i] = 2 * latent_.xi(i, 0) + latent_.xi(i, 1);

  Eigen::VectorXd base(n), log_rest(n);
  for (int r = 0; r < qg; ++r) {
    for (int c = 1; c < 4; ++c) {
      const double g0 = params_.gamma(c - 1, r);
      const auto x = data_.x_class.col(r);
      double linear = 0.0;  // sum of x_ir over units in cell c
      for (Index i = 0; i < n; ++i) {
        base(i) = lp(i, c) - g0 * x(i);
        double s = -kInf;
        for (int o = 0; o < 4; ++o)
          if (o != c) s = log_add_exp(s, lp(i, o));
        log_rest(i) = s;
        if (cell_of[i] == c) linear += x(i);
      }
      // Multinomial-logit log-likelihood in this coordinate plus the normal prior.
      auto log_density = [&](double g) {
        double v = g * linear - 0.5 * g * g / prior_var;
        for (Index i = 0; i < n; ++i) {
          const double t = base(i) + g * x(i);
          v -= log_add_exp(log_rest(i), t);
        }
        return v;
      };
      auto deriv = [&](double g, double& d1, double& d2) {
        d1 = linear - g / prior_var;
        d2 = -1.0 / prior_var;
        for (Index i = 0; i < n; ++i) {
          const double p = sigmoid(base(i) + g * x(i) - log_rest(i));
          d1 -= x(i) * p;
          d2 -= x(i) * x(i) * p * (1.0 - p);
        }
      };
      const auto [mode, scale] = approximate_mode(g0, 5.0 * std::sqrt(prior_var), deriv);
      LogDensity target;
      target.eval = log_density;
      double g;
      try {
        g = ars_sample(target, {mode - scale, mode, mode + scale}, rs, nullptr, scale);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("gamma.") + kCellNames[c] + "." +
                                 spec_.covariate_names({spec_.class_covariates[r]})[0] + ": " + e.what());
      }
      params_.gamma(c - 1, r) = g;
      lp.col(c) = base + g * x;
    }
  }
}

Sampler::NormalConditional Sampler::beta_conditional(int d) const {
  const Index n = data_.n();
  const int k = spec_.K();
  const double sigma = params_.sigma(d);
  Eigen::VectorXd weight(n), target(n);
  for (Index i = 0; i < n; ++i) {
    const auto b = block_->inverse(i);
    const double wkk = b(d, d);
    double cross = 0.0;
    for (int j = 0; j < k; ++j)
      if (j != d) cross += b(d, j) * eps_(i, j);
    const double var = sigma * sigma / wkk;
    const double offset = -sigma / wkk * cross;
    weight(i) = 1.0 / var;
    target(i) = latent_.eta(i, d) - offset;
  }
  NormalConditional out;
  out.precision = data_.x_mean.transpose() * weight.asDiagonal() * data_.x_mean;
  out.precision.diagonal().array() += 1.0 / priors_.sigma2_beta;
  const Eigen::VectorXd rhs = data_.x_mean.transpose() * weight.cwiseProduct(target);
  out.llt.compute(out.precision);
  if (out.llt.info() != Eigen::Success) throw std::runtime_error("beta precision is not positive definite");
  out.mean = out.llt.solve(rhs);
  return out;
}

void Sampler::sample_beta(std::uint64_t iteration) {
  RandomStream rs = stream(kBlockBeta, 0, iteration);
  const int q = spec_.q_mean();
  for (int d = 0; d < spec_.K(); ++d) {
    const NormalConditional cond = beta_conditional(d);
    Eigen::VectorXd z(q);
    for (int r = 0; r < q; ++r) z(r) = rs.normal();
    const Eigen::VectorXd draw = cond.mean + cond.llt.matrixU().solve(z);
    params_.beta.col(d) = draw;
    mu_.col(d) = data_.x_mean * draw;
    eps_.col(d) = (latent_.eta.col(d) - mu_.col(d)) / params_.sigma(d);
  }
}

void Sampler::sample_sigma(std::uint64_t iteration) {
  RandomStream rs = stream(kBlockSigma, 0, iteration);
  const Index n = data_.n();
  const int k = spec_.K();
  const double shape = static_cast<double>(n) + 2.0 * priors_.ig_a0;
  for (int d = 0; d < k; ++d) {
    if (!spec_.dims[d].free_scale) continue;
    const double current = params_.sigma(d);
    double b1 = priors_.ig_b0, b2 = 0.0;
    for (Index i = 0; i < n; ++i) {
      const auto b = block_->inverse(i);
      const double e = eps_(i, d) * current;
      double cross = 0.0;
      for (int j = 0; j < k; ++j)
        if (j != d) cross += b(d, j) * eps_(i, j);
      b1 += 0.5 * e * e * b(d, d);
      b2 += 0.5 * e * cross;
    }
    auto log_target = [&](double s) { return -(shape + 1.0) * std::log(s) - b1 / (s * s) - 2.0 * b2 / s; };
    // Proposal N(s, (0.1 s)^2) is not symmetric, hence the Hastings term.
    auto log_q = [](double to, double from) {
      const double sd = 0.1 * from;
      return -std::log(sd) - 0.5 * (to - from) * (to - from) / (sd * sd);
    };
    const double proposed = current + 0.1 * current * rs.normal();
    const double log_u = std::log(rs.uniform());
    ++sigma_prop_(d);
    if (!(proposed > 0.0)) continue;
    const double log_h = log_target(proposed) - log_target(current) + log_q(current, proposed) -
                         log_q(proposed, current);
    if (log_u < log_h) {
      ++sigma_acc_(d);
      params_.sigma(d) = proposed;
      eps_.col(d) *= current / proposed;
    }
  }
}

void Sampler::sample_alpha(std::uint64_t iteration) {
  RandomStream rs = stream(kBlockAlpha, 0, iteration);
  block_->set_residuals(eps_);
  block_->sweep(rs);
  params_.alpha = block_->alpha();
}

void Sampler::tune_constant() {
  // The first window still carries the walk away from the starting values.
  if (tune_windows_++ == 0) {
    window_prop_ = block_->proposals();
    window_acc_ = block_->accepted();
    return;
  }
  // Counts accumulate for as long as C stays put, so an undecided window is not wasted.
  const auto prop = (block_->proposals() - window_prop_).eval();
  const auto acc = (block_->accepted() - window_acc_).eval();
  double lo = kInf, hi = -kInf, var_lo = 0, var_hi = 0;
  for (Index l = 0; l < prop.rows(); ++l)
    for (Index m = 0; m < prop.cols(); ++m) {
      if (prop(l, m) == 0) continue;
      const double n = static_cast<double>(prop(l, m));
      const double rej = 1.0 - static_cast<double>(acc(l, m)) / n;
      if (rej < lo) {
        lo = rej;
        var_lo = rej * (1 - rej) / n;
      }
      if (rej > hi) {
        hi = rej;
        var_hi = rej * (1 - rej) / n;
      }
    }
  if (lo > hi) return;
  // Midrange of the per-coefficient rates: one C serves coefficients whose conditional
  // spreads differ, so centre the whole range on the band. Stopping anywhere inside the
  // band leaves the extremes hanging over its edges, so aim at the centre, and only move
  // once the miss is clear of the binomial noise in the two extreme rates.
  const double mid = 0.5 * (lo + hi);
  const double se = 0.5 * std::sqrt(var_lo + var_hi);
  const double target = 0.5 * (config_.target_rejection_lo + config_.target_rejection_hi);
  const double tol = 0.1 * (config_.target_rejection_hi - config_.target_rejection_lo) + 2.0 * se;
  const double log_c = std::log(block_->constant());
  if (mid > target + tol) {
    log_c_hi_ = log_c;
    if (log_c_hi_ - log_c_lo_ < 0.02) {
      log_c_lo_ = -kInf;
      expand_step_ = kFirstExpandStep;
      expansions_ = 0;
    }
  } else if (mid < target - tol) {
    log_c_lo_ = log_c;
    if (log_c_hi_ - log_c_lo_ < 0.02) {
      log_c_hi_ = kInf;
      expand_step_ = kFirstExpandStep;
      expansions_ = 0;
    }
  } else {
    return;
  }
  // Until both ends are known, step outwards. The rate moves by roughly 0.25 per unit of
  // log C, so small steps keep the range from jumping past the band; the step only starts
  // doubling after three moves in a row, for a C that starts far off.
  double next;
  if (std::isfinite(log_c_lo_) && std::isfinite(log_c_hi_)) {
    next = 0.5 * (log_c_lo_ + log_c_hi_);
  } else {
    next = std::isfinite(log_c_hi_) ? log_c_hi_ - expand_step_ : log_c_lo_ + expand_step_;
    if (++expansions_ >= 3) expand_step_ *= 2.0;
  }
  block_->set_constant(std::exp(next));
  window_prop_ = block_->proposals();
  window_acc_ = block_->accepted();
}

// ---------------------------------------------------------------------------

DrawStore run_chain(const ModelSpec& spec, const MeasurementParams& phi, const Dataset& data,
                    const TestSet& test_set, const PriorConfig& priors,
                    const SamplerConfig& config, const ProgressCallback& progress) {
  config.validate();
  configure_workers(config.workers);
  const auto start = std::chrono::steady_clock::now();
  DrawStore store;
  store.columns = parameter_columns(spec);
  const long per_chain = (config.iterations - config.burn_in) / config.thin;
  store.values.resize(config.chains * per_chain, static_cast<Index>(store.columns.size()));
  const long window = config.effective_tune_window();
  Index row = 0;
  for (int c = 0; c < config.chains; ++c) {
    Sampler sampler(spec, phi, data, test_set, priors, config, c);
    sampler.initialize();
    for (long it = 0; it < config.iterations; ++it) {
      sampler.iterate(static_cast<std::uint64_t>(it));
      if (it < config.burn_in && config.tune_C && (it + 1) % window == 0) sampler.tune_constant();
      if (it + 1 == config.burn_in) sampler.reset_tallies();
      if (it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0) {
        if (!is_feasible(sampler.params().alpha, test_set)) {
          throw std::logic_error("retained alpha draw is infeasible at iteration " + std::to_string(it + 1));
        }
        store.values.row(row++) = flatten_params(spec, sampler.params()).transpose();
        store.chain.push_back(c);
        store.iteration.push_back(it + 1);
      }
      if (progress) progress(c, it + 1);
    }
    ChainTally tally;
    tally.alpha_proposals = sampler.correlation().proposals();
    tally.alpha_accepted = sampler.correlation().accepted();
    tally.sigma_proposals = sampler.sigma_proposals();
    tally.sigma_accepted = sampler.sigma_accepted();
    tally.rw_constant_C = sampler.correlation().constant();
    tally.rebaselines = sampler.correlation().rebaselines();
    tally.max_drift = sampler.correlation().max_drift();
    store.tallies.push_back(std::move(tally));
  }
  store.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return store;
}

}  // namespace corrgress
