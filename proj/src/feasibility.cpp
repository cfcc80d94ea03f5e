#include "corrgress/feasibility.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include <Eigen/LU>

namespace corrgress {

namespace {

using Kind = ExpansionTerm::Kind;

std::string default_term_name(const ExpansionTerm& t, const std::vector<std::string>& base) {
  switch (t.kind) {
    case Kind::Constant: return base.empty() ? "const" : base[0];
    case Kind::Copy: return base[t.first];
    case Kind::Square: return base[t.first] + "^2";
    case Kind::Product: return base[t.first] + "*" + base[t.second];
  }
  return {};
}

struct RowLess {
  bool operator()(const std::vector<double>& a, const std::vector<double>& b) const {
    return a < b;
  }
};

Eigen::MatrixXd distinct_rows(const Eigen::MatrixXd& rows) {
  std::set<std::vector<double>, RowLess> seen;
  std::vector<Index> keep;
  for (Index i = 0; i < rows.rows(); ++i) {
    std::vector<double> r(rows.cols());
    for (Index c = 0; c < rows.cols(); ++c) r[c] = rows(i, c);
    if (seen.insert(r).second) keep.push_back(i);
  }
  Eigen::MatrixXd out(static_cast<Index>(keep.size()), rows.cols());
  for (size_t k = 0; k < keep.size(); ++k) out.row(static_cast<Index>(k)) = rows.row(keep[k]);
  return out;
}

}  // namespace

CovariateExpansion::CovariateExpansion(std::vector<std::string> base_names,
                                       std::vector<ExpansionTerm> terms)
    : base_names_(std::move(base_names)), terms_(std::move(terms)) {
  if (terms_.empty() || terms_[0].kind != Kind::Constant) {
    throw std::invalid_argument("covariate expansion must start with the constant term");
  }
  const int p = base_dim();
  for (auto& t : terms_) {
    auto check = [&](int idx) {
      if (idx < 1 || idx >= p) {
        throw std::invalid_argument("expansion term references base variable " +
                                    std::to_string(idx) + " outside 1.." +
                                    std::to_string(p - 1));
      }
    };
    switch (t.kind) {
      case Kind::Constant: break;
      case Kind::Copy:
      case Kind::Square: check(t.first); break;
      case Kind::Product:
        check(t.first);
        check(t.second);
        break;
    }
    if (t.name.empty()) t.name = default_term_name(t, base_names_);
  }
}

CovariateExpansion CovariateExpansion::affine(std::vector<std::string> base_names) {
  std::vector<ExpansionTerm> terms;
  terms.push_back({Kind::Constant, -1, -1, base_names.empty() ? "const" : base_names[0]});
  for (int i = 1; i < static_cast<int>(base_names.size()); ++i) {
    terms.push_back({Kind::Copy, i, -1, base_names[i]});
  }
  return CovariateExpansion(std::move(base_names), std::move(terms));
}

std::vector<std::string> CovariateExpansion::term_names() const {
  std::vector<std::string> out;
  for (const auto& t : terms_) out.push_back(t.name);
  return out;
}

bool CovariateExpansion::is_affine() const {
  return std::all_of(terms_.begin(), terms_.end(), [](const ExpansionTerm& t) {
    return t.kind == Kind::Constant || t.kind == Kind::Copy;
  });
}

bool CovariateExpansion::has_products() const {
  return std::any_of(terms_.begin(), terms_.end(),
                     [](const ExpansionTerm& t) { return t.kind == Kind::Product; });
}

std::vector<int> CovariateExpansion::referenced_variables() const {
  std::set<int> s;
  for (const auto& t : terms_) {
    if (t.first > 0) s.insert(t.first);
    if (t.second > 0) s.insert(t.second);
  }
  return {s.begin(), s.end()};
}

Eigen::VectorXd CovariateExpansion::apply(const Eigen::Ref<const Eigen::VectorXd>& z) const {
  if (z.size() != base_dim()) throw std::invalid_argument("base covariate vector has wrong length");
  Eigen::VectorXd x(expanded_dim());
  for (int k = 0; k < expanded_dim(); ++k) {
    const auto& t = terms_[k];
    switch (t.kind) {
      case Kind::Constant: x(k) = 1.0; break;
      case Kind::Copy: x(k) = z(t.first); break;
      case Kind::Square: x(k) = z(t.first) * z(t.first); break;
      case Kind::Product: x(k) = z(t.first) * z(t.second); break;
    }
  }
  return x;
}

Eigen::MatrixXd CovariateExpansion::apply_rows(const Eigen::Ref<const Eigen::MatrixXd>& z) const {
  Eigen::MatrixXd x(z.rows(), expanded_dim());
  for (Index i = 0; i < z.rows(); ++i) x.row(i) = apply(z.row(i).transpose()).transpose();
  return x;
}

CovariateExpansion CovariateExpansion::select(const std::vector<int>& term_indices) const {
  std::vector<ExpansionTerm> picked;
  for (int idx : term_indices) {
    if (idx < 0 || idx >= expanded_dim()) throw std::invalid_argument("term index out of range");
    picked.push_back(terms_[idx]);
  }
  return CovariateExpansion(base_names_, std::move(picked));
}

int CovariateExpansion::find_term(const std::string& name) const {
  for (int k = 0; k < expanded_dim(); ++k)
    if (terms_[k].name == name) return k;
  return -1;
}

const char* recipe_name(TestSetRecipe r) {
  switch (r) {
    case TestSetRecipe::ObservedDistinct: return "observed-distinct";
    case TestSetRecipe::HyperrectangleVertices: return "hyperrectangle-vertices";
    case TestSetRecipe::QuadraticAugmented: return "quadratic-augmented";
  }
  return "";
}

TestSetRecipe recipe_from_name(const std::string& name) {
  for (auto r : {TestSetRecipe::ObservedDistinct, TestSetRecipe::HyperrectangleVertices,
                 TestSetRecipe::QuadraticAugmented}) {
    if (name == recipe_name(r)) return r;
  }
  throw std::invalid_argument("unknown test-set strategy '" + name + "'");
}

TestSet build_test_set(const CovariateExpansion& expansion,
                       const Eigen::Ref<const Eigen::MatrixXd>& z_data, TestSetRecipe recipe,
                       const std::vector<std::optional<VariableBounds>>& bounds) {
  const int p = expansion.base_dim();
  if (z_data.cols() != p) throw std::invalid_argument("base covariate matrix has wrong width");
  if (z_data.rows() > 0 && (z_data.col(0).array() != 1.0).any()) {
    throw std::invalid_argument("first base covariate must be the constant 1");
  }
  TestSet ts;
  ts.recipe = recipe;

  if (recipe == TestSetRecipe::ObservedDistinct) {
    if (z_data.rows() == 0) throw std::invalid_argument("no data rows for observed-distinct test set");
    ts.points = distinct_rows(expansion.apply_rows(z_data));
    return ts;
  }

  if (recipe == TestSetRecipe::HyperrectangleVertices && !expansion.is_affine()) {
    throw std::invalid_argument(
        "hyperrectangle-vertices needs an affine expansion; use quadratic-augmented or "
        "observed-distinct");
  }
  if (expansion.has_products()) {
    throw std::invalid_argument(
        "interaction terms are only supported with the observed-distinct test set");
  }

  ts.source_bounds.assign(p, std::nullopt);
  const std::vector<int> vars = expansion.referenced_variables();
  std::set<int> squared;
  for (const auto& t : expansion.terms())
    if (t.kind == ExpansionTerm::Kind::Square) squared.insert(t.first);

  // Per variable: candidate (Z_s, Z_s^2) pairs whose hull covers the curve over [l, u].
  std::vector<std::vector<std::pair<double, double>>> options;
  Index total = 1;
  for (int s : vars) {
    VariableBounds b{};
    if (s < static_cast<int>(bounds.size()) && bounds[s]) {
      b = *bounds[s];
    } else {
      if (z_data.rows() == 0) {
        throw std::invalid_argument("no bounds given for variable '" + expansion.base_names()[s] +
                                    "' and no data to derive them from");
      }
      b = {z_data.col(s).minCoeff(), z_data.col(s).maxCoeff()};
    }
    if (!(b.lower <= b.upper)) {
      throw std::invalid_argument("empty bounds for variable '" + expansion.base_names()[s] + "'");
    }
    ts.source_bounds[s] = b;
    std::vector<std::pair<double, double>> opt{{b.lower, b.lower * b.lower},
                                               {b.upper, b.upper * b.upper}};
    if (squared.count(s)) opt.push_back({(b.lower + b.upper) / 2.0, b.lower * b.upper});
    total *= static_cast<Index>(opt.size());
    if (total > kMaxVertexPoints) {
      throw std::invalid_argument(
          "vertex enumeration exceeds 2^20 points; use the observed-distinct test set");
    }
    options.push_back(std::move(opt));
  }

  Eigen::MatrixXd pts(total, expansion.expanded_dim());
  std::vector<size_t> counter(vars.size(), 0);
  std::map<int, size_t> slot;
  for (size_t v = 0; v < vars.size(); ++v) slot[vars[v]] = v;
  for (Index row = 0; row < total; ++row) {
    for (int k = 0; k < expansion.expanded_dim(); ++k) {
      const auto& t = expansion.terms()[k];
      switch (t.kind) {
        case ExpansionTerm::Kind::Constant: pts(row, k) = 1.0; break;
        case ExpansionTerm::Kind::Copy: pts(row, k) = options[slot[t.first]][counter[slot[t.first]]].first; break;
        case ExpansionTerm::Kind::Square: pts(row, k) = options[slot[t.first]][counter[slot[t.first]]].second; break;
        case ExpansionTerm::Kind::Product: break;
      }
    }
    for (size_t v = 0; v < counter.size(); ++v) {
      if (++counter[v] < options[v].size()) break;
      counter[v] = 0;
    }
  }
  ts.points = distinct_rows(pts);
  return ts;
}

void validate_test_set(const TestSet& ts) {
  if (ts.points.rows() == 0 || ts.points.cols() == 0) throw std::invalid_argument("empty test set");
  if ((ts.points.col(0).array() != 1.0).any()) {
    throw std::invalid_argument("test set first column must be all 1");
  }
  if (distinct_rows(ts.points).rows() != ts.points.rows()) {
    throw std::invalid_argument("test set rows must be distinct");
  }
}

QuadraticCoefficients quadratic_from_three_points(double f_neg1, double f_0, double f_1) {
  return {(f_1 + f_neg1 - 2.0 * f_0) / 2.0, (f_1 - f_neg1) / 2.0, f_0};
}

RhoInterval rho_roots(const QuadraticCoefficients& q) {
  if (!(q.c < 0.0)) throw InfeasibleState("determinant is not concave in the correlation");
  const double disc = q.d * q.d - 4.0 * q.c * q.e;
  if (disc < 0.0) throw InfeasibleState("determinant has no real roots");
  return {-q.d / (2.0 * q.c), std::sqrt(disc / (4.0 * q.c * q.c))};
}

RhoInterval rho_interval_from_cholesky(const CholeskyFactor& gamma_tilde) {
  return linalg::rho_interval_from_factor(gamma_tilde.gamma);
}

RhoInterval rho_interval_by_determinant(const Eigen::MatrixXd& matrix, Index k1, Index k2) {
  Eigen::MatrixXd m = matrix;
  auto f = [&](double r) {
    m(k1, k2) = r;
    m(k2, k1) = r;
    return m.partialPivLu().determinant();
  };
  const double fm = f(-1.0), f0 = f(0.0), fp = f(1.0);
  return rho_roots(quadratic_from_three_points(fm, f0, fp));
}

RhoInterval rho_interval_at(const CholeskyFactor& factor, Index k1, Index k2) {
  if (k1 < k2) std::swap(k1, k2);
  return rho_interval_from_cholesky(linalg::move_target_to_last(factor, k1, k2));
}

FeasibleInterval intersect_alpha_interval(const Eigen::Ref<const Eigen::MatrixXd>& alpha, Index l,
                                          Index m, const Eigen::Ref<const Eigen::MatrixXd>& points,
                                          const std::vector<RhoInterval>& rho_bounds) {
  FeasibleInterval out;
  for (Index j = 0; j < points.rows(); ++j) {
    const double xm = points(j, m);
    if (xm == 0.0) continue;
    const double rest = alpha.row(l).dot(points.row(j)) - alpha(l, m) * xm;
    const auto& rb = rho_bounds[static_cast<size_t>(j)];
    double a = (rb.center - rest - rb.half_width) / xm;
    double b = (rb.center - rest + rb.half_width) / xm;
    if (a > b) std::swap(a, b);
    out.lo = std::max(out.lo, a);
    out.hi = std::min(out.hi, b);
  }
  if (!out.contains(alpha(l, m))) {
    throw InfeasibleState("feasible interval for alpha(" + std::to_string(l) + "," +
                          std::to_string(m) + ") does not contain the current value");
  }
  return out;
}

FeasibleInterval alpha_interval(const Eigen::Ref<const Eigen::MatrixXd>& alpha, Index l, Index m,
                                const TestSet& test_points,
                                const std::vector<CholeskyFactor>& factors) {
  const Index dim = linalg::dim_from_pair_count(alpha.rows());
  if (test_points.width() != alpha.cols()) throw std::invalid_argument("test set width mismatch");
  if (static_cast<Index>(factors.size()) != test_points.size()) {
    throw std::invalid_argument("one factor per test point required");
  }
  const auto pos = linalg::pair_position(dim, l);
  std::vector<RhoInterval> rb(factors.size(), RhoInterval{0.0, 0.0});
  for (Index j = 0; j < test_points.size(); ++j) {
    if (test_points.points(j, m) != 0.0) rb[j] = rho_interval_at(factors[j], pos.row, pos.col);
  }
  return intersect_alpha_interval(alpha, l, m, test_points.points, rb);
}

Eigen::MatrixXd correlation_at(const Eigen::Ref<const Eigen::MatrixXd>& alpha,
                               const Eigen::Ref<const Eigen::VectorXd>& x, Index dim) {
  return linalg::assemble_matrix(linalg::CorrelationVector(alpha * x, dim));
}

std::vector<Index> infeasible_points(const Eigen::Ref<const Eigen::MatrixXd>& alpha,
                                     const Eigen::Ref<const Eigen::MatrixXd>& points) {
  if (points.cols() != alpha.cols()) throw std::invalid_argument("test set width mismatch");
  const Index dim = linalg::dim_from_pair_count(alpha.rows());
  std::vector<Index> bad;
  for (Index j = 0; j < points.rows(); ++j) {
    if (!linalg::try_cholesky(correlation_at(alpha, points.row(j).transpose(), dim))) {
      bad.push_back(j);
    }
  }
  return bad;
}

bool is_feasible(const Eigen::Ref<const Eigen::MatrixXd>& alpha, const TestSet& test_points) {
  return infeasible_points(alpha, test_points.points).empty();
}

}  // namespace corrgress
