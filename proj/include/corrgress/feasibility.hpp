#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corrgress/corr_linalg.hpp"

namespace corrgress {

using linalg::CholeskyFactor;
using linalg::Index;
using linalg::RhoInterval;

/// One column of X expressed through the base variables Z (Z index 0 is the constant).
struct ExpansionTerm {
  enum class Kind { Constant, Copy, Square, Product };
  Kind kind = Kind::Constant;
  int first = -1;
  int second = -1;
  std::string name;
};

class CovariateExpansion {
 public:
  CovariateExpansion() = default;
  /// Throws std::invalid_argument if the first term is not the constant or an index is
  /// out of range.
  CovariateExpansion(std::vector<std::string> base_names, std::vector<ExpansionTerm> terms);

  /// Identity expansion X = Z.
  static CovariateExpansion affine(std::vector<std::string> base_names);

  int base_dim() const { return static_cast<int>(base_names_.size()); }
  int expanded_dim() const { return static_cast<int>(terms_.size()); }
  const std::vector<std::string>& base_names() const { return base_names_; }
  const std::vector<ExpansionTerm>& terms() const { return terms_; }
  std::vector<std::string> term_names() const;

  bool is_affine() const;
  bool has_products() const;

  /// Base variables referenced by some non-constant term, in increasing order.
  std::vector<int> referenced_variables() const;

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& z) const;
  Eigen::MatrixXd apply_rows(const Eigen::Ref<const Eigen::MatrixXd>& z) const;

  /// Expansion restricted to a subset of terms (used to extract the correlation covariates).
  CovariateExpansion select(const std::vector<int>& term_indices) const;

  /// Term index by name, or -1.
  int find_term(const std::string& name) const;

 private:
  std::vector<std::string> base_names_;
  std::vector<ExpansionTerm> terms_;
};

enum class TestSetRecipe { ObservedDistinct, HyperrectangleVertices, QuadraticAugmented };

const char* recipe_name(TestSetRecipe r);
TestSetRecipe recipe_from_name(const std::string& name);

struct VariableBounds {
  double lower;
  double upper;
};

struct TestSet {
  Eigen::MatrixXd points;  ///< T x q, first column all 1
  TestSetRecipe recipe = TestSetRecipe::ObservedDistinct;
  /// Indexed by base variable; entries for variables without bounds are unset.
  std::vector<std::optional<VariableBounds>> source_bounds;

  Index size() const { return points.rows(); }
  Index width() const { return points.cols(); }
};

/// Largest number of points vertex enumeration will produce.
inline constexpr Index kMaxVertexPoints = Index(1) << 20;

/// Builds the test set. For the vertex recipes `bounds` is indexed by base variable;
/// missing entries are filled from the data range. Throws std::invalid_argument for
/// non-affine expansions under the hyperrectangle recipe, product terms under either
/// vertex recipe, and enumerations above kMaxVertexPoints.
TestSet build_test_set(const CovariateExpansion& expansion,
                       const Eigen::Ref<const Eigen::MatrixXd>& z_data, TestSetRecipe recipe,
                       const std::vector<std::optional<VariableBounds>>& bounds = {});

/// Validates the TestSet invariants (first column 1, distinct rows).
void validate_test_set(const TestSet& ts);

/// Open interval; either end may be infinite.
struct FeasibleInterval {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();

  bool contains(double x) const { return lo < x && x < hi; }
};

class InfeasibleState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuadraticCoefficients {
  double c;
  double d;
  double e;
};

/// Coefficients of the determinant as a quadratic in one correlation, from its values
/// at -1, 0 and 1.
QuadraticCoefficients quadratic_from_three_points(double f_neg1, double f_0, double f_1);

/// Centre and half-width of the root interval. Throws InfeasibleState when c >= 0 or the
/// discriminant is negative.
RhoInterval rho_roots(const QuadraticCoefficients& q);

/// Interval for the correlation at (K-1, K-2) of a factor prepared by move_target_to_last.
RhoInterval rho_interval_from_cholesky(const CholeskyFactor& gamma_tilde);

/// Same interval for position (k1, k2) of a dense matrix via three determinants.
RhoInterval rho_interval_by_determinant(const Eigen::MatrixXd& matrix, Index k1, Index k2);

/// Interval for one correlation at position (k1, k2) from the unpermuted factor.
RhoInterval rho_interval_at(const CholeskyFactor& factor, Index k1, Index k2);

/// Intersects the per-point intervals for alpha(l, m). `rho_bounds[j]` is only read for
/// points with a nonzero entry in column m. Throws InfeasibleState if the result does not
/// strictly contain the current coefficient.
FeasibleInterval intersect_alpha_interval(const Eigen::Ref<const Eigen::MatrixXd>& alpha, Index l,
                                          Index m, const Eigen::Ref<const Eigen::MatrixXd>& points,
                                          const std::vector<RhoInterval>& rho_bounds);

/// Feasible range of alpha(l, m) with every other coefficient held fixed. `factors[j]` is
/// the Cholesky factor of R(alpha^T X_j).
FeasibleInterval alpha_interval(const Eigen::Ref<const Eigen::MatrixXd>& alpha, Index l, Index m,
                                const TestSet& test_points,
                                const std::vector<CholeskyFactor>& factors);

/// Correlation matrix at one covariate point.
Eigen::MatrixXd correlation_at(const Eigen::Ref<const Eigen::MatrixXd>& alpha,
                               const Eigen::Ref<const Eigen::VectorXd>& x, Index dim);

bool is_feasible(const Eigen::Ref<const Eigen::MatrixXd>& alpha, const TestSet& test_points);

/// Rows of the test set at which the correlation matrix is not positive definite.
std::vector<Index> infeasible_points(const Eigen::Ref<const Eigen::MatrixXd>& alpha,
                                     const Eigen::Ref<const Eigen::MatrixXd>& points);

}  // namespace corrgress
