#pragma once

#include <optional>
#include <stdexcept>

#include <Eigen/Core>

namespace corrgress::linalg {

using Index = Eigen::Index;

/// Smallest admissible Cholesky pivot (the Schur complement before the square root).
inline constexpr double kPivotFloor = 1e-12;

/// Denominator magnitude below which a Sherman-Morrison step is treated as singular.
inline constexpr double kSingularFloor = 1e-14;

class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularUpdate : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A Cholesky downdate lost positive definiteness.
class InfeasiblePerturbation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Zero-based (row, col) position of a correlation in the strict lower triangle.
struct PairPosition {
  Index row;
  Index col;
};

constexpr Index pair_count(Index dim) { return dim * (dim - 1) / 2; }

/// Inverse of pair_count; throws std::invalid_argument if `pairs` is not triangular.
Index dim_from_pair_count(Index pairs);

/// Lower triangle, column-major: for K=4 the order is (2,1),(3,1),(4,1),(3,2),(4,2),(4,3)
/// in one-based terms.
PairPosition pair_position(Index dim, Index pair);
Index pair_index(Index dim, Index row, Index col);

struct CorrelationVector {
  Eigen::VectorXd values;
  Index dim = 0;

  /// Throws std::invalid_argument when values.size() != dim*(dim-1)/2.
  CorrelationVector(Eigen::VectorXd v, Index k);
};

/// Symmetric unit-diagonal matrix; no definiteness check.
Eigen::MatrixXd assemble_matrix(const CorrelationVector& rho);

/// Extracts the correlation vector of a square matrix.
CorrelationVector correlations_of(const Eigen::MatrixXd& matrix);

/// Upper-triangular factor with gamma^T gamma equal to the factored matrix.
struct CholeskyFactor {
  Eigen::MatrixXd gamma;

  Index dim() const { return gamma.rows(); }
  Eigen::MatrixXd reconstruct() const { return gamma.transpose() * gamma; }
};

/// Returns std::nullopt when a pivot falls to kPivotFloor or below.
/// Throws std::invalid_argument for non-square, non-symmetric or non-unit-diagonal input.
std::optional<CholeskyFactor> try_cholesky(const Eigen::MatrixXd& matrix);

/// Same factorization without the unit-diagonal requirement (used for covariance matrices).
std::optional<CholeskyFactor> try_cholesky_general(const Eigen::MatrixXd& matrix);

/// A correlation matrix together with its inverse and determinant.
struct CorrelationState {
  Eigen::MatrixXd matrix;
  Eigen::MatrixXd inverse;
  double det = 1.0;

  Index dim() const { return matrix.rows(); }

  /// Dense factorization; throws NotPositiveDefinite.
  static CorrelationState from_matrix(const Eigen::MatrixXd& matrix);
};

/// Sherman-Morrison inverse and matrix-determinant-lemma update for matrix + u v^T.
/// Throws SingularUpdate when |1 + v^T inverse u| < kSingularFloor.
CorrelationState rank1_inverse_det_update(const CorrelationState& state,
                                          const Eigen::VectorXd& u,
                                          const Eigen::VectorXd& v);

/// Adds eps to entries (k1,k2) and (k2,k1) through two rank-1 updates.
CorrelationState perturb_offdiagonal(const CorrelationState& state, Index k1, Index k2,
                                     double eps);

/// Factor of gamma^T gamma + sign * w w^T. Throws InfeasiblePerturbation when a
/// downdate drives a pivot to kPivotFloor or below.
CholeskyFactor chol_rank1_modify(const CholeskyFactor& factor, const Eigen::VectorXd& w,
                                 int sign);

/// Factor of the matrix with entries (k1,k2) and (k2,k1) increased by eps, computed
/// with three rank-1 modifications.
CholeskyFactor perturb_offdiagonal_chol(const CholeskyFactor& factor, Index k1, Index k2,
                                        double eps);

/// Factor of P^T R P where P moves index k2 to position K-2 and k1 to K-1 (zero-based),
/// keeping the remaining indices in order. Requires k1 > k2.
CholeskyFactor move_target_to_last(const CholeskyFactor& factor, Index k1, Index k2);

/// Permutation used by move_target_to_last: perm[new_position] = old_index.
Eigen::VectorXi target_last_permutation(Index dim, Index k1, Index k2);

// ---------------------------------------------------------------------------
// In-place kernels for the sampler hot loop. Inputs are column-major K x K buffers.

/// Applies perturb_offdiagonal to (inverse, det). Returns false (buffers untouched)
/// when either Sherman-Morrison denominator is below kSingularFloor.
bool perturb_inverse_inplace(Eigen::Ref<Eigen::MatrixXd> inverse, double& det, Index k1,
                             Index k2, double eps, Eigen::Ref<Eigen::VectorXd> scratch_col,
                             Eigen::Ref<Eigen::VectorXd> scratch_row);

/// Rank-1 modification of an upper factor; `work` is consumed. Returns false on a
/// failed downdate, in which case `gamma` is left partially modified.
bool chol_rank1_modify_inplace(Eigen::Ref<Eigen::MatrixXd> gamma,
                               Eigen::Ref<Eigen::VectorXd> work, int sign);

/// Three-step off-diagonal perturbation of an upper factor. Returns false on failure;
/// `gamma` is then unspecified and must be restored by the caller.
bool perturb_chol_inplace(Eigen::Ref<Eigen::MatrixXd> gamma, Index k1, Index k2, double eps,
                          Eigen::Ref<Eigen::VectorXd> work);

/// (g, h) with the feasible range of the (K-1, K-2) entry equal to (g - h, g + h).
struct RhoInterval {
  double center;
  double half_width;
};

/// Interval for the correlation stored at (K-1, K-2), read off an upper factor.
RhoInterval rho_interval_from_factor(const Eigen::Ref<const Eigen::MatrixXd>& gamma);

/// Givens re-triangularization used by move_target_to_last, writing into `out`.
void move_target_to_last_into(const Eigen::Ref<const Eigen::MatrixXd>& gamma, Index k1,
                              Index k2, Eigen::Ref<Eigen::MatrixXd> out);

}  // namespace corrgress::linalg
