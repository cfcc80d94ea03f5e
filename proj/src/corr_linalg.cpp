#include "corrgress/corr_linalg.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>

namespace corrgress::linalg {

namespace {

constexpr double kSymmetryTol = 1e-12;

void require_square(const Eigen::MatrixXd& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument(std::string(what) + ": matrix is not square");
  }
}

void require_pair(Index dim, Index k1, Index k2) {
  if (k1 < 0 || k2 < 0 || k1 >= dim || k2 >= dim) {
    throw std::invalid_argument("index pair out of range");
  }
  if (k1 == k2) throw std::invalid_argument("off-diagonal perturbation needs k1 != k2");
}

std::optional<CholeskyFactor> factor_upper(const Eigen::MatrixXd& m) {
  const Index k = m.rows();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(k, k);
  for (Index j = 0; j < k; ++j) {
    for (Index i = 0; i < j; ++i) {
      double s = m(i, j);
      for (Index r = 0; r < i; ++r) s -= g(r, i) * g(r, j);
      g(i, j) = s / g(i, i);
    }
    double pivot = m(j, j);
    for (Index r = 0; r < j; ++r) pivot -= g(r, j) * g(r, j);
    if (!(pivot > kPivotFloor)) return std::nullopt;
    g(j, j) = std::sqrt(pivot);
  }
  return CholeskyFactor{std::move(g)};
}

}  // namespace

Index dim_from_pair_count(Index pairs) {
  if (pairs < 0) throw std::invalid_argument("negative correlation count");
  Index k = static_cast<Index>(std::llround((1.0 + std::sqrt(1.0 + 8.0 * double(pairs))) / 2.0));
  if (pair_count(k) != pairs) {
    throw std::invalid_argument("correlation count " + std::to_string(pairs) +
                                " is not K(K-1)/2 for any K");
  }
  return k;
}

PairPosition pair_position(Index dim, Index pair) {
  if (pair < 0 || pair >= pair_count(dim)) throw std::invalid_argument("pair index out of range");
  Index col = 0;
  Index remaining = pair;
  while (remaining >= dim - 1 - col) {
    remaining -= dim - 1 - col;
    ++col;
  }
  return {col + 1 + remaining, col};
}

Index pair_index(Index dim, Index row, Index col) {
  if (row < col) std::swap(row, col);
  if (row == col || row >= dim || col < 0) throw std::invalid_argument("invalid pair position");
  return col * dim - col * (col + 1) / 2 + (row - col - 1);
}

CorrelationVector::CorrelationVector(Eigen::VectorXd v, Index k) : values(std::move(v)), dim(k) {
  if (k < 1 || values.size() != pair_count(k)) {
    throw std::invalid_argument("correlation vector has " + std::to_string(values.size()) +
                                " entries, expected " + std::to_string(pair_count(k)));
  }
}

Eigen::MatrixXd assemble_matrix(const CorrelationVector& rho) {
  const Index k = rho.dim;
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(k, k);
  Index l = 0;
  for (Index c = 0; c < k; ++c) {
    for (Index r = c + 1; r < k; ++r, ++l) {
      m(r, c) = rho.values(l);
      m(c, r) = rho.values(l);
    }
  }
  return m;
}

CorrelationVector correlations_of(const Eigen::MatrixXd& matrix) {
  require_square(matrix, "correlations_of");
  const Index k = matrix.rows();
  Eigen::VectorXd v(pair_count(k));
  Index l = 0;
  for (Index c = 0; c < k; ++c)
    for (Index r = c + 1; r < k; ++r) v(l++) = matrix(r, c);
  return CorrelationVector(std::move(v), k);
}

std::optional<CholeskyFactor> try_cholesky(const Eigen::MatrixXd& matrix) {
  require_square(matrix, "try_cholesky");
  for (Index i = 0; i < matrix.rows(); ++i) {
    if (std::abs(matrix(i, i) - 1.0) > kSymmetryTol) {
      throw std::invalid_argument("try_cholesky: diagonal entry " + std::to_string(i) +
                                  " is not 1");
    }
  }
  if ((matrix - matrix.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol) {
    throw std::invalid_argument("try_cholesky: matrix is not symmetric");
  }
  return factor_upper(matrix);
}

std::optional<CholeskyFactor> try_cholesky_general(const Eigen::MatrixXd& matrix) {
  require_square(matrix, "try_cholesky_general");
  return factor_upper(matrix);
}

CorrelationState CorrelationState::from_matrix(const Eigen::MatrixXd& matrix) {
  require_square(matrix, "CorrelationState");
  Eigen::LLT<Eigen::MatrixXd> llt(matrix);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("correlation matrix is not PD");
  const Eigen::VectorXd d = llt.matrixLLT().diagonal();
  if ((d.array() * d.array()).minCoeff() <= kPivotFloor) {
    throw NotPositiveDefinite("correlation matrix is numerically singular");
  }
  CorrelationState s;
  s.matrix = matrix;
  s.inverse = llt.solve(Eigen::MatrixXd::Identity(matrix.rows(), matrix.cols()));
  s.det = d.array().square().prod();
  return s;
}

CorrelationState rank1_inverse_det_update(const CorrelationState& state,
                                          const Eigen::VectorXd& u,
                                          const Eigen::VectorXd& v) {
  const Eigen::VectorXd bu = state.inverse * u;
  const Eigen::RowVectorXd vb = v.transpose() * state.inverse;
  const double denom = 1.0 + v.dot(bu);
  if (std::abs(denom) < kSingularFloor) throw SingularUpdate("rank-1 update makes matrix singular");
  CorrelationState out;
  out.matrix = state.matrix + u * v.transpose();
  out.inverse = state.inverse - (bu * vb) / denom;
  out.det = denom * state.det;
  return out;
}

CorrelationState perturb_offdiagonal(const CorrelationState& state, Index k1, Index k2,
                                     double eps) {
  require_pair(state.dim(), k1, k2);
  CorrelationState out = state;
  if (eps == 0.0) return out;
  Eigen::VectorXd col(state.dim()), row(state.dim());
  if (!perturb_inverse_inplace(out.inverse, out.det, k1, k2, eps, col, row)) {
    throw SingularUpdate("off-diagonal perturbation makes matrix singular");
  }
  out.matrix(k1, k2) += eps;
  out.matrix(k2, k1) += eps;
  return out;
}

bool perturb_inverse_inplace(Eigen::Ref<Eigen::MatrixXd> inverse, double& det, Index k1,
                             Index k2, double eps, Eigen::Ref<Eigen::VectorXd> scratch_col,
                             Eigen::Ref<Eigen::VectorXd> scratch_row) {
  // First step adds eps e_k1 e_k2^T, second adds eps e_k2 e_k1^T.
  const double den1 = 1.0 + eps * inverse(k2, k1);
  if (std::abs(den1) < kSingularFloor) return false;
  const double b12_after = inverse(k1, k2) - eps * inverse(k1, k1) * inverse(k2, k2) / den1;
  const double den2 = 1.0 + eps * b12_after;
  if (std::abs(den2) < kSingularFloor) return false;

  scratch_col = inverse.col(k1);
  scratch_row = inverse.row(k2).transpose();
  inverse.noalias() -= (eps / den1) * scratch_col * scratch_row.transpose();

  scratch_col = inverse.col(k2);
  scratch_row = inverse.row(k1).transpose();
  inverse.noalias() -= (eps / den2) * scratch_col * scratch_row.transpose();

  det *= den1 * den2;
  return true;
}

bool chol_rank1_modify_inplace(Eigen::Ref<Eigen::MatrixXd> gamma,
                               Eigen::Ref<Eigen::VectorXd> work, int sign) {
  const Index k = gamma.rows();
  const double sg = sign >= 0 ? 1.0 : -1.0;
  for (Index j = 0; j < k; ++j) {
    const double xj = work(j);
    if (xj == 0.0) continue;
    const double gjj = gamma(j, j);
    const double r2 = gjj * gjj + sg * xj * xj;
    if (!(r2 > kPivotFloor)) return false;
    const double r = std::sqrt(r2);
    const double c = r / gjj;
    const double s = xj / gjj;
    gamma(j, j) = r;
    for (Index i = j + 1; i < k; ++i) {
      const double updated = (gamma(j, i) + sg * s * work(i)) / c;
      work(i) = c * work(i) - s * updated;
      gamma(j, i) = updated;
    }
  }
  return true;
}

CholeskyFactor chol_rank1_modify(const CholeskyFactor& factor, const Eigen::VectorXd& w,
                                 int sign) {
  if (w.size() != factor.dim()) throw std::invalid_argument("update vector has wrong length");
  CholeskyFactor out = factor;
  Eigen::VectorXd work = w;
  if (!chol_rank1_modify_inplace(out.gamma, work, sign)) {
    throw InfeasiblePerturbation("Cholesky downdate lost positive definiteness");
  }
  return out;
}

bool perturb_chol_inplace(Eigen::Ref<Eigen::MatrixXd> gamma, Index k1, Index k2, double eps,
                          Eigen::Ref<Eigen::VectorXd> work) {
  if (eps == 0.0) return true;
  const double a = std::sqrt(std::abs(eps));
  auto apply = [&](bool both, Index single, int sign) {
    work.setZero();
    if (both) {
      work(k1) = a;
      work(k2) = a;
    } else {
      work(single) = a;
    }
    return chol_rank1_modify_inplace(gamma, work, sign);
  };
  if (eps > 0) {
    return apply(true, 0, +1) && apply(false, k1, -1) && apply(false, k2, -1);
  }
  // For eps < 0 the two single-index updates go first so the only downdate is the last
  // step, whose result is the target matrix itself.
  return apply(false, k1, +1) && apply(false, k2, +1) && apply(true, 0, -1);
}

CholeskyFactor perturb_offdiagonal_chol(const CholeskyFactor& factor, Index k1, Index k2,
                                        double eps) {
  require_pair(factor.dim(), k1, k2);
  CholeskyFactor out = factor;
  Eigen::VectorXd work(factor.dim());
  if (!perturb_chol_inplace(out.gamma, k1, k2, eps, work)) {
    throw InfeasiblePerturbation("perturbed matrix is not positive definite");
  }
  return out;
}

Eigen::VectorXi target_last_permutation(Index dim, Index k1, Index k2) {
  Eigen::VectorXi perm(dim);
  Index pos = 0;
  for (Index i = 0; i < dim; ++i) {
    if (i != k1 && i != k2) perm(pos++) = static_cast<int>(i);
  }
  perm(dim - 2) = static_cast<int>(k2);
  perm(dim - 1) = static_cast<int>(k1);
  return perm;
}

void move_target_to_last_into(const Eigen::Ref<const Eigen::MatrixXd>& gamma, Index k1,
                              Index k2, Eigen::Ref<Eigen::MatrixXd> out) {
  const Index k = gamma.rows();
  Index pos = 0;
  for (Index i = 0; i < k; ++i) {
    if (i != k1 && i != k2) out.col(pos++) = gamma.col(i);
  }
  out.col(k - 2) = gamma.col(k2);
  out.col(k - 1) = gamma.col(k1);

  // Columns past the moved ones carry at most two sub-diagonal entries; zeros are skipped.
  for (Index j = 0; j < k; ++j) {
    for (Index i = k - 1; i > j; --i) {
      const double b = out(i, j);
      if (b == 0.0) continue;
      const double a = out(i - 1, j);
      const double r = std::hypot(a, b);
      const double c = a / r;
      const double s = b / r;
      for (Index col = j; col < k; ++col) {
        const double top = out(i - 1, col);
        const double bot = out(i, col);
        out(i - 1, col) = c * top + s * bot;
        out(i, col) = -s * top + c * bot;
      }
      out(i, j) = 0.0;
    }
  }
  for (Index i = 0; i < k; ++i) {
    if (out(i, i) < 0) out.row(i).rightCols(k - i) *= -1.0;
  }
}

CholeskyFactor move_target_to_last(const CholeskyFactor& factor, Index k1, Index k2) {
  const Index k = factor.dim();
  if (k < 2 || k1 <= k2 || k2 < 0 || k1 >= k) {
    throw std::invalid_argument("move_target_to_last: need 0 <= k2 < k1 < K");
  }
  if (k1 == k - 1 && k2 == k - 2) return factor;
  CholeskyFactor out{Eigen::MatrixXd::Zero(k, k)};
  move_target_to_last_into(factor.gamma, k1, k2, out.gamma);
  return out;
}

RhoInterval rho_interval_from_factor(const Eigen::Ref<const Eigen::MatrixXd>& gamma) {
  const Index k = gamma.rows();
  if (k < 2) throw std::invalid_argument("need at least a 2x2 factor");
  double g = 0.0;
  double ss = 0.0;
  for (Index r = 0; r + 2 < k; ++r) {
    g += gamma(r, k - 2) * gamma(r, k - 1);
    ss += gamma(r, k - 1) * gamma(r, k - 1);
  }
  double rad = 1.0 - ss;
  if (rad < 0.0) {
    if (rad < -1e-10) throw NotPositiveDefinite("factor does not have a unit diagonal");
    rad = 0.0;
  }
  return {g, gamma(k - 2, k - 2) * std::sqrt(rad)};
}

}  // namespace corrgress::linalg
