#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"

#include "corrgress/corr_linalg.hpp"
#include "stats.hpp"

using namespace corrgress::linalg;
using corrgress::testing::random_correlation;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

// Independent oracle: smallest eigenvalue from a dense symmetric eigensolver.
double min_eigenvalue(const MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

MatrixXd symmetric_permutation(const MatrixXd& r, const std::vector<Index>& order) {
  const Index k = r.rows();
  MatrixXd out(k, k);
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b) out(a, b) = r(order[a], order[b]);
  return out;
}

}  // namespace

TEST_CASE("pair ordering is lower triangle by column") {
  const Index expected[6][2] = {{1, 0}, {2, 0}, {3, 0}, {2, 1}, {3, 1}, {3, 2}};
  for (Index l = 0; l < 6; ++l) {
    const auto p = pair_position(4, l);
    CHECK(p.row == expected[l][0]);
    CHECK(p.col == expected[l][1]);
    CHECK(pair_index(4, p.row, p.col) == l);
  }
  CHECK(dim_from_pair_count(6) == 4);
  CHECK_THROWS_AS(dim_from_pair_count(5), std::invalid_argument);
}

TEST_CASE("assemble_matrix") {
  SUBCASE("zero correlations give the identity") {
    CHECK(assemble_matrix({VectorXd::Zero(1), 2}).isIdentity());
  }
  SUBCASE("K=4 entry (3,2) holds the fourth correlation") {
    VectorXd rho(6);
    rho << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
    const MatrixXd m = assemble_matrix({rho, 4});
    CHECK(m(2, 1) == 0.4);
    CHECK(m(1, 2) == 0.4);
    CHECK(m.diagonal().isOnes());
  }
  SUBCASE("K=3 placement") {
    VectorXd rho(3);
    rho << 0.5, 0.2, -0.1;
    const MatrixXd m = assemble_matrix({rho, 3});
    CHECK(m(2, 0) == 0.2);
    CHECK(m(2, 1) == -0.1);
    CHECK(m(1, 0) == 0.5);
  }
  SUBCASE("length mismatch") { CHECK_THROWS_AS(CorrelationVector(VectorXd::Zero(4), 3), std::invalid_argument); }
  SUBCASE("correlations_of inverts assembly") {
    const MatrixXd r = random_correlation(5, 3);
    CHECK(max_abs(assemble_matrix(correlations_of(r)) - r) == 0.0);
  }
}

TEST_CASE("try_cholesky") {
  SUBCASE("identity") {
    const auto f = try_cholesky(MatrixXd::Identity(3, 3));
    REQUIRE(f);
    CHECK(f->gamma.isIdentity());
  }
  SUBCASE("indefinite 3x3") {
    MatrixXd m(3, 3);
    m << 1, 0.9, 0.9, 0.9, 1, -0.9, 0.9, -0.9, 1;
    CHECK(m.determinant() == doctest::Approx(-2.888).epsilon(1e-12));
    CHECK_FALSE(try_cholesky(m));
  }
  SUBCASE("K=2, rho=0.6") {
    MatrixXd m(2, 2);
    m << 1, 0.6, 0.6, 1;
    const auto f = try_cholesky(m);
    REQUIRE(f);
    CHECK(f->gamma(0, 0) == doctest::Approx(1.0));
    CHECK(f->gamma(0, 1) == doctest::Approx(0.6));
    CHECK(f->gamma(1, 0) == 0.0);
    CHECK(f->gamma(1, 1) == doctest::Approx(0.8).epsilon(1e-14));
  }
  SUBCASE("input validation") {
    MatrixXd m = MatrixXd::Identity(3, 3);
    m(0, 1) = 0.3;
    CHECK_THROWS_AS(try_cholesky(m), std::invalid_argument);
    m = MatrixXd::Identity(3, 3);
    m(1, 1) = 2.0;
    CHECK_THROWS_AS(try_cholesky(m), std::invalid_argument);
  }
  SUBCASE("succeeds exactly when the smallest eigenvalue is positive") {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> u(-0.95, 0.95);
    int pd = 0, not_pd = 0;
    for (int trial = 0; trial < 2000; ++trial) {
      VectorXd rho(6);
      for (auto& r : rho) r = u(gen);
      const MatrixXd m = assemble_matrix({rho, 4});
      const double lmin = min_eigenvalue(m);
      if (std::abs(lmin) < 1e-9) continue;
      const auto f = try_cholesky(m);
      CHECK(static_cast<bool>(f) == (lmin > 0.0));
      if (f) {
        ++pd;
        CHECK(max_abs(f->reconstruct() - m) < 1e-10);
        CHECK((f->gamma.diagonal().array() > 0.0).all());
      } else {
        ++not_pd;
      }
    }
    CHECK(pd > 100);
    CHECK(not_pd > 100);
  }
}

TEST_CASE("rank1_inverse_det_update") {
  SUBCASE("off-diagonal update of the identity") {
    const auto s = CorrelationState::from_matrix(MatrixXd::Identity(2, 2));
    const VectorXd u = VectorXd::Unit(2, 0), v = VectorXd::Unit(2, 1);
    const auto t = rank1_inverse_det_update(s, u, v);
    CHECK(max_abs(t.inverse - (MatrixXd::Identity(2, 2) - u * v.transpose())) < 1e-15);
    CHECK(t.det == doctest::Approx(1.0));
  }
  SUBCASE("diagonal update") {
    const auto s = CorrelationState::from_matrix(MatrixXd::Identity(2, 2));
    const VectorXd u = VectorXd::Unit(2, 0);
    const auto t = rank1_inverse_det_update(s, u, u);
    CHECK(t.det == doctest::Approx(2.0));
    CHECK(t.inverse(0, 0) == doctest::Approx(0.5));
    CHECK(t.inverse(1, 1) == doctest::Approx(1.0));
    CHECK(t.inverse(0, 1) == 0.0);
  }
  SUBCASE("random K=4 against dense recomputation") {
    std::mt19937_64 gen(5);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (int trial = 0; trial < 50; ++trial) {
      const MatrixXd r = random_correlation(4, 100 + trial);
      VectorXd u(4), v(4);
      for (Index i = 0; i < 4; ++i) {
        u(i) = nd(gen);
        v(i) = nd(gen);
      }
      const auto t = rank1_inverse_det_update(CorrelationState::from_matrix(r), u, v);
      const MatrixXd dense = r + u * v.transpose();
      CHECK(max_abs(t.inverse - dense.inverse()) < 1e-10);
      CHECK(t.det == doctest::Approx(dense.determinant()).epsilon(1e-10));
    }
  }
  SUBCASE("singular update") {
    const auto s = CorrelationState::from_matrix(MatrixXd::Identity(2, 2));
    const VectorXd u = VectorXd::Unit(2, 0);
    CHECK_THROWS_AS(rank1_inverse_det_update(s, u, -u), SingularUpdate);
  }
}

TEST_CASE("perturb_offdiagonal") {
  SUBCASE("eps = 0 leaves the state unchanged") {
    const auto s = CorrelationState::from_matrix(random_correlation(4, 1));
    const auto t = perturb_offdiagonal(s, 2, 1, 0.0);
    CHECK(max_abs(t.matrix - s.matrix) == 0.0);
    CHECK(max_abs(t.inverse - s.inverse) < 1e-15);
    CHECK(t.det == doctest::Approx(s.det).epsilon(1e-15));
  }
  SUBCASE("K=3 identity, (2,1) moved to 0.5") {
    const auto t = perturb_offdiagonal(CorrelationState::from_matrix(MatrixXd::Identity(3, 3)), 1, 0, 0.5);
    CHECK(t.det == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(t.matrix(1, 0) == 0.5);
    CHECK(t.matrix(0, 1) == 0.5);
  }
  SUBCASE("identical indices are rejected") {
    const auto s = CorrelationState::from_matrix(MatrixXd::Identity(3, 3));
    CHECK_THROWS_AS(perturb_offdiagonal(s, 1, 1, 0.1), std::invalid_argument);
  }
  SUBCASE("10,000 random perturbations stay within 1e-8 of dense recomputation") {
    std::mt19937_64 gen(7);
    std::uniform_int_distribution<Index> pick(0, 5);
    std::uniform_real_distribution<double> step(-0.05, 0.05);
    auto state = CorrelationState::from_matrix(MatrixXd::Identity(4, 4));
    int applied = 0;
    for (int s = 0; s < 10000; ++s) {
      const auto p = pair_position(4, pick(gen));
      const double eps = step(gen);
      MatrixXd next = state.matrix;
      next(p.row, p.col) += eps;
      next(p.col, p.row) += eps;
      if (std::abs(next(p.row, p.col)) >= 1.0 || min_eigenvalue(next) < 1e-3) continue;
      state = perturb_offdiagonal(state, p.row, p.col, eps);
      ++applied;
    }
    CHECK(applied > 5000);
    CHECK(max_abs(state.inverse - state.matrix.inverse()) < 1e-8);
    CHECK(std::abs(state.det - state.matrix.determinant()) < 1e-8);
  }
  SUBCASE("commutes with assembly") {
    VectorXd rho(6);
    rho << 0.1, -0.2, 0.3, 0.05, -0.1, 0.2;
    const auto s = CorrelationState::from_matrix(assemble_matrix({rho, 4}));
    for (Index l = 0; l < 6; ++l) {
      const auto p = pair_position(4, l);
      VectorXd moved = rho;
      moved(l) += 0.15;
      const auto t = perturb_offdiagonal(s, p.row, p.col, 0.15);
      CHECK(max_abs(t.matrix - assemble_matrix({moved, 4})) < 1e-12);
      const auto f = perturb_offdiagonal_chol(*try_cholesky(s.matrix), p.row, p.col, 0.15);
      CHECK(max_abs(f.reconstruct() - assemble_matrix({moved, 4})) < 1e-12);
    }
  }
}

TEST_CASE("chol_rank1_modify") {
  SUBCASE("identity update") {
    const CholeskyFactor f{MatrixXd::Identity(2, 2)};
    const auto g = chol_rank1_modify(f, VectorXd::Unit(2, 0), +1);
    CHECK(g.gamma(0, 0) == doctest::Approx(std::sqrt(2.0)));
    CHECK(g.gamma(1, 1) == doctest::Approx(1.0));
    CHECK(std::abs(g.gamma(0, 1)) < 1e-15);
  }
  SUBCASE("update then downdate restores the factor") {
    const CholeskyFactor f = *try_cholesky(random_correlation(4, 9));
    VectorXd w(4);
    w << 0.3, -0.2, 0.5, 0.1;
    const auto g = chol_rank1_modify(chol_rank1_modify(f, w, +1), w, -1);
    CHECK(max_abs(g.gamma - f.gamma) < 1e-10);
  }
  SUBCASE("random K=4 against the dense factor") {
    for (unsigned t = 0; t < 30; ++t) {
      const MatrixXd r = random_correlation(4, 40 + t);
      const CholeskyFactor f = *try_cholesky(r);
      std::mt19937_64 gen(t);
      std::normal_distribution<double> nd(0.0, 0.4);
      VectorXd w(4);
      for (auto& x : w) x = nd(gen);
      const MatrixXd dense = Eigen::LLT<MatrixXd>(r + w * w.transpose()).matrixU();
      CHECK(max_abs(chol_rank1_modify(f, w, +1).gamma - dense) < 1e-8);
    }
  }
  SUBCASE("downdate that breaks definiteness") {
    const CholeskyFactor f{MatrixXd::Identity(2, 2)};
    CHECK_THROWS_AS(chol_rank1_modify(f, 1.5 * VectorXd::Unit(2, 0), -1), InfeasiblePerturbation);
  }
}

TEST_CASE("perturb_offdiagonal_chol") {
  SUBCASE("eps = 0") {
    const CholeskyFactor f = *try_cholesky(random_correlation(4, 2));
    CHECK(max_abs(perturb_offdiagonal_chol(f, 3, 1, 0.0).gamma - f.gamma) < 1e-15);
  }
  SUBCASE("K=3 identity, (2,1) moved to 0.6") {
    const auto g = perturb_offdiagonal_chol(CholeskyFactor{MatrixXd::Identity(3, 3)}, 1, 0, 0.6);
    CHECK(g.reconstruct()(1, 0) == doctest::Approx(0.6).epsilon(1e-14));
  }
  SUBCASE("random feasible sequence on K=4") {
    std::mt19937_64 gen(21);
    std::uniform_int_distribution<Index> pick(0, 5);
    std::uniform_real_distribution<double> step(-0.1, 0.1);
    MatrixXd dense = random_correlation(4, 77);
    CholeskyFactor f = *try_cholesky(dense);
    for (int s = 0; s < 2000; ++s) {
      const auto p = pair_position(4, pick(gen));
      const double eps = step(gen);
      MatrixXd next = dense;
      next(p.row, p.col) += eps;
      next(p.col, p.row) += eps;
      if (std::abs(next(p.row, p.col)) >= 1.0 || min_eigenvalue(next) < 1e-3) continue;
      try {
        f = perturb_offdiagonal_chol(f, p.row, p.col, eps);
        dense = next;
      } catch (const InfeasiblePerturbation&) {
        // A transient downdate failure rejects the move; the factor is unchanged.
      }
    }
    CHECK(max_abs(f.reconstruct() - dense) < 1e-8);
  }
  SUBCASE("in-place kernels match the value versions") {
    const MatrixXd r = random_correlation(5, 12);
    auto s = CorrelationState::from_matrix(r);
    MatrixXd inv = s.inverse;
    double det = s.det;
    VectorXd c1(5), c2(5);
    REQUIRE(perturb_inverse_inplace(inv, det, 3, 1, 0.05, c1, c2));
    const auto t = perturb_offdiagonal(s, 3, 1, 0.05);
    CHECK(max_abs(inv - t.inverse) < 1e-14);
    CHECK(det == doctest::Approx(t.det).epsilon(1e-14));
    MatrixXd g = try_cholesky(r)->gamma;
    VectorXd work(5);
    REQUIRE(perturb_chol_inplace(g, 3, 1, 0.05, work));
    CHECK(max_abs(g - perturb_offdiagonal_chol(*try_cholesky(r), 3, 1, 0.05).gamma) < 1e-14);
  }
}

TEST_CASE("move_target_to_last") {
  SUBCASE("target already last") {
    const CholeskyFactor f = *try_cholesky(random_correlation(4, 4));
    CHECK(max_abs(move_target_to_last(f, 3, 2).gamma - f.gamma) < 1e-15);
  }
  SUBCASE("identity stays identity") {
    CHECK(move_target_to_last(CholeskyFactor{MatrixXd::Identity(5, 5)}, 3, 0).gamma.isIdentity(1e-15));
  }
  SUBCASE("factor of the permuted matrix, K=3 target (2,1)") {
    const MatrixXd r = random_correlation(3, 8);
    const auto g = move_target_to_last(*try_cholesky(r), 1, 0);
    // Remaining index first, then column index, then row index.
    CHECK(max_abs(g.reconstruct() - symmetric_permutation(r, {2, 0, 1})) < 1e-12);
    CHECK((g.gamma.diagonal().array() > 0.0).all());
    CHECK(g.gamma.isUpperTriangular(0.0));
  }
  SUBCASE("all targets for K=6 preserve the determinant") {
    const MatrixXd r = random_correlation(6, 31);
    const CholeskyFactor f = *try_cholesky(r);
    for (Index l = 0; l < pair_count(6); ++l) {
      const auto p = pair_position(6, l);
      const auto g = move_target_to_last(f, p.row, p.col);
      std::vector<Index> order;
      for (Index k = 0; k < 6; ++k)
        if (k != p.row && k != p.col) order.push_back(k);
      order.push_back(p.col);
      order.push_back(p.row);
      CHECK(max_abs(g.reconstruct() - symmetric_permutation(r, order)) < 1e-12);
      CHECK(g.gamma.diagonal().prod() == doctest::Approx(f.gamma.diagonal().prod()).epsilon(1e-12));
      CHECK((g.gamma.diagonal().array() > 0.0).all());
    }
  }
  SUBCASE("invalid pair") { CHECK_THROWS_AS(move_target_to_last(CholeskyFactor{MatrixXd::Identity(3, 3)}, 0, 1), std::invalid_argument); }
}

TEST_CASE("incremental kernels scale quadratically") {
  auto median_seconds = [](Index k, bool dense) {
    const MatrixXd r = random_correlation(k, 99);
    auto s = CorrelationState::from_matrix(r);
    VectorXd c1(k), c2(k);
    std::vector<double> times;
    for (int rep = 0; rep < 31; ++rep) {
      MatrixXd inv = s.inverse;
      double det = s.det;
      const auto t0 = std::chrono::steady_clock::now();
      for (int it = 0; it < 200; ++it) {
        const double eps = (it % 2 ? -1e-4 : 1e-4);
        if (dense) {
          MatrixXd m = r;
          m(k - 1, 0) += eps;
          m(0, k - 1) += eps;
          Eigen::LLT<MatrixXd> llt(m);
          inv = llt.solve(MatrixXd::Identity(k, k));
          det = std::exp(2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum());
        } else {
          perturb_inverse_inplace(inv, det, k - 1, 0, eps, c1, c2);
        }
      }
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      CHECK(std::isfinite(det));
    }
    std::nth_element(times.begin(), times.begin() + 15, times.end());
    return times[15];
  };
  const double inc = median_seconds(32, false) / median_seconds(16, false);
  const double dense = median_seconds(32, true) / median_seconds(16, true);
  MESSAGE("incremental ratio " << inc << ", dense ratio " << dense);
  CHECK(inc < 5.0);
}
