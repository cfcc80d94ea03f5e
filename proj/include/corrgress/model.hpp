#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corrgress/feasibility.hpp"

namespace corrgress {

/// Two class sides; each latent dimension belongs to one of them.
enum class Side : int { G = 0, R = 1 };

struct LatentDim {
  std::string name;
  Side side = Side::G;
  std::vector<std::string> items;  ///< CSV column names
  bool free_scale = false;

  int item_count() const { return static_cast<int>(items.size()); }
  bool multi_item() const { return items.size() > 1; }
};

/// Item code for a missing response.
inline constexpr std::int8_t kMissing = -1;

/// Class cells in the order (xi_G, xi_R) = 00, 01, 10, 11.
inline constexpr std::array<const char*, 4> kCellNames = {"00", "01", "10", "11"};

struct ModelSpec {
  std::vector<LatentDim> dims;
  CovariateExpansion expansion;       ///< X = X(Z)
  std::vector<int> mean_covariates;   ///< indices into X
  std::vector<int> corr_covariates;   ///< indices into X; first must be the constant
  std::vector<int> class_covariates;  ///< indices into X
  /// L x q_corr; false marks a coefficient fixed at zero. Empty means all free.
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> alpha_free;

  int K() const { return static_cast<int>(dims.size()); }
  int L() const { return K() * (K() - 1) / 2; }
  int q_mean() const { return static_cast<int>(mean_covariates.size()); }
  int q_corr() const { return static_cast<int>(corr_covariates.size()); }
  int q_class() const { return static_cast<int>(class_covariates.size()); }
  int total_items() const;
  /// Column offset of each dim's items in the item matrix.
  std::vector<int> item_offsets() const;
  std::vector<int> dims_on_side(Side s) const;
  bool alpha_is_free(int l, int m) const;

  /// Expansion restricted to the correlation covariates (the test-set space).
  CovariateExpansion corr_expansion() const { return expansion.select(corr_covariates); }

  /// "GP:RP" style name of correlation l (column dim first).
  std::string pair_name(int l) const;
  std::vector<std::string> covariate_names(const std::vector<int>& idx) const;

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;
};

/// Probit intercepts and loadings of one dim; item 0 of a multi-item dim is (0, 1).
struct DimMeasurement {
  Eigen::VectorXd tau;
  Eigen::VectorXd lambda;
};

struct MeasurementParams {
  std::vector<DimMeasurement> dims;  ///< one per ModelSpec dim; empty vectors for single-item dims

  /// tau = 0, lambda = 1 for every multi-item dim.
  static MeasurementParams defaults(const ModelSpec& spec);
  void validate(const ModelSpec& spec) const;
};

struct StructuralParams {
  Eigen::MatrixXd beta;   ///< q_mean x K
  Eigen::VectorXd sigma;  ///< K, fixed dims hold 1
  Eigen::MatrixXd alpha;  ///< L x q_corr
  Eigen::MatrixXd gamma;  ///< 3 x q_class, rows for cells 01, 10, 11

  static StructuralParams zeros(const ModelSpec& spec);
  void validate(const ModelSpec& spec) const;
};

struct Dataset {
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> items;  ///< N x total_items
  Eigen::MatrixXd z;        ///< N x p base covariates
  Eigen::MatrixXd x;        ///< N x q expanded covariates
  Eigen::MatrixXd x_mean;   ///< N x q_mean
  Eigen::MatrixXd x_corr;   ///< N x q_corr
  Eigen::MatrixXd x_class;  ///< N x q_class
  /// nonzero(i, side) = 1 when some observed item on that side equals 1.
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 2> nonzero;

  Index n() const { return items.rows(); }
};

/// Builds the derived matrices and nonzero flags. Throws std::invalid_argument on
/// malformed item codes, non-finite covariates or size mismatches.
Dataset make_dataset(const ModelSpec& spec,
                     Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> items,
                     Eigen::MatrixXd z);

struct LatentState {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 2> xi;  ///< N x 2
  Eigen::MatrixXd eta;                                ///< N x K
};

double item_prob(double tau, double lambda, double eta);

/// Log probability of an observed binary response under a probit link.
double item_log_prob(double tau, double lambda, double eta, int y);

/// Softmax over cells 00, 01, 10, 11 with the 00 predictor fixed at zero.
Eigen::Array4d class_probs(const Eigen::Ref<const Eigen::MatrixXd>& gamma,
                           const Eigen::Ref<const Eigen::VectorXd>& x_class);
Eigen::Array4d class_probs_from_predictors(const Eigen::Array4d& linear_predictors);

struct Moments {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

/// Mean and covariance of eta at one covariate row. Throws linalg::NotPositiveDefinite
/// when R(alpha^T x) is not positive definite.
Moments structural_moments(const ModelSpec& spec, const StructuralParams& params,
                           const Eigen::Ref<const Eigen::VectorXd>& x_mean,
                           const Eigen::Ref<const Eigen::VectorXd>& x_corr);

struct Simulation {
  Dataset data;
  LatentState latent;
};

/// Generates items from the model at the given base covariates. Each unit has its own
/// counter-based stream, so results do not depend on evaluation order.
Simulation simulate_dataset(const ModelSpec& spec, const MeasurementParams& phi,
                            const StructuralParams& params, const Eigen::MatrixXd& z,
                            std::uint64_t seed);

/// Marginal log-likelihood of unit i: four-cell mixture, multi-item dims integrated by
/// tensor Gauss-Hermite, single-item dims by normal orthant probabilities.
double unit_loglik(const ModelSpec& spec, const MeasurementParams& phi,
                   const StructuralParams& params, const Dataset& data, Index i,
                   int quad_nodes = 8);

/// Sum of unit_loglik over all units.
double total_loglik(const ModelSpec& spec, const MeasurementParams& phi,
                    const StructuralParams& params, const Dataset& data, int quad_nodes = 8);

}  // namespace corrgress
