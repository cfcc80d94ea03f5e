#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "corrgress/feasibility.hpp"
#include "corrgress/model.hpp"
#include "corrgress/random_stream.hpp"

namespace corrgress {

struct PriorConfig {
  double sigma2_gamma = 100.0;
  double sigma2_beta = 100.0;
  double ig_a0 = 1e-5;  ///< inverse-gamma shape for sigma^2
  double ig_b0 = 1e-5;  ///< inverse-gamma scale for sigma^2

  void validate() const;
};

/// Per-proposal evaluation for the correlation coefficients.
enum class KernelMode { Incremental, Dense };

struct SamplerConfig {
  int chains = 2;
  long iterations = 2000;
  long burn_in = 500;
  long thin = 1;
  double rw_constant_C = 5.0;
  bool tune_C = true;
  double target_rejection_lo = 0.7;
  double target_rejection_hi = 0.8;
  /// Burn-in iterations per tuning window; 0 picks min(2000, max(50, burn_in / 10)).
  long tune_window = 0;
  std::uint64_t seed = 1;
  long rebaseline_every = 10000;  ///< accepted alpha moves between dense recomputations
  bool check_every_draw = false;  ///< test mode: feasibility check after every iteration
  int workers = 0;                ///< 0: CORRGRESS_WORKERS, else OpenMP default
  KernelMode kernel = KernelMode::Incremental;

  void validate() const;
  long effective_tune_window() const;
};

/// Applies the worker count (config value, then CORRGRESS_WORKERS, then the OpenMP
/// default) and returns it.
int configure_workers(int requested);

/// Elementwise Metropolis state for the correlation coefficients: per-unit inverses and
/// determinants of R_i, upper Cholesky factors at the test points, and rejection tallies.
class CorrelationBlock {
 public:
  using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
  using Counts = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;

  /// `x_corr` is n x q (n may be 0). Throws InfeasibleState when `alpha` is infeasible on
  /// the test set and std::invalid_argument when some unit's matrix is not positive definite.
  CorrelationBlock(Index dim, Eigen::MatrixXd x_corr, TestSet test_set, Eigen::MatrixXd alpha,
                   Mask free_mask = {}, KernelMode mode = KernelMode::Incremental);

  Index dim() const { return dim_; }
  Index units() const { return x_.rows(); }
  Index pairs() const { return alpha_.rows(); }
  Index covariates() const { return alpha_.cols(); }
  KernelMode mode() const { return mode_; }
  const Eigen::MatrixXd& alpha() const { return alpha_; }
  const TestSet& test_set() const { return test_set_; }
  bool is_free(Index l, Index m) const { return free_.size() == 0 || free_(l, m); }

  /// Standardized residuals S^{-1}(eta_i - mu_i), one row per unit.
  void set_residuals(const Eigen::Ref<const Eigen::MatrixXd>& eps);

  /// Cached inverse and determinant of R_i.
  Eigen::Map<const Eigen::MatrixXd> inverse(Index i) const;
  double det(Index i) const { return det_(i); }
  /// Cached upper factor at test point j.
  Eigen::Map<const Eigen::MatrixXd> factor(Index j) const;

  void set_constant(double c);
  double constant() const { return c_; }
  /// gamma_m = C / (sqrt(n) * max_i |X_im|); test points stand in for units when n = 0.
  double step_size(Index m) const { return c_ * step_scale_(m); }

  /// Feasible range of alpha(l, m) with every other coefficient fixed.
  FeasibleInterval interval(Index l, Index m);

  /// Sum over units of the log-density change when alpha(l, m) moves by `delta`;
  /// -inf when some unit matrix would stop being positive definite.
  double log_ratio(Index l, Index m, double delta);

  /// One Metropolis step on alpha(l, m). Returns whether the move was accepted.
  bool update(Index l, Index m, RandomStream& stream);

  /// update() for every free coefficient, pair-major.
  void sweep(RandomStream& stream);

  const Counts& proposals() const { return proposals_; }
  const Counts& accepted() const { return accepted_; }
  void reset_tallies();

  void set_rebaseline_every(long n) { rebaseline_every_ = n; }
  long rebaselines() const { return rebaselines_; }
  double max_drift() const { return max_drift_; }
  /// Dense recomputation of every cache. Returns the largest deviation found and throws
  /// std::runtime_error when it exceeds `tolerance`.
  double rebaseline(double tolerance = 1e-8);

 private:
  void build_caches();
  void refresh_quadratic_forms();
  bool commit(Index l, Index m, double delta, Index k1, Index k2);

  Index dim_;
  Eigen::MatrixXd x_;
  TestSet test_set_;
  Eigen::MatrixXd alpha_;
  Mask free_;
  KernelMode mode_;

  Eigen::MatrixXd eps_t_;  // dim x n, residuals stored by column for contiguous access
  Eigen::MatrixXd inv_;  // dim x (n * dim), unit i in columns [i*dim, (i+1)*dim)
  Eigen::VectorXd det_;
  Eigen::VectorXd quad_;  // eps_i^T R_i^{-1} eps_i
  Eigen::VectorXd quad_new_;
  Eigen::VectorXd logdet_new_;
  Eigen::MatrixXd factors_;  // dim x (T * dim)
  Eigen::MatrixXd factor_scratch_;
  Eigen::MatrixXd perm_scratch_;
  Eigen::VectorXd work_;
  std::vector<RhoInterval> rho_bounds_;
  std::vector<std::vector<Index>> active_units_;
  std::vector<std::vector<Index>> active_points_;

  double c_ = 5.0;
  Eigen::VectorXd step_scale_;
  Counts proposals_;
  Counts accepted_;
  long accepted_since_rebaseline_ = 0;
  long rebaseline_every_ = 10000;
  long rebaselines_ = 0;
  double max_drift_ = 0.0;
};

/// Column names of a flattened parameter draw: beta.<dim>.<cov>, alpha.<pair>.<cov>,
/// sigma.<dim> (free scales only), gamma.<cell>.<cov>.
std::vector<std::string> parameter_columns(const ModelSpec& spec);
Eigen::VectorXd flatten_params(const ModelSpec& spec, const StructuralParams& params);
StructuralParams unflatten_params(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& row);

/// Acceptance telemetry of one chain, counted after burn-in.
struct ChainTally {
  CorrelationBlock::Counts alpha_proposals;
  CorrelationBlock::Counts alpha_accepted;
  Eigen::VectorXi sigma_proposals;
  Eigen::VectorXi sigma_accepted;
  double rw_constant_C = 0.0;
  long rebaselines = 0;
  double max_drift = 0.0;

  /// L x q rejection rates; NaN for coefficients that are fixed or never proposed.
  Eigen::MatrixXd alpha_rejection_rates() const;
};

struct DrawStore {
  std::vector<std::string> columns;
  std::vector<int> chain;
  std::vector<long> iteration;
  Eigen::MatrixXd values;  ///< one row per retained draw
  std::vector<ChainTally> tallies;
  double wall_seconds = 0.0;

  Index rows() const { return values.rows(); }
  int chain_count() const { return static_cast<int>(tallies.size()); }
  Eigen::MatrixXd chain_values(int c) const;
  int column_index(const std::string& name) const;
};

/// Gibbs / Metropolis-within-Gibbs sampler for one chain. Holds references to its inputs.
class Sampler {
 public:
  Sampler(const ModelSpec& spec, const MeasurementParams& phi, const Dataset& data,
          const TestSet& test_set, const PriorConfig& priors, const SamplerConfig& config,
          int chain);

  /// alpha, beta, gamma = 0, sigma = 1, xi at its forced value or 1, eta from the
  /// structural prior followed by one sweep of sample_eta.
  void initialize();
  /// Replaces the full state and rebuilds all caches.
  void set_state(const StructuralParams& params, const LatentState& latent);

  /// One full iteration: xi, eta, gamma, beta, sigma, alpha.
  void iterate(std::uint64_t iteration);

  void sample_xi(std::uint64_t iteration);
  void sample_eta(std::uint64_t iteration);
  void sample_gamma(std::uint64_t iteration);
  void sample_beta(std::uint64_t iteration);
  void sample_sigma(std::uint64_t iteration);
  void sample_alpha(std::uint64_t iteration);

  /// Full conditional of beta's column d given everything else: N(mean, precision^-1).
  struct NormalConditional {
    Eigen::VectorXd mean;
    Eigen::MatrixXd precision;
    Eigen::LLT<Eigen::MatrixXd> llt;  ///< of precision
  };
  NormalConditional beta_conditional(int d) const;

  /// Burn-in bisection step on log C from the rejection rates seen since the last call,
  /// centring their midrange on the target band. The first call only starts the window.
  void tune_constant();

  const StructuralParams& params() const { return params_; }
  const LatentState& latent() const { return latent_; }
  CorrelationBlock& correlation() { return *block_; }
  const CorrelationBlock& correlation() const { return *block_; }
  const Eigen::VectorXi& sigma_proposals() const { return sigma_prop_; }
  const Eigen::VectorXi& sigma_accepted() const { return sigma_acc_; }
  void reset_tallies();

 private:
  RandomStream stream(std::uint32_t block, std::uint64_t unit, std::uint64_t iteration) const;
  void refresh_residuals();
  void eta_unit(Index i, RandomStream& rs);

  const ModelSpec& spec_;
  const MeasurementParams& phi_;
  const Dataset& data_;
  const TestSet& test_set_;
  PriorConfig priors_;
  SamplerConfig config_;
  int chain_;

  StructuralParams params_;
  LatentState latent_;
  std::unique_ptr<CorrelationBlock> block_;
  Eigen::MatrixXd mu_;   // n x K
  Eigen::MatrixXd eps_;  // n x K standardized residuals
  std::vector<int> offsets_;

  Eigen::VectorXi sigma_prop_;
  Eigen::VectorXi sigma_acc_;

  // Bisection state for the random-walk constant.
  double log_c_lo_;
  double log_c_hi_;
  CorrelationBlock::Counts window_prop_;
  CorrelationBlock::Counts window_acc_;
  int tune_windows_ = 0;
  static constexpr double kFirstExpandStep = 0.125;  ///< in log C
  double expand_step_ = kFirstExpandStep;
  int expansions_ = 0;
};

using ProgressCallback = std::function<void(int chain, long iteration)>;

/// Runs config.chains chains sequentially and collects the retained draws.
DrawStore run_chain(const ModelSpec& spec, const MeasurementParams& phi, const Dataset& data,
                    const TestSet& test_set, const PriorConfig& priors,
                    const SamplerConfig& config, const ProgressCallback& progress = {});

}  // namespace corrgress
