#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "corrgress/mcmc.hpp"
#include "corrgress/model.hpp"

namespace corrgress {

inline constexpr std::array<double, 7> kSummaryProbs = {0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975};

/// Linear interpolation between order statistics (type 7). `sorted` must be ascending.
double quantile_sorted(const std::vector<double>& sorted, double p);

/// Highest of 90, 95, 99 whose equal-tailed interval excludes zero; 0 when none does.
int star_flag(const std::vector<double>& sorted);

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  std::array<double, 7> quantiles{};  ///< at kSummaryProbs
  int star = 0;
};

/// Column-wise summaries of all retained draws. Throws std::invalid_argument on an empty store.
std::vector<ParameterSummary> summarize(const DrawStore& draws);
std::vector<ParameterSummary> summarize(const std::vector<std::string>& names,
                                        const Eigen::Ref<const Eigen::MatrixXd>& values);

/// Split R-hat: the largest of the rank-normalized bulk and folded values and the raw-scale
/// value. Each chain is split in half; zero variance everywhere gives 1. Throws when a half has fewer than 4 draws.
double split_rhat(const std::vector<Eigen::VectorXd>& chains);

/// Bulk effective sample size of the rank-normalized split chains (Geyer initial
/// monotone sequence).
double effective_sample_size(const std::vector<Eigen::VectorXd>& chains);

struct ConvergenceRow {
  std::string name;
  double rhat;
  double ess;
};

struct ConvergenceReport {
  std::vector<ConvergenceRow> rows;
  std::vector<Eigen::MatrixXd> alpha_rejection;  ///< per chain, L x q
  std::vector<Eigen::VectorXd> sigma_acceptance;  ///< per chain, K (NaN for fixed scales)
  std::vector<double> rw_constant;
};

ConvergenceReport convergence(const DrawStore& draws);

/// A covariate profile: base covariates fixed at given values, the rest left at their
/// observed values. An empty list is the "overall" profile.
struct Profile {
  std::string name;
  std::vector<std::pair<std::string, double>> fixed;
};

struct ProfileTable {
  std::vector<std::string> rows;     ///< profile names
  std::vector<std::string> columns;
  Eigen::MatrixXd values;            ///< rows x columns
};

/// Mean over draws and units of alpha^T X_i with profile overrides applied to Z.
/// Throws std::invalid_argument for unknown covariates and std::logic_error when a
/// per-draw value leaves (-1, 1).
ProfileTable fitted_correlations(const ModelSpec& spec, const DrawStore& draws,
                                 const Eigen::Ref<const Eigen::MatrixXd>& z,
                                 const std::vector<Profile>& profiles);

/// Cell probabilities 00, 01, 10, 11 averaged over draws and units, followed by the
/// marginals p(xi_G = 1), p(xi_R = 1) and the odds ratio p00 p11 / (p01 p10).
ProfileTable fitted_class_probs(const ModelSpec& spec, const DrawStore& draws,
                                const Eigen::Ref<const Eigen::MatrixXd>& z,
                                const std::vector<Profile>& profiles);

/// Aligned plain-text renderings.
std::string format_summary(const std::vector<ParameterSummary>& rows);
std::string format_convergence(const ConvergenceReport& report, const std::vector<std::string>& pair_names,
                               const std::vector<std::string>& corr_covariates);
std::string format_table(const ProfileTable& table, int precision = 3);

}  // namespace corrgress
