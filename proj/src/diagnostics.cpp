#include "corrgress/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "corrgress/normal.hpp"

namespace corrgress {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> sorted_copy(const Eigen::Ref<const Eigen::VectorXd>& v) {
  std::vector<double> s(v.data(), v.data() + v.size());
  std::sort(s.begin(), s.end());
  return s;
}

// Splits every chain in half and truncates all halves to a common length.
std::vector<Eigen::VectorXd> split_chains(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.empty()) throw std::invalid_argument("no chains given");
  Index half = std::numeric_limits<Index>::max();
  for (const auto& c : chains) half = std::min(half, c.size() / 2);
  if (half < 4) throw std::invalid_argument("each split chain needs at least 4 draws");
  std::vector<Eigen::VectorXd> out;
  for (const auto& c : chains) {
    const Index h = c.size() / 2;
    out.push_back(c.segment(0, half));
    out.push_back(c.segment(c.size() - h, h).head(half));
  }
  return out;
}

// Normal scores of the pooled ranks (average ranks for ties).
std::vector<Eigen::VectorXd> rank_normalize(const std::vector<Eigen::VectorXd>& chains) {
  std::vector<std::pair<double, size_t>> all;
  for (size_t c = 0; c < chains.size(); ++c)
    for (Index i = 0; i < chains[c].size(); ++i) all.push_back({chains[c](i), c * 1000000007ull + i});
  std::vector<size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return all[a].first < all[b].first; });
  std::vector<double> rank(all.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() && all[order[j + 1]].first == all[order[i]].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  const double s = static_cast<double>(all.size());
  std::vector<Eigen::VectorXd> out;
  size_t pos = 0;
  for (const auto& c : chains) {
    Eigen::VectorXd z(c.size());
    for (Index i = 0; i < c.size(); ++i) z(i) = norm_quantile((rank[pos++] - 0.375) / (s + 0.25));
    out.push_back(std::move(z));
  }
  return out;
}

struct VarianceParts {
  double within;
  double pooled;  // var+
  bool degenerate;
};

VarianceParts variance_parts(const std::vector<Eigen::VectorXd>& chains) {
  const double m = static_cast<double>(chains.size());
  const double n = static_cast<double>(chains[0].size());
  Eigen::VectorXd means(chains.size());
  double w = 0.0;
  for (size_t c = 0; c < chains.size(); ++c) {
    means(c) = chains[c].mean();
    w += (chains[c].array() - means(c)).square().sum() / (n - 1.0);
  }
  w /= m;
  const double b = m > 1 ? n * (means.array() - means.mean()).square().sum() / (m - 1.0) : 0.0;
  return {w, (n - 1.0) / n * w + b / n, w == 0.0 && b == 0.0};
}

double rhat_of(const std::vector<Eigen::VectorXd>& chains) {
  const auto vp = variance_parts(chains);
  if (vp.degenerate) return 1.0;
  if (vp.within == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(vp.pooled / vp.within);
}

bool all_equal(const std::vector<Eigen::VectorXd>& chains) {
  const double first = chains[0](0);
  for (const auto& c : chains)
    if ((c.array() != first).any()) return false;
  return true;
}

std::vector<double> column_values(const DrawStore& d, int chain, Index col) {
  std::vector<double> v;
  for (Index r = 0; r < d.rows(); ++r)
    if (d.chain[r] == chain) v.push_back(d.values(r, col));
  return v;
}

Eigen::MatrixXd profile_covariates(const ModelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& z,
                                   const Profile& profile) {
  Eigen::MatrixXd zp = z;
  const auto& names = spec.expansion.base_names();
  for (const auto& [name, value] : profile.fixed) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
      throw std::invalid_argument("profile '" + profile.name + "' references unknown covariate '" + name + "'");
    }
    zp.col(it - names.begin()).setConstant(value);
  }
  return spec.expansion.apply_rows(zp);
}

Eigen::MatrixXd select_cols(const Eigen::MatrixXd& m, const std::vector<int>& cols) {
  Eigen::MatrixXd out(m.rows(), static_cast<Index>(cols.size()));
  for (size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = m.col(cols[c]);
  return out;
}

}  // namespace

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<size_t>(std::floor(h));
  const size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

int star_flag(const std::vector<double>& sorted) {
  int star = 0;
  for (int level : {90, 95, 99}) {
    const double tail = (1.0 - level / 100.0) / 2.0;
    const double lo = quantile_sorted(sorted, tail);
    const double hi = quantile_sorted(sorted, 1.0 - tail);
    if (lo > 0.0 || hi < 0.0) star = level;
  }
  return star;
}

std::vector<ParameterSummary> summarize(const std::vector<std::string>& names,
                                        const Eigen::Ref<const Eigen::MatrixXd>& values) {
  if (values.rows() == 0) throw std::invalid_argument("no draws to summarize");
  if (static_cast<Index>(names.size()) != values.cols()) {
    throw std::invalid_argument("column names do not match the draws");
  }
  std::vector<ParameterSummary> out(names.size());
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < values.cols(); ++c) {
    ParameterSummary& s = out[c];
    s.name = names[c];
    const auto sorted = sorted_copy(values.col(c));
    // Sum in sorted order so the result does not depend on draw order.
    double sum = 0.0;
    for (double v : sorted) sum += v;
    s.mean = sum / static_cast<double>(sorted.size());
    double ss = 0.0;
    for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
    s.sd = sorted.size() > 1 ? std::sqrt(ss / static_cast<double>(sorted.size() - 1)) : 0.0;
    for (size_t k = 0; k < kSummaryProbs.size(); ++k) s.quantiles[k] = quantile_sorted(sorted, kSummaryProbs[k]);
    s.star = star_flag(sorted);
  }
  return out;
}

std::vector<ParameterSummary> summarize(const DrawStore& draws) {
  return summarize(draws.columns, draws.values);
}

double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
  const auto split = split_chains(chains);
  if (all_equal(split)) return 1.0;
  const double bulk = rhat_of(rank_normalize(split));
  // Folded variant picks up differences in scale.
  std::vector<double> pooled;
  for (const auto& c : split) pooled.insert(pooled.end(), c.data(), c.data() + c.size());
  std::sort(pooled.begin(), pooled.end());
  const double median = quantile_sorted(pooled, 0.5);
  std::vector<Eigen::VectorXd> folded;
  for (const auto& c : split) folded.push_back((c.array() - median).abs().matrix());
  const double tail = all_equal(folded) ? 1.0 : rhat_of(rank_normalize(folded));
  // Rank normalization caps R-hat near 1.83 for fully separated chains, so the
  // raw-scale value is kept as a floor.
  return std::max({bulk, tail, rhat_of(split)});
}

double effective_sample_size(const std::vector<Eigen::VectorXd>& chains) {
  const auto split = split_chains(chains);
  const double total = static_cast<double>(split.size() * split[0].size());
  if (all_equal(split)) return total;
  const auto z = rank_normalize(split);
  const auto vp = variance_parts(z);
  if (!(vp.pooled > 0.0)) return total;
  const Index n = z[0].size();
  const double m = static_cast<double>(z.size());
  std::vector<Eigen::VectorXd> centred;
  for (const auto& c : z) centred.push_back((c.array() - c.mean()).matrix());
  // Mean over chains of the autocovariance at `lag` (biased estimator).
  auto acov = [&](Index lag) {
    double s = 0.0;
    for (const auto& c : centred) s += c.head(n - lag).dot(c.tail(n - lag)) / static_cast<double>(n);
    return s / m;
  };
  const double w = vp.within;
  auto rho = [&](Index lag) { return 1.0 - (w - acov(lag)) / vp.pooled; };
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (Index t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (!(pair > 0.0)) break;
    pair = std::min(pair, prev_pair);  // initial monotone sequence
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

ConvergenceReport convergence(const DrawStore& draws) {
  ConvergenceReport rep;
  const int nc = draws.chain_count();
  rep.rows.resize(draws.columns.size());
#pragma omp parallel for schedule(dynamic)
  for (Index col = 0; col < static_cast<Index>(draws.columns.size()); ++col) {
    std::vector<Eigen::VectorXd> chains;
    for (int c = 0; c < nc; ++c) {
      const auto v = column_values(draws, c, col);
      chains.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size())));
    }
    rep.rows[col] = {draws.columns[col], split_rhat(chains), effective_sample_size(chains)};
  }
  for (const auto& t : draws.tallies) {
    rep.alpha_rejection.push_back(t.alpha_rejection_rates());
    Eigen::VectorXd acc(t.sigma_proposals.size());
    for (Index k = 0; k < acc.size(); ++k) {
      acc(k) = t.sigma_proposals(k) > 0 ? static_cast<double>(t.sigma_accepted(k)) / t.sigma_proposals(k) : kNaN;
    }
    rep.sigma_acceptance.push_back(acc);
    rep.rw_constant.push_back(t.rw_constant_C);
  }
  return rep;
}

ProfileTable fitted_correlations(const ModelSpec& spec, const DrawStore& draws,
                                 const Eigen::Ref<const Eigen::MatrixXd>& z,
                                 const std::vector<Profile>& profiles) {
  if (draws.rows() == 0) throw std::invalid_argument("no draws");
  ProfileTable t;
  for (int l = 0; l < spec.L(); ++l) t.columns.push_back(spec.pair_name(l));
  t.values.resize(static_cast<Index>(profiles.size()), spec.L());
  for (size_t p = 0; p < profiles.size(); ++p) {
    t.rows.push_back(profiles[p].name);
    const Eigen::MatrixXd xc = select_cols(profile_covariates(spec, z, profiles[p]), spec.corr_covariates);
    // The model is linear in X, so the unit average goes through the mean covariate row.
    const Eigen::VectorXd xbar = xc.colwise().mean().transpose();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(spec.L());
    for (Index r = 0; r < draws.rows(); ++r) {
      const StructuralParams prm = unflatten_params(spec, draws.values.row(r).transpose());
      const Eigen::VectorXd v = prm.alpha * xbar;
      if ((v.array().abs() >= 1.0).any()) {
        throw std::logic_error("fitted correlation outside (-1, 1) for profile '" + profiles[p].name + "'");
      }
      acc += v;
    }
    t.values.row(static_cast<Index>(p)) = (acc / static_cast<double>(draws.rows())).transpose();
  }
  return t;
}

ProfileTable fitted_class_probs(const ModelSpec& spec, const DrawStore& draws,
                                const Eigen::Ref<const Eigen::MatrixXd>& z,
                                const std::vector<Profile>& profiles) {
  if (draws.rows() == 0) throw std::invalid_argument("no draws");
  ProfileTable t;
  t.columns = {"p00", "p01", "p10", "p11", "p_G", "p_R", "odds_ratio"};
  t.values.resize(static_cast<Index>(profiles.size()), 7);
  for (size_t p = 0; p < profiles.size(); ++p) {
    t.rows.push_back(profiles[p].name);
    const Eigen::MatrixXd xg = select_cols(profile_covariates(spec, z, profiles[p]), spec.class_covariates);
    const Index n = xg.rows();
    std::vector<Eigen::Array4d> per_draw(static_cast<size_t>(draws.rows()));
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < draws.rows(); ++r) {
      const StructuralParams prm = unflatten_params(spec, draws.values.row(r).transpose());
      Eigen::Array4d acc = Eigen::Array4d::Zero();
      for (Index i = 0; i < n; ++i) acc += class_probs(prm.gamma, xg.row(i).transpose());
      per_draw[r] = acc / static_cast<double>(std::max<Index>(n, 1));
    }
    Eigen::Array4d cells = Eigen::Array4d::Zero();
    for (const auto& a : per_draw) cells += a;
    cells /= static_cast<double>(draws.rows());
    t.values.row(static_cast<Index>(p)) << cells(0), cells(1), cells(2), cells(3), cells(2) + cells(3),
        cells(1) + cells(3), cells(0) * cells(3) / (cells(1) * cells(2));
  }
  return t;
}

std::string format_summary(const std::vector<ParameterSummary>& rows) {
  size_t w = 9;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "parameter" << std::right;
  for (const char* h : {"mean", "sd", "2.5%", "5%", "25%", "50%", "75%", "95%", "97.5%"}) os << std::setw(10) << h;
  os << "  sig\n";
  os << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.name << std::right;
    os << std::setw(10) << r.mean << std::setw(10) << r.sd;
    for (double q : r.quantiles) os << std::setw(10) << q;
    os << "  " << (r.star == 99 ? "***" : r.star == 95 ? "**" : r.star == 90 ? "*" : "") << "\n";
  }
  return os.str();
}

std::string format_convergence(const ConvergenceReport& rep, const std::vector<std::string>& pair_names,
                               const std::vector<std::string>& corr_covariates) {
  size_t w = 9;
  for (const auto& r : rep.rows) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "parameter" << std::right << std::setw(10) << "R-hat"
     << std::setw(12) << "ESS" << "\n";
  for (const auto& r : rep.rows) {
    os << std::left << std::setw(static_cast<int>(w)) << r.name << std::right << std::fixed << std::setprecision(4)
       << std::setw(10) << r.rhat << std::setprecision(1) << std::setw(12) << r.ess << "\n";
  }
  for (size_t c = 0; c < rep.alpha_rejection.size(); ++c) {
    os << "\nchain " << c << ": alpha rejection rates (C = " << std::setprecision(4) << rep.rw_constant[c] << ")\n";
    const auto& m = rep.alpha_rejection[c];
    os << std::left << std::setw(12) << "pair" << std::right;
    for (const auto& cv : corr_covariates) os << std::setw(12) << cv;
    os << "\n";
    for (Index l = 0; l < m.rows(); ++l) {
      os << std::left << std::setw(12) << (l < static_cast<Index>(pair_names.size()) ? pair_names[l] : "") << std::right;
      for (Index k = 0; k < m.cols(); ++k) {
        if (std::isnan(m(l, k))) {
          os << std::setw(12) << "-";
        } else {
          os << std::setw(12) << std::setprecision(3) << m(l, k);
        }
      }
      os << "\n";
    }
  }
  return os.str();
}

std::string format_table(const ProfileTable& t, int precision) {
  size_t w = 8;
  for (const auto& r : t.rows) w = std::max(w, r.size());
  size_t cw = 8;
  for (const auto& c : t.columns) cw = std::max(cw, c.size() + 2);
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "profile" << std::right;
  for (const auto& c : t.columns) os << std::setw(static_cast<int>(cw)) << c;
  os << "\n" << std::fixed << std::setprecision(precision);
  for (Index r = 0; r < t.values.rows(); ++r) {
    os << std::left << std::setw(static_cast<int>(w)) << t.rows[r] << std::right;
    for (Index c = 0; c < t.values.cols(); ++c) os << std::setw(static_cast<int>(cw)) << t.values(r, c);
    os << "\n";
  }
  return os.str();
}

}  // namespace corrgress
