#include "corrgress/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace corrgress {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kConcavityTol = 1e-8;
constexpr int kMaxProposals = 100000;
constexpr int kMaxExpansions = 200;

struct Piece {
  double lo, hi;  // may be infinite at the outer pieces
  double a, b;    // hull value a + b x
  double log_mass;
};

double piece_log_mass(double lo, double hi, double a, double b) {
  const double w = hi - lo;
  if (w <= 0.0) return -kInf;
  if (std::isfinite(w) && std::abs(b) * w < 1e-12) return a + b * 0.5 * (lo + hi) + std::log(w);
  const double top = b > 0 ? a + b * hi : a + b * lo;
  const double c = std::abs(b);
  const double frac = std::isfinite(w) ? -std::expm1(-c * w) : 1.0;
  return top + std::log(frac / c);
}

double sample_piece(const Piece& p, double u) {
  const double w = p.hi - p.lo;
  if (std::isfinite(w) && std::abs(p.b) * w < 1e-12) return p.lo + u * w;
  const double c = std::abs(p.b);
  const double frac = std::isfinite(w) ? -std::expm1(-c * w) : 1.0;
  const double t = -std::log1p(-u * frac) / c;
  return p.b > 0 ? p.hi - t : p.lo + t;
}

class Hull {
 public:
  Hull(const LogDensity& d, std::vector<double> xs, std::vector<double> hs)
      : d_(d), x_(std::move(xs)), h_(std::move(hs)) {}

  void insert(double x, double h) {
    auto it = std::lower_bound(x_.begin(), x_.end(), x);
    if (it != x_.end() && *it == x) return;
    const auto pos = it - x_.begin();
    x_.insert(it, x);
    h_.insert(h_.begin() + pos, h);
  }

  double slope(size_t i) const { return (h_[i + 1] - h_[i]) / (x_[i + 1] - x_[i]); }
  double line(size_t i, double x) const { return h_[i] + slope(i) * (x - x_[i]); }

  void check_concavity() const {
    for (size_t i = 0; i + 2 < x_.size(); ++i) {
      const double s0 = slope(i), s1 = slope(i + 1);
      if (s1 > s0 + kConcavityTol * (1.0 + std::abs(s0))) {
        std::ostringstream os;
        os.precision(10);
        os << "log density is not concave: secant slope rises from " << s0 << " to " << s1
           << " around x = " << x_[i + 1];
        throw NonConcaveDensity(os.str());
      }
    }
  }

  void build() {
    check_concavity();
    pieces_.clear();
    const size_t k = x_.size();
    auto add = [&](double lo, double hi, double a, double b) {
      if (hi > lo) pieces_.push_back({lo, hi, a, b, piece_log_mass(lo, hi, a, b)});
    };
    auto line_ab = [&](size_t i) {
      const double s = slope(i);
      return std::pair<double, double>{h_[i] - s * x_[i], s};
    };
    {
      auto [a, b] = line_ab(0);
      add(d_.lower, x_[0], a, b);
    }
    for (size_t i = 0; i + 1 < k; ++i) {
      const bool has_prev = i >= 1;
      const bool has_next = i + 2 < k;
      if (has_prev && has_next) {
        auto [ap, bp] = line_ab(i - 1);
        auto [an, bn] = line_ab(i + 1);
        double z = bp != bn ? (an - ap) / (bp - bn) : (ap <= an ? kInf : -kInf);
        z = std::clamp(z, x_[i], x_[i + 1]);
        add(x_[i], z, ap, bp);
        add(z, x_[i + 1], an, bn);
      } else if (has_prev) {
        auto [a, b] = line_ab(i - 1);
        add(x_[i], x_[i + 1], a, b);
      } else {
        auto [a, b] = line_ab(i + 1);
        add(x_[i], x_[i + 1], a, b);
      }
    }
    {
      auto [a, b] = line_ab(k - 2);
      add(x_[k - 1], d_.upper, a, b);
    }
    max_log_mass_ = -kInf;
    for (const auto& p : pieces_) max_log_mass_ = std::max(max_log_mass_, p.log_mass);
    cumulative_.resize(pieces_.size());
    double acc = 0.0;
    for (size_t i = 0; i < pieces_.size(); ++i) {
      acc += std::exp(pieces_[i].log_mass - max_log_mass_);
      cumulative_[i] = acc;
    }
  }

  // Returns the proposal and its hull value.
  std::pair<double, double> propose(RandomStream& rs) const {
    const double target = rs.uniform() * cumulative_.back();
    size_t idx = std::upper_bound(cumulative_.begin(), cumulative_.end(), target) -
                 cumulative_.begin();
    idx = std::min(idx, pieces_.size() - 1);
    const Piece& p = pieces_[idx];
    double x = sample_piece(p, rs.uniform());
    x = std::clamp(x, p.lo, p.hi);
    return {x, p.a + p.b * x};
  }

  double squeeze(double x) const {
    if (x < x_.front() || x > x_.back()) return -kInf;
    size_t i = std::upper_bound(x_.begin(), x_.end(), x) - x_.begin();
    if (i == 0) i = 1;
    if (i >= x_.size()) i = x_.size() - 1;
    return line(i - 1, x);
  }

  const std::vector<double>& xs() const { return x_; }

 private:
  const LogDensity& d_;
  std::vector<double> x_;
  std::vector<double> h_;
  std::vector<Piece> pieces_;
  std::vector<double> cumulative_;
  double max_log_mass_ = 0.0;
};

}  // namespace

double ars_sample(const LogDensity& density, std::vector<double> init, RandomStream& stream,
                  ArsStats* stats, double scale) {
  if (!density.eval) throw std::invalid_argument("ars_sample: density has no evaluator");
  if (!(density.lower < density.upper)) throw std::invalid_argument("ars_sample: empty domain");
  if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
  ArsStats local;
  ArsStats& st = stats ? *stats : local;

  auto eval = [&](double x) {
    ++st.evaluations;
    return density.eval(x);
  };

  std::sort(init.begin(), init.end());
  init.erase(std::unique(init.begin(), init.end()), init.end());
  init.erase(std::remove_if(init.begin(), init.end(),
                            [&](double x) { return !(x > density.lower && x < density.upper); }),
             init.end());
  if (init.empty()) throw ArsFailure("ars_sample: no initial abscissa inside the domain");
  // Top up to three distinct interior points.
  while (init.size() < 3) {
    const double lo = init.front(), hi = init.back();
    double cand = hi + scale;
    if (!(cand < density.upper)) cand = 0.5 * (hi + density.upper);
    if (!(cand > hi)) cand = 0.5 * (lo + density.lower);
    if (!(cand > density.lower && cand < density.upper) || cand == lo || cand == hi) {
      cand = 0.5 * (lo + hi);
    }
    init.push_back(cand);
    std::sort(init.begin(), init.end());
    init.erase(std::unique(init.begin(), init.end()), init.end());
  }

  std::vector<double> hs;
  for (double x : init) {
    const double h = eval(x);
    if (!std::isfinite(h)) {
      throw ArsFailure("ars_sample: log density not finite at initial point " + std::to_string(x));
    }
    hs.push_back(h);
  }
  Hull hull(density, init, hs);

  // Push outer abscissae outward until the tails of the hull are integrable.
  auto expand = [&](bool left) {
    double step = scale;
    for (int it = 0; it < kMaxExpansions; ++it) {
      const auto& xs = hull.xs();
      const size_t k = xs.size();
      const double s = left ? hull.slope(0) : hull.slope(k - 2);
      if (left ? s > 0.0 : s < 0.0) return;
      const double x = left ? xs.front() - step : xs.back() + step;
      const double h = eval(x);
      if (!std::isfinite(h)) throw ArsFailure("ars_sample: density vanishes on an unbounded side");
      hull.insert(x, h);
      step *= 2.0;
    }
    throw ArsFailure("ars_sample: could not bracket the mode");
  };
  if (!std::isfinite(density.lower)) expand(true);
  if (!std::isfinite(density.upper)) expand(false);
  hull.build();

  for (int it = 0; it < kMaxProposals; ++it) {
    ++st.proposals;
    auto [x, upper] = hull.propose(stream);
    const double log_v = std::log(stream.uniform());
    if (log_v <= hull.squeeze(x) - upper) return x;
    const double h = eval(x);
    if (h > upper + kConcavityTol * (1.0 + std::abs(upper))) {
      throw NonConcaveDensity("log density exceeds its secant hull at x = " + std::to_string(x));
    }
    if (log_v <= h - upper) return x;
    if (std::isfinite(h)) {
      hull.insert(x, h);
      hull.build();
    }
  }
  throw ArsFailure("ars_sample: proposal limit reached");
}

namespace {

// Draw from N(0,1) restricted to (a, b) with a >= 0.
double truncated_right_side(double a, double b, RandomStream& rs) {
  const double root = std::sqrt(a * a + 4.0);
  const double lambda = (a + root) / 2.0;
  // Uniform proposals beat the exponential one on short intervals.
  const double cutoff = a + 2.0 * std::sqrt(M_E) / (a + root) * std::exp((a * a - a * root) / 4.0);
  if (b <= cutoff) {
    for (int it = 0; it < kMaxProposals; ++it) {
      const double x = a + (b - a) * rs.uniform();
      if (std::log(rs.uniform()) <= (a * a - x * x) / 2.0) return x;
    }
  } else {
    for (int it = 0; it < kMaxProposals; ++it) {
      const double x = a + rs.exponential() / lambda;
      if (x >= b) continue;
      const double d = x - lambda;
      if (std::log(rs.uniform()) <= -d * d / 2.0) return x;
    }
  }
  throw std::runtime_error("truncated_normal: proposal limit reached");
}

}  // namespace

double truncated_normal(double mean, double sd, double lower, double upper, RandomStream& stream) {
  if (!(sd > 0.0)) throw std::invalid_argument("truncated_normal: sd must be positive");
  if (!(lower < upper)) throw std::invalid_argument("truncated_normal: empty interval");
  const double a = (lower - mean) / sd;
  const double b = (upper - mean) / sd;
  if (!(a < b)) throw std::invalid_argument("truncated_normal: interval vanishes after scaling");
  double z;
  if (a >= 0.0) {
    z = truncated_right_side(a, b, stream);
  } else if (b <= 0.0) {
    z = -truncated_right_side(-b, -a, stream);
  } else if (b - a >= std::sqrt(2.0 * M_PI)) {
    for (;;) {
      z = stream.normal();
      if (z > a && z < b) break;
    }
  } else {
    for (int it = 0;; ++it) {
      if (it > kMaxProposals) throw std::runtime_error("truncated_normal: proposal limit reached");
      z = a + (b - a) * stream.uniform();
      if (std::log(stream.uniform()) <= -z * z / 2.0) break;
    }
  }
  const double x = mean + sd * z;
  return std::clamp(x, std::nextafter(lower, kInf), std::nextafter(upper, -kInf));
}

MhResult rw_mh_step(double current, double current_log_density,
                    const std::function<double(double)>& log_density, double step_sd,
                    RandomStream& stream) {
  if (!(step_sd > 0.0)) throw std::invalid_argument("rw_mh_step: step_sd must be positive");
  const double proposal = current + step_sd * stream.normal();
  const double lp = log_density(proposal);
  const double log_u = std::log(stream.uniform());
  if (std::isfinite(lp) && log_u < lp - current_log_density) return {proposal, true, lp};
  return {current, false, current_log_density};
}

MhResult rw_mh_step(double current, const std::function<double(double)>& log_density,
                    double step_sd, RandomStream& stream) {
  return rw_mh_step(current, log_density(current), log_density, step_sd, stream);
}

}  // namespace corrgress
