#pragma once

#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "corrgress/random_stream.hpp"

namespace corrgress {

/// Log density up to an additive constant, -inf outside `lower`..`upper`.
struct LogDensity {
  std::function<double(double)> eval;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  bool concavity_declared = true;
};

class NonConcaveDensity : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArsFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArsStats {
  int evaluations = 0;
  int proposals = 0;
};

/// Derivative-free adaptive rejection sampling: the upper hull is built from extended
/// secants, the squeeze from chords. `init` needs at least three points inside the domain;
/// the outermost points are pushed outward on unbounded sides until the hull is proper.
/// `scale` sets the initial outward step. Throws NonConcaveDensity when secant slopes
/// increase by more than 1e-8 (relative).
double ars_sample(const LogDensity& density, std::vector<double> init, RandomStream& stream,
                  ArsStats* stats = nullptr, double scale = 1.0);

/// Draw from N(mean, sd^2) restricted to (lower, upper); either bound may be infinite.
/// Throws std::invalid_argument for an empty interval or sd <= 0.
double truncated_normal(double mean, double sd, double lower, double upper, RandomStream& stream);

struct MhResult {
  double value;
  bool accepted;
  double log_density;  ///< at the returned value
};

/// One symmetric random-walk Metropolis step.
MhResult rw_mh_step(double current, const std::function<double(double)>& log_density,
                    double step_sd, RandomStream& stream);

/// Same step with the current log density supplied by the caller.
MhResult rw_mh_step(double current, double current_log_density,
                    const std::function<double(double)>& log_density, double step_sd,
                    RandomStream& stream);

}  // namespace corrgress
