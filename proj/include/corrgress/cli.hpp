#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corrgress/io.hpp"

namespace corrgress {

enum ExitCode : int { kExitOk = 0, kExitViolations = 1, kExitValidation = 2, kExitRuntime = 3 };

/// Base covariates for a simulation: column 0 is the constant, the rest follow the
/// scenario's per-variable distributions ({bernoulli: p}, {uniform: [a, b]},
/// {normal: [mean, sd]}). Unit i draws from its own stream.
Eigen::MatrixXd simulate_covariates(const ModelSpec& spec, const Json& distributions, Index n,
                                    std::uint64_t seed);

/// Runs one subcommand. `args` excludes the program name. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace corrgress
