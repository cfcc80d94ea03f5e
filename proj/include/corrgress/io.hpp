#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "corrgress/diagnostics.hpp"
#include "corrgress/feasibility.hpp"
#include "corrgress/mcmc.hpp"
#include "corrgress/model.hpp"

namespace corrgress {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

/// Malformed input or configuration (the CLI maps it to exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kNaToken = "NA";

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by header name, or -1.
  int column(const std::string& name) const;
};

/// Comma-separated, first line is the header, no quoting. Throws ConfigError on ragged rows.
CsvTable read_csv(const fs::path& path);

/// Items are coded 0, 1 or NA; every covariate named in the expansion except the
/// constant must be present and numeric. Errors name the row (1-based, header excluded)
/// and column.
Dataset read_dataset(const fs::path& path, const ModelSpec& spec);

/// Inverse of read_dataset: item columns then base covariates, values in %.17g.
void write_dataset(const fs::path& path, const ModelSpec& spec, const Dataset& data);

/// Model schema:
///   covariates: base names, first is the constant (not read from data)
///   expansion: optional list of {kind: constant|copy|square|product, of: name or [a, b], name}
///   dims: [{name, side: G|R, items: [...], free_scale}]
///   mean_covariates, corr_covariates, class_covariates: expanded term names
///   alpha_fixed_zero: optional [[pair, covariate], ...]
ModelSpec model_from_json(const Json& j);
Json model_to_json(const ModelSpec& spec);

/// {dim: {tau: [...], lambda: [...]}} for every multi-item dim.
MeasurementParams measurement_from_json(const Json& j, const ModelSpec& spec);
Json measurement_to_json(const MeasurementParams& phi, const ModelSpec& spec);

/// {beta: {dim: [...]}, sigma: {dim: s}, alpha: {pair: [...]}, gamma: {cell: [...]}}.
/// Missing sigma entries default to 1, missing alpha pairs and gamma cells to 0.
StructuralParams structural_from_json(const Json& j, const ModelSpec& spec);
Json structural_to_json(const StructuralParams& params, const ModelSpec& spec);

PriorConfig priors_from_json(const Json& j);
Json priors_to_json(const PriorConfig& p);
SamplerConfig sampler_from_json(const Json& j);
Json sampler_to_json(const SamplerConfig& c);

/// {recipe: observed-distinct|hyperrectangle-vertices|quadratic-augmented,
///  bounds: {covariate: [lo, hi]}}.
TestSet test_set_from_json(const Json& j, const ModelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& z);

/// [{name, fixed: {covariate: value}}]; an empty list yields the single profile "overall".
std::vector<Profile> profiles_from_json(const Json& j);

Json matrix_to_json(const Eigen::Ref<const Eigen::MatrixXd>& m);
Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& what);

Json read_json(const fs::path& path);
/// Fails when `path` exists and `force` is false.
void write_text(const fs::path& path, const std::string& text, bool force);
void write_json(const fs::path& path, const Json& j, bool force);
/// Throws ConfigError naming the first existing file when `force` is false.
void ensure_writable(const std::vector<fs::path>& paths, bool force);

/// Columns chain, iteration, then one per parameter; values in %.17g.
void write_draws(const fs::path& csv, const DrawStore& draws, bool force);
/// Metadata sidecar: version, seed, configuration, per-chain tallies and wall time.
Json draws_metadata(const DrawStore& draws, const SamplerConfig& config, const PriorConfig& priors);
/// Reads the CSV and restores the tallies from the sidecar.
DrawStore read_draws(const fs::path& csv, const fs::path& metadata);

Json summary_to_json(const std::vector<ParameterSummary>& rows);
Json convergence_to_json(const ConvergenceReport& report);
Json table_to_json(const ProfileTable& table);

/// Parsed run configuration. Relative paths are resolved against the config file.
struct RunConfig {
  fs::path source;
  std::optional<fs::path> data_path;
  std::optional<ModelSpec> model;
  std::optional<fs::path> measurement_path;
  Json test_set = Json::object();
  PriorConfig priors;
  SamplerConfig sampler;
  std::optional<fs::path> output_dir;
  std::vector<Profile> profiles;
  Json scenario;  ///< simulate only
  Json alpha;     ///< check-feasible only: a matrix or a path to one
};

/// Throws ConfigError on unknown keys, wrong types and field-level violations.
RunConfig load_config(const fs::path& path);

}  // namespace corrgress
