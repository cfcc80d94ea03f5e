#include "corrgress/cli.hpp"

#include <algorithm>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "corrgress/diagnostics.hpp"
#include "corrgress/measurement_fit.hpp"
#include "corrgress/random_stream.hpp"

namespace corrgress {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> chains;
  std::optional<long> iterations;
  std::optional<long> burn_in;
  std::optional<long> thin;
  std::string out;
  std::string alpha;
  bool force = false;
};

fs::path config_dir(const RunConfig& cfg) {
  return cfg.source.has_parent_path() ? cfg.source.parent_path() : fs::path(".");
}

Json inline_or_file(const Json& j, const RunConfig& cfg) {
  if (!j.is_string()) return j;
  fs::path p(j.get<std::string>());
  if (p.is_relative()) p = config_dir(cfg) / p;
  return read_json(p);
}

const ModelSpec& require_model(const RunConfig& cfg) {
  if (!cfg.model) throw ConfigError("config: a 'model' is required");
  return *cfg.model;
}

fs::path output_dir(const RunConfig& cfg, const Options& opt) {
  if (!opt.out.empty()) return opt.out;
  if (cfg.output_dir) return *cfg.output_dir;
  throw ConfigError("no output directory: set 'output' in the config or pass --out");
}

Dataset require_data(const RunConfig& cfg, const ModelSpec& spec) {
  if (!cfg.data_path) throw ConfigError("config: a 'data' path is required");
  if (!fs::exists(*cfg.data_path)) throw ConfigError("config.data: file " + cfg.data_path->string() + " does not exist");
  return read_dataset(*cfg.data_path, spec);
}

SamplerConfig sampler_with_overrides(SamplerConfig c, const Options& opt) {
  if (opt.seed) c.seed = *opt.seed;
  if (opt.chains) c.chains = *opt.chains;
  if (opt.iterations) c.iterations = *opt.iterations;
  if (opt.burn_in) c.burn_in = *opt.burn_in;
  if (opt.thin) c.thin = *opt.thin;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
  return c;
}

int cmd_simulate(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const ModelSpec& spec = require_model(cfg);
  if (cfg.scenario.is_null()) throw ConfigError("config: simulate needs a 'scenario'");
  const Json& sc = cfg.scenario;
  if (!sc.is_object()) throw ConfigError("config.scenario: expected an object");
  for (const auto& [k, v] : sc.items()) {
    if (k != "n" && k != "covariates" && k != "structural" && k != "measurement") {
      throw ConfigError("config.scenario: unknown field '" + k + "'");
    }
  }
  if (!sc.contains("n") || !sc["n"].is_number_integer() || sc["n"].get<long>() < 1) {
    throw ConfigError("config.scenario.n: expected a positive integer");
  }
  if (!sc.contains("structural")) throw ConfigError("config.scenario: missing field 'structural'");
  const Index n = sc["n"].get<long>();
  const std::uint64_t seed = opt.seed.value_or(cfg.sampler.seed);
  const StructuralParams truth = structural_from_json(inline_or_file(sc["structural"], cfg), spec);
  const MeasurementParams phi = sc.contains("measurement")
                                    ? measurement_from_json(inline_or_file(sc["measurement"], cfg), spec)
                                    : MeasurementParams::defaults(spec);
  const Eigen::MatrixXd z =
      simulate_covariates(spec, sc.contains("covariates") ? sc["covariates"] : Json::object(), n, seed);

  const fs::path dir = output_dir(cfg, opt);
  const fs::path data_csv = dir / "data.csv";
  const fs::path truth_json = dir / "truth.json";
  ensure_writable({data_csv, truth_json}, opt.force);
  Simulation sim;
  try {
    sim = simulate_dataset(spec, phi, truth, z, seed);
  } catch (const InfeasibleState& e) {
    throw ConfigError(std::string("scenario.structural: ") + e.what());
  }
  fs::create_directories(dir);
  write_dataset(data_csv, spec, sim.data);

  Eigen::Array4d cells = Eigen::Array4d::Zero();
  for (Index i = 0; i < n; ++i) cells(2 * sim.latent.xi(i, 0) + sim.latent.xi(i, 1)) += 1.0;
  Json t;
  t["seed"] = seed;
  t["n"] = n;
  t["structural"] = structural_to_json(truth, spec);
  t["measurement"] = measurement_to_json(phi, spec);
  Json counts;
  for (int c = 0; c < 4; ++c) counts[kCellNames[c]] = static_cast<long>(cells(c));
  t["class_counts"] = counts;
  write_json(truth_json, t, opt.force);
  out << "wrote " << data_csv.string() << " (" << n << " rows) and " << truth_json.string() << "\n";
  return kExitOk;
}

Json step1_json(const Step1Fit& fit) {
  const auto& p = fit.params;
  const auto& r = fit.report;
  Json j;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["loglik"] = r.loglik;
  j["gradient_norm"] = r.gradient_norm;
  j["condition_number"] = r.condition_number;
  j["negative_definite"] = r.negative_definite;
  j["ill_conditioned"] = r.ill_conditioned;
  j["message"] = r.message;
  j["trace"] = r.trace;
  Json est;
  est["pi"] = p.pi;
  est["mu_p"] = p.mu_p;
  est["sigma2_p"] = p.sigma2_p;
  est["mu_f"] = p.mu_f;
  est["rho"] = p.rho;
  j["estimates"] = est;
  return j;
}

int cmd_fit_measurement(const RunConfig& cfg, const Options& opt, std::ostream& out, std::ostream& err) {
  const ModelSpec& spec = require_model(cfg);
  const Dataset data = require_data(cfg, spec);
  const fs::path dir = output_dir(cfg, opt);
  const fs::path phi_json = dir / "phi.json";
  const fs::path report_json = dir / "measurement_report.json";
  ensure_writable({phi_json, report_json}, opt.force);

  std::vector<Step1Fit> fits;
  Json report;
  for (Side side : {Side::G, Side::R}) {
    const SideItems items = side_items(spec, data, side);
    Step1Fit fit = fit_measurement(items, Step1Params::initial(items));
    const char* name = side == Side::G ? "G" : "R";
    report[name] = step1_json(fit);
    out << "side " << name << ": loglik " << fit.report.loglik << ", " << fit.report.iterations << " iterations, "
        << (fit.report.converged ? "converged" : "not converged") << "\n";
    if (!fit.report.converged || fit.report.ill_conditioned || !fit.report.negative_definite) {
      err << "warning: side " << name << ": " << fit.report.message << "\n";
    }
    fits.push_back(std::move(fit));
  }
  const MeasurementParams phi = measurement_from_fits(spec, fits[0], fits[1]);
  fs::create_directories(dir);
  write_json(phi_json, measurement_to_json(phi, spec), opt.force);
  write_json(report_json, report, opt.force);
  out << "wrote " << phi_json.string() << "\n";
  return kExitOk;
}

int cmd_fit(const RunConfig& cfg, const Options& opt, std::ostream& out, std::ostream& err) {
  const ModelSpec& spec = require_model(cfg);
  const Dataset data = require_data(cfg, spec);
  const SamplerConfig sampler = sampler_with_overrides(cfg.sampler, opt);
  const fs::path dir = output_dir(cfg, opt);
  fs::path phi_path;
  if (cfg.measurement_path) {
    phi_path = *cfg.measurement_path;
  } else {
    phi_path = dir / "phi.json";
    if (!fs::exists(phi_path)) {
      throw ConfigError("no measurement parameters: set 'measurement' or run fit-measurement first");
    }
  }
  const MeasurementParams phi = measurement_from_json(read_json(phi_path), spec);
  const TestSet test_set = test_set_from_json(cfg.test_set, spec, data.z);
  const fs::path draws_csv = dir / "draws.csv";
  const fs::path meta_json = dir / "draws.meta.json";
  ensure_writable({draws_csv, meta_json}, opt.force);

  const long step = std::max(1L, sampler.iterations / 10);
  const DrawStore draws = run_chain(spec, phi, data, test_set, cfg.priors, sampler, [&](int c, long it) {
    if (it % step == 0) err << "chain " << c << ": " << it << "/" << sampler.iterations << "\n";
  });
  fs::create_directories(dir);
  write_draws(draws_csv, draws, opt.force);
  Json meta = draws_metadata(draws, sampler, cfg.priors);
  meta["test_set"] = {{"recipe", recipe_name(test_set.recipe)}, {"points", test_set.size()}};
  meta["measurement"] = phi_path.string();
  write_json(meta_json, meta, opt.force);
  out << "wrote " << draws.rows() << " draws to " << draws_csv.string() << " in " << draws.wall_seconds << " s\n";
  return kExitOk;
}

int cmd_summarize(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const ModelSpec& spec = require_model(cfg);
  const Dataset data = require_data(cfg, spec);
  const fs::path dir = output_dir(cfg, opt);
  const fs::path draws_csv = dir / "draws.csv";
  if (!fs::exists(draws_csv)) throw ConfigError("no draws at " + draws_csv.string() + "; run fit first");
  const DrawStore draws = read_draws(draws_csv, dir / "draws.meta.json");
  if (draws.columns != parameter_columns(spec)) throw ConfigError("draw columns do not match the model");
  const fs::path summary_json = dir / "summary.json";
  const fs::path summary_txt = dir / "summary.txt";
  const fs::path conv_txt = dir / "convergence.txt";
  ensure_writable({summary_json, summary_txt, conv_txt}, opt.force);

  const auto rows = summarize(draws);
  const auto conv = convergence(draws);
  const auto corr = fitted_correlations(spec, draws, data.z, cfg.profiles);
  const auto probs = fitted_class_probs(spec, draws, data.z, cfg.profiles);

  std::vector<std::string> pairs;
  for (int l = 0; l < spec.L(); ++l) pairs.push_back(spec.pair_name(l));
  Json j;
  j["parameters"] = summary_to_json(rows);
  j["convergence"] = convergence_to_json(conv);
  j["fitted_correlations"] = table_to_json(corr);
  j["class_probabilities"] = table_to_json(probs);
  const std::string text = format_summary(rows) + "\nfitted correlations\n" + format_table(corr) +
                           "\nclass probabilities\n" + format_table(probs);
  write_json(summary_json, j, opt.force);
  write_text(summary_txt, text, opt.force);
  write_text(conv_txt, format_convergence(conv, pairs, spec.covariate_names(spec.corr_covariates)), opt.force);
  out << text;
  return kExitOk;
}

int cmd_check_feasible(const RunConfig& cfg, const Options& opt, std::ostream& out) {
  const ModelSpec& spec = require_model(cfg);
  Json alpha_json;
  if (!opt.alpha.empty()) {
    alpha_json = read_json(opt.alpha);
  } else if (!cfg.alpha.is_null()) {
    alpha_json = cfg.alpha.is_string() ? read_json(cfg.alpha.get<std::string>()) : cfg.alpha;
  } else {
    throw ConfigError("check-feasible needs an alpha matrix: set 'alpha' or pass --alpha");
  }
  const Eigen::MatrixXd alpha = matrix_from_json(alpha_json, "alpha");
  if (alpha.rows() != spec.L() || alpha.cols() != spec.q_corr()) {
    throw ConfigError("alpha: expected " + std::to_string(spec.L()) + " x " + std::to_string(spec.q_corr()) +
                      " coefficients");
  }
  Eigen::MatrixXd z(0, spec.expansion.base_dim());
  if (cfg.data_path) z = require_data(cfg, spec).z;
  const TestSet ts = test_set_from_json(cfg.test_set, spec, z);
  const auto bad = infeasible_points(alpha, ts.points);
  out << ts.size() << " test points (" << recipe_name(ts.recipe) << "), " << bad.size() << " violations\n";
  const auto names = spec.covariate_names(spec.corr_covariates);
  for (Index j : bad) {
    out << "  point " << j << ":";
    for (Index m = 0; m < ts.width(); ++m) out << " " << names[m] << "=" << ts.points(j, m);
    out << "\n";
  }
  return bad.empty() ? kExitOk : kExitViolations;
}

}  // namespace

Eigen::MatrixXd simulate_covariates(const ModelSpec& spec, const Json& distributions, Index n, std::uint64_t seed) {
  const auto& base = spec.expansion.base_names();
  if (!distributions.is_object()) throw ConfigError("scenario.covariates: expected an object");
  for (const auto& [k, v] : distributions.items()) {
    if (std::find(base.begin() + 1, base.end(), k) == base.end()) {
      throw ConfigError("scenario.covariates: unknown covariate '" + k + "'");
    }
  }
  enum class Dist { Bernoulli, Uniform, Normal };
  struct Spec {
    Dist dist;
    double a, b;
  };
  std::vector<Spec> specs;
  for (size_t c = 1; c < base.size(); ++c) {
    const std::string where = "scenario.covariates." + base[c];
    if (!distributions.contains(base[c])) throw ConfigError(where + ": no distribution given");
    const Json& d = distributions[base[c]];
    if (!d.is_object() || d.size() != 1) throw ConfigError(where + ": expected one of bernoulli, uniform, normal");
    const auto& [kind, arg] = *d.items().begin();
    auto number = [&](const Json& v) {
      if (!v.is_number()) throw ConfigError(where + "." + kind + ": expected numbers");
      return v.get<double>();
    };
    if (kind == "bernoulli") {
      const double p = number(arg);
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(where + ".bernoulli: probability outside [0, 1]");
      specs.push_back({Dist::Bernoulli, p, 0.0});
    } else if (kind == "uniform" || kind == "normal") {
      if (!arg.is_array() || arg.size() != 2) throw ConfigError(where + "." + kind + ": expected two numbers");
      const double a = number(arg[0]), b = number(arg[1]);
      if (kind == "uniform" && !(a < b)) throw ConfigError(where + ".uniform: lower bound must be below upper");
      if (kind == "normal" && !(b > 0.0)) throw ConfigError(where + ".normal: sd must be positive");
      specs.push_back({kind == "uniform" ? Dist::Uniform : Dist::Normal, a, b});
    } else {
      throw ConfigError(where + ": unknown distribution '" + kind + "'");
    }
  }
  Eigen::MatrixXd z(n, static_cast<Index>(base.size()));
  for (Index i = 0; i < n; ++i) {
    RandomStream rs(seed, make_stream_id(0, 200, static_cast<std::uint64_t>(i)));
    z(i, 0) = 1.0;
    for (size_t c = 0; c < specs.size(); ++c) {
      const Spec& s = specs[c];
      double v = 0.0;
      switch (s.dist) {
        case Dist::Bernoulli: v = rs.uniform() < s.a ? 1.0 : 0.0; break;
        case Dist::Uniform: v = s.a + (s.b - s.a) * rs.uniform(); break;
        case Dist::Normal: v = s.a + s.b * rs.normal(); break;
      }
      z(i, static_cast<Index>(c + 1)) = v;
    }
  }
  return z;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Zero-inflated latent-variable model with covariate-dependent correlations"};
  app.require_subcommand(1);
  Options opt;
  const std::vector<std::string> names = {"simulate", "fit-measurement", "fit", "summarize", "check-feasible"};
  const std::vector<std::string> help = {
      "simulate items and covariates from a scenario", "fit the probit measurement model per side",
      "sample the structural parameters", "summarize draws and convergence",
      "check an alpha matrix against a test set"};
  for (size_t s = 0; s < names.size(); ++s) {
    auto* sub = app.add_subcommand(names[s], help[s]);
    sub->add_option("--config", opt.config, "run configuration (JSON)")->required();
    sub->add_option("--out", opt.out, "output directory");
    sub->add_flag("--force", opt.force, "overwrite existing outputs");
    if (names[s] == "simulate" || names[s] == "fit") sub->add_option("--seed", opt.seed, "random seed");
    if (names[s] == "fit") {
      sub->add_option("--chains", opt.chains, "number of chains");
      sub->add_option("--iterations", opt.iterations, "iterations per chain");
      sub->add_option("--burn-in", opt.burn_in, "burn-in iterations");
      sub->add_option("--thin", opt.thin, "keep every n-th draw");
    }
    if (names[s] == "check-feasible") sub->add_option("--alpha", opt.alpha, "alpha matrix (JSON rows)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = load_config(opt.config);
    configure_workers(cfg.sampler.workers);
    if (cmd == "simulate") return cmd_simulate(cfg, opt, out);
    if (cmd == "fit-measurement") return cmd_fit_measurement(cfg, opt, out, err);
    if (cmd == "fit") return cmd_fit(cfg, opt, out, err);
    if (cmd == "summarize") return cmd_summarize(cfg, opt, out);
    return cmd_check_feasible(cfg, opt, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace corrgress
