#include "corrgress/io.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace corrgress {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Strict reader for a JSON object: typed accessors plus a check for unknown keys.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json& at(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing field '" + key + "'");
    return j_.at(key);
  }

  const Json* find(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError(where_ + ": unknown field '" + k + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> used_;
};

double as_double(const Json& j, const std::string& where) {
  if (!j.is_number()) throw ConfigError(where + ": expected a number");
  return j.get<double>();
}

long as_long(const Json& j, const std::string& where) {
  if (!j.is_number_integer()) throw ConfigError(where + ": expected an integer");
  return j.get<long>();
}

std::uint64_t as_u64(const Json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    throw ConfigError(where + ": expected a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

bool as_bool(const Json& j, const std::string& where) {
  if (!j.is_boolean()) throw ConfigError(where + ": expected true or false");
  return j.get<bool>();
}

std::string as_string(const Json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + ": expected a string");
  return j.get<std::string>();
}

std::vector<std::string> as_strings(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected a list of strings");
  std::vector<std::string> out;
  for (size_t i = 0; i < j.size(); ++i) out.push_back(as_string(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

Eigen::VectorXd as_vector(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected a list of numbers");
  Eigen::VectorXd v(static_cast<Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = as_double(j[i], where + "[" + std::to_string(i) + "]");
  return v;
}

Eigen::VectorXd sized_vector(const Json& j, Index n, const std::string& where) {
  Eigen::VectorXd v = as_vector(j, where);
  if (v.size() != n) {
    throw ConfigError(where + ": expected " + std::to_string(n) + " values, got " + std::to_string(v.size()));
  }
  if (!v.allFinite()) throw ConfigError(where + ": values must be finite");
  return v;
}

Json vector_to_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

std::vector<int> term_indices(const CovariateExpansion& ex, const std::vector<std::string>& names,
                              const std::string& where) {
  std::vector<int> out;
  for (const auto& n : names) {
    const int t = ex.find_term(n);
    if (t < 0) throw ConfigError(where + ": unknown covariate '" + n + "'");
    out.push_back(t);
  }
  return out;
}

int base_index(const std::vector<std::string>& base, const std::string& name, const std::string& where) {
  const auto it = std::find(base.begin(), base.end(), name);
  if (it == base.end()) throw ConfigError(where + ": unknown base covariate '" + name + "'");
  return static_cast<int>(it - base.begin());
}

int pair_index(const ModelSpec& spec, const std::string& name, const std::string& where) {
  for (int l = 0; l < spec.L(); ++l)
    if (spec.pair_name(l) == name) return l;
  throw ConfigError(where + ": unknown correlation pair '" + name + "'");
}

const char* kind_name(ExpansionTerm::Kind k) {
  switch (k) {
    case ExpansionTerm::Kind::Constant: return "constant";
    case ExpansionTerm::Kind::Copy: return "copy";
    case ExpansionTerm::Kind::Square: return "square";
    case ExpansionTerm::Kind::Product: return "product";
  }
  return "";
}

// Resolves a path that may be given relative to the config file.
fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path raw(p);
  return raw.is_absolute() ? raw : base / raw;
}

// A JSON value or a string naming a JSON file.
Json inline_or_file(const Json& j, const fs::path& base) {
  if (j.is_string()) return read_json(resolve(base, j.get<std::string>()));
  return j;
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header row");
  t.header = split_line(line);
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw ConfigError(path.string() + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                        " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

Dataset read_dataset(const fs::path& path, const ModelSpec& spec) {
  const CsvTable t = read_csv(path);
  const Index n = static_cast<Index>(t.rows.size());
  std::vector<int> item_cols;
  for (const auto& d : spec.dims) {
    for (const auto& item : d.items) {
      const int c = t.column(item);
      if (c < 0) throw ConfigError(path.string() + ": missing item column '" + item + "'");
      item_cols.push_back(c);
    }
  }
  const auto& base = spec.expansion.base_names();
  std::vector<int> cov_cols;
  for (size_t b = 1; b < base.size(); ++b) {
    const int c = t.column(base[b]);
    if (c < 0) throw ConfigError(path.string() + ": missing covariate column '" + base[b] + "'");
    cov_cols.push_back(c);
  }
  Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic> items(n, static_cast<Index>(item_cols.size()));
  Eigen::MatrixXd z(n, static_cast<Index>(base.size()));
  for (Index i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    const std::string where = path.string() + ": row " + std::to_string(i + 1) + ", column '";
    for (size_t c = 0; c < item_cols.size(); ++c) {
      const std::string& s = row[item_cols[c]];
      if (s == kNaToken) {
        items(i, static_cast<Index>(c)) = kMissing;
      } else if (s == "0" || s == "1") {
        items(i, static_cast<Index>(c)) = static_cast<std::int8_t>(s[0] - '0');
      } else {
        throw ConfigError(where + t.header[item_cols[c]] + "': item value '" + s + "' is not 0, 1 or NA");
      }
    }
    z(i, 0) = 1.0;
    for (size_t c = 0; c < cov_cols.size(); ++c) {
      const std::string& s = row[cov_cols[c]];
      if (s == kNaToken || s.empty()) throw ConfigError(where + t.header[cov_cols[c]] + "': missing covariate value");
      const auto v = parse_double(s);
      if (!v || !std::isfinite(*v)) {
        throw ConfigError(where + t.header[cov_cols[c]] + "': covariate value '" + s + "' is not a finite number");
      }
      z(i, static_cast<Index>(c + 1)) = *v;
    }
  }
  return make_dataset(spec, std::move(items), std::move(z));
}

void write_dataset(const fs::path& path, const ModelSpec& spec, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<std::string> header;
  for (const auto& d : spec.dims) header.insert(header.end(), d.items.begin(), d.items.end());
  const auto& base = spec.expansion.base_names();
  header.insert(header.end(), base.begin() + 1, base.end());
  for (size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << "\n";
  for (Index i = 0; i < data.n(); ++i) {
    for (Index c = 0; c < data.items.cols(); ++c) {
      if (c) out << ",";
      const int v = data.items(i, c);
      out << (v == kMissing ? kNaToken : (v ? "1" : "0"));
    }
    for (Index c = 1; c < data.z.cols(); ++c) out << "," << fmt(data.z(i, c));
    out << "\n";
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

ModelSpec model_from_json(const Json& j) {
  Fields f(j, "model");
  ModelSpec spec;
  const auto base = as_strings(f.at("covariates"), "model.covariates");
  if (base.empty()) throw ConfigError("model.covariates: list the constant first");
  try {
    if (const Json* ex = f.find("expansion")) {
      if (!ex->is_array()) throw ConfigError("model.expansion: expected a list");
      std::vector<ExpansionTerm> terms;
      for (size_t t = 0; t < ex->size(); ++t) {
        const std::string where = "model.expansion[" + std::to_string(t) + "]";
        Fields tf((*ex)[t], where);
        ExpansionTerm term;
        const std::string kind = as_string(tf.at("kind"), tf.path("kind"));
        if (kind == "constant") {
          term.kind = ExpansionTerm::Kind::Constant;
        } else if (kind == "copy" || kind == "square") {
          term.kind = kind == "copy" ? ExpansionTerm::Kind::Copy : ExpansionTerm::Kind::Square;
          term.first = base_index(base, as_string(tf.at("of"), tf.path("of")), where);
        } else if (kind == "product") {
          const auto of = as_strings(tf.at("of"), tf.path("of"));
          if (of.size() != 2) throw ConfigError(where + ".of: a product needs two covariates");
          term.kind = ExpansionTerm::Kind::Product;
          term.first = base_index(base, of[0], where);
          term.second = base_index(base, of[1], where);
        } else {
          throw ConfigError(where + ".kind: unknown term kind '" + kind + "'");
        }
        if (const Json* nm = tf.find("name")) term.name = as_string(*nm, tf.path("name"));
        tf.finish();
        terms.push_back(term);
      }
      spec.expansion = CovariateExpansion(base, terms);
    } else {
      spec.expansion = CovariateExpansion::affine(base);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.expansion: ") + e.what());
  }

  const Json& dims = f.at("dims");
  if (!dims.is_array()) throw ConfigError("model.dims: expected a list");
  for (size_t k = 0; k < dims.size(); ++k) {
    const std::string where = "model.dims[" + std::to_string(k) + "]";
    Fields df(dims[k], where);
    LatentDim d;
    d.name = as_string(df.at("name"), df.path("name"));
    const std::string side = as_string(df.at("side"), df.path("side"));
    if (side != "G" && side != "R") throw ConfigError(where + ".side: expected \"G\" or \"R\"");
    d.side = side == "G" ? Side::G : Side::R;
    d.items = as_strings(df.at("items"), df.path("items"));
    if (const Json* fs_ = df.find("free_scale")) d.free_scale = as_bool(*fs_, df.path("free_scale"));
    df.finish();
    spec.dims.push_back(std::move(d));
  }
  spec.mean_covariates = term_indices(spec.expansion, as_strings(f.at("mean_covariates"), "model.mean_covariates"),
                                      "model.mean_covariates");
  spec.corr_covariates = term_indices(spec.expansion, as_strings(f.at("corr_covariates"), "model.corr_covariates"),
                                      "model.corr_covariates");
  spec.class_covariates = term_indices(
      spec.expansion, as_strings(f.at("class_covariates"), "model.class_covariates"), "model.class_covariates");
  if (const Json* fixed = f.find("alpha_fixed_zero")) {
    if (!fixed->is_array()) throw ConfigError("model.alpha_fixed_zero: expected a list of [pair, covariate]");
    if (spec.K() < 2) throw ConfigError("model.dims: at least two dims are required");
    spec.alpha_free.setConstant(spec.L(), spec.q_corr(), true);
    for (size_t e = 0; e < fixed->size(); ++e) {
      const std::string where = "model.alpha_fixed_zero[" + std::to_string(e) + "]";
      const auto entry = as_strings((*fixed)[e], where);
      if (entry.size() != 2) throw ConfigError(where + ": expected [pair, covariate]");
      const int l = pair_index(spec, entry[0], where);
      const int t = spec.expansion.find_term(entry[1]);
      const auto it = std::find(spec.corr_covariates.begin(), spec.corr_covariates.end(), t);
      if (t < 0 || it == spec.corr_covariates.end()) {
        throw ConfigError(where + ": '" + entry[1] + "' is not a correlation covariate");
      }
      spec.alpha_free(l, it - spec.corr_covariates.begin()) = false;
    }
  }
  f.finish();
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return spec;
}

Json model_to_json(const ModelSpec& spec) {
  Json j;
  j["covariates"] = spec.expansion.base_names();
  Json ex = Json::array();
  const auto& base = spec.expansion.base_names();
  for (const auto& t : spec.expansion.terms()) {
    Json e;
    e["kind"] = kind_name(t.kind);
    if (t.kind == ExpansionTerm::Kind::Copy || t.kind == ExpansionTerm::Kind::Square) e["of"] = base[t.first];
    if (t.kind == ExpansionTerm::Kind::Product) e["of"] = {base[t.first], base[t.second]};
    e["name"] = t.name;
    ex.push_back(e);
  }
  j["expansion"] = ex;
  Json dims = Json::array();
  for (const auto& d : spec.dims) {
    dims.push_back({{"name", d.name}, {"side", d.side == Side::G ? "G" : "R"}, {"items", d.items},
                    {"free_scale", d.free_scale}});
  }
  j["dims"] = dims;
  j["mean_covariates"] = spec.covariate_names(spec.mean_covariates);
  j["corr_covariates"] = spec.covariate_names(spec.corr_covariates);
  j["class_covariates"] = spec.covariate_names(spec.class_covariates);
  if (spec.alpha_free.size() > 0) {
    Json fixed = Json::array();
    const auto names = spec.covariate_names(spec.corr_covariates);
    for (int l = 0; l < spec.L(); ++l)
      for (int m = 0; m < spec.q_corr(); ++m)
        if (!spec.alpha_free(l, m)) fixed.push_back({spec.pair_name(l), names[m]});
    j["alpha_fixed_zero"] = fixed;
  }
  return j;
}

MeasurementParams measurement_from_json(const Json& j, const ModelSpec& spec) {
  Fields f(j, "measurement");
  MeasurementParams phi = MeasurementParams::defaults(spec);
  for (int k = 0; k < spec.K(); ++k) {
    const auto& d = spec.dims[k];
    if (!d.multi_item()) continue;
    const std::string where = "measurement." + d.name;
    Fields df(f.at(d.name), where);
    phi.dims[k].tau = sized_vector(df.at("tau"), d.item_count(), df.path("tau"));
    phi.dims[k].lambda = sized_vector(df.at("lambda"), d.item_count(), df.path("lambda"));
    df.finish();
  }
  f.finish();
  try {
    phi.validate(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("measurement: ") + e.what());
  }
  return phi;
}

Json measurement_to_json(const MeasurementParams& phi, const ModelSpec& spec) {
  Json j = Json::object();
  for (int k = 0; k < spec.K(); ++k) {
    if (!spec.dims[k].multi_item()) continue;
    j[spec.dims[k].name] = {{"tau", vector_to_json(phi.dims[k].tau)}, {"lambda", vector_to_json(phi.dims[k].lambda)}};
  }
  return j;
}

StructuralParams structural_from_json(const Json& j, const ModelSpec& spec) {
  Fields f(j, "structural");
  StructuralParams p = StructuralParams::zeros(spec);
  {
    Fields bf(f.at("beta"), "structural.beta");
    for (int k = 0; k < spec.K(); ++k) {
      p.beta.col(k) = sized_vector(bf.at(spec.dims[k].name), spec.q_mean(), bf.path(spec.dims[k].name));
    }
    bf.finish();
  }
  if (const Json* s = f.find("sigma")) {
    Fields sf(*s, "structural.sigma");
    for (int k = 0; k < spec.K(); ++k) {
      if (const Json* v = sf.find(spec.dims[k].name)) p.sigma(k) = as_double(*v, sf.path(spec.dims[k].name));
    }
    sf.finish();
  }
  if (const Json* a = f.find("alpha")) {
    Fields af(*a, "structural.alpha");
    for (int l = 0; l < spec.L(); ++l) {
      if (const Json* v = af.find(spec.pair_name(l))) {
        p.alpha.row(l) = sized_vector(*v, spec.q_corr(), af.path(spec.pair_name(l))).transpose();
      }
    }
    af.finish();
  }
  if (const Json* g = f.find("gamma")) {
    Fields gf(*g, "structural.gamma");
    for (int c = 0; c < 3; ++c) {
      if (const Json* v = gf.find(kCellNames[c + 1])) {
        p.gamma.row(c) = sized_vector(*v, spec.q_class(), gf.path(kCellNames[c + 1])).transpose();
      }
    }
    gf.finish();
  }
  f.finish();
  try {
    p.validate(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("structural: ") + e.what());
  }
  return p;
}

Json structural_to_json(const StructuralParams& p, const ModelSpec& spec) {
  Json j;
  Json beta, sigma, alpha, gamma;
  for (int k = 0; k < spec.K(); ++k) {
    beta[spec.dims[k].name] = vector_to_json(p.beta.col(k));
    sigma[spec.dims[k].name] = p.sigma(k);
  }
  for (int l = 0; l < spec.L(); ++l) alpha[spec.pair_name(l)] = vector_to_json(p.alpha.row(l).transpose());
  for (int c = 0; c < 3; ++c) gamma[kCellNames[c + 1]] = vector_to_json(p.gamma.row(c).transpose());
  j["beta"] = beta;
  j["sigma"] = sigma;
  j["alpha"] = alpha;
  j["gamma"] = gamma;
  return j;
}

PriorConfig priors_from_json(const Json& j) {
  Fields f(j, "priors");
  PriorConfig p;
  if (const Json* v = f.find("sigma2_gamma")) p.sigma2_gamma = as_double(*v, f.path("sigma2_gamma"));
  if (const Json* v = f.find("sigma2_beta")) p.sigma2_beta = as_double(*v, f.path("sigma2_beta"));
  if (const Json* v = f.find("ig_shape")) p.ig_a0 = as_double(*v, f.path("ig_shape"));
  if (const Json* v = f.find("ig_scale")) p.ig_b0 = as_double(*v, f.path("ig_scale"));
  f.finish();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("priors: ") + e.what());
  }
  return p;
}

Json priors_to_json(const PriorConfig& p) {
  return {{"sigma2_gamma", p.sigma2_gamma}, {"sigma2_beta", p.sigma2_beta}, {"ig_shape", p.ig_a0},
          {"ig_scale", p.ig_b0}};
}

SamplerConfig sampler_from_json(const Json& j) {
  Fields f(j, "sampler");
  SamplerConfig c;
  if (const Json* v = f.find("chains")) c.chains = static_cast<int>(as_long(*v, f.path("chains")));
  if (const Json* v = f.find("iterations")) c.iterations = as_long(*v, f.path("iterations"));
  if (const Json* v = f.find("burn_in")) c.burn_in = as_long(*v, f.path("burn_in"));
  if (const Json* v = f.find("thin")) c.thin = as_long(*v, f.path("thin"));
  if (const Json* v = f.find("rw_constant")) c.rw_constant_C = as_double(*v, f.path("rw_constant"));
  if (const Json* v = f.find("tune")) c.tune_C = as_bool(*v, f.path("tune"));
  if (const Json* v = f.find("rejection_band")) {
    const Eigen::VectorXd band = sized_vector(*v, 2, f.path("rejection_band"));
    c.target_rejection_lo = band(0);
    c.target_rejection_hi = band(1);
  }
  if (const Json* v = f.find("tune_window")) c.tune_window = as_long(*v, f.path("tune_window"));
  if (const Json* v = f.find("seed")) c.seed = as_u64(*v, f.path("seed"));
  if (const Json* v = f.find("rebaseline_every")) c.rebaseline_every = as_long(*v, f.path("rebaseline_every"));
  if (const Json* v = f.find("workers")) c.workers = static_cast<int>(as_long(*v, f.path("workers")));
  if (const Json* v = f.find("kernel")) {
    const std::string k = as_string(*v, f.path("kernel"));
    if (k == "incremental") {
      c.kernel = KernelMode::Incremental;
    } else if (k == "dense") {
      c.kernel = KernelMode::Dense;
    } else {
      throw ConfigError("sampler.kernel: expected \"incremental\" or \"dense\"");
    }
  }
  f.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("sampler: ") + e.what());
  }
  return c;
}

Json sampler_to_json(const SamplerConfig& c) {
  return {{"chains", c.chains},
          {"iterations", c.iterations},
          {"burn_in", c.burn_in},
          {"thin", c.thin},
          {"rw_constant", c.rw_constant_C},
          {"tune", c.tune_C},
          {"rejection_band", {c.target_rejection_lo, c.target_rejection_hi}},
          {"tune_window", c.effective_tune_window()},
          {"seed", c.seed},
          {"rebaseline_every", c.rebaseline_every},
          {"workers", c.workers},
          {"kernel", c.kernel == KernelMode::Incremental ? "incremental" : "dense"}};
}

TestSet test_set_from_json(const Json& j, const ModelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& z) {
  Fields f(j, "test_set");
  TestSetRecipe recipe = TestSetRecipe::HyperrectangleVertices;
  if (const Json* r = f.find("recipe")) {
    try {
      recipe = recipe_from_name(as_string(*r, f.path("recipe")));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("test_set.recipe: ") + e.what());
    }
  }
  const CovariateExpansion ex = spec.corr_expansion();
  std::vector<std::optional<VariableBounds>> bounds(static_cast<size_t>(ex.base_dim()));
  if (const Json* b = f.find("bounds")) {
    Fields bf(*b, "test_set.bounds");
    for (const auto& [name, val] : b->items()) {
      const int idx = base_index(ex.base_names(), name, "test_set.bounds");
      const Eigen::VectorXd v = sized_vector(bf.at(name), 2, bf.path(name));
      if (!(v(0) < v(1))) throw ConfigError(bf.path(name) + ": lower bound must be below upper bound");
      bounds[idx] = VariableBounds{v(0), v(1)};
    }
    bf.finish();
  }
  f.finish();
  try {
    return build_test_set(ex, z, recipe, bounds);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("test_set: ") + e.what());
  }
}

std::vector<Profile> profiles_from_json(const Json& j) {
  std::vector<Profile> out;
  if (!j.is_null()) {
    if (!j.is_array()) throw ConfigError("profiles: expected a list");
    for (size_t p = 0; p < j.size(); ++p) {
      const std::string where = "profiles[" + std::to_string(p) + "]";
      Fields f(j[p], where);
      Profile prof;
      prof.name = as_string(f.at("name"), f.path("name"));
      if (const Json* fixed = f.find("fixed")) {
        if (!fixed->is_object()) throw ConfigError(where + ".fixed: expected an object");
        for (const auto& [name, v] : fixed->items()) {
          prof.fixed.emplace_back(name, as_double(v, where + ".fixed." + name));
        }
      }
      f.finish();
      out.push_back(std::move(prof));
    }
  }
  if (out.empty()) out.push_back({"overall", {}});
  return out;
}

Json matrix_to_json(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  Json a = Json::array();
  for (Index r = 0; r < m.rows(); ++r) a.push_back(vector_to_json(m.row(r).transpose()));
  return a;
}

Eigen::MatrixXd matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a non-empty list of rows");
  const Eigen::VectorXd first = as_vector(j[0], what + "[0]");
  Eigen::MatrixXd m(static_cast<Index>(j.size()), first.size());
  for (size_t r = 0; r < j.size(); ++r) {
    m.row(static_cast<Index>(r)) = sized_vector(j[r], first.size(), what + "[" + std::to_string(r) + "]").transpose();
  }
  return m;
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void ensure_writable(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths) {
    if (fs::exists(p)) throw ConfigError(p.string() + " exists; pass --force to overwrite");
  }
}

void write_text(const fs::path& path, const std::string& text, bool force) {
  ensure_writable({path}, force);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("error writing " + path.string());
}

void write_json(const fs::path& path, const Json& j, bool force) { write_text(path, j.dump(2) + "\n", force); }

void write_draws(const fs::path& csv, const DrawStore& draws, bool force) {
  ensure_writable({csv}, force);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  std::ofstream out(csv);
  out << "chain,iteration";
  for (const auto& c : draws.columns) out << "," << c;
  out << "\n";
  std::string line;
  for (Index r = 0; r < draws.rows(); ++r) {
    line = std::to_string(draws.chain[r]) + "," + std::to_string(draws.iteration[r]);
    for (Index c = 0; c < draws.values.cols(); ++c) {
      line += ',';
      line += fmt(draws.values(r, c));
    }
    out << line << "\n";
  }
  if (!out) throw std::runtime_error("error writing " + csv.string());
}

Json draws_metadata(const DrawStore& draws, const SamplerConfig& config, const PriorConfig& priors) {
  Json j;
  j["version"] = CORRGRESS_VERSION;
  j["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION);
  j["seed"] = config.seed;
  j["sampler"] = sampler_to_json(config);
  j["priors"] = priors_to_json(priors);
  j["wall_seconds"] = draws.wall_seconds;
  j["retained_draws"] = draws.rows();
  Json chains = Json::array();
  for (const auto& t : draws.tallies) {
    Json c;
    c["rw_constant"] = t.rw_constant_C;
    c["rebaselines"] = t.rebaselines;
    c["max_drift"] = t.max_drift;
    c["alpha_proposals"] = matrix_to_json(t.alpha_proposals.cast<double>());
    c["alpha_accepted"] = matrix_to_json(t.alpha_accepted.cast<double>());
    c["sigma_proposals"] = vector_to_json(t.sigma_proposals.cast<double>());
    c["sigma_accepted"] = vector_to_json(t.sigma_accepted.cast<double>());
    Json rej = Json::array();
    const Eigen::MatrixXd rates = t.alpha_rejection_rates();
    for (Index l = 0; l < rates.rows(); ++l) {
      Json row = Json::array();
      for (Index m = 0; m < rates.cols(); ++m) row.push_back(std::isnan(rates(l, m)) ? Json() : Json(rates(l, m)));
      rej.push_back(row);
    }
    c["alpha_rejection_rates"] = rej;
    chains.push_back(c);
  }
  j["chains"] = chains;
  return j;
}

DrawStore read_draws(const fs::path& csv, const fs::path& metadata) {
  const CsvTable t = read_csv(csv);
  if (t.header.size() < 3 || t.header[0] != "chain" || t.header[1] != "iteration") {
    throw ConfigError(csv.string() + ": expected columns chain, iteration, parameters...");
  }
  DrawStore d;
  d.columns.assign(t.header.begin() + 2, t.header.end());
  d.values.resize(static_cast<Index>(t.rows.size()), static_cast<Index>(d.columns.size()));
  for (size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto ch = parse_double(row[0]);
    const auto it = parse_double(row[1]);
    if (!ch || !it) throw ConfigError(csv.string() + ": row " + std::to_string(r + 1) + ": bad chain or iteration");
    d.chain.push_back(static_cast<int>(*ch));
    d.iteration.push_back(static_cast<long>(*it));
    for (size_t c = 2; c < row.size(); ++c) {
      const auto v = parse_double(row[c]);
      if (!v) {
        throw ConfigError(csv.string() + ": row " + std::to_string(r + 1) + ", column '" + t.header[c] +
                          "': not a number");
      }
      d.values(static_cast<Index>(r), static_cast<Index>(c - 2)) = *v;
    }
  }
  const Json meta = read_json(metadata);
  try {
    d.wall_seconds = meta.value("wall_seconds", 0.0);
    for (const auto& c : meta.at("chains")) {
      ChainTally tally;
      tally.rw_constant_C = c.at("rw_constant").get<double>();
      tally.rebaselines = c.at("rebaselines").get<long>();
      tally.max_drift = c.at("max_drift").get<double>();
      tally.alpha_proposals = matrix_from_json(c.at("alpha_proposals"), "alpha_proposals").cast<long>();
      tally.alpha_accepted = matrix_from_json(c.at("alpha_accepted"), "alpha_accepted").cast<long>();
      tally.sigma_proposals = as_vector(c.at("sigma_proposals"), "sigma_proposals").cast<int>();
      tally.sigma_accepted = as_vector(c.at("sigma_accepted"), "sigma_accepted").cast<int>();
      d.tallies.push_back(std::move(tally));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(metadata.string() + ": " + e.what());
  }
  for (int c : d.chain) {
    if (c < 0 || c >= d.chain_count()) throw ConfigError(csv.string() + ": chain index without metadata");
  }
  return d;
}

Json summary_to_json(const std::vector<ParameterSummary>& rows) {
  Json a = Json::array();
  for (const auto& r : rows) {
    Json q;
    for (size_t k = 0; k < kSummaryProbs.size(); ++k) {
      char key[16];
      std::snprintf(key, sizeof key, "%g%%", 100.0 * kSummaryProbs[k]);
      q[key] = r.quantiles[k];
    }
    a.push_back({{"parameter", r.name}, {"mean", r.mean}, {"sd", r.sd}, {"quantiles", q}, {"significance", r.star}});
  }
  return a;
}

Json convergence_to_json(const ConvergenceReport& rep) {
  Json j;
  Json rows = Json::array();
  for (const auto& r : rep.rows) rows.push_back({{"parameter", r.name}, {"rhat", r.rhat}, {"ess", r.ess}});
  j["parameters"] = rows;
  Json chains = Json::array();
  for (size_t c = 0; c < rep.alpha_rejection.size(); ++c) {
    Json rej = Json::array();
    for (Index l = 0; l < rep.alpha_rejection[c].rows(); ++l) {
      Json row = Json::array();
      for (Index m = 0; m < rep.alpha_rejection[c].cols(); ++m) {
        const double v = rep.alpha_rejection[c](l, m);
        row.push_back(std::isnan(v) ? Json() : Json(v));
      }
      rej.push_back(row);
    }
    Json sig = Json::array();
    for (Index k = 0; k < rep.sigma_acceptance[c].size(); ++k) {
      const double v = rep.sigma_acceptance[c](k);
      sig.push_back(std::isnan(v) ? Json() : Json(v));
    }
    chains.push_back({{"rw_constant", rep.rw_constant[c]}, {"alpha_rejection_rates", rej}, {"sigma_acceptance", sig}});
  }
  j["chains"] = chains;
  return j;
}

Json table_to_json(const ProfileTable& t) {
  Json j = Json::object();
  for (Index r = 0; r < t.values.rows(); ++r) {
    Json row = Json::object();
    for (Index c = 0; c < t.values.cols(); ++c) row[t.columns[c]] = t.values(r, c);
    j[t.rows[r]] = row;
  }
  return j;
}

RunConfig load_config(const fs::path& path) {
  const Json j = read_json(path);
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  RunConfig cfg;
  cfg.source = path;
  Fields f(j, "config");
  if (const Json* v = f.find("data")) cfg.data_path = resolve(base, as_string(*v, "config.data"));
  if (const Json* v = f.find("model")) {
    if (v->is_string()) {
      const fs::path mp = resolve(base, v->get<std::string>());
      if (!fs::exists(mp)) throw ConfigError("config.model: file " + mp.string() + " does not exist");
    }
    cfg.model = model_from_json(inline_or_file(*v, base));
  }
  if (const Json* v = f.find("measurement")) {
    cfg.measurement_path = resolve(base, as_string(*v, "config.measurement"));
    if (!fs::exists(*cfg.measurement_path)) {
      throw ConfigError("config.measurement: file " + cfg.measurement_path->string() + " does not exist");
    }
  }
  if (const Json* v = f.find("test_set")) {
    if (!v->is_object()) throw ConfigError("config.test_set: expected an object");
    cfg.test_set = *v;
  }
  if (const Json* v = f.find("priors")) cfg.priors = priors_from_json(*v);
  if (const Json* v = f.find("sampler")) cfg.sampler = sampler_from_json(*v);
  if (const Json* v = f.find("output")) cfg.output_dir = resolve(base, as_string(*v, "config.output"));
  cfg.profiles = profiles_from_json(f.find("profiles") ? *f.find("profiles") : Json());
  if (const Json* v = f.find("scenario")) cfg.scenario = *v;
  if (const Json* v = f.find("alpha")) cfg.alpha = v->is_string() ? Json(resolve(base, v->get<std::string>()).string()) : *v;
  f.finish();
  return cfg;
}

}  // namespace corrgress
