#pragma once

// Run configuration for the command-line tool. Every field has a default; the
// JSON form rejects unknown keys at every level and round-trips exactly.
//
// Precedence: defaults < preset < config file < command-line flags.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "blast/error.hpp"
#include "blast/evalsim.hpp"
#include "blast/posterior.hpp"
#include "blast/ranks.hpp"
#include "blast/spectral.hpp"

namespace blast {

using Json = nlohmann::ordered_json;

enum class DrawFormat { kBinary, kCsv, kNone };

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_dir = "blast_out";

  SimScenario scenario;  // scenario.seed is ignored; `seed` drives everything

  // Rank selection.
  Index k_max = 0;
  double tau = 0.2;

  // Fixed dimensions; when unset they are selected from data.
  std::optional<Index> dims_k0;
  std::optional<std::vector<Index>> dims_q_s;

  // Posterior.
  std::size_t n_mc = 500;
  ProjectionWeighting projection_weighting = ProjectionWeighting::kUniform;
  bool center_columns = false;
  double nu0 = 1.0;
  double sigma0_sq = 1.0;
  std::optional<double> tau_lambda_sq;
  std::optional<std::vector<double>> tau_gamma_sq;
  InflationStrategy inflation = InflationStrategy::kMean;
  double inflation_fixed = 1.0;
  InflationVariance inflation_variance = InflationVariance::kVariance;
  InflationNormalization inflation_normalization = InflationNormalization::kPairs;
  GammaInflationSource gamma_inflation_source = GammaInflationSource::kRhoGamma;
  DrawFormat draw_format = DrawFormat::kBinary;

  // Simulation study.
  std::size_t replicates = 1;
  bool fit_replicates = false;
  bool estimate_dims = false;
  bool write_data = true;
  double level = 0.95;
  Index submatrix = 100;

  // Prediction.
  Index predict_study = 1;
  std::optional<std::vector<Index>> observed;  // 1-based; random half otherwise

  bool operator==(const RunConfig&) const = default;

  std::optional<LatentDims> fixed_dims() const {
    if (!dims_k0) return std::nullopt;
    if (!dims_q_s) throw ConfigError("dims.k0 given without dims.q_s");
    return LatentDims::from_shared_and_specific(*dims_k0, *dims_q_s);
  }

  BlastConfig blast_config() const {
    BlastConfig c;
    c.dims = fixed_dims();
    c.ranks.k_max = k_max;
    c.ranks.tau = tau;
    c.weighting = projection_weighting;
    c.center_columns = center_columns;
    c.nu0 = nu0;
    c.sigma0_sq = sigma0_sq;
    c.tau_lambda_sq = tau_lambda_sq;
    c.tau_gamma_sq = tau_gamma_sq;
    c.inflation.strategy = inflation;
    c.inflation.fixed_value = inflation_fixed;
    c.inflation.variance = inflation_variance;
    c.inflation.normalization = inflation_normalization;
    c.gamma_source = gamma_inflation_source;
    c.n_mc = n_mc;
    c.seed = seed;
    c.threads = threads;
    return c;
  }

  SimScenario sim_scenario() const {
    SimScenario sc = scenario;
    sc.seed = seed;
    return sc;
  }

  EvalOptions eval_options() const {
    EvalOptions e;
    e.estimate_dims = estimate_dims;
    e.level = level;
    e.submatrix = submatrix;
    e.check_invariants = true;
    return e;
  }

  void validate() const {
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("ranks.tau must lie in (0, 1)");
    if (k_max < 0) throw ConfigError("ranks.k_max must be >= 0");
    if (!(nu0 > 0.0) || !(sigma0_sq > 0.0)) throw ConfigError("nu0 and sigma0_sq must be positive");
    if (tau_lambda_sq && !(*tau_lambda_sq > 0.0)) throw ConfigError("tau_lambda_sq must be positive");
    if (tau_gamma_sq) {
      for (double t : *tau_gamma_sq) {
        if (!(t > 0.0)) throw ConfigError("tau_gamma_sq entries must be positive");
      }
    }
    if (inflation == InflationStrategy::kFixed && !(inflation_fixed >= 1.0)) {
      throw ConfigError("inflation_fixed must be >= 1");
    }
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("eval.level must lie in (0, 1)");
    if (submatrix < 1) throw ConfigError("eval.submatrix must be >= 1");
    if (replicates < 1) throw ConfigError("eval.replicates must be >= 1");
    if (predict_study < 1) throw ConfigError("predict.study must be >= 1");
    if (dims_k0.has_value() != dims_q_s.has_value()) {
      throw ConfigError("dims needs both k0 and q_s");
    }
    try {
      scenario.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace config_detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<ProjectionWeighting> {
  static constexpr const char* names[] = {"uniform", "by_n"};
};
template <>
struct EnumNames<InflationStrategy> {
  static constexpr const char* names[] = {"mean", "max", "fixed"};
};
template <>
struct EnumNames<InflationVariance> {
  static constexpr const char* names[] = {"sigma2", "sigma2_squared"};
};
template <>
struct EnumNames<InflationNormalization> {
  static constexpr const char* names[] = {"pairs", "terms"};
};
template <>
struct EnumNames<GammaInflationSource> {
  static constexpr const char* names[] = {"rho_gamma", "rho_lambda"};
};
template <>
struct EnumNames<DrawFormat> {
  static constexpr const char* names[] = {"binary", "csv", "none"};
};

template <typename E>
std::string enum_name(E e) {
  return EnumNames<E>::names[static_cast<int>(e)];
}

template <typename E>
E enum_from(const Json& j, const std::string& key) {
  if (!j.is_string()) throw ConfigError(key + ": expected a string");
  const auto s = j.get<std::string>();
  const auto& names = EnumNames<E>::names;
  std::string allowed;
  for (std::size_t i = 0; i < std::size(names); ++i) {
    if (s == names[i]) return static_cast<E>(i);
    allowed += (i ? "|" : "") + std::string(names[i]);
  }
  throw ConfigError(key + ": '" + s + "' is not one of " + allowed);
}

// Reads members of one JSON object, rejecting keys that are never consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + prefix() + k + "'");
    }
  }
  const Json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string path(const std::string& key) const { return prefix() + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (const Json* v = get(key)) out = convert<T>(*v, path(key));
  }
  template <typename T>
  void read_optional(const std::string& key, std::optional<T>& out) {
    if (const Json* v = get(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        out = convert<T>(*v, path(key));
      }
    }
  }
  template <typename E>
  void read_enum(const std::string& key, E& out) {
    if (const Json* v = get(key)) out = enum_from<E>(*v, path(key));
  }

 private:
  std::string prefix() const { return where_.empty() ? "" : where_ + "."; }

  template <typename T>
  static T convert(const Json& v, const std::string& key) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(key + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            throw ConfigError(key + ": expected a nonnegative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(key + ": expected a number");
      }
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace config_detail

inline Json to_json(const RunConfig& c) {
  using config_detail::enum_name;
  Json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["output_dir"] = c.output_dir;
  const auto& s = c.scenario;
  j["scenario"] = {{"num_studies", s.num_studies},
                   {"n_s", s.n_s},
                   {"p", s.p},
                   {"k0", s.k0},
                   {"q_s", s.q_s},
                   {"loading_sparsity", s.loading_sparsity},
                   {"loading_sd", s.loading_sd},
                   {"noise_var_low", s.noise_var_low},
                   {"noise_var_high", s.noise_var_high},
                   {"heteroscedastic", s.heteroscedastic},
                   {"collinear", s.collinear},
                   {"confounder_sd", s.confounder_sd}};
  j["ranks"] = {{"k_max", c.k_max}, {"tau", c.tau}};
  Json dims = Json::object();
  dims["k0"] = c.dims_k0 ? Json(*c.dims_k0) : Json(nullptr);
  dims["q_s"] = c.dims_q_s ? Json(*c.dims_q_s) : Json(nullptr);
  j["dims"] = dims;
  Json fit = Json::object();
  fit["n_mc"] = c.n_mc;
  fit["projection_weighting"] = enum_name(c.projection_weighting);
  fit["center_columns"] = c.center_columns;
  fit["nu0"] = c.nu0;
  fit["sigma0_sq"] = c.sigma0_sq;
  fit["tau_lambda_sq"] = c.tau_lambda_sq ? Json(*c.tau_lambda_sq) : Json(nullptr);
  fit["tau_gamma_sq"] = c.tau_gamma_sq ? Json(*c.tau_gamma_sq) : Json(nullptr);
  fit["inflation"] = enum_name(c.inflation);
  fit["inflation_fixed"] = c.inflation_fixed;
  fit["inflation_variance"] = enum_name(c.inflation_variance);
  fit["inflation_normalization"] = enum_name(c.inflation_normalization);
  fit["gamma_inflation_source"] = enum_name(c.gamma_inflation_source);
  fit["draw_format"] = enum_name(c.draw_format);
  j["fit"] = fit;
  j["eval"] = {{"replicates", c.replicates},
               {"fit", c.fit_replicates},
               {"estimate_dims", c.estimate_dims},
               {"write_data", c.write_data},
               {"level", c.level},
               {"submatrix", c.submatrix}};
  Json pred = Json::object();
  pred["study"] = c.predict_study;
  pred["observed"] = c.observed ? Json(*c.observed) : Json(nullptr);
  j["predict"] = pred;
  return j;
}

/// Applies the keys present in `j` on top of `c`.
inline void merge_json(RunConfig& c, const Json& j) {
  using config_detail::ObjectReader;
  ObjectReader top(j, "");
  top.read("seed", c.seed);
  top.read("threads", c.threads);
  top.read("output_dir", c.output_dir);
  if (const Json* s = top.get("scenario")) {
    ObjectReader r(*s, "scenario");
    auto& sc = c.scenario;
    r.read("num_studies", sc.num_studies);
    r.read("n_s", sc.n_s);
    r.read("p", sc.p);
    r.read("k0", sc.k0);
    r.read("q_s", sc.q_s);
    r.read("loading_sparsity", sc.loading_sparsity);
    r.read("loading_sd", sc.loading_sd);
    r.read("noise_var_low", sc.noise_var_low);
    r.read("noise_var_high", sc.noise_var_high);
    r.read("heteroscedastic", sc.heteroscedastic);
    r.read("collinear", sc.collinear);
    r.read("confounder_sd", sc.confounder_sd);
    r.done();
  }
  if (const Json* s = top.get("ranks")) {
    ObjectReader r(*s, "ranks");
    r.read("k_max", c.k_max);
    r.read("tau", c.tau);
    r.done();
  }
  if (const Json* s = top.get("dims")) {
    if (s->is_null()) {
      c.dims_k0.reset();
      c.dims_q_s.reset();
    } else {
      ObjectReader r(*s, "dims");
      r.read_optional("k0", c.dims_k0);
      r.read_optional("q_s", c.dims_q_s);
      r.done();
    }
  }
  if (const Json* s = top.get("fit")) {
    ObjectReader r(*s, "fit");
    r.read("n_mc", c.n_mc);
    r.read_enum("projection_weighting", c.projection_weighting);
    r.read("center_columns", c.center_columns);
    r.read("nu0", c.nu0);
    r.read("sigma0_sq", c.sigma0_sq);
    r.read_optional("tau_lambda_sq", c.tau_lambda_sq);
    r.read_optional("tau_gamma_sq", c.tau_gamma_sq);
    r.read_enum("inflation", c.inflation);
    r.read("inflation_fixed", c.inflation_fixed);
    r.read_enum("inflation_variance", c.inflation_variance);
    r.read_enum("inflation_normalization", c.inflation_normalization);
    r.read_enum("gamma_inflation_source", c.gamma_inflation_source);
    r.read_enum("draw_format", c.draw_format);
    r.done();
  }
  if (const Json* s = top.get("eval")) {
    ObjectReader r(*s, "eval");
    r.read("replicates", c.replicates);
    r.read("fit", c.fit_replicates);
    r.read("estimate_dims", c.estimate_dims);
    r.read("write_data", c.write_data);
    r.read("level", c.level);
    r.read("submatrix", c.submatrix);
    r.done();
  }
  if (const Json* s = top.get("predict")) {
    ObjectReader r(*s, "predict");
    r.read("study", c.predict_study);
    r.read_optional("observed", c.observed);
    r.done();
  }
  top.done();
}

inline RunConfig from_json(const Json& j) {
  RunConfig c;
  merge_json(c, j);
  return c;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"desk", "paper-small", "paper-large"};
  return names;
}

/// desk: S = 3, n_s = 300, p = 200, k0 = 5, q_s = 4, 3 replicates.
/// paper-small: the same design with 50 replicates and the slab standard
///   deviation that reproduces the published low-dimensional accuracy (0.5).
/// paper-large: S = 5, n_s = 500, p = 5000, 50 replicates.
inline Json preset_json(const std::string& name) {
  if (name == "desk") {
    return Json::parse(R"({"scenario": {"num_studies": 3, "n_s": [300, 300, 300], "p": 200,
      "k0": 5, "q_s": [4, 4, 4]}, "fit": {"n_mc": 500}, "eval": {"replicates": 3}})");
  }
  if (name == "paper-small") {
    return Json::parse(R"({"scenario": {"num_studies": 3, "n_s": [300, 300, 300], "p": 200,
      "k0": 5, "q_s": [4, 4, 4], "loading_sd": 0.5}, "fit": {"n_mc": 500},
      "eval": {"replicates": 50}})");
  }
  if (name == "paper-large") {
    return Json::parse(R"({"scenario": {"num_studies": 5, "n_s": [500, 500, 500, 500, 500],
      "p": 5000, "k0": 5, "q_s": [4, 4, 4, 4, 4]}, "fit": {"n_mc": 500},
      "eval": {"replicates": 50}})");
  }
  throw ConfigError("unknown preset '" + name + "' (desk|paper-small|paper-large)");
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Sets one dotted key ("fit.n_mc") from text; the text is parsed as JSON
/// when possible and used as a string otherwise.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos;) {
    parts.push_back(rest.substr(0, pos));
    rest = rest.substr(pos + 1);
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    Json wrap = Json::object();
    wrap[*it] = patch;
    patch = std::move(wrap);
  }
  merge_json(c, patch);
}

}  // namespace blast
