#pragma once

// Subcommands of the command-line tool. Each takes a validated RunConfig and
// writes its outputs under config.output_dir. Progress and warnings go to the
// log stream as `LEVEL key=value ...` lines.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "blast/config.hpp"
#include "blast/error.hpp"
#include "blast/evalsim.hpp"
#include "blast/io.hpp"
#include "blast/posterior.hpp"
#include "blast/ranks.hpp"

namespace blast::cli {

namespace fs = std::filesystem;

class Logger {
 public:
  explicit Logger(std::ostream& out) : out_(out) {}

  void operator()(const std::string& level, const std::string& event,
                  const std::vector<std::pair<std::string, std::string>>& fields = {}) const {
    std::string line = level + " event=" + event;
    for (const auto& [k, v] : fields) line += " " + k + "=" + quote(v);
    out_ << line << '\n' << std::flush;
  }
  void info(const std::string& event,
            const std::vector<std::pair<std::string, std::string>>& fields = {}) const {
    (*this)("INFO", event, fields);
  }
  void warn(const std::string& event,
            const std::vector<std::pair<std::string, std::string>>& fields = {}) const {
    (*this)("WARN", event, fields);
  }

 private:
  static std::string quote(const std::string& v) {
    if (v.find_first_of(" \t\"=") == std::string::npos && !v.empty()) return v;
    std::string q = "\"";
    for (char c : v) {
      if (c == '"' || c == '\\') q += '\\';
      q += c;
    }
    return q + "\"";
  }
  std::ostream& out_;
};

inline std::string num(double v) { return io::format_double(v); }
inline std::string num(Index v) { return std::to_string(v); }
inline std::string num(std::size_t v) { return std::to_string(v); }

inline void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw ConfigError("write failed for " + path.string());
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline fs::path prepare_output(const RunConfig& cfg) {
  const fs::path out = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) {
    throw ConfigError("cannot create output directory " + out.string());
  }
  return out;
}

/// Finite values as numbers, NaN as null.
inline Json jnum(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json jvec(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(jnum(x));
  return a;
}

inline Json jvec(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(jnum(v(i)));
  return a;
}

inline Json dims_json(const LatentDims& d) {
  return {{"k0", d.k0}, {"k_s", d.k_s}, {"q_s", d.q_s}};
}

/// Configuration echo without machine-dependent fields, so reports are
/// identical for any thread count or output location.
inline Json config_echo(const RunConfig& cfg) {
  Json j = to_json(cfg);
  j.erase("threads");
  j.erase("output_dir");
  return j;
}

inline Json ranks_json(const RankSelection& sel, const RunConfig& cfg) {
  Json traces = Json::array();
  for (std::size_t s = 0; s < sel.traces.size(); ++s) {
    const auto& t = sel.traces[s];
    traces.push_back({{"study", s + 1},
                      {"n_s", t.n_s},
                      {"p", t.p},
                      {"k_hat", sel.dims.k_s[s]},
                      {"loglik", t.loglik},
                      {"jic", t.jic}});
  }
  Json j;
  j["dims"] = dims_json(sel.dims);
  j["k_max"] = sel.k_max;
  j["tau"] = cfg.tau;
  j["traces"] = traces;
  j["p_tilde_spectrum"] = jvec(sel.p_tilde_spectrum);
  j["warnings"] = sel.warnings;
  return j;
}

// ---------------------------------------------------------------------------
// ranks

inline Json cmd_ranks(const RunConfig& cfg, const fs::path& data_dir, const Logger& log) {
  const fs::path out = prepare_output(cfg);
  MultiStudyDataset data = io::read_study_dir(data_dir);
  if (cfg.center_columns) data = center_columns(data);
  log.info("ranks.start", {{"studies", num(data.num_studies())}, {"p", num(data.num_outcomes())}});
  RankSelectionConfig rc;
  rc.k_max = cfg.k_max;
  rc.tau = cfg.tau;
  rc.weighting = cfg.projection_weighting;
  rc.threads = cfg.threads;
  const RankSelection sel = select_dims(data, rc);
  for (const auto& w : sel.warnings) log.warn("ranks.saturation", {{"message", w}});
  const Json j = ranks_json(sel, cfg);
  write_json(out / "ranks.json", j);
  log.info("ranks.done", {{"k0", num(sel.dims.k0)}, {"file", (out / "ranks.json").string()}});
  return j;
}

// ---------------------------------------------------------------------------
// fit

inline Json cmd_fit(const RunConfig& cfg, const fs::path& data_dir, const Logger& log) {
  const fs::path out = prepare_output(cfg);
  const auto start = std::chrono::steady_clock::now();
  const MultiStudyDataset data = io::read_study_dir(data_dir);
  const double load_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log.info("fit.start", {{"studies", num(data.num_studies())},
                         {"p", num(data.num_outcomes())},
                         {"n", num(data.total_rows())},
                         {"n_mc", num(cfg.n_mc)},
                         {"threads", std::to_string(cfg.threads)}});
  const BlastResult res = run_blast(data, cfg.blast_config());
  for (const auto& w : res.warnings) log.warn("ranks.saturation", {{"message", w}});
  for (const auto& t : res.timings) log.info("fit.stage", {{"stage", t.stage}, {"seconds", num(t.seconds)}});

  const auto write_start = std::chrono::steady_clock::now();
  io::write_point_estimates(out, res.spec, res.point);
  Json draws = {{"n_mc", res.draws.size()}, {"format", config_detail::enum_name(cfg.draw_format)}};
  if (!res.draws.empty() && cfg.draw_format == DrawFormat::kBinary) {
    io::write_draws_binary(out / "draws.bin", res.draws);
    Json order = Json::array({"lambda"});
    for (Index s = 0; s < data.num_studies(); ++s) order.push_back("gamma_" + std::to_string(s + 1));
    order.push_back("sigma_sq");
    const Json manifest = {{"format", "BLASTDRW"},
                           {"version", io::kDrawVersion},
                           {"file", "draws.bin"},
                           {"byte_order", "little"},
                           {"layout", "row-major f64 blocks, each prefixed by u64 rows and u64 cols"},
                           {"num_draws", res.draws.size()},
                           {"blocks_per_draw", order.size()},
                           {"block_order", order},
                           {"p", data.num_outcomes()},
                           {"k0", res.dims.k0},
                           {"q_s", res.dims.q_s}};
    write_json(out / "draws.json", manifest);
    draws["file"] = "draws.bin";
    draws["manifest"] = "draws.json";
  } else if (!res.draws.empty() && cfg.draw_format == DrawFormat::kCsv) {
    io::write_draws_csv(out / "draws", res.draws);
    draws["directory"] = "draws";
  }

  Json hp;
  hp["tau_lambda_sq"] = res.spec.hyper.tau_lambda_sq;
  Json tg = Json::array();
  for (const auto& t : res.spec.hyper.tau_gamma_sq) tg.push_back(t ? Json(*t) : Json(nullptr));
  hp["tau_gamma_sq"] = tg;
  hp["nu0"] = res.spec.hyper.nu0;
  hp["sigma0_sq"] = res.spec.hyper.sigma0_sq;

  Json posterior;
  posterior["gamma_n"] = res.spec.gamma_n;
  posterior["k_scalar"] = res.spec.k_scalar;
  posterior["rho_lambda"] = res.spec.rho_lambda;
  posterior["rho_gamma"] = res.spec.rho_gamma;
  posterior["inflation"] = config_detail::enum_name(cfg.inflation);
  posterior["inflation_variance"] = config_detail::enum_name(cfg.inflation_variance);
  posterior["gamma_inflation_source"] = config_detail::enum_name(cfg.gamma_inflation_source);
  posterior["psi_s_zero"] = res.spec.psi_s_zero;
  posterior["p_tilde_spectrum"] = jvec(res.factors.p_tilde_spectrum);

  std::vector<Index> n_s;
  for (const auto& y : data.studies) n_s.push_back(y.rows());
  Json fit;
  fit["format"] = "blast-fit";
  fit["version"] = 1;
  fit["num_studies"] = data.num_studies();
  fit["p"] = data.num_outcomes();
  fit["n_s"] = n_s;
  fit["outcome_names"] = data.outcome_names;
  fit["dims"] = dims_json(res.dims);
  fit["rank_selection"] = res.selection ? ranks_json(*res.selection, cfg) : Json(nullptr);
  fit["hyperparameters"] = hp;
  fit["posterior"] = posterior;
  Json files = {{"mu_lambda", "mu_lambda.csv"}, {"diagonals", "diagonals.csv"}};
  Json mg = Json::array();
  for (Index s = 0; s < data.num_studies(); ++s) {
    mg.push_back(res.dims.q_s[static_cast<std::size_t>(s)] > 0
                     ? Json("mu_gamma_" + std::to_string(s + 1) + ".csv")
                     : Json(nullptr));
  }
  files["mu_gamma"] = mg;
  fit["files"] = files;
  fit["draws"] = draws;
  fit["warnings"] = res.warnings;
  fit["config"] = config_echo(cfg);
  write_json(out / "fit.json", fit);

  Json timings;
  timings["threads"] = cfg.threads;
  Json stages = Json::array();
  stages.push_back({{"stage", "load"}, {"seconds", load_seconds}});
  for (const auto& t : res.timings) stages.push_back({{"stage", t.stage}, {"seconds", t.seconds}});
  stages.push_back({{"stage", "write"},
                    {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                              write_start)
                                    .count()}});
  timings["stages"] = stages;
  timings["total_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(out / "timings.json", timings);
  log.info("fit.done", {{"k0", num(res.dims.k0)},
                        {"rho_lambda", num(res.spec.rho_lambda)},
                        {"dir", out.string()}});
  return fit;
}

// ---------------------------------------------------------------------------
// simulate

inline void write_truth(const fs::path& dir, const SimTruth& truth) {
  io::write_csv(dir / "lambda0.csv", io::numbered("l", truth.lambda0.cols()), truth.lambda0);
  for (std::size_t s = 0; s < truth.gamma0_s.size(); ++s) {
    const std::string id = std::to_string(s + 1);
    if (truth.gamma0_s[s].cols() > 0) {
      io::write_csv(dir / ("gamma0_" + id + ".csv"), io::numbered("g", truth.gamma0_s[s].cols()),
                    truth.gamma0_s[s]);
      io::write_csv(dir / ("f0_" + id + ".csv"), io::numbered("f", truth.f0_s[s].cols()),
                    truth.f0_s[s]);
    }
    io::write_csv(dir / ("sigma0_sq_" + id + ".csv"), {"sigma_sq"}, Matrix(truth.sigma0_sq_s[s]));
    if (truth.m0_s[s].cols() > 0) {
      io::write_csv(dir / ("m0_" + id + ".csv"), io::numbered("m", truth.m0_s[s].cols()),
                    truth.m0_s[s]);
    }
  }
}

inline Json metrics_row(const MetricsReport& m, std::size_t r, std::uint64_t seed,
                        const std::string& invariant_failure) {
  return {{"replicate", r + 1},
          {"seed", seed},
          {"rel_error_shared", jnum(m.rel_error_shared)},
          {"rel_error_specific", jvec(m.rel_error_specific)},
          {"procrustes_shared", jvec(m.procrustes_shared)},
          {"procrustes_specific", jvec(m.procrustes_specific)},
          {"coverage_shared", jnum(m.coverage_shared)},
          {"coverage_specific", jvec(m.coverage_specific)},
          {"rho_lambda", m.rho_lambda},
          {"rho_gamma", m.rho_gamma},
          {"dims", dims_json(m.dims)},
          {"dims_match", m.dims_match},
          {"invariants_ok", invariant_failure.empty()}};
}

struct MetricColumn {
  std::string name;
  double (*get)(const MetricsReport&);
};

inline const std::vector<MetricColumn>& metric_columns() {
  static const std::vector<MetricColumn> cols = {
      {"rel_error_shared", [](const MetricsReport& m) { return m.rel_error_shared; }},
      {"rel_error_specific", [](const MetricsReport& m) { return m.rel_error_specific_mean(); }},
      {"procrustes_shared", [](const MetricsReport& m) { return m.procrustes_shared_mean(); }},
      {"procrustes_specific", [](const MetricsReport& m) { return m.procrustes_specific_mean(); }},
      {"coverage_shared", [](const MetricsReport& m) { return m.coverage_shared; }},
      {"coverage_specific", [](const MetricsReport& m) { return m.coverage_specific_mean(); }},
  };
  return cols;
}

inline Json cmd_simulate(const RunConfig& cfg, const Logger& log) {
  const fs::path out = prepare_output(cfg);
  const SimScenario sc = cfg.sim_scenario();
  Json result = {{"scenario", config_echo(cfg)["scenario"]}, {"seed", cfg.seed}};
  if (cfg.write_data) {
    log.info("simulate.generate", {{"studies", num(sc.num_studies)}, {"p", num(sc.p)}});
    auto [data, truth] = generate(sc);
    io::write_study_dir(out / "data", data);
    write_truth(out / "truth", truth);
    write_json(out / "truth" / "scenario.json", config_echo(cfg));
    result["data_dir"] = "data";
    result["truth_dir"] = "truth";
  }
  if (!cfg.fit_replicates) {
    write_json(out / "simulate.json", result);
    return result;
  }

  log.info("simulate.replicates", {{"replicates", num(cfg.replicates)},
                                   {"threads", std::to_string(cfg.threads)}});
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::string> failures;
  const auto reports = run_replicates(sc, cfg.blast_config(), cfg.eval_options(),
                                      cfg.replicates, cfg.threads, &failures);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  Json rows = Json::array();
  std::ostringstream csv;
  csv << "replicate,seed";
  for (const auto& c : metric_columns()) csv << ',' << c.name;
  csv << '\n';
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const std::uint64_t seed = derive_seed(sc.seed, {"replicate", r});
    rows.push_back(metrics_row(reports[r], r, seed, failures[r]));
    if (!failures[r].empty()) {
      log.warn("simulate.invariant", {{"replicate", num(r + 1)}, {"message", failures[r]}});
    }
    if (!reports[r].dims_match) {
      log.warn("simulate.dims_mismatch", {{"replicate", num(r + 1)}});
    }
    csv << r + 1 << ',' << seed;
    for (const auto& c : metric_columns()) csv << ',' << io::format_double(c.get(reports[r]));
    csv << '\n';
  }
  Json summary = Json::object();
  std::string mean_row = "mean,", se_row = "se,";
  for (const auto& c : metric_columns()) {
    std::vector<double> v;
    for (const auto& m : reports) v.push_back(c.get(m));
    const ReplicateSummary s = summarize(v);
    summary[c.name] = {{"mean", jnum(s.mean)}, {"se", jnum(s.se)}, {"median", jnum(s.median)}};
    mean_row += "," + io::format_double(s.mean);
    se_row += "," + io::format_double(s.se);
  }
  csv << mean_row << '\n' << se_row << '\n';
  result["replicates"] = rows;
  result["summary"] = summary;
  write_json(out / "metrics.json", result);
  {
    std::ofstream f(out / "metrics.csv", std::ios::trunc);
    if (!f) throw ConfigError("cannot write metrics.csv");
    f << csv.str();
  }
  write_json(out / "timings.json", {{"threads", cfg.threads}, {"total_seconds", seconds}});
  log.info("simulate.done", {{"replicates", num(cfg.replicates)}, {"seconds", num(seconds)}});
  return result;
}

// ---------------------------------------------------------------------------
// predict

inline double sorted_quantile(std::vector<double> v, double prob) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  return quantile_type7(v, prob);
}

inline Json cmd_predict(const RunConfig& cfg, const fs::path& fit_dir, const fs::path& test_csv,
                        const Logger& log) {
  const fs::path out = prepare_output(cfg);
  const Json fit = read_json(fit_dir / "fit.json");
  if (fit.value("format", "") != "blast-fit") throw DataError(fit_dir.string() + ": not a fit directory");
  const auto studies = fit.at("num_studies").get<std::size_t>();
  const auto p = fit.at("p").get<Index>();
  const auto names = fit.at("outcome_names").get<std::vector<std::string>>();
  if (cfg.predict_study < 1 || static_cast<std::size_t>(cfg.predict_study) > studies) {
    throw ConfigError("predict.study must lie in [1, " + std::to_string(studies) + "]");
  }
  const PointEstimates pe = io::read_point_estimates(fit_dir, studies);
  const CovarianceModel cov =
      study_covariance(pe, static_cast<std::size_t>(cfg.predict_study - 1));

  const io::CsvTable test = io::read_csv(test_csv);
  if (test.values.cols() != p) {
    throw DataError(test_csv.string() + ": expected " + std::to_string(p) + " columns");
  }
  if (!names.empty() && test.header != names) {
    throw DataError(test_csv.string() + ": header differs from the fitted outcomes");
  }
  std::vector<Index> observed;
  if (cfg.observed) {
    for (Index j : *cfg.observed) {
      if (j < 1 || j > p) {
        throw DataError("predict.observed index " + std::to_string(j) + " outside [1, " +
                        std::to_string(p) + "]");
      }
      observed.push_back(j - 1);
    }
  } else {
    observed = random_half_split(p, cfg.seed);
  }
  log.info("predict.start", {{"rows", num(test.values.rows())},
                             {"observed", num(observed.size())},
                             {"study", num(cfg.predict_study)}});
  const PredictionSummary ps = predictive_evaluation(cov, test.values, observed, cfg.level);
  std::vector<double> nmse(ps.nmse.data(), ps.nmse.data() + ps.nmse.size());

  Json obs = Json::array(), tgt = Json::array();
  for (Index j : observed) obs.push_back(j + 1);
  for (Index j : ps.targets) tgt.push_back(j + 1);
  Json j;
  j["study"] = cfg.predict_study;
  j["n_test"] = test.values.rows();
  j["level"] = cfg.level;
  j["observed"] = obs;
  j["targets"] = tgt;
  j["nmse"] = {{"mean", jnum(MetricsReport::mean_of(nmse))},
               {"q1", jnum(sorted_quantile(nmse, 0.25))},
               {"q3", jnum(sorted_quantile(nmse, 0.75))}};
  j["coverage"] = ps.coverage;
  j["loglik"] = ps.loglik;
  write_json(out / "predict.json", j);
  Matrix col(ps.nmse.size(), 1);
  col.col(0) = ps.nmse;
  io::write_csv(out / "nmse.csv", {"nmse"}, col);
  log.info("predict.done", {{"coverage", num(ps.coverage)}, {"loglik", num(ps.loglik)}});
  return j;
}

// ---------------------------------------------------------------------------
// report

inline std::string pct(const Json& v) {
  if (v.is_null()) return "NA";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v.get<double>();
  return s.str();
}

/// Human-readable summary of whatever reports exist in `dir`.
inline void cmd_report(const fs::path& dir, std::ostream& out) {
  bool any = false;
  if (fs::exists(dir / "metrics.json")) {
    any = true;
    const Json m = read_json(dir / "metrics.json");
    out << "Simulation study (" << m.at("replicates").size()
        << " replicates; values x 1e-2, mean^se)\n";
    for (const auto& [name, s] : m.at("summary").items()) {
      out << "  " << std::left << std::setw(22) << name << pct(s.at("mean")) << "^"
          << pct(s.at("se")) << "\n";
    }
  }
  if (fs::exists(dir / "fit.json")) {
    any = true;
    const Json f = read_json(dir / "fit.json");
    out << "Fit: S = " << f.at("num_studies") << ", p = " << f.at("p")
        << ", k0 = " << f.at("dims").at("k0") << ", q_s = " << f.at("dims").at("q_s").dump()
        << "\n  rho_lambda = " << f.at("posterior").at("rho_lambda")
        << ", rho_gamma = " << f.at("posterior").at("rho_gamma").dump()
        << "\n  draws: " << f.at("draws").at("n_mc") << " (" << f.at("draws").at("format").get<std::string>()
        << ")\n";
  }
  if (fs::exists(dir / "ranks.json")) {
    any = true;
    const Json r = read_json(dir / "ranks.json");
    out << "Ranks: k0 = " << r.at("dims").at("k0") << ", k_s = " << r.at("dims").at("k_s").dump()
        << ", q_s = " << r.at("dims").at("q_s").dump() << "\n";
  }
  if (fs::exists(dir / "predict.json")) {
    any = true;
    const Json p = read_json(dir / "predict.json");
    out << "Prediction (study " << p.at("study") << ", " << p.at("n_test") << " rows): NMSE mean "
        << p.at("nmse").at("mean") << " [Q1 " << p.at("nmse").at("q1") << ", Q3 "
        << p.at("nmse").at("q3") << "], coverage " << p.at("coverage") << ", loglik "
        << p.at("loglik") << "\n";
  }
  if (fs::exists(dir / "timings.json")) {
    const Json t = read_json(dir / "timings.json");
    out << "Wall clock: " << t.at("total_seconds") << " s on " << t.at("threads") << " thread(s)\n";
  }
  if (!any) throw DataError("no reports found in " + dir.string());
}

/// Maps an exception to the documented process exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) {
    return static_cast<int>(ExitCode::kConfig);
  }
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e)) {
    return static_cast<int>(ExitCode::kData);
  }
  if (dynamic_cast<const NumericalError*>(&e)) return static_cast<int>(ExitCode::kNumerical);
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return static_cast<int>(ExitCode::kConfig);
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return static_cast<int>(ExitCode::kData);
  return 1;
}

}  // namespace blast::cli
