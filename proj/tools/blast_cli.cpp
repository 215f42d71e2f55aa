// blast: multi-study factor analysis from the command line.
//
//   blast simulate --preset desk --out sim
//   blast ranks    --data sim/data --out ranks
//   blast fit      --data sim/data --out fit --nmc 500 --threads 4
//   blast predict  --fit-dir fit --test test.csv --study 1 --out pred
//   blast report   --dir fit

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "blast/commands.hpp"
#include "blast/config.hpp"

namespace {

struct CommonFlags {
  std::string config_file;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;
  std::optional<std::size_t> nmc;
  std::optional<blast::Index> kmax;
  std::optional<double> tau;
  std::optional<std::string> dims;
  std::optional<std::string> draw_format;
  std::vector<std::string> sets;
  bool dump_config = false;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config_file, "JSON run configuration");
  sub->add_option("--preset", f.preset, "desk | paper-small | paper-large");
  sub->add_option("--seed", f.seed, "base random seed");
  sub->add_option("--threads", f.threads, "worker threads");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--nmc", f.nmc, "number of posterior draws");
  sub->add_option("--kmax", f.kmax, "largest rank considered by rank selection (0 = auto)");
  sub->add_option("--tau", f.tau, "shared-rank threshold");
  sub->add_option("--dims", f.dims, "fixed latent dimensions as k0:q_1,q_2,...");
  sub->add_option("--draw-format", f.draw_format, "binary | csv | none");
  sub->add_option("--set", f.sets, "override any config key, e.g. fit.inflation=max")
      ->take_all();
  sub->add_flag("--dump-config", f.dump_config, "print the effective configuration and exit");
}

void parse_dims(const std::string& text, blast::RunConfig& cfg) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw blast::ConfigError("--dims expects k0:q_1,q_2,...");
  try {
    cfg.dims_k0 = std::stol(text.substr(0, colon));
    std::vector<blast::Index> q;
    std::string rest = text.substr(colon + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto comma = rest.find(',', pos);
      q.push_back(std::stol(rest.substr(pos, comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    cfg.dims_q_s = q;
  } catch (const std::logic_error&) {
    throw blast::ConfigError("--dims: cannot parse '" + text + "'");
  }
}

blast::RunConfig build_config(const CommonFlags& f) {
  blast::RunConfig cfg;
  if (!f.preset.empty()) blast::merge_json(cfg, blast::preset_json(f.preset));
  if (!f.config_file.empty()) blast::merge_json(cfg, blast::read_json_file(f.config_file));
  if (f.seed) cfg.seed = *f.seed;
  if (f.threads) cfg.threads = *f.threads;
  if (f.out) cfg.output_dir = *f.out;
  if (f.nmc) cfg.n_mc = *f.nmc;
  if (f.kmax) cfg.k_max = *f.kmax;
  if (f.tau) cfg.tau = *f.tau;
  if (f.dims) parse_dims(*f.dims, cfg);
  if (f.draw_format) {
    blast::merge_json(cfg, blast::Json{{"fit", {{"draw_format", *f.draw_format}}}});
  }
  for (const auto& s : f.sets) blast::apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-study factor analysis: spectral factors and closed-form posterior"};
  app.require_subcommand(1);
  CommonFlags flags;

  std::string data_dir, fit_dir, test_csv, report_dir;
  std::optional<std::size_t> replicates;
  std::optional<blast::Index> study;
  bool fit_replicates = false, estimate_dims = false, no_data = false;

  auto* simulate = app.add_subcommand("simulate", "generate synthetic studies (and score fits)");
  add_common(simulate, flags);
  simulate->add_option("--replicates", replicates, "number of replicates");
  simulate->add_flag("--fit", fit_replicates, "fit and score every replicate");
  simulate->add_flag("--estimate-dims", estimate_dims, "select ranks instead of using the truth");
  simulate->add_flag("--no-data", no_data, "skip writing the dataset and truth files");

  auto* ranks = app.add_subcommand("ranks", "select latent dimensions");
  add_common(ranks, flags);
  ranks->add_option("--data", data_dir, "directory with study_<s>.csv")->required();

  auto* fit = app.add_subcommand("fit", "estimate factors and draw from the posterior");
  add_common(fit, flags);
  fit->add_option("--data", data_dir, "directory with study_<s>.csv")->required();

  auto* predict = app.add_subcommand("predict", "held-out conditional prediction");
  add_common(predict, flags);
  predict->add_option("--fit-dir", fit_dir, "output directory of `fit`")->required();
  predict->add_option("--test", test_csv, "test CSV with the fitted header")->required();
  predict->add_option("--study", study, "study whose covariance is used (1-based)");

  auto* report = app.add_subcommand("report", "summarize reports in a directory");
  add_common(report, flags);
  report->add_option("--dir,--fit-dir", report_dir, "directory to summarize")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(blast::ExitCode::kConfig);
  }

  blast::cli::Logger log(std::cerr);
  try {
    blast::RunConfig cfg = build_config(flags);
    if (replicates) cfg.replicates = *replicates;
    if (fit_replicates) cfg.fit_replicates = true;
    if (estimate_dims) cfg.estimate_dims = true;
    if (no_data) cfg.write_data = false;
    if (study) cfg.predict_study = *study;
    cfg.validate();
    if (flags.dump_config) {
      std::cout << blast::to_json(cfg).dump(2) << '\n';
      return 0;
    }
    if (simulate->parsed()) {
      blast::cli::cmd_simulate(cfg, log);
    } else if (ranks->parsed()) {
      blast::cli::cmd_ranks(cfg, data_dir, log);
    } else if (fit->parsed()) {
      blast::cli::cmd_fit(cfg, data_dir, log);
    } else if (predict->parsed()) {
      blast::cli::cmd_predict(cfg, fit_dir, test_csv, log);
    } else if (report->parsed()) {
      blast::cli::cmd_report(report_dir, std::cout);
    }
  } catch (const std::exception& e) {
    const int code = blast::cli::exit_code_for(e);
    log("ERROR", "failed", {{"code", std::to_string(code)}, {"message", e.what()}});
    return code;
  }
  return 0;
}
