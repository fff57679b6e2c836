// snls: experiment runner for the damped stochastic NLS.
//
// Exit status: 0 when every verdict passes, 1 on a failed verdict (the report
// path is printed), 2 on a configuration or usage error, 3 on other errors.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "snls/config.hpp"
#include "snls/experiments.hpp"

#ifndef SNLS_CONFIG_DIR
#define SNLS_CONFIG_DIR "configs"
#endif

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out;
  std::string constants;
};

snls::ExperimentConfig resolve_config(const Flags &f) {
  if (!f.config.empty() && !f.scenario.empty()) {
    throw snls::ConfigError("--scenario", "give either --config or --scenario");
  }
  std::string path = f.config;
  if (path.empty()) {
    const std::string name = f.scenario.empty() ? "reference" : f.scenario;
    path = std::string(SNLS_CONFIG_DIR) + "/" + name + ".ini";
    if (!fs::exists(path)) {
      throw snls::ConfigError("--scenario", "unknown scenario '" + name + "'");
    }
  }
  auto cfg = snls::load_config(path);
  if (f.seed) {
    cfg.seed = *f.seed;
  }
  if (f.threads) {
    if (*f.threads == 0) {
      throw snls::ConfigError("--threads", "must be positive");
    }
    cfg.threads = *f.threads;
  }
  return cfg;
}

fs::path output_dir(const Flags &f, const snls::ExperimentConfig &cfg) {
  if (!f.out.empty()) {
    return f.out;
  }
  if (const char *env = std::getenv("SNLS_MIX_OUT"); env && *env) {
    return env;
  }
  return cfg.outputs;
}

fs::path constants_path(const fs::path &dir, const snls::ExperimentConfig &cfg) {
  return dir / ("constants-" + snls::config_hash(cfg) + ".json");
}

/// Fills constants from --constants or from the hash-named file in the output
/// directory when one exists. The input config file is never rewritten.
void load_constants(const Flags &f, const fs::path &dir,
                    snls::ExperimentConfig &cfg, nlohmann::json &used) {
  fs::path path = f.constants;
  if (path.empty()) {
    path = constants_path(dir, cfg);
    if (!fs::exists(path)) {
      return;
    }
  }
  std::ifstream in(path);
  if (!in) {
    throw snls::ConfigError("--constants", "cannot open " + path.string());
  }
  const auto j = nlohmann::json::parse(in);
  snls::apply_constants(cfg, j.at("constants"));
  used = {{"path", path.string()}, {"config_hash", j.value("config_hash", "")}};
}

void write_json(const fs::path &path, const nlohmann::json &j) {
  std::ofstream out(path);
  if (!out) {
    throw snls::Error("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

int emit(const std::string &command, const snls::Outcome &outcome,
         const fs::path &dir, const snls::ExperimentConfig &cfg) {
  fs::create_directories(dir);
  const std::string preamble = "config: " + snls::to_json(cfg).dump() +
                               "\nseed: " + std::to_string(cfg.seed);
  for (const auto &[name, curve] : outcome.curves) {
    snls::write_curve_csv((dir / (command + "-" + name + ".csv")).string(),
                          curve, preamble);
  }
  if (outcome.snapshot) {
    snls::write_snapshot((dir / (command + ".snap")).string(),
                         *outcome.snapshot);
  }
  if (!outcome.log_lines.empty()) {
    std::ofstream log(dir / (command + "-cycles.jsonl"));
    log << "{\"config\":" << snls::to_json(cfg).dump()
        << ",\"seed\":" << cfg.seed << "}\n";
    for (const auto &line : outcome.log_lines) {
      log << line << '\n';
    }
  }
  auto report = outcome.report;
  report["pass"] = outcome.pass;
  const fs::path path = dir / (command + "-report.json");
  write_json(path, report);
  for (const auto &[name, v] : report["verdicts"].items()) {
    std::cout << (v["pass"].get<bool>() ? "PASS " : "FAIL ") << name << '\n';
  }
  if (!outcome.pass) {
    std::cerr << "verdict failure; report: " << path.string() << '\n';
    return 1;
  }
  std::cout << "report: " << path.string() << '\n';
  return 0;
}

int run(const std::string &command, const Flags &flags) {
  auto cfg = resolve_config(flags);
  const fs::path dir = output_dir(flags, cfg);
  if (command == "calibrate") {
    const auto outcome = snls::calibrate(cfg);
    fs::create_directories(dir);
    const fs::path path = constants_path(dir, cfg);
    write_json(path, {{"config", snls::result_config(cfg)},
                      {"config_hash", snls::config_hash(cfg)},
                      {"seed", cfg.seed},
                      {"constants", outcome.report["constants"]}});
    std::cout << "constants: " << path.string() << '\n';
    return 0;
  }
  nlohmann::json used;
  load_constants(flags, dir, cfg, used);
  cfg.validate();
  snls::Outcome outcome;
  if (command == "simulate") {
    outcome = snls::simulate_run(cfg);
  } else if (command == "lyapunov") {
    outcome = snls::lyapunov_run(cfg);
  } else if (command == "smallball") {
    outcome = snls::smallball_run(cfg);
  } else if (command == "foias-prodi") {
    outcome = snls::foias_prodi_run(cfg);
  } else if (command == "couple") {
    outcome = snls::couple_run(cfg);
  } else if (command == "mix") {
    outcome = snls::mix_run(cfg);
  } else {
    throw snls::ConfigError("<command>", "unknown subcommand " + command);
  }
  if (!used.is_null()) {
    outcome.report["constants_file"] = used;
  }
  return emit(command, outcome, dir, cfg);
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Spectral Galerkin simulator and coupling lab for the damped "
               "stochastic NLS"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config, "INI configuration file");
  app.add_option("--scenario", flags.scenario,
                 "named configuration from the configs directory");
  app.add_option("--seed", flags.seed, "override run.seed");
  app.add_option("--threads", flags.threads, "worker threads");
  app.add_option("--out", flags.out,
                 "output directory (default $SNLS_MIX_OUT, then run.outputs)");
  app.add_option("--constants", flags.constants,
                 "constants file written by calibrate");
  app.fallthrough();

  const std::pair<const char *, const char *> commands[] = {
      {"calibrate", "estimate G, G1, Lambda, C'_1, kappa and B"},
      {"simulate", "single trajectory and snapshot"},
      {"lyapunov", "moment decay, Ito drift and tail checks"},
      {"smallball", "small-ball frequencies of pairs"},
      {"foias-prodi", "high-mode contraction with equal low modes"},
      {"couple", "coupled chains and coupling-condition statistics"},
      {"mix", "mixing curve and rate fit"}};
  for (const auto &[name, help] : commands) {
    app.add_subcommand(name, help);
  }
  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, flags);
  } catch (const snls::ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
