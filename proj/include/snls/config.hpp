#pragma once

// Experiment configuration: INI text with [section] headers, parsed with
// boost property_tree. Constants may be numbers or the word "calibrate";
// coupling geometry may be "auto" (derived from the calibrated C'_1).

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "snls/coupling.hpp"
#include "snls/energy.hpp"
#include "snls/errors.hpp"
#include "snls/integrator.hpp"
#include "snls/noise.hpp"

namespace snls {

/// A number, or a request to calibrate it, or absent.
struct Constant {
  std::optional<double> value;
  bool calibrate = false;

  bool present() const noexcept { return value.has_value() || calibrate; }
};

struct ExperimentConfig {
  // [equation]
  double sigma = 1.0;
  int lambda = -1;
  double alpha = 1.0;
  // [discretization]
  std::size_t M = 128;
  double dt = 1e-3;
  double T_horizon = 1.0;
  // [noise]
  double noise_scale = 1.0;
  double noise_power = 4.0;
  std::size_t noise_cutoff = 64;
  std::size_t N_star = 16;
  std::vector<double> noise_values; // explicit b_n, overrides the power law
  // [constants]
  Constant G, G1, Lambda, C1_prime;
  double safety = 2.0;
  // [coupling]; T and R0 empty mean "auto"
  std::optional<double> T;
  double d0 = 0.5;
  std::optional<double> R0;
  Constant kappa, B;
  double q = 1.0;
  double gain = 0.0;
  double k0 = 100.0;
  std::size_t attempt_cap = 1000;
  std::size_t check_every = 10;
  // [initial]
  double H1 = 0.0; // energy of the first initial state (multiple of e_1)
  double H2 = 20.0;
  // [run]
  std::uint64_t seed = 1;
  std::size_t n_trajectories = 100;
  std::size_t threads = 1;
  std::size_t cycles = 8;
  std::size_t record_every = 10;
  std::string outputs = "out";
  bool common_noise = true;

  EnergyParams energy_params() const {
    EnergyParams p;
    p.sigma = sigma;
    p.lambda = lambda;
    p.alpha = alpha;
    p.G = G.value;
    p.G1 = G1.value;
    p.Lambda = Lambda.value.value_or(0.0);
    return p;
  }

  NoiseOperator noise() const {
    if (!noise_values.empty()) {
      NoiseOperator n{noise_values, N_star};
      n.b.resize(M, 0.0);
      return n;
    }
    return NoiseOperator::power_law(M, noise_scale, noise_power, noise_cutoff,
                                    N_star);
  }

  SimConfig sim() const {
    SimConfig s;
    s.modes = M;
    s.dt = dt;
    s.horizon = T_horizon;
    s.params = energy_params();
    s.noise = noise();
    return s;
  }

  /// (R0, T): explicit values, or R0 = max(4 C'_1, d0) and
  /// T = (2 / alpha) ln(R0 / C'_1) when set to auto.
  std::pair<double, double> geometry(std::optional<double> c1_prime = {}) const {
    const auto c1 = c1_prime ? c1_prime : C1_prime.value;
    double r0 = 0.0;
    if (R0) {
      r0 = *R0;
    } else if (c1) {
      r0 = std::max(4.0 * *c1, d0);
    } else {
      throw ConfigError("coupling.R0", "auto R0 needs a calibrated C1_prime");
    }
    if (T) {
      return {r0, *T};
    }
    if (!c1) {
      throw ConfigError("coupling.T", "auto T needs a calibrated C1_prime");
    }
    if (!(alpha > 0.0)) {
      throw ConfigError("coupling.T", "auto T needs alpha > 0");
    }
    return {r0, 2.0 / alpha * std::log(r0 / *c1)};
  }

  /// Coupling configuration once C'_1, kappa and B are known.
  CouplingConfig coupling(std::optional<double> c1_prime = {}) const {
    CouplingConfig c;
    std::tie(c.R0, c.T) = geometry(c1_prime);
    c.d0 = d0;
    c.n_star = N_star;
    c.q = q;
    c.gain = gain;
    c.k0 = k0;
    c.attempt_cap = attempt_cap;
    c.check_every = check_every;
    if (!kappa.value || !B.value) {
      throw ConfigError(kappa.value ? "coupling.B" : "coupling.kappa",
                        "value required (run calibrate first)");
    }
    c.kappa = *kappa.value;
    c.B = *B.value;
    return c;
  }

  /// Checks ranges (equation parameters and noise nondegeneracy included).
  void validate() const {
    try {
      energy_params().validate();
    } catch (const ParameterError &e) {
      throw ConfigError("equation", e.what());
    }
    if (M == 0) {
      throw ConfigError("discretization.M", "must be positive");
    }
    if (!(dt > 0.0)) {
      throw ConfigError("discretization.dt", "must be positive");
    }
    if (!(T_horizon >= dt)) {
      throw ConfigError("discretization.T_horizon", "must be at least dt");
    }
    if (N_star == 0 || N_star > M) {
      throw ConfigError("noise.N_star", "must lie in [1, M]");
    }
    if (!noise_values.empty() && noise_values.size() > M) {
      throw ConfigError("noise.values", "more coefficients than modes");
    }
    if (!snls::validate(noise()).nonnegative) {
      throw ConfigError("noise", "b_n must be >= 0");
    }
    if (lambda == 1 && !G.present()) {
      throw ConfigError("constants.G", "focusing case needs G or calibrate");
    }
    if (lambda == 1 && !G1.present()) {
      throw ConfigError("constants.G1", "focusing case needs G1 or calibrate");
    }
    if (!(safety > 1.0)) {
      throw ConfigError("constants.safety", "must exceed 1");
    }
    if (!(d0 > 0.0)) {
      throw ConfigError("coupling.d0", "must be positive");
    }
    if (R0 && !(*R0 >= d0)) {
      throw ConfigError("coupling.R0", "must be at least d0");
    }
    if (T && !(*T > 0.0)) {
      throw ConfigError("coupling.T", "must be positive");
    }
    if (!(q > 0.0)) {
      throw ConfigError("coupling.q", "must be positive");
    }
    if (!(k0 > 0.0) || !(gain >= 0.0)) {
      throw ConfigError("coupling.k0", "k0 must be > 0 and gain >= 0");
    }
    if (attempt_cap == 0 || check_every == 0) {
      throw ConfigError("coupling.attempt_cap",
                        "attempt_cap and check_every must be positive");
    }
    if (!(H1 >= 0.0) || !(H2 >= 0.0)) {
      throw ConfigError("initial", "energies must be nonnegative");
    }
    if (n_trajectories == 0 || threads == 0 || cycles == 0 ||
        record_every == 0) {
      throw ConfigError("run", "counts must be positive");
    }
  }
};

/// Nondegenerate low-mode noise, needed by everything that couples: b_n > 0
/// for n <= N_star. Noise-free runs (b = 0) pass validate() but not this.
inline void require_nondegenerate_noise(const ExperimentConfig &c) {
  const auto report = snls::validate(c.noise());
  if (!report.pass()) {
    std::string modes;
    for (auto n : report.offending_modes) {
      modes += (modes.empty() ? "" : ",") + std::to_string(n);
    }
    throw ConfigError("noise", "b_n must be > 0 for n <= N_star (modes " +
                                   modes + ")");
  }
}

namespace detail {

inline const std::map<std::string, std::set<std::string>> &config_schema() {
  static const std::map<std::string, std::set<std::string>> schema{
      {"equation", {"sigma", "lambda", "alpha"}},
      {"discretization", {"M", "dt", "T_horizon"}},
      {"noise", {"scale", "power", "cutoff", "N_star", "values"}},
      {"constants", {"G", "G1", "Lambda", "C1_prime", "safety"}},
      {"coupling",
       {"T", "d0", "R0", "kappa", "B", "q", "gain", "k0", "attempt_cap",
        "check_every"}},
      {"initial", {"H1", "H2"}},
      {"run",
       {"seed", "n_trajectories", "threads", "cycles", "record_every",
        "outputs", "common_noise"}}};
  return schema;
}

template <class T> T parse_value(const std::string &key, const std::string &text) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (!in || !(in >> std::ws).eof()) {
    throw ConfigError(key, "cannot parse '" + text + "'");
  }
  return value;
}

} // namespace detail

/// Parses INI text. Unknown sections or keys are errors naming the key.
inline ExperimentConfig parse_config(const std::string &text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError("<file>", e.message() + " at line " +
                                    std::to_string(e.line()));
  }
  const auto &schema = detail::config_schema();
  for (const auto &[section, body] : tree) {
    const auto it = schema.find(section);
    if (it == schema.end()) {
      throw ConfigError(section, "unknown section");
    }
    if (body.empty()) {
      throw ConfigError(section, "top-level keys must sit in a section");
    }
    for (const auto &[key, v] : body) {
      if (!it->second.contains(key)) {
        throw ConfigError(section + "." + key, "unknown key");
      }
    }
  }
  ExperimentConfig c;
  auto get = [&](const std::string &key) -> std::optional<std::string> {
    const auto v = tree.get_optional<std::string>(key);
    return v ? std::optional<std::string>(*v) : std::nullopt;
  };
  auto number = [&](const std::string &key, double &dst) {
    if (auto v = get(key)) {
      dst = detail::parse_value<double>(key, *v);
    }
  };
  auto count = [&](const std::string &key, std::size_t &dst) {
    if (auto v = get(key)) {
      const auto x = detail::parse_value<long long>(key, *v);
      if (x < 0) {
        throw ConfigError(key, "must be nonnegative");
      }
      dst = static_cast<std::size_t>(x);
    }
  };
  auto constant = [&](const std::string &key, Constant &dst) {
    if (auto v = get(key)) {
      if (*v == "calibrate") {
        dst = {std::nullopt, true};
      } else if (*v == "none") {
        dst = {};
      } else {
        dst = {detail::parse_value<double>(key, *v), false};
      }
    }
  };
  auto automatic = [&](const std::string &key, std::optional<double> &dst) {
    if (auto v = get(key)) {
      dst = *v == "auto" ? std::nullopt
                         : std::optional(detail::parse_value<double>(key, *v));
    }
  };
  number("equation.sigma", c.sigma);
  if (auto v = get("equation.lambda")) {
    c.lambda = detail::parse_value<int>("equation.lambda", *v);
  }
  number("equation.alpha", c.alpha);
  count("discretization.M", c.M);
  number("discretization.dt", c.dt);
  number("discretization.T_horizon", c.T_horizon);
  number("noise.scale", c.noise_scale);
  number("noise.power", c.noise_power);
  count("noise.cutoff", c.noise_cutoff);
  count("noise.N_star", c.N_star);
  if (auto v = get("noise.values")) {
    std::istringstream list(*v);
    std::string item;
    while (std::getline(list, item, ',')) {
      c.noise_values.push_back(detail::parse_value<double>("noise.values", item));
    }
  }
  constant("constants.G", c.G);
  constant("constants.G1", c.G1);
  constant("constants.Lambda", c.Lambda);
  constant("constants.C1_prime", c.C1_prime);
  number("constants.safety", c.safety);
  automatic("coupling.T", c.T);
  number("coupling.d0", c.d0);
  automatic("coupling.R0", c.R0);
  constant("coupling.kappa", c.kappa);
  constant("coupling.B", c.B);
  number("coupling.q", c.q);
  number("coupling.gain", c.gain);
  number("coupling.k0", c.k0);
  count("coupling.attempt_cap", c.attempt_cap);
  count("coupling.check_every", c.check_every);
  number("initial.H1", c.H1);
  number("initial.H2", c.H2);
  if (auto v = get("run.seed")) {
    c.seed = detail::parse_value<std::uint64_t>("run.seed", *v);
  }
  count("run.n_trajectories", c.n_trajectories);
  count("run.threads", c.threads);
  count("run.cycles", c.cycles);
  count("run.record_every", c.record_every);
  if (auto v = get("run.outputs")) {
    c.outputs = *v;
  }
  if (auto v = get("run.common_noise")) {
    if (*v != "true" && *v != "false") {
      throw ConfigError("run.common_noise", "must be true or false");
    }
    c.common_noise = *v == "true";
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("<file>", "cannot open " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline nlohmann::json to_json(const Constant &c) {
  if (c.value) {
    return *c.value;
  }
  return c.calibrate ? nlohmann::json("calibrate") : nlohmann::json(nullptr);
}

/// Fully resolved configuration as JSON (embedded in every artifact).
inline nlohmann::json to_json(const ExperimentConfig &c) {
  auto opt = [](const std::optional<double> &v) {
    return v ? nlohmann::json(*v) : nlohmann::json("auto");
  };
  return {
      {"equation", {{"sigma", c.sigma}, {"lambda", c.lambda}, {"alpha", c.alpha}}},
      {"discretization", {{"M", c.M}, {"dt", c.dt}, {"T_horizon", c.T_horizon}}},
      {"noise",
       {{"scale", c.noise_scale},
        {"power", c.noise_power},
        {"cutoff", c.noise_cutoff},
        {"N_star", c.N_star},
        {"values", c.noise_values}}},
      {"constants",
       {{"G", to_json(c.G)},
        {"G1", to_json(c.G1)},
        {"Lambda", to_json(c.Lambda)},
        {"C1_prime", to_json(c.C1_prime)},
        {"safety", c.safety}}},
      {"coupling",
       {{"T", opt(c.T)},
        {"d0", c.d0},
        {"R0", opt(c.R0)},
        {"kappa", to_json(c.kappa)},
        {"B", to_json(c.B)},
        {"q", c.q},
        {"gain", c.gain},
        {"k0", c.k0},
        {"attempt_cap", c.attempt_cap},
        {"check_every", c.check_every}}},
      {"initial", {{"H1", c.H1}, {"H2", c.H2}}},
      {"run",
       {{"seed", c.seed},
        {"n_trajectories", c.n_trajectories},
        {"threads", c.threads},
        {"cycles", c.cycles},
        {"record_every", c.record_every},
        {"outputs", c.outputs},
        {"common_noise", c.common_noise}}}};
}

/// 64-bit FNV-1a, used to name constants files after the config they came
/// from.
inline std::uint64_t fnv1a(const std::string &text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char *digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

/// Overwrites constants from a calibration file written by `calibrate`.
inline void apply_constants(ExperimentConfig &c, const nlohmann::json &j) {
  auto take = [&](const char *key, Constant &dst) {
    if (j.contains(key) && j[key].is_number()) {
      dst = {j[key].get<double>(), false};
    }
  };
  take("G", c.G);
  take("G1", c.G1);
  take("Lambda", c.Lambda);
  take("C1_prime", c.C1_prime);
  take("kappa", c.kappa);
  take("B", c.B);
}

} // namespace snls
