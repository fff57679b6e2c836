#pragma once

// Experiment runners behind the command-line subcommands. Each returns an
// Outcome: a JSON report (inputs, seed, thresholds, verdicts), named curves
// and a pass flag. Nothing here touches the filesystem.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "snls/config.hpp"
#include "snls/coupling.hpp"
#include "snls/energy.hpp"
#include "snls/estimators.hpp"
#include "snls/integrator.hpp"
#include "snls/snapshot.hpp"

namespace snls {

struct Outcome {
  nlohmann::json report;
  std::vector<std::pair<std::string, Curve>> curves;
  std::optional<Snapshot> snapshot;
  std::vector<std::string> log_lines; // JSON lines (cycle logs)
  bool pass = true;
};

/// Stream tags keeping the experiments' noise disjoint.
namespace tags {
inline constexpr std::uint64_t corpus = 0x6C;
inline constexpr std::uint64_t plateau = 0xC1;
inline constexpr std::uint64_t cap = 0xCA;
inline constexpr std::uint64_t pilot = 0xF0;
inline constexpr std::uint64_t simulate = 0x51;
inline constexpr std::uint64_t lyapunov = 0x1A;
inline constexpr std::uint64_t smallball = 0x5B;
inline constexpr std::uint64_t foias_prodi = 0xFB;
inline constexpr std::uint64_t couple = 0xC0;
inline constexpr std::uint64_t mix = 0x313;
} // namespace tags

/// Resolved config without the fields that cannot change results (threads,
/// output directory).
inline nlohmann::json result_config(const ExperimentConfig &cfg) {
  auto j = to_json(cfg);
  j["run"].erase("threads");
  j["run"].erase("outputs");
  return j;
}

inline std::string config_hash(const ExperimentConfig &cfg) {
  return hex64(fnv1a(result_config(cfg).dump()));
}

namespace detail {

inline nlohmann::json base_report(const std::string &command,
                                  const ExperimentConfig &cfg) {
  return {{"command", command},
          {"config", to_json(cfg)},
          {"config_hash", config_hash(cfg)},
          {"seed", cfg.seed},
          {"verdicts", nlohmann::json::object()}};
}

inline void verdict(Outcome &out, const std::string &name, bool ok,
                    nlohmann::json detail = {}) {
  out.report["verdicts"][name] = {{"pass", ok}, {"detail", std::move(detail)}};
  out.pass = out.pass && ok;
}

inline SimConfig sim_with(const ExperimentConfig &cfg, double horizon) {
  SimConfig s = cfg.sim();
  s.horizon = horizon;
  return s;
}

inline std::size_t steps_for(double horizon, double dt) {
  return static_cast<std::size_t>(std::llround(horizon / dt));
}

inline void need(const Constant &c, const char *key) {
  if (!c.value) {
    throw ConfigError(key, "value required (run calibrate first)");
  }
}

} // namespace detail

/// Equal low modes and a small high-mode offset: u1 = c e_1 with
/// H(u1) = d0 / 4, u2 = u1 + eps e_{N*+1} with the offset carrying about
/// d0 / 8 of kinetic energy.
inline std::pair<SpectralField, SpectralField>
matched_pair(const ExperimentConfig &cfg) {
  const auto p = cfg.energy_params();
  const SpectralField u1 = state_with_energy(cfg.M, p, 0.25 * cfg.d0);
  SpectralField u2 = u1;
  if (cfg.N_star < cfg.M) {
    const double eps = std::sqrt(0.25 * cfg.d0 / eigenvalue(cfg.N_star + 1));
    u2.mode(cfg.N_star + 1) += eps;
  }
  return {u1, u2};
}

/// G, G1 (focusing), C'_1, kappa, B and Lambda, each calibrated when marked
/// "calibrate" or copied otherwise.
inline Outcome calibrate(const ExperimentConfig &input) {
  ExperimentConfig cfg = input;
  Outcome out;
  out.report = detail::base_report("calibrate", input);
  nlohmann::json constants;
  if (cfg.lambda == 1) {
    rng::PhiloxEngine engine(cfg.seed, tags::corpus);
    const CorpusSpec corpus{std::min<std::size_t>(cfg.M, 32)};
    if (cfg.G.calibrate) {
      const auto r = calibrate_G(cfg.sigma, 2000, cfg.safety, engine, corpus);
      cfg.G = {r.value, false};
      constants["G_raw"] = r.raw_max;
    }
    if (cfg.G1.calibrate) {
      const auto r =
          calibrate_G1(cfg.energy_params(), 2000, cfg.safety, engine, corpus);
      cfg.G1 = {r.value, false};
      constants["G1_raw"] = r.raw_max;
    }
  }
  const auto p = cfg.energy_params();
  const std::size_t total = detail::steps_for(cfg.T_horizon, cfg.dt);
  if (cfg.C1_prime.calibrate || !cfg.C1_prime.value) {
    if (!(cfg.alpha > 0.0)) {
      throw ConfigError("equation.alpha", "C1_prime calibration needs alpha > 0");
    }
    EnsembleSpec spec{detail::sim_with(cfg, cfg.T_horizon), cfg.seed,
                      tags::plateau, cfg.n_trajectories,
                      uniform_record_steps(total, cfg.record_every),
                      cfg.threads};
    const auto ens =
        run_ensemble(spec, state_with_energy(cfg.M, p, cfg.H1));
    const auto md = estimate_moment_decay(ens, 1.0, cfg.alpha, cfg.H1,
                                          cfg.T_horizon * 5.0 / 6.0,
                                          cfg.T_horizon, cfg.alpha);
    cfg.C1_prime = {md.C_hat, false};
    constants["C1_prime_stderr"] = 2.0 * md.plateau_se;
    constants["plateau_aborted_fraction"] = ens.aborted_fraction();
  }
  const auto [R0, T] = cfg.geometry();
  if (cfg.kappa.calibrate || cfg.B.calibrate || !cfg.kappa.value ||
      !cfg.B.value) {
    const std::size_t steps = detail::steps_for(T, cfg.dt);
    EnsembleSpec spec{detail::sim_with(cfg, T), cfg.seed, tags::cap,
                      cfg.n_trajectories,
                      uniform_record_steps(steps, cfg.record_every),
                      cfg.threads};
    const auto ens =
        run_ensemble(spec, state_with_energy(cfg.M, p, 0.5 * cfg.d0));
    const auto cap = calibrate_lyapunov_cap(ens, p, cfg.d0);
    if (cfg.kappa.calibrate || !cfg.kappa.value) {
      cfg.kappa = {cap.kappa, false};
    }
    if (cfg.B.calibrate || !cfg.B.value) {
      cfg.B = {cap.B, false};
    }
  }
  if (cfg.Lambda.calibrate) {
    FoiasProdiSpec spec{detail::sim_with(cfg, cfg.T_horizon), cfg.seed,
                        tags::pilot, std::max<std::size_t>(2, cfg.n_trajectories / 2),
                        cfg.record_every, total, cfg.threads, cfg.k0};
    const auto pair = matched_pair(cfg);
    const auto pilot = run_foias_prodi(spec, [&](std::size_t) { return pair; });
    const double floor =
        2.0 * cfg.alpha * std::pow(static_cast<double>(cfg.N_star), 0.25);
    cfg.Lambda = {calibrate_Lambda(pilot, cfg.safety, floor), false};
    constants["Lambda_floor"] = floor;
  }
  auto put = [&](const char *key, const Constant &c) {
    constants[key] = to_json(c);
  };
  put("G", cfg.G);
  put("G1", cfg.G1);
  put("Lambda", cfg.Lambda);
  put("C1_prime", cfg.C1_prime);
  put("kappa", cfg.kappa);
  put("B", cfg.B);
  constants["R0"] = R0;
  constants["T"] = T;
  out.report["constants"] = constants;
  return out;
}

/// Single trajectory from c e_1 with H = H1; conservation verdicts when the
/// run has neither noise nor damping.
inline Outcome simulate_run(const ExperimentConfig &cfg) {
  Outcome out;
  out.report = detail::base_report("simulate", cfg);
  const SimConfig sim = cfg.sim();
  const auto u0 = state_with_energy(cfg.M, sim.params, cfg.H1);
  const rng::CounterStream stream(cfg.seed, tags::simulate);
  const auto start = std::chrono::steady_clock::now();
  SimulateOptions opts;
  opts.record_every = cfg.record_every;
  const auto traj = simulate(u0, sim, stream, opts);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  EnergyEvaluator ev(cfg.M, sim.params);
  const double m0 = sobolev_norm(u0, 0.0);
  const double h0 = ev.h_star(u0);
  double mass_drift = 0.0, h_drift = 0.0;
  Curve mass, energy;
  for (std::size_t r = 0; r < traj.states.size(); ++r) {
    const double m = sobolev_norm(traj.states[r], 0.0);
    const double h = ev.h_star(traj.states[r]);
    mass_drift = std::max(mass_drift, std::abs(m - m0));
    h_drift = std::max(h_drift, std::abs(h - h0));
    mass.push_back({traj.times[r], m, 0.0, 1});
    energy.push_back({traj.times[r], h, 0.0, 1});
  }
  out.curves = {{"mass", mass}, {"hamiltonian", energy}};
  Snapshot snap;
  snap.header = {cfg.M, cfg.dt, cfg.T_horizon, cfg.seed, tags::simulate,
                 cfg.sigma, static_cast<double>(cfg.lambda), cfg.alpha,
                 cfg.N_star, sim.noise.b, to_json(cfg).dump()};
  snap.times = traj.times;
  snap.states = traj.states;
  out.snapshot = std::move(snap);
  out.report["summary"] = {{"steps", sim.steps()},
                           {"records", traj.states.size()},
                           {"seconds", seconds},
                           {"mass_drift", mass_drift},
                           {"hamiltonian_drift", h_drift},
                           {"final_energy", ev.energy(traj.states.back())}};
  const bool conservative =
      cfg.alpha == 0.0 && hs_norm(sim.noise, 0.0) == 0.0;
  if (conservative) {
    detail::verdict(out, "mass_drift", mass_drift < 1e-8,
                    {{"value", mass_drift}, {"threshold", 1e-8}});
    detail::verdict(out, "hamiltonian_drift", h_drift < 1e-4,
                    {{"value", h_drift}, {"threshold", 1e-4}});
  }
  return out;
}

/// Moment decay (k = 1, 2), conditional Ito drift (k = 1, 2) and the
/// maximal-inequality tail for k = 1, from c e_1 with H = H2.
inline Outcome lyapunov_run(const ExperimentConfig &cfg) {
  Outcome out;
  out.report = detail::base_report("lyapunov", cfg);
  const SimConfig sim = cfg.sim();
  const double H0 = cfg.H2;
  const std::size_t total = detail::steps_for(cfg.T_horizon, cfg.dt);
  EnsembleSpec spec{sim, cfg.seed, tags::lyapunov, cfg.n_trajectories,
                    uniform_record_steps(total, cfg.record_every), cfg.threads};
  const auto ens = run_ensemble(spec, state_with_energy(cfg.M, sim.params, H0));
  out.report["aborted_fraction"] = ens.aborted_fraction();
  for (double k : {1.0, 2.0}) {
    const std::string tag = "k" + std::to_string(static_cast<int>(k));
    const auto md = estimate_moment_decay(ens, k, cfg.alpha, H0,
                                          cfg.T_horizon * 5.0 / 6.0,
                                          cfg.T_horizon, cfg.alpha);
    out.curves.emplace_back("moment_" + tag, md.curve);
    detail::verdict(out, "moment_decay_" + tag, md.pass,
                    {{"C_prime", md.C_hat},
                     {"plateau", md.plateau},
                     {"plateau_stderr", md.plateau_se},
                     {"rate", md.rate},
                     {"first_violation",
                      md.first_violation ? nlohmann::json(*md.first_violation)
                                         : nlohmann::json(nullptr)}});
    const auto drift = check_ito_drift(ens, k, sim.params);
    detail::verdict(out, "ito_drift_" + tag, drift.pass(),
                    {{"C_hat", drift.C_hat},
                     {"bins", drift.validation.size()},
                     {"violations", drift.violations},
                     {"coverage_warning", drift.coverage_warning}});
    if (k == 1.0) {
      const std::vector<double> rhos{0.25, 0.5, 1.0, 2.0, 4.0};
      const auto tail =
          tail_probability(ens, k, cfg.alpha, drift.C_hat, H0, rhos);
      detail::verdict(out, "tail_k1", tail.pass,
                      {{"rho", tail.rho},
                       {"probability", tail.probability},
                       {"stderr", tail.se},
                       {"slope", std::isfinite(tail.slope)
                                     ? nlohmann::json(tail.slope)
                                     : nlohmann::json(nullptr)},
                       {"inconclusive", tail.inconclusive}});
    }
  }
  return out;
}

/// Pairs from total energy R0 with a shared Wiener path, followed to
/// 2 theta_1 = 2 T.
inline Outcome smallball_run(const ExperimentConfig &cfg) {
  detail::need(cfg.C1_prime, "constants.C1_prime");
  Outcome out;
  out.report = detail::base_report("smallball", cfg);
  const auto [R0, theta] = cfg.geometry();
  const double c1 = *cfg.C1_prime.value;
  const SimConfig sim = detail::sim_with(cfg, 2.0 * theta);
  const std::size_t total = detail::steps_for(2.0 * theta, cfg.dt);
  EnsembleSpec spec{sim, cfg.seed, tags::smallball, cfg.n_trajectories,
                    uniform_record_steps(total, cfg.record_every), cfg.threads};
  const double h1 = std::min(cfg.H1, R0);
  const auto u1 = state_with_energy(cfg.M, sim.params, h1);
  const auto u2 = state_with_energy(cfg.M, sim.params, R0 - h1);
  const auto pairs = run_pair_ensemble(
      spec, [&](std::size_t) { return std::pair(u1, u2); }, true);
  const auto rep = smallball_frequency(pairs, cfg.d0, 4.0 * c1);
  out.curves = {{"small", rep.small}, {"large", rep.large}};
  bool large_ok = true;
  double worst = 0.0;
  for (const auto &pt : rep.large) {
    if (pt.time >= theta - 1e-9) {
      worst = std::max(worst, pt.estimate - 3.0 * pt.se);
      large_ok = large_ok && pt.estimate <= 0.5 + 3.0 * pt.se;
    }
  }
  detail::verdict(out, "large_energy", large_ok,
                  {{"threshold", 4.0 * c1}, {"theta", theta},
                   {"max_lower_bound", worst}});
  const auto &end = rep.small.back();
  detail::verdict(out, "small_ball", end.estimate - 3.0 * end.se > 0.0,
                  {{"R1", cfg.d0}, {"time", end.time},
                   {"frequency", end.estimate}, {"stderr", end.se}});
  return out;
}

/// Equal-low-mode pairs with shared high-mode noise over [0, T_horizon].
inline Outcome foias_prodi_run(const ExperimentConfig &cfg) {
  detail::need(cfg.Lambda, "constants.Lambda");
  Outcome out;
  out.report = detail::base_report("foias-prodi", cfg);
  const std::size_t total = detail::steps_for(cfg.T_horizon, cfg.dt);
  FoiasProdiSpec spec{cfg.sim(), cfg.seed, tags::foias_prodi,
                      cfg.n_trajectories, cfg.record_every, total,
                      cfg.threads, cfg.k0};
  const auto pair = matched_pair(cfg);
  const auto e = run_foias_prodi(spec, [&](std::size_t) { return pair; });
  const auto rep = contraction_tail(e, 200, cfg.seed);
  Curve median;
  for (std::size_t t = 0; t < rep.times.size(); ++t) {
    median.push_back({rep.times[t], rep.median[t], 0.0, e.size()});
  }
  const double Lambda = *cfg.Lambda.value;
  const auto jfp = e.jfp_curve(Lambda);
  out.curves = {{"median_r", median}, {"jfp", jfp}};
  detail::verdict(out, "median_monotone", rep.monotone && !rep.degenerate);
  detail::verdict(out, "log_median_slope",
                  rep.slope + 3.0 * rep.slope_se < 0.0,
                  {{"slope", rep.slope}, {"stderr", rep.slope_se}});
  bool jfp_ok = true;
  for (const auto &pt : jfp) {
    jfp_ok = jfp_ok && pt.estimate <= jfp.front().estimate + 3.0 * pt.se;
  }
  detail::verdict(out, "jfp_bounded", jfp_ok,
                  {{"Lambda", Lambda}, {"J0", jfp.front().estimate}});
  std::size_t stopped = 0;
  for (const auto &t : e.tau) {
    stopped += t ? 1 : 0;
  }
  out.report["stopped_pairs"] = stopped;
  out.report["ell_r2_quantiles"] = rep.ell_r2_quantiles;
  return out;
}

/// Coupled chains: half start coupled (equal low modes), half from
/// (H1, H2). Reports (H1)-(H4) statistics and the per-cycle logs.
inline Outcome couple_run(const ExperimentConfig &cfg) {
  require_nondegenerate_noise(cfg);
  Outcome out;
  out.report = detail::base_report("couple", cfg);
  const CouplingConfig cc = cfg.coupling();
  const SimConfig sim = cfg.sim();
  const auto matched = matched_pair(cfg);
  const auto apart = std::pair(state_with_energy(cfg.M, sim.params, cfg.H1),
                               state_with_energy(cfg.M, sim.params, cfg.H2));
  const auto chains = run_coupled_chains(
      sim, cc, cfg.seed, tags::couple, cfg.n_trajectories, cfg.cycles,
      [&](std::size_t c) { return c % 2 == 0 ? matched : apart; }, nullptr,
      cfg.threads);
  for (std::size_t c = 0; c < chains.logs.size(); ++c) {
    for (const auto &d : chains.logs[c]) {
      auto j = to_json(d);
      j["chain"] = c;
      out.log_lines.push_back(j.dump());
    }
  }
  const auto stats = coupling_condition_stats(chains.logs, cc.d0, cc.T, cc.q,
                                              200, cfg.seed);
  out.report["stats"] = to_json(stats);
  out.report["coupling"] = {{"T", cc.T},   {"R0", cc.R0},     {"d0", cc.d0},
                            {"kappa", cc.kappa}, {"B", cc.B}, {"k0", cc.k0}};
  std::size_t aborted = 0;
  for (const auto &a : chains.aborted) {
    aborted += a ? 1 : 0;
  }
  out.report["aborted_chains"] = aborted;
  detail::verdict(out, "H1_invariants", stats.h1_ok);
  detail::verdict(out, "H3_monotone", stats.h3_monotone);
  detail::verdict(out, "H4_binding", stats.h4_pass,
                  {{"p_hat", stats.p_hat}, {"stderr", stats.p_se}});
  return out;
}

/// Mixing curve between c e_1 with H = H1 and H = H2 on a log grid. With
/// equal initial states the verdict asks for a flat curve, otherwise for a
/// factor-5 drop of the aggregate gap with a 3 se margin.
inline Outcome mix_run(const ExperimentConfig &cfg) {
  Outcome out;
  out.report = detail::base_report("mix", cfg);
  const SimConfig sim = cfg.sim();
  const std::size_t total = detail::steps_for(cfg.T_horizon, cfg.dt);
  EnsembleSpec spec{sim, cfg.seed, tags::mix, cfg.n_trajectories,
                    log_record_steps(total, cfg.record_every, 1.25),
                    cfg.threads};
  const auto dict = Dictionary::standard();
  const auto u1 = state_with_energy(cfg.M, sim.params, cfg.H1);
  const auto u2 = state_with_energy(cfg.M, sim.params, cfg.H2);
  const auto curve = mixing_curve(u1, u2, dict, spec, cfg.common_noise);
  const std::size_t n = std::min(curve.n1, curve.n2);
  Curve agg;
  for (std::size_t t = 0; t < curve.times.size(); ++t) {
    agg.push_back({curve.times[t], curve.aggregate[t], curve.aggregate_se[t], n});
  }
  out.curves.emplace_back("aggregate", agg);
  for (std::size_t f = 0; f < curve.names.size(); ++f) {
    Curve c;
    for (std::size_t t = 0; t < curve.times.size(); ++t) {
      c.push_back({curve.times[t], curve.gap[f][t], curve.se[f][t], n});
    }
    out.curves.emplace_back("gap_" + curve.names[f], c);
  }
  const auto fit = fit_rate(curve);
  out.report["fit"] = {{"q_hat", fit.q_hat},
                       {"ci_low", fit.ci_low},
                       {"ci_high", fit.ci_high},
                       {"points", fit.points},
                       {"inconclusive", fit.inconclusive},
                       {"super_polynomial", fit.super_polynomial}};
  if (u1 == u2) {
    bool flat = true;
    for (std::size_t f = 0; f < curve.names.size(); ++f) {
      for (std::size_t t = 0; t < curve.times.size(); ++t) {
        flat = flat && curve.gap[f][t] <= 3.0 * curve.se[f][t];
      }
    }
    detail::verdict(out, "flat", flat);
  } else {
    double final_bound = 0.0;
    const std::size_t last = curve.times.size() - 1;
    for (std::size_t f = 0; f < curve.names.size(); ++f) {
      final_bound =
          std::max(final_bound, curve.gap[f][last] + 3.0 * curve.se[f][last]);
    }
    const double factor =
        final_bound > 0.0 ? curve.aggregate.front() / final_bound
                          : std::numeric_limits<double>::infinity();
    detail::verdict(out, "decay_factor", factor >= 5.0,
                    {{"initial_gap", curve.aggregate.front()},
                     {"final_gap_upper", final_bound},
                     {"factor", std::isfinite(factor) ? nlohmann::json(factor)
                                                      : nlohmann::json("inf")}});
  }
  return out;
}

} // namespace snls
