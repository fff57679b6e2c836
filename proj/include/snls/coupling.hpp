#pragma once

// Coupling of two solutions: maximal (gamma) coupling of densities, the
// Girsanov log-density of a drift-shifted low-mode noise, the control that
// binds low modes, and the cycle-by-cycle construction with the l0 process.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snls/energy.hpp"
#include "snls/errors.hpp"
#include "snls/integrator.hpp"
#include "snls/noise.hpp"
#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

template <class T> struct CoupledDraw {
  T z1;
  T z2;
  bool equal = false;
  std::size_t attempts = 0; // residual proposals used, 0 when equal
};

/// Gamma coupling: z1 ~ mu1, z2 = z1 with probability min(1, rho2/rho1)(z1),
/// otherwise z2 from the normalized residual of mu2 by rejection. The
/// log-densities share one reference measure and may return -infinity.
template <class T, class LogDensity1, class LogDensity2, class Sample1,
          class Sample2>
CoupledDraw<T> maximal_coupling(LogDensity1 &&log_rho1, LogDensity2 &&log_rho2,
                                Sample1 &&sample1, Sample2 &&sample2,
                                rng::PhiloxEngine &engine,
                                std::size_t attempt_cap = 10000) {
  T z1 = sample1(engine);
  const double log_accept = log_rho2(z1) - log_rho1(z1);
  if (log_accept >= 0.0 || std::log(engine.uniform()) < log_accept) {
    return {z1, z1, true, 0};
  }
  for (std::size_t attempt = 1; attempt <= attempt_cap; ++attempt) {
    T z2 = sample2(engine);
    const double log_ratio = log_rho1(z2) - log_rho2(z2);
    if (log_ratio < 0.0 && engine.uniform() < -std::expm1(log_ratio)) {
      return {std::move(z1), std::move(z2), false, attempt};
    }
  }
  throw ResidualSamplingError("residual sampling exceeded " +
                              std::to_string(attempt_cap) + " attempts");
}

struct TvBound {
  double bound = 0.0;
  double se = 0.0;
  std::size_t samples = 0;
};

/// (1/2) sqrt(E[(dmu1/dmu2)^2] - 1) from log-ratios drawn under mu2, clamped
/// to [0, 1]; the standard error is propagated by the delta method.
inline TvBound tv_upper_bound(std::span<const double> log_ratios) {
  if (log_ratios.empty()) {
    throw ParameterError("tv_upper_bound needs at least one sample");
  }
  const double n = static_cast<double>(log_ratios.size());
  double sum = 0.0, sum2 = 0.0;
  for (double x : log_ratios) {
    const double v = std::exp(2.0 * x);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  const double var = log_ratios.size() > 1
                         ? std::max(0.0, (sum2 - n * mean * mean) / (n - 1.0))
                         : 0.0;
  const double se_mean = std::sqrt(var / n);
  TvBound out;
  out.samples = log_ratios.size();
  if (!std::isfinite(mean)) {
    out.bound = 1.0;
    out.se = std::numeric_limits<double>::infinity();
    return out;
  }
  const double excess = std::max(0.0, mean - 1.0);
  out.bound = std::min(1.0, 0.5 * std::sqrt(excess));
  out.se = excess > 0.0 ? se_mean / (4.0 * std::sqrt(excess))
                            : 0.5 * std::sqrt(se_mean);
  return out;
}

namespace detail {

inline std::vector<double> inverse_variances(const NoiseOperator &noise,
                                             std::size_t n_star) {
  if (n_star > noise.modes()) {
    throw DimensionError("N_* exceeds the noise mode count");
  }
  std::vector<double> inv(n_star);
  for (std::size_t i = 0; i < n_star; ++i) {
    if (!(noise.b[i] > 0.0)) {
      throw ContractError("noise is not invertible on the low modes: b_" +
                          std::to_string(i + 1) + " = 0");
    }
    inv[i] = 1.0 / (noise.b[i] * noise.b[i]);
  }
  return inv;
}

} // namespace detail

/// log of the density of the law of (b dW + h dt) relative to that of b dW on
/// modes n <= N_*, evaluated at the recorded low-mode increments z:
///   sum_k sum_n [2 Re(conj(z_n) h_n) - |h_n|^2 dt] / b_n^2.
/// With E|dW_n|^2 = dt this is twice the real-inner-product form
/// <b^{-1} h, dW> - |b^{-1} h|^2 dt / 2 written per real component.
inline double girsanov_logdensity(std::span<const SpectralField> h_path,
                                  std::span<const SpectralField> z_path,
                                  const NoiseOperator &noise, double dt) {
  if (h_path.size() != z_path.size()) {
    throw DimensionError("control and noise paths differ in length");
  }
  const std::size_t n_star = noise.n_star;
  const auto inv = detail::inverse_variances(noise, n_star);
  double total = 0.0;
  for (std::size_t k = 0; k < h_path.size(); ++k) {
    const auto &h = h_path[k];
    const auto &z = z_path[k];
    if (h.modes() != noise.modes() || z.modes() != noise.modes()) {
      throw DimensionError("path entry with the wrong mode count");
    }
    for (std::size_t i = n_star; i < h.modes(); ++i) {
      if (h[i] != Complex{}) {
        throw ContractError("control has support above N_*");
      }
    }
    for (std::size_t i = 0; i < n_star; ++i) {
      total += (2.0 * (std::conj(z[i]) * h[i]).real() -
                std::norm(h[i]) * dt) *
               inv[i];
    }
  }
  return total;
}

struct CouplingConfig {
  double T = 2.7725887222397811; // cycle length
  double d0 = 0.5;
  double R0 = 20.0;
  double kappa = 0.0;
  double B = 0.0;
  double q = 1.0;
  std::size_t n_star = 16;
  /// Feedback gain gamma of the binding control; 0 selects the pure bridge.
  double gain = 0.0;
  /// Constant k0 of the control bound ||h||_1^2 <= k0 l^{(2s+1)/(3s+1)}.
  double k0 = 100.0;
  std::size_t attempt_cap = 1000;
  /// Steps between energy evaluations (Lyapunov cap and control bound).
  std::size_t check_every = 10;

  std::size_t steps(double dt) const {
    return static_cast<std::size_t>(std::llround(T / dt));
  }

  /// Lyapunov cap kappa + 1 + d0^{3s+1} + d0^{6s+2} + B (t - lT).
  double lyapunov_cap(double sigma, double elapsed) const {
    return kappa + 1.0 + std::pow(d0, 3.0 * sigma + 1.0) +
           std::pow(d0, 6.0 * sigma + 2.0) + B * elapsed;
  }

  void validate(std::optional<double> c1_prime = {}) const {
    if (!(T > 0.0)) {
      throw ParameterError("cycle length T must be positive");
    }
    if (!(d0 > 0.0)) {
      throw ParameterError("d0 must be positive");
    }
    if (!(R0 >= d0)) {
      throw ParameterError("R0 must be at least d0");
    }
    if (!(kappa >= 0.0) || !(B >= 0.0)) {
      throw ParameterError("kappa and B must be nonnegative");
    }
    if (!(q > 0.0)) {
      throw ParameterError("q must be positive");
    }
    if (n_star == 0) {
      throw ParameterError("N_* must be at least 1");
    }
    if (!(gain >= 0.0) || !(k0 > 0.0)) {
      throw ParameterError("gain must be >= 0 and k0 > 0");
    }
    if (attempt_cap == 0 || check_every == 0) {
      throw ParameterError("attempt_cap and check_every must be positive");
    }
    if (c1_prime && !(R0 >= 4.0 * *c1_prime)) {
      throw ParameterError("R0 must be at least 4 C'_1");
    }
  }
};

inline constexpr std::size_t kNoL0 = std::numeric_limits<std::size_t>::max();

struct CouplingState {
  std::size_t k = 0;
  std::optional<std::size_t> l0; // empty means infinity
  SpectralField u1, u2;
  double H_l = std::numeric_limits<double>::quiet_NaN();
  LyapunovAccumulator lyap1, lyap2; // k = 3 sigma + 1, started at l0 T

  bool coupled() const noexcept { return l0.has_value() && *l0 <= k; }
};

enum class Branch { trivial, binding, continuing };

inline const char *branch_name(Branch b) {
  switch (b) {
  case Branch::trivial:
    return "V0";
  case Branch::binding:
    return "Va";
  case Branch::continuing:
    return "Vb";
  }
  return "?";
}

struct ClauseReport {
  bool low_modes_equal = true;
  bool noise_equal = true;
  bool small_energy = true;
  bool lyapunov_cap = true;

  bool all() const {
    return low_modes_equal && noise_equal && small_energy && lyapunov_cap;
  }
};

struct CycleDiagnostics {
  std::size_t cycle = 0;
  Branch branch = Branch::trivial;
  std::optional<std::size_t> l0_before, l0_after;
  double H_start = 0.0; // H(u1) + H(u2) at kT
  double H_end = 0.0;   // at (k + 1) T
  bool coupling_accepted = false;
  double log_density = 0.0;
  std::size_t attempts = 0;
  bool bound_ok = true;
  double bound_ratio = 0.0; // max of ||h||_1^2 / (k0 l^{...}) over checks
  bool binding_success = false;
  ClauseReport clauses;
  double distance = 0.0; // ||u1 - u2||_1 at (k + 1) T
  bool low_modes_equal_end = false;
};

inline nlohmann::json to_json(const CycleDiagnostics &d) {
  auto opt = [](const std::optional<std::size_t> &v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"cycle", d.cycle},
          {"branch", branch_name(d.branch)},
          {"l0_before", opt(d.l0_before)},
          {"l0_after", opt(d.l0_after)},
          {"H_start", d.H_start},
          {"H_end", d.H_end},
          {"coupling_accepted", d.coupling_accepted},
          {"log_density", d.log_density},
          {"attempts", d.attempts},
          {"bound_ok", d.bound_ok},
          {"bound_ratio", d.bound_ratio},
          {"binding_success", d.binding_success},
          {"clauses",
           {{"low_modes_equal", d.clauses.low_modes_equal},
            {"noise_equal", d.clauses.noise_equal},
            {"small_energy", d.clauses.small_energy},
            {"lyapunov_cap", d.clauses.lyapunov_cap}}},
          {"distance", d.distance},
          {"low_modes_equal_end", d.low_modes_equal_end}};
}

/// Which trajectory's low-mode noise is drawn; the other one receives the
/// same draw shifted by the control.
enum class Driven { first, second };

/// How the control reacts to the low-mode mismatch Delta after a
/// deterministic step: h dt = -f Delta.
enum class ControlMode { bridge, hold };

struct ControlResult {
  std::vector<SpectralField> h;      // per-step control
  std::vector<SpectralField> states; // controlled trajectory 1
  double terminal_gap = 0.0;         // |X1(T) - X2(T)|_2
  bool bound_ok = true;
  double bound_ratio = 0.0;
};

namespace detail {

/// Fraction of the current mismatch removed at step j of S.
inline double control_fraction(ControlMode mode, double gain, double dt,
                               std::size_t j, std::size_t steps) {
  if (mode == ControlMode::hold) {
    return 1.0;
  }
  const double bridge = 1.0 / static_cast<double>(steps - j);
  return std::min(1.0, std::max(gain * dt, bridge));
}

inline double bound_exponent(double sigma) {
  return (2.0 * sigma + 1.0) / (3.0 * sigma + 1.0);
}

} // namespace detail

/// Drives trajectory 1 from u1_start onto the low-mode path of trajectory 2.
/// `u2_path` holds S + 1 states of trajectory 2, whose low-mode increments
/// `low_noise` (S entries) are also applied to trajectory 1; the high-mode
/// increments `high_noise` drive trajectory 1's high modes. The control
/// at step j removes the fraction max(gain dt, 1/(S - j)) of the predicted
/// mismatch, so X1(T) = X2(T) up to rounding. Bound (3.2) is checked every
/// `check_every` steps against l(u1, u2).
inline ControlResult
build_control(const SpectralField &u1_start,
              std::span<const SpectralField> u2_path,
              std::span<const SpectralField> low_noise,
              std::span<const SpectralField> high_noise, const SimConfig &sim,
              const CouplingConfig &cfg) {
  const std::size_t n = cfg.n_star;
  const std::size_t steps = low_noise.size();
  if (u2_path.size() != steps + 1 || high_noise.size() != steps) {
    throw DimensionError("control inputs on different grids");
  }
  auto check_low = [&](const SpectralField &f, const char *what) {
    for (std::size_t i = n; i < f.modes(); ++i) {
      if (f[i] != Complex{}) {
        throw ContractError(std::string(what) + " has support above N_*");
      }
    }
  };
  for (const auto &z : low_noise) {
    check_low(z, "low-mode noise");
  }
  Stepper stepper(sim);
  EnergyEvaluator energies(sim.modes, sim.params);
  ControlResult out;
  out.states.reserve(steps + 1);
  out.h.reserve(steps);
  SpectralField u = u1_start;
  out.states.push_back(u);
  const double expo = detail::bound_exponent(sim.params.sigma);
  for (std::size_t j = 0; j < steps; ++j) {
    stepper.deterministic_step(u);
    u += low_noise[j];
    u += high_noise[j];
    const double f =
        detail::control_fraction(ControlMode::bridge, cfg.gain, sim.dt, j, steps);
    SpectralField h(sim.modes);
    for (std::size_t i = 0; i < n; ++i) {
      const Complex gap = u[i] - u2_path[j + 1][i];
      h[i] = -f * gap / sim.dt;
      u[i] += h[i] * sim.dt;
    }
    check_finite(u, j + 1);
    if ((j + 1) % cfg.check_every == 0 || j + 1 == steps) {
      const double l = ell_from_energies(energies.energy(u),
                                         energies.energy(u2_path[j + 1]),
                                         sim.params);
      const double ratio =
          std::pow(sobolev_norm(h, 1.0), 2) / (cfg.k0 * std::pow(l, expo));
      out.bound_ratio = std::max(out.bound_ratio, ratio);
      if (ratio > 1.0) {
        out.bound_ok = false;
      }
    }
    out.h.push_back(std::move(h));
    out.states.push_back(u);
  }
  SpectralField gap = project(u, n, Part::low) -
                      project(u2_path.back(), n, Part::low);
  out.terminal_gap = sobolev_norm(gap, 0.0);
  return out;
}

/// One step of the pair in the equal-low-mode regime: trajectory 1 takes the
/// full increment from `stream`, trajectory 2 shares its high-mode part and
/// copies its low modes, which realizes the control h dt = -Delta on
/// trajectory 2. Returns ||h||_1^2.
inline double shadow_step(SpectralField &u1, SpectralField &u2, Stepper &stepper,
                          const NoiseOperator &noise,
                          const rng::CounterStream &stream, std::uint64_t step,
                          std::size_t n_star) {
  stepper.deterministic_step(u1);
  stepper.deterministic_step(u2);
  double h_norm2 = 0.0;
  const double dt = stepper.dt();
  for (std::size_t i = 0; i < n_star; ++i) {
    h_norm2 += eigenvalue(i + 1) * std::norm((u1[i] - u2[i]) / dt);
  }
  SpectralField inc(u1.modes());
  add_increment(inc, noise, dt, stream, step, 1, u1.modes());
  u1 += inc;
  u2 += inc;
  std::copy_n(u1.coeffs().begin(), n_star, u2.coeffs().begin());
  check_finite(u1, step + 1);
  check_finite(u2, step + 1);
  return h_norm2;
}

/// Random streams of one pair, derived from (seed, stream, pair).
struct PairStreams {
  std::uint64_t seed = 0;
  std::uint64_t base = 0;

  enum Purpose : std::uint64_t {
    low = 1,
    high = 2,
    full = 3,
    accept = 4,
    residual_low = 5,
    residual_accept = 6
  };

  rng::CounterStream stream(std::size_t cycle, Purpose purpose,
                            std::uint64_t attempt = 0) const {
    const std::uint64_t s = rng::derive_stream(
        rng::derive_stream(base, cycle, purpose), attempt);
    return {seed, s};
  }
};

/// Runs coupled cycles for one pair. Holds per-pair buffers; not shareable
/// across threads.
class CouplingRunner {
public:
  CouplingRunner(SimConfig sim, CouplingConfig cfg, PairStreams streams)
      : sim_(std::move(sim)), cfg_(cfg), streams_(streams), stepper_(sim_),
        energies_(sim_.modes, sim_.params),
        inv_var_(detail::inverse_variances(sim_.noise, cfg_.n_star)),
        steps_(cfg_.steps(sim_.dt)) {
    sim_.validate();
    cfg_.validate();
    if (cfg_.n_star != sim_.noise.n_star) {
      throw ParameterError("coupling N_* differs from the noise N_*");
    }
    if (steps_ == 0) {
      throw ParameterError("cycle shorter than one time step");
    }
  }

  const SimConfig &sim() const noexcept { return sim_; }
  const CouplingConfig &config() const noexcept { return cfg_; }
  std::size_t steps_per_cycle() const noexcept { return steps_; }
  double cycle_length() const noexcept {
    return static_cast<double>(steps_) * sim_.dt;
  }
  EnergyEvaluator &energies() noexcept { return energies_; }

  double lyapunov_power() const { return 3.0 * sim_.params.sigma + 1.0; }

  /// Initial state with l0(0) = 0 when P_{0,0} holds, else infinity.
  CouplingState initial_state(const SpectralField &u1, const SpectralField &u2) {
    CouplingState s;
    s.u1 = u1;
    s.u2 = u2;
    const double h1 = energies_.energy(u1);
    const double h2 = energies_.energy(u2);
    if (low_equal(u1, u2) && h1 + h2 <= cfg_.d0) {
      start_coupling(s, 0, h1, h2);
    }
    return s;
  }

  /// One cycle [kT, (k+1)T] followed by the l0 update.
  CycleDiagnostics cycle(CouplingState &state) {
    CycleDiagnostics d;
    d.cycle = state.k;
    d.l0_before = state.l0;
    const double h1 = energies_.energy(state.u1);
    const double h2 = energies_.energy(state.u2);
    d.H_start = h1 + h2;

    if (state.coupled()) {
      d.branch = Branch::continuing;
      run_coupled_branch(state, ControlMode::hold, d);
    } else if (d.H_start <= cfg_.R0) {
      d.branch = Branch::binding;
      run_coupled_branch(state, ControlMode::bridge, d);
    } else {
      d.branch = Branch::trivial;
      run_trivial(state);
    }
    const double e1 = energies_.energy(state.u1);
    const double e2 = energies_.energy(state.u2);
    d.H_end = e1 + e2;
    d.distance = sobolev_norm(state.u1 - state.u2, 1.0);
    d.low_modes_equal_end = low_equal(state.u1, state.u2);
    state.k += 1;
    l0_update(state, d, e1, e2);
    d.l0_after = state.l0;
    return d;
  }

  /// Applies the l0 rule for the cycle just completed; state.k is already
  /// k + 1 and (e1, e2) are the energies at (k + 1) T.
  void l0_update(CouplingState &state, CycleDiagnostics &d, double e1,
                 double e2) const {
    const std::size_t next = state.k;
    const bool fresh = d.low_modes_equal_end && e1 + e2 <= cfg_.d0;
    switch (d.branch) {
    case Branch::trivial:
      state.l0.reset();
      break;
    case Branch::binding:
      d.binding_success = d.coupling_accepted && d.bound_ok;
      if (d.binding_success && fresh) {
        start_coupling(state, next, e1, e2);
      } else {
        state.l0.reset();
      }
      break;
    case Branch::continuing:
      if (d.clauses.all()) {
        break;
      }
      if (fresh) {
        start_coupling(state, next, e1, e2);
      } else {
        state.l0.reset();
      }
      break;
    }
  }

  /// Fraction-f bound check helper exposed for tests.
  bool low_equal(const SpectralField &a, const SpectralField &b) const {
    for (std::size_t i = 0; i < cfg_.n_star; ++i) {
      if (a[i] != b[i]) {
        return false;
      }
    }
    return true;
  }

private:
  struct RunResult {
    SpectralField u1, u2;
    double log_r = 0.0;
    bool bound_ok = true;
    double bound_ratio = 0.0;
    bool cap_ok = true;
    LyapunovAccumulator lyap1, lyap2;
  };

  void start_coupling(CouplingState &s, std::size_t l, double h1,
                      double h2) const {
    s.l0 = l;
    s.H_l = h1 + h2;
    const double t = static_cast<double>(l) * cycle_length();
    s.lyap1 = LyapunovAccumulator(lyapunov_power(), sim_.params.alpha, t, h1);
    s.lyap2 = LyapunovAccumulator(lyapunov_power(), sim_.params.alpha, t, h2);
  }

  void run_trivial(CouplingState &state) {
    const auto w = streams_.stream(state.k, PairStreams::full);
    evolve(state.u1, stepper_, sim_.noise, w, 0, steps_);
    evolve(state.u2, stepper_, sim_.noise, w, 0, steps_);
  }

  /// One pass over the cycle. `drawn` supplies the low-mode noise of the
  /// driven trajectory; the other receives it shifted by -/+ h dt.
  RunResult run(const CouplingState &state, ControlMode mode, Driven driven,
                const rng::CounterStream &drawn,
                const rng::CounterStream &high) {
    RunResult r{state.u1, state.u2, 0.0, true, 0.0, true, state.lyap1,
                state.lyap2};
    const std::size_t n = cfg_.n_star;
    const std::size_t m = sim_.modes;
    const double dt = sim_.dt;
    const double scale = std::sqrt(0.5 * dt);
    const double expo = detail::bound_exponent(sim_.params.sigma);
    const bool track_cap = mode == ControlMode::hold && state.l0.has_value();
    const double t0 = static_cast<double>(state.k) * cycle_length();
    double h_norm2 = 0.0;
    for (std::size_t j = 0; j < steps_; ++j) {
      stepper_.deterministic_step(r.u1);
      stepper_.deterministic_step(r.u2);
      const double f =
          detail::control_fraction(mode, cfg_.gain, dt, j, steps_);
      h_norm2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Complex hdt = -f * (r.u1[i] - r.u2[i]);
        const auto g = drawn.normal_pair(j, static_cast<std::uint32_t>(i + 1));
        const Complex w =
            Complex(g.first, g.second) * (sim_.noise.b[i] * scale);
        const Complex z1 = driven == Driven::first ? w : w + hdt;
        const Complex z2 = driven == Driven::first ? w - hdt : w;
        const Complex h = hdt / dt;
        r.log_r +=
            (2.0 * (std::conj(z1) * h).real() - std::norm(h) * dt) * inv_var_[i];
        r.u1[i] += z1;
        r.u2[i] += z2;
        h_norm2 += eigenvalue(i + 1) * std::norm(h);
      }
      // shared high-mode noise
      for (std::size_t i = n; i < m; ++i) {
        const double b = sim_.noise.b[i];
        if (b == 0.0) {
          continue;
        }
        const auto g = high.normal_pair(j, static_cast<std::uint32_t>(i + 1));
        const Complex eta = Complex(g.first, g.second) * (b * scale);
        r.u1[i] += eta;
        r.u2[i] += eta;
      }
      if (f == 1.0) {
        // equality by assignment from the trajectory that carries the draw
        if (driven == Driven::first) {
          std::copy_n(r.u1.coeffs().begin(), n, r.u2.coeffs().begin());
        } else {
          std::copy_n(r.u2.coeffs().begin(), n, r.u1.coeffs().begin());
        }
      }
      check_finite(r.u1, j + 1);
      check_finite(r.u2, j + 1);
      if ((j + 1) % cfg_.check_every == 0 || j + 1 == steps_) {
        const double e1 = energies_.energy(r.u1);
        const double e2 = energies_.energy(r.u2);
        const double l = ell_from_energies(e1, e2, sim_.params);
        const double ratio = h_norm2 / (cfg_.k0 * std::pow(l, expo));
        r.bound_ratio = std::max(r.bound_ratio, ratio);
        if (ratio > 1.0) {
          r.bound_ok = false;
        }
        if (track_cap) {
          const std::size_t done = (j + 1) % cfg_.check_every == 0
                                       ? cfg_.check_every
                                       : (j + 1) % cfg_.check_every;
          const double span = static_cast<double>(done) * dt;
          r.lyap1.advance(e1, span);
          r.lyap2.advance(e2, span);
          const double t = t0 + static_cast<double>(j + 1) * dt;
          const double cap = cfg_.lyapunov_cap(
              sim_.params.sigma, t - static_cast<double>(*state.l0) *
                                         cycle_length());
          if (r.lyap1.value() > cap || r.lyap2.value() > cap) {
            r.cap_ok = false;
          }
        }
      }
    }
    return r;
  }

  void run_coupled_branch(CouplingState &state, ControlMode mode,
                          CycleDiagnostics &d) {
    const auto high = streams_.stream(state.k, PairStreams::high);
    const auto low = streams_.stream(state.k, PairStreams::low);
    RunResult inverse = run(state, mode, Driven::first, low, high);
    d.log_density = inverse.log_r;
    d.bound_ok = inverse.bound_ok;
    d.bound_ratio = inverse.bound_ratio;
    const double u = streams_.stream(state.k, PairStreams::accept).uniform(0, 0);
    d.coupling_accepted = inverse.log_r >= 0.0 || std::log(u) < inverse.log_r;
    if (d.coupling_accepted) {
      state.u1 = std::move(inverse.u1);
      state.u2 = std::move(inverse.u2);
      state.lyap1 = inverse.lyap1;
      state.lyap2 = inverse.lyap2;
    } else {
      for (std::size_t attempt = 1;; ++attempt) {
        if (attempt > cfg_.attempt_cap) {
          throw ResidualSamplingError(
              "residual sampling exceeded " +
              std::to_string(cfg_.attempt_cap) + " attempts in cycle " +
              std::to_string(state.k));
        }
        const auto prop =
            streams_.stream(state.k, PairStreams::residual_low, attempt);
        RunResult forward = run(state, mode, Driven::second, prop, high);
        const double v =
            streams_.stream(state.k, PairStreams::residual_accept, attempt)
                .uniform(0, 0);
        if (forward.log_r > 0.0 && v < -std::expm1(-forward.log_r)) {
          d.attempts = attempt;
          state.u1 = std::move(inverse.u1);
          state.u2 = std::move(forward.u2);
          break;
        }
      }
    }
    if (mode == ControlMode::hold) {
      d.clauses.low_modes_equal = d.coupling_accepted;
      d.clauses.noise_equal = true;
      d.clauses.small_energy = state.H_l <= cfg_.d0;
      d.clauses.lyapunov_cap = d.coupling_accepted && inverse.cap_ok;
    }
  }

  SimConfig sim_;
  CouplingConfig cfg_;
  PairStreams streams_;
  Stepper stepper_;
  EnergyEvaluator energies_;
  std::vector<double> inv_var_;
  std::size_t steps_;
};

/// Result of checking the structural l0 invariants on one chain's log.
struct H1Report {
  bool ok = true;
  std::vector<std::string> violations;
};

/// Checks, for consecutive cycles: l0(k) in {0..k} or infinity; l0(k+1) = l
/// <= k implies l0(k) = l; l0(k) = k implies H_k <= d0; coupled implies
/// equal low modes.
inline H1Report check_h1(std::span<const CycleDiagnostics> log, double d0) {
  H1Report rep;
  auto fail = [&](std::size_t k, const std::string &what) {
    rep.ok = false;
    rep.violations.push_back("cycle " + std::to_string(k) + ": " + what);
  };
  for (const auto &d : log) {
    const std::size_t next = d.cycle + 1;
    if (d.l0_after && *d.l0_after > next) {
      fail(d.cycle, "l0 beyond the current cycle");
    }
    if (d.l0_after && *d.l0_after <= d.cycle && d.l0_before != d.l0_after) {
      fail(d.cycle, "l0(k+1) = l <= k but l0(k) != l");
    }
    if (d.l0_after && *d.l0_after == next && !(d.H_end <= d0)) {
      fail(d.cycle, "l0(k) = k with H_k > d0");
    }
    if (d.l0_after && !d.low_modes_equal_end) {
      fail(d.cycle, "coupled with different low modes");
    }
  }
  return rep;
}

} // namespace snls
