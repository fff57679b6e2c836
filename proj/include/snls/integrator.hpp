#pragma once

// Strang splitting for du = -iAu dt + i lambda |u|^{2 sigma} u dt - alpha u dt
// + b dW + h dt: half linear flow, exact pointwise phase rotation, half linear
// flow, then the additive increment.

#include <fftw3.h>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "snls/energy.hpp"
#include "snls/errors.hpp"
#include "snls/noise.hpp"
#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

enum class Scheme { strang };

struct SimConfig {
  std::size_t modes = 128;
  double dt = 1e-3;
  double horizon = 1.0;
  EnergyParams params;
  NoiseOperator noise;
  Scheme scheme = Scheme::strang;

  std::size_t n_star() const noexcept { return noise.n_star; }

  /// ceil(T / dt), tolerant to rounding of T / dt.
  std::size_t steps() const {
    return static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
  }

  void validate() const {
    if (modes == 0) {
      throw DimensionError("mode count M must be positive");
    }
    if (!(dt > 0.0)) {
      throw ParameterError("time step dt must be positive");
    }
    if (!(horizon >= dt)) {
      throw ParameterError("horizon T must be at least dt");
    }
    if (noise.modes() != modes) {
      throw DimensionError("noise operator has " +
                           std::to_string(noise.modes()) +
                           " coefficients, expected M=" +
                           std::to_string(modes));
    }
    if (noise.n_star > modes) {
      throw DimensionError("N_* exceeds mode count M");
    }
    params.validate();
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<SpectralField> states;
  /// Per-step increments b dW; entry k drives states[k] -> states[k+1].
  std::optional<std::vector<SpectralField>> noise_record;
};

/// One-step propagator at fixed (M, dt). Holds buffers; use one per thread.
class Stepper {
public:
  explicit Stepper(const SimConfig &cfg)
      : modes_(cfg.modes), dt_(cfg.dt), sigma_(cfg.params.sigma),
        phase_(cfg.params.lambda * cfg.dt), n_star_(cfg.noise.n_star),
        grid_(nonlinear_grid_size(cfg.modes, cfg.params.sigma)),
        transform_(&detail::sine_transform(grid_)), split_(2 * grid_),
        first_(cfg.modes), second_(cfg.modes) {
    cfg.validate();
    // the transform scalings are folded into the two half-step factors
    const double synth = 1.0 / std::numbers::sqrt2;
    const double anal =
        1.0 / (std::numbers::sqrt2 * static_cast<double>(grid_ + 1));
    const double damping = std::exp(-0.5 * cfg.params.alpha * cfg.dt);
    for (std::size_t i = 0; i < modes_; ++i) {
      const Complex half = std::polar(damping, -0.5 * eigenvalue(i + 1) * dt_);
      first_[i] = half * synth;
      second_[i] = half * anal;
    }
  }

  std::size_t modes() const noexcept { return modes_; }
  double dt() const noexcept { return dt_; }
  std::size_t n_star() const noexcept { return n_star_; }

  /// The noise-free part of one step, in place.
  void deterministic_step(SpectralField &u) {
    if (u.modes() != modes_) {
      throw DimensionError("stepper mode count mismatch");
    }
    double *re = split_.data();
    double *im = re + grid_;
    for (std::size_t i = 0; i < modes_; ++i) {
      const Complex z = u[i] * first_[i];
      re[i] = z.real();
      im[i] = z.imag();
    }
    std::fill(re + modes_, re + grid_, 0.0);
    std::fill(im + modes_, im + grid_, 0.0);
    transform_->apply(re);
    for (std::size_t j = 0; j < grid_; ++j) {
      const double m = re[j] * re[j] + im[j] * im[j];
      const double theta = phase_ * (sigma_ == 1.0 ? m : std::pow(m, sigma_));
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      const double x = re[j];
      re[j] = x * c - im[j] * s;
      im[j] = x * s + im[j] * c;
    }
    transform_->apply(re);
    for (std::size_t i = 0; i < modes_; ++i) {
      u[i] = Complex(re[i], im[i]) * second_[i];
    }
  }

  /// Full step with optional increment b dW and optional low-mode control h.
  void step(SpectralField &u, const SpectralField *increment,
            const SpectralField *control) {
    if (control != nullptr) {
      check_control(*control);
    }
    deterministic_step(u);
    if (increment != nullptr) {
      u += *increment;
    }
    if (control != nullptr) {
      for (std::size_t i = 0; i < n_star_; ++i) {
        u[i] += (*control)[i] * dt_;
      }
    }
  }

  /// Throws ContractError when h has support above N_*.
  void check_control(const SpectralField &h) const {
    if (h.modes() != modes_) {
      throw DimensionError("control mode count mismatch");
    }
    for (std::size_t i = n_star_; i < modes_; ++i) {
      if (h[i] != Complex{}) {
        throw ContractError("control h has support above N_*=" +
                            std::to_string(n_star_));
      }
    }
  }

private:
  std::size_t modes_;
  double dt_;
  double sigma_;
  double phase_;
  std::size_t n_star_;
  std::size_t grid_;
  const detail::SineTransform *transform_;
  std::vector<double> split_;
  std::vector<Complex> first_;
  std::vector<Complex> second_;
};

/// One step of u with increment dW and optional control h.
inline SpectralField step(SpectralField u, const WienerIncrement &dW,
                          const SpectralField *h, const SimConfig &cfg) {
  if (std::abs(dW.dt - cfg.dt) > 1e-15 * cfg.dt) {
    throw ParameterError("increment dt does not match the configured dt");
  }
  Stepper stepper(cfg);
  stepper.step(u, &dW.delta, h);
  return u;
}

inline void check_finite(const SpectralField &u, std::size_t step) {
  if (!u.all_finite()) {
    throw BlowUpError(step, "non-finite state after step " +
                                std::to_string(step));
  }
}

struct SimulateOptions {
  bool record_noise = false;
  std::size_t record_every = 1;
  /// Optional per-step control path h(t_k), each supported on modes <= N_*.
  const std::vector<SpectralField> *control = nullptr;
};

/// Runs ceil(T/dt) steps driven by `stream`; step k draws its increment at
/// counter (k, n). States are recorded every `record_every` steps and at the
/// end.
inline Trajectory simulate(const SpectralField &u0, const SimConfig &cfg,
                           const rng::CounterStream &stream,
                           const SimulateOptions &opts = {}) {
  cfg.validate();
  if (u0.modes() != cfg.modes) {
    throw DimensionError("initial state has the wrong mode count");
  }
  if (opts.record_every == 0) {
    throw ParameterError("record_every must be positive");
  }
  const std::size_t steps = cfg.steps();
  if (opts.control != nullptr && opts.control->size() < steps) {
    throw DimensionError("control path shorter than the number of steps");
  }
  Stepper stepper(cfg);
  Trajectory traj;
  traj.times.push_back(0.0);
  traj.states.push_back(u0);
  if (opts.record_noise) {
    traj.noise_record.emplace();
    traj.noise_record->reserve(steps);
  }
  SpectralField u = u0;
  SpectralField inc(cfg.modes);
  for (std::size_t k = 0; k < steps; ++k) {
    std::fill(inc.coeffs().begin(), inc.coeffs().end(), Complex{});
    add_increment(inc, cfg.noise, cfg.dt, stream, k, 1, cfg.modes);
    stepper.step(u, &inc,
                 opts.control != nullptr ? &(*opts.control)[k] : nullptr);
    check_finite(u, k + 1);
    if (opts.record_noise) {
      traj.noise_record->push_back(inc);
    }
    if ((k + 1) % opts.record_every == 0 || k + 1 == steps) {
      traj.times.push_back(static_cast<double>(k + 1) * cfg.dt);
      traj.states.push_back(u);
    }
  }
  return traj;
}

/// Steps u in place for `steps` steps starting at counter index `first_step`,
/// calling observe(step_index, u) after each step. Nothing is stored.
inline void evolve(SpectralField &u, Stepper &stepper, const NoiseOperator &noise,
                   const rng::CounterStream &stream, std::uint64_t first_step,
                   std::size_t steps,
                   const std::function<void(std::uint64_t,
                                            const SpectralField &)> &observe =
                       {}) {
  SpectralField inc(u.modes());
  for (std::size_t s = 0; s < steps; ++s) {
    const std::uint64_t k = first_step + s;
    std::fill(inc.coeffs().begin(), inc.coeffs().end(), Complex{});
    add_increment(inc, noise, stepper.dt(), stream, k, 1, u.modes());
    stepper.step(u, &inc, nullptr);
    check_finite(u, k + 1);
    if (observe) {
      observe(k + 1, u);
    }
  }
}

/// Rebuilds the high modes Y = Q_{N_*} u from a given low-mode path X, the
/// high-mode increments eta and Y(0) = Q_{N_*} u0. Entry k of the result
/// depends only on X[0..k-1], eta[0..k-1] and u0.
inline std::vector<SpectralField>
phi_reconstruct(const std::vector<SpectralField> &x_path,
                const std::vector<SpectralField> &eta_path,
                const SpectralField &u0, const SimConfig &cfg) {
  if (x_path.empty() || x_path.size() > eta_path.size() + 1) {
    throw ContractError("low-mode path and high-mode noise are on "
                        "different grids");
  }
  const std::size_t n = cfg.noise.n_star;
  Stepper stepper(cfg);
  std::vector<SpectralField> y_path;
  y_path.reserve(x_path.size());
  y_path.push_back(project(u0, n, Part::high));
  for (std::size_t k = 0; k + 1 < x_path.size(); ++k) {
    SpectralField u = x_path[k] + y_path.back();
    stepper.deterministic_step(u);
    u += eta_path[k];
    y_path.push_back(project(u, n, Part::high));
  }
  return y_path;
}

} // namespace snls
