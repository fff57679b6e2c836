#pragma once

// Diagonal additive noise b dW. The complex cylindrical Wiener process is
// realized as independent real and imaginary Brownian components of variance
// dt/2 each, so E|Delta W_n|^2 = dt and B_0 is the trace of the increment
// covariance per unit time.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "snls/errors.hpp"
#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

struct NoiseOperator {
  std::vector<double> b; // b_n for n = 1 .. M
  std::size_t n_star = 1;

  std::size_t modes() const noexcept { return b.size(); }

  /// b_n = scale * n^{-power} for n <= cutoff, 0 above.
  static NoiseOperator power_law(std::size_t modes, double scale, double power,
                                 std::size_t cutoff, std::size_t n_star) {
    NoiseOperator noise{std::vector<double>(modes, 0.0), n_star};
    for (std::size_t n = 1; n <= std::min(modes, cutoff); ++n) {
      noise.b[n - 1] = scale * std::pow(static_cast<double>(n), -power);
    }
    return noise;
  }
};

struct NoiseReport {
  bool low_modes_positive = true;
  std::vector<std::size_t> offending_modes; // n <= N_* with b_n <= 0
  bool nonnegative = true;
  std::array<double, 4> hs_norms{};         // B_0 .. B_3
  double decay_exponent = std::numeric_limits<double>::quiet_NaN();
  /// False when the fitted exponent is slower than n^{-4}.
  bool decay_sufficient = true;

  bool pass() const { return low_modes_positive && nonnegative; }
};

/// B_s = sum mu_n^s b_n^2.
inline double hs_norm(const NoiseOperator &noise, double s) {
  if (!(s >= 0.0 && s <= 3.0)) {
    throw ParameterError("Hilbert-Schmidt index must lie in [0, 3]");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < noise.modes(); ++i) {
    total += std::pow(eigenvalue(i + 1), s) * noise.b[i] * noise.b[i];
  }
  return total;
}

inline NoiseReport validate(const NoiseOperator &noise) {
  NoiseReport report;
  if (noise.n_star == 0 || noise.n_star > noise.modes()) {
    report.low_modes_positive = false;
  }
  for (std::size_t n = 1; n <= noise.modes(); ++n) {
    const double bn = noise.b[n - 1];
    if (!(bn >= 0.0)) {
      report.nonnegative = false;
    }
    if (n <= noise.n_star && !(bn > 0.0)) {
      report.low_modes_positive = false;
      report.offending_modes.push_back(n);
    }
  }
  for (int s = 0; s <= 3; ++s) {
    report.hs_norms[static_cast<std::size_t>(s)] = hs_norm(noise, s);
  }

  // least-squares slope of log b_n against log n over the positive entries
  double sx = 0, sy = 0, sxx = 0, sxy = 0, count = 0;
  for (std::size_t n = 1; n <= noise.modes(); ++n) {
    const double bn = noise.b[n - 1];
    if (bn > 0.0) {
      const double x = std::log(static_cast<double>(n));
      const double y = std::log(bn);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
      count += 1;
    }
  }
  if (count >= 2) {
    report.decay_exponent = (count * sxy - sx * sy) / (count * sxx - sx * sx);
    report.decay_sufficient = report.decay_exponent <= -4.0 + 1e-9;
  }
  return report;
}

struct WienerIncrement {
  SpectralField delta; // b_n (xi_n + i zeta_n) sqrt(dt / 2)
  double dt = 0.0;
};

/// Adds the modes [first, last] (1-based, inclusive) of the increment b dW at
/// `step` of `stream` to `target`.
inline void add_increment(SpectralField &target, const NoiseOperator &noise,
                          double dt, const rng::CounterStream &stream,
                          std::uint64_t step, std::size_t first,
                          std::size_t last) {
  const double scale = std::sqrt(0.5 * dt);
  last = std::min(last, noise.modes());
  for (std::size_t n = first; n <= last; ++n) {
    const double bn = noise.b[n - 1];
    if (bn == 0.0) {
      continue;
    }
    const auto pair = stream.normal_pair(step, static_cast<std::uint32_t>(n));
    target[n - 1] += Complex(pair.first, pair.second) * (bn * scale);
  }
}

/// Increment b dW over [t_step, t_step + dt], addressed by step index so
/// that equal (stream, step) always yield the same draw.
inline WienerIncrement sample_increment(const NoiseOperator &noise, double dt,
                                        const rng::CounterStream &stream,
                                        std::uint64_t step) {
  if (!(dt > 0.0)) {
    throw ParameterError("time step must be positive");
  }
  WienerIncrement inc{SpectralField(noise.modes()), dt};
  add_increment(inc.delta, noise, dt, stream, step, 1, noise.modes());
  return inc;
}

} // namespace snls
