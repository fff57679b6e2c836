#pragma once

#include <cmath>
#include <cstddef>

#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

/// Shape and amplitude ranges for randomized test fields.
struct CorpusSpec {
  std::size_t modes = 32;
  std::size_t max_support = 8; // nonzero modes drawn from 1 .. max_support
  double min_l2 = 1e-2;        // |u|_2 log-uniform in [min_l2, max_l2]
  double max_l2 = 1e1;
};

/// Random low-mode field: complex Gaussian coefficients with a random
/// algebraic decay, rescaled to a log-uniform L2 norm.
inline SpectralField random_field(const CorpusSpec &spec,
                                  rng::PhiloxEngine &engine) {
  SpectralField u(spec.modes);
  const std::size_t support =
      1 + static_cast<std::size_t>(
              engine.below(std::min(spec.max_support, spec.modes)));
  const double decay = 2.0 * engine.uniform();
  double norm2 = 0.0;
  for (std::size_t n = 1; n <= support; ++n) {
    const double weight = std::pow(static_cast<double>(n), -decay);
    const double re = engine.normal();
    const double im = engine.normal();
    u[n - 1] = Complex(re, im) * weight;
    norm2 += std::norm(u[n - 1]);
  }
  if (norm2 == 0.0) {
    u[0] = 1.0;
    norm2 = 1.0;
  }
  const double target = std::exp(
      std::log(spec.min_l2) +
      engine.uniform() * (std::log(spec.max_l2) - std::log(spec.min_l2)));
  u *= target / std::sqrt(norm2);
  return u;
}

} // namespace snls
