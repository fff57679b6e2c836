#pragma once

// Scalar functionals of the damped NLS: the Hamiltonian H_*, the modified
// energy H used as Lyapunov function, the accumulator E_{u,k}, the
// Foias-Prodi forms J and J_FP^N, and the weight l(u1, u2).

#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "snls/corpus.hpp"
#include "snls/errors.hpp"
#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

struct EnergyParams {
  double sigma = 1.0;
  int lambda = -1; // +1 focusing, -1 defocusing
  double alpha = 1.0;
  std::optional<double> G;  // focusing modification constant
  std::optional<double> G1; // focusing J modification constant
  double Lambda = 0.0;      // Foias-Prodi rate constant

  bool focusing() const noexcept { return lambda == 1; }

  /// 2 + 4 sigma / (2 - sigma); only meaningful when focusing.
  double mass_exponent() const { return 2.0 + 4.0 * sigma / (2.0 - sigma); }

  /// Exponent 3 sigma + 1 of the weight l(u1, u2).
  double weight_power() const { return 3.0 * sigma + 1.0; }

  void validate() const {
    if (lambda != 1 && lambda != -1) {
      throw ParameterError("lambda must be +1 or -1");
    }
    if (!(sigma >= 0.0)) {
      throw ParameterError("sigma must be >= 0");
    }
    if (lambda == 1 && !(sigma < 2.0)) {
      throw ParameterError("focusing case requires sigma in [0, 2)");
    }
    if (!(alpha >= 0.0)) {
      throw ParameterError("damping alpha must be >= 0");
    }
    if (G && !(*G >= 0.0)) {
      throw ParameterError("G must be >= 0");
    }
    if (G1 && !(*G1 >= 0.0)) {
      throw ParameterError("G1 must be >= 0");
    }
    if (!(Lambda >= 0.0)) {
      throw ParameterError("Lambda must be >= 0");
    }
  }
};

/// H^k, evaluated through logarithms once H is large.
inline double energy_power(double energy, double k) {
  if (k == 0.0) {
    return 1.0;
  }
  if (energy <= 0.0) {
    return 0.0;
  }
  if (energy > 1e3) {
    return std::exp(k * std::log(energy));
  }
  return std::pow(energy, k);
}

/// Evaluates the energies of M-mode fields with reusable quadrature buffers.
/// Not thread-safe; use one per thread.
class EnergyEvaluator {
public:
  EnergyEvaluator(std::size_t modes, EnergyParams params)
      : params_(std::move(params)),
        ws_(modes, quadrature_grid_size(modes)) {
    params_.validate();
  }

  const EnergyParams &params() const noexcept { return params_; }

  /// int |u|^{2 sigma + 2}
  double potential_integral(const SpectralField &u) {
    return lp_integral(u, 2.0 * params_.sigma + 2.0, ws_);
  }

  /// H_*(u) = |grad u|^2 / 2 - lambda / (2 sigma + 2) |u|_{2 sigma+2}^{2 sigma+2}
  double h_star(const SpectralField &u) {
    const double grad2 = square(sobolev_norm(u, 1.0));
    const double p = 2.0 * params_.sigma + 2.0;
    return 0.5 * grad2 - params_.lambda / p * potential_integral(u);
  }

  /// Modified energy H. Checks the three-term lower bound in the focusing
  /// case and throws CalibrationError if the configured G is too small for u.
  double energy(const SpectralField &u) {
    if (!params_.focusing()) {
      return h_star(u);
    }
    if (!params_.G) {
      throw StateError("focusing energy requires a calibrated G");
    }
    const double sigma = params_.sigma;
    const double p = 2.0 * sigma + 2.0;
    const double grad2 = square(sobolev_norm(u, 1.0));
    const double pot = potential_integral(u);
    const double mass_term =
        std::pow(square(sobolev_norm(u, 0.0)), 0.5 * params_.mass_exponent());
    const double value = 0.5 * grad2 - pot / p + *params_.G * mass_term;
    const double bound = 2.0 * sigma * (sigma + 2.0) / (p * p) * grad2 +
                         pot / p + (2.0 * sigma + 1.0) / p * *params_.G *
                                       mass_term;
    const double scale = 0.5 * grad2 + pot / p + *params_.G * mass_term;
    if (value < bound - 1e-12 * scale) {
      throw CalibrationError("modified energy below its lower bound: G too "
                             "small for this field");
    }
    return value;
  }

private:
  static double square(double x) { return x * x; }

  EnergyParams params_;
  SpectralWorkspace ws_;
};

inline double h_star(const SpectralField &u, const EnergyParams &p) {
  return EnergyEvaluator(u.modes(), p).h_star(u);
}

inline double energy(const SpectralField &u, const EnergyParams &p) {
  return EnergyEvaluator(u.modes(), p).energy(u);
}

/// Running value of E_{u,k}(t, s) = H^k(u(t)) + (alpha k / 2) int_s^t H^k.
class LyapunovAccumulator {
public:
  LyapunovAccumulator() = default;
  LyapunovAccumulator(double k, double alpha, double t0, double energy0)
      : k_(k), alpha_(alpha), t0_(t0), t_(t0),
        current_(energy_power(energy0, k)) {}

  /// Trapezoid update with the energy at the new time.
  void advance(double energy_new, double dt) {
    if (!(dt > 0.0)) {
      throw ParameterError("Lyapunov step requires dt > 0");
    }
    const double next = energy_power(energy_new, k_);
    integral_ += 0.5 * alpha_ * k_ * 0.5 * dt * (current_ + next);
    current_ = next;
    t_ += dt;
  }

  double value() const noexcept { return current_ + integral_; }
  double current() const noexcept { return current_; }
  double integral() const noexcept { return integral_; }
  double k() const noexcept { return k_; }
  double start_time() const noexcept { return t0_; }
  double time() const noexcept { return t_; }

private:
  double k_ = 1.0;
  double alpha_ = 0.0;
  double t0_ = 0.0;
  double t_ = 0.0;
  double current_ = 0.0;
  double integral_ = 0.0;
};

inline LyapunovAccumulator lyapunov_step(LyapunovAccumulator acc,
                                         const SpectralField &u_new, double dt,
                                         const EnergyParams &p) {
  acc.advance(energy(u_new, p), dt);
  return acc;
}

/// Pointwise F'(u)(v) = (sigma+1)|u|^{2 sigma} v + sigma |u|^{2 sigma-2} u^2 conj(v),
/// with the second term set to 0 where u = 0.
inline Complex f_prime_point(Complex u, Complex v, double sigma) {
  const double m = std::norm(u);
  if (m == 0.0) {
    return sigma == 0.0 ? v : Complex{};
  }
  const double ms = sigma == 1.0 ? m : std::pow(m, sigma);
  return (sigma + 1.0) * ms * v + sigma * (ms / m) * u * u * std::conj(v);
}

/// Coefficients of F'(u)(v) on the nonlinear grid.
inline SpectralField f_prime(const SpectralField &u, const SpectralField &v,
                             double sigma) {
  if (u.modes() != v.modes()) {
    throw DimensionError("f_prime arguments with different mode counts");
  }
  const std::size_t grid = nonlinear_grid_size(u.modes(), sigma);
  const PhysicalGrid gu = synthesize(u, grid);
  SpectralWorkspace ws(v.modes(), grid);
  auto gv = ws.synthesize(v.coeffs());
  for (std::size_t j = 0; j < grid; ++j) {
    gv[j] = f_prime_point(gu.samples[j], gv[j], sigma);
  }
  SpectralField out(u.modes());
  ws.analyze(out.coeffs());
  return out;
}

struct QuadratureRule {
  std::vector<double> nodes;   // on [0, 1]
  std::vector<double> weights; // sum to 1
};

namespace detail {

template <unsigned Points> QuadratureRule gauss_legendre_unit() {
  using Rule = boost::math::quadrature::gauss<double, Points>;
  QuadratureRule rule;
  const auto &x = Rule::abscissa();
  const auto &w = Rule::weights();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) {
      rule.nodes.push_back(0.5);
      rule.weights.push_back(0.5 * w[i]);
      continue;
    }
    rule.nodes.push_back(0.5 * (1.0 - x[i]));
    rule.weights.push_back(0.5 * w[i]);
    rule.nodes.push_back(0.5 * (1.0 + x[i]));
    rule.weights.push_back(0.5 * w[i]);
  }
  return rule;
}

} // namespace detail

/// Gauss-Legendre rule on [0, 1] with 4, 8, 16 or 32 nodes.
inline QuadratureRule gauss_legendre(unsigned points) {
  switch (points) {
  case 4:
    return detail::gauss_legendre_unit<4>();
  case 8:
    return detail::gauss_legendre_unit<8>();
  case 16:
    return detail::gauss_legendre_unit<16>();
  case 32:
    return detail::gauss_legendre_unit<32>();
  default:
    throw ParameterError("supported Gauss-Legendre sizes are 4, 8, 16, 32");
  }
}

/// Evaluator for the Foias-Prodi quadratic form
///   J(u1, u2, r) = |grad r|^2 - lambda Re int int_0^1 F'(tau u1 + (1-tau) u2)(r) conj(r)
///                  + [focusing] G1 (H^sigma(u1) + H^sigma(u2)) |r|^2.
class FoiasProdiForm {
public:
  FoiasProdiForm(std::size_t modes, EnergyParams params, unsigned nodes = 8)
      : params_(std::move(params)), energies_(modes, params_),
        rule_(gauss_legendre(nodes)), grid_(quadrature_grid_size(modes)),
        ws_(modes, grid_), g1_(grid_), g2_(grid_), gr_(grid_) {
    if (params_.focusing() && !params_.G1) {
      throw StateError("focusing J requires a calibrated G1");
    }
  }

  /// Re int int F'(tau u1 + (1 - tau) u2)(r) conj(r) dtau dx
  double interaction(const SpectralField &u1, const SpectralField &u2,
                     const SpectralField &r) {
    load(u1, g1_);
    load(u2, g2_);
    load(r, gr_);
    const double sigma = params_.sigma;
    double total = 0.0;
    for (std::size_t q = 0; q < rule_.nodes.size(); ++q) {
      const double tau = rule_.nodes[q];
      double sum = 0.0;
      for (std::size_t j = 0; j < grid_; ++j) {
        const Complex w = tau * g1_[j] + (1.0 - tau) * g2_[j];
        const Complex rj = gr_[j];
        const double m = std::norm(w);
        const double r2 = std::norm(rj);
        if (m == 0.0) {
          sum += sigma == 0.0 ? r2 : 0.0;
          continue;
        }
        const double ms = sigma == 1.0 ? m : std::pow(m, sigma);
        const Complex phase = w * std::conj(rj);
        sum += (sigma + 1.0) * ms * r2 +
               sigma * (ms / m) * (phase * phase).real();
      }
      total += rule_.weights[q] * sum;
    }
    return total / static_cast<double>(grid_ + 1);
  }

  /// J without the G1 term.
  double j_star(const SpectralField &u1, const SpectralField &u2,
                const SpectralField &r) {
    const double grad2 = square(sobolev_norm(r, 1.0));
    return grad2 - params_.lambda * interaction(u1, u2, r);
  }

  double value_unchecked(const SpectralField &u1, const SpectralField &u2,
                         const SpectralField &r) {
    double value = j_star(u1, u2, r);
    if (params_.focusing()) {
      const double weight =
          energy_power(energies_.energy(u1), params_.sigma) +
          energy_power(energies_.energy(u2), params_.sigma);
      value += *params_.G1 * weight * square(sobolev_norm(r, 0.0));
    }
    return value;
  }

  /// J, checked against J >= |grad r|^2 / 2.
  double operator()(const SpectralField &u1, const SpectralField &u2,
                    const SpectralField &r) {
    const double value = value_unchecked(u1, u2, r);
    const double grad2 = square(sobolev_norm(r, 1.0));
    if (value < 0.5 * grad2 * (1.0 - 1e-12)) {
      throw CalibrationError("J below |grad r|^2 / 2: G1 too small");
    }
    return value;
  }

  EnergyEvaluator &energies() noexcept { return energies_; }

private:
  static double square(double x) { return x * x; }

  void load(const SpectralField &u, std::vector<Complex> &dst) {
    const auto values = ws_.synthesize(u.coeffs());
    std::copy(values.begin(), values.end(), dst.begin());
  }

  EnergyParams params_;
  EnergyEvaluator energies_;
  QuadratureRule rule_;
  std::size_t grid_;
  SpectralWorkspace ws_;
  std::vector<Complex> g1_, g2_, gr_;
};

inline double j_form(const SpectralField &u1, const SpectralField &u2,
                     const SpectralField &r, const EnergyParams &p,
                     unsigned nodes = 8) {
  return FoiasProdiForm(r.modes(), p, nodes)(u1, u2, r);
}

/// l(u1, u2) = 1 + H^{3 sigma + 1}(u1) + H^{3 sigma + 1}(u2), from energies.
inline double ell_from_energies(double h1, double h2, const EnergyParams &p) {
  return 1.0 + energy_power(h1, p.weight_power()) +
         energy_power(h2, p.weight_power());
}

inline double ell(const SpectralField &u1, const SpectralField &u2,
                  const EnergyParams &p) {
  EnergyEvaluator ev(u1.modes(), p);
  return ell_from_energies(ev.energy(u1), ev.energy(u2), p);
}

/// Online J_FP^N: exp(2 alpha t - Lambda N^{-1/4} int_0^t l ds) J, with the
/// l-integral by the trapezoid rule.
class FoiasProdiWeight {
public:
  FoiasProdiWeight(const EnergyParams &p, double n_modes, double ell0)
      : alpha_(p.alpha), rate_(p.Lambda / std::pow(n_modes, 0.25)),
        ell_(ell0) {
    if (!(n_modes >= 1.0)) {
      throw ParameterError("Foias-Prodi mode count N must be >= 1");
    }
  }

  void advance(double ell_new, double dt) {
    integral_ += 0.5 * dt * (ell_ + ell_new);
    ell_ = ell_new;
    t_ += dt;
  }

  double log_weight() const { return 2.0 * alpha_ * t_ - rate_ * integral_; }
  double apply(double j) const { return std::exp(log_weight()) * j; }
  double ell_integral() const noexcept { return integral_; }
  double time() const noexcept { return t_; }

private:
  double alpha_;
  double rate_;
  double ell_;
  double integral_ = 0.0;
  double t_ = 0.0;
};

struct FoiasProdiSample {
  SpectralField u1, u2, r;
};

/// J_FP^N(t_i) along a uniformly sampled history.
inline std::vector<double>
jfp_accumulate(std::span<const FoiasProdiSample> history, double dt,
               double n_modes, const EnergyParams &p) {
  std::vector<double> out;
  if (history.empty()) {
    return out;
  }
  FoiasProdiForm form(history.front().r.modes(), p);
  auto &ev = form.energies();
  auto ell_at = [&](const FoiasProdiSample &s) {
    return ell_from_energies(ev.energy(s.u1), ev.energy(s.u2), p);
  };
  FoiasProdiWeight weight(p, n_modes, ell_at(history.front()));
  out.reserve(history.size());
  out.push_back(form(history.front().u1, history.front().u2,
                     history.front().r));
  for (std::size_t i = 1; i < history.size(); ++i) {
    const auto &s = history[i];
    weight.advance(ell_at(s), dt);
    out.push_back(weight.apply(form(s.u1, s.u2, s.r)));
  }
  return out;
}

/// Amount by which `value` exceeds its allowed bound, as a ratio used for
/// corpus maximization.
struct CalibrationResult {
  double value = 0.0;   // returned constant (safety applied)
  double raw_max = 0.0; // corpus maximum before the floor and safety
  std::size_t corpus_size = 0;
};

/// Smallest G (times safety) for which
///   |u|_{2s+2}^{2s+2} <= |grad u|^2 / (2s+2) + (G/2) |u|_2^{2 + 4s/(2-s)}
/// holds on a randomized corpus.
inline CalibrationResult calibrate_G(double sigma, std::size_t corpus_size,
                                     double safety, rng::PhiloxEngine &engine,
                                     const CorpusSpec &corpus = {}) {
  if (!(sigma >= 0.0 && sigma < 2.0)) {
    throw ParameterError("calibrate_G requires sigma in [0, 2)");
  }
  if (corpus_size < 1000) {
    throw ParameterError("calibration corpus must hold at least 1000 fields");
  }
  if (!(safety > 1.0)) {
    throw ParameterError("calibration safety factor must exceed 1");
  }
  SpectralWorkspace ws(corpus.modes, quadrature_grid_size(corpus.modes));
  const double p = 2.0 * sigma + 2.0;
  const double mass_exp = 2.0 + 4.0 * sigma / (2.0 - sigma);
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < corpus_size; ++i) {
    const SpectralField u = random_field(corpus, engine);
    const double pot = lp_integral(u, p, ws);
    const double grad2 = std::pow(sobolev_norm(u, 1.0), 2);
    const double mass = std::pow(std::pow(sobolev_norm(u, 0.0), 2),
                                 0.5 * mass_exp);
    worst = std::max(worst, 2.0 * (pot - grad2 / p) / mass);
  }
  return {safety * std::max(0.0, worst), worst, corpus_size};
}

/// Number of corpus fields violating the G inequality.
inline std::size_t count_G_violations(double sigma, double G,
                                      std::size_t corpus_size,
                                      rng::PhiloxEngine &engine,
                                      const CorpusSpec &corpus = {}) {
  SpectralWorkspace ws(corpus.modes, quadrature_grid_size(corpus.modes));
  const double p = 2.0 * sigma + 2.0;
  const double mass_exp = 2.0 + 4.0 * sigma / (2.0 - sigma);
  std::size_t violations = 0;
  for (std::size_t i = 0; i < corpus_size; ++i) {
    const SpectralField u = random_field(corpus, engine);
    const double pot = lp_integral(u, p, ws);
    const double grad2 = std::pow(sobolev_norm(u, 1.0), 2);
    const double mass = std::pow(std::pow(sobolev_norm(u, 0.0), 2),
                                 0.5 * mass_exp);
    if (pot > grad2 / p + 0.5 * G * mass) {
      ++violations;
    }
  }
  return violations;
}

/// Smallest G1 (times safety) such that J >= |grad r|^2 / 2 on random
/// triples (u1, u2, r). Requires p.G (focusing energy).
inline CalibrationResult calibrate_G1(const EnergyParams &p,
                                      std::size_t corpus_size, double safety,
                                      rng::PhiloxEngine &engine,
                                      const CorpusSpec &corpus = {}) {
  if (!p.focusing()) {
    throw ParameterError("G1 is only defined for the focusing case");
  }
  if (!(p.sigma >= 0.0 && p.sigma < 2.0)) {
    throw ParameterError("calibrate_G1 requires sigma in [0, 2)");
  }
  if (!(safety > 0.0)) {
    throw ParameterError("calibration safety factor must be positive");
  }
  EnergyParams probe = p;
  probe.G1 = 0.0;
  FoiasProdiForm form(corpus.modes, probe);
  auto &ev = form.energies();
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < corpus_size; ++i) {
    const SpectralField u1 = random_field(corpus, engine);
    const SpectralField u2 = random_field(corpus, engine);
    const SpectralField r = random_field(corpus, engine);
    const double deficit = 0.5 * std::pow(sobolev_norm(r, 1.0), 2) -
                           form.j_star(u1, u2, r);
    const double weight = (energy_power(ev.energy(u1), p.sigma) +
                           energy_power(ev.energy(u2), p.sigma)) *
                          std::pow(sobolev_norm(r, 0.0), 2);
    if (weight > 0.0) {
      worst = std::max(worst, deficit / weight);
    } else if (deficit > 0.0) {
      throw CalibrationError("J deficit with vanishing G1 weight");
    }
  }
  return {safety * std::max(0.0, worst), worst, corpus_size};
}

/// Number of random triples with J < |grad r|^2 / 2 for the given params.
inline std::size_t count_G1_violations(const EnergyParams &p,
                                       std::size_t corpus_size,
                                       rng::PhiloxEngine &engine,
                                       const CorpusSpec &corpus = {}) {
  FoiasProdiForm form(corpus.modes, p);
  std::size_t violations = 0;
  for (std::size_t i = 0; i < corpus_size; ++i) {
    const SpectralField u1 = random_field(corpus, engine);
    const SpectralField u2 = random_field(corpus, engine);
    const SpectralField r = random_field(corpus, engine);
    if (form.value_unchecked(u1, u2, r) <
        0.5 * std::pow(sobolev_norm(r, 1.0), 2)) {
      ++violations;
    }
  }
  return violations;
}

} // namespace snls
