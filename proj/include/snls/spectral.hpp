#pragma once

// Dirichlet sine basis on [0, 1]: e_n(x) = sqrt(2) sin(n pi x), with
// eigenvalue mu_n = n^2 pi^2 of A = -Laplacian. A field is stored by its
// coefficients on e_1 .. e_M; physical values live on the interior grid
// x_j = j / (Q + 1), j = 1 .. Q.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <vector>

#include "snls/errors.hpp"

namespace snls {

using Complex = std::complex<double>;

inline double eigenvalue(std::size_t n) {
  const double k = static_cast<double>(n) * std::numbers::pi;
  return k * k;
}

/// Coefficients of a field on the sine eigenbasis. Index i holds mode
/// n = i + 1.
class SpectralField {
public:
  SpectralField() = default;
  explicit SpectralField(std::size_t modes) : coeffs_(modes) {}
  explicit SpectralField(std::vector<Complex> coeffs)
      : coeffs_(std::move(coeffs)) {}

  /// c * e_n in an M-mode space.
  static SpectralField basis(std::size_t modes, std::size_t n,
                             Complex c = 1.0) {
    if (n == 0 || n > modes) {
      throw DimensionError("basis mode index out of range");
    }
    SpectralField u(modes);
    u.coeffs_[n - 1] = c;
    return u;
  }

  std::size_t modes() const noexcept { return coeffs_.size(); }

  Complex &operator[](std::size_t i) { return coeffs_[i]; }
  const Complex &operator[](std::size_t i) const { return coeffs_[i]; }

  /// 1-based mode access.
  Complex &mode(std::size_t n) { return coeffs_.at(n - 1); }
  const Complex &mode(std::size_t n) const { return coeffs_.at(n - 1); }

  std::span<Complex> coeffs() noexcept { return coeffs_; }
  std::span<const Complex> coeffs() const noexcept { return coeffs_; }

  bool all_finite() const {
    return std::all_of(coeffs_.begin(), coeffs_.end(), [](const Complex &z) {
      return std::isfinite(z.real()) && std::isfinite(z.imag());
    });
  }

  bool operator==(const SpectralField &) const = default;

  SpectralField &operator+=(const SpectralField &other) {
    check_same(other);
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      coeffs_[i] += other.coeffs_[i];
    }
    return *this;
  }
  SpectralField &operator-=(const SpectralField &other) {
    check_same(other);
    for (std::size_t i = 0; i < coeffs_.size(); ++i) {
      coeffs_[i] -= other.coeffs_[i];
    }
    return *this;
  }
  SpectralField &operator*=(Complex c) {
    for (auto &z : coeffs_) {
      z *= c;
    }
    return *this;
  }

  friend SpectralField operator+(SpectralField a, const SpectralField &b) {
    return a += b;
  }
  friend SpectralField operator-(SpectralField a, const SpectralField &b) {
    return a -= b;
  }
  friend SpectralField operator*(Complex c, SpectralField a) { return a *= c; }
  friend SpectralField operator*(SpectralField a, Complex c) { return a *= c; }

private:
  void check_same(const SpectralField &other) const {
    if (other.modes() != modes()) {
      throw DimensionError("spectral fields with different mode counts");
    }
  }

  std::vector<Complex> coeffs_;
};

/// Samples u(x_j) on the interior grid x_j = j / (Q + 1).
struct PhysicalGrid {
  std::vector<Complex> samples;

  std::size_t size() const noexcept { return samples.size(); }
  double spacing() const { return 1.0 / static_cast<double>(size() + 1); }
  double point(std::size_t j) const {
    return static_cast<double>(j + 1) * spacing();
  }
};

namespace detail {

inline bool is_smooth_size(std::size_t n) {
  for (std::size_t p : {2u, 3u}) {
    while (n % p == 0) {
      n /= p;
    }
  }
  return n == 1;
}

/// Type-I discrete sine transform of two real sequences stored back to back
/// (real parts in [0, q), imaginary parts in [q, 2q)):
/// Y_k = 2 sum_j X_j sin(pi (j+1)(k+1)/(Q+1)).
class SineTransform {
public:
  explicit SineTransform(std::size_t q) : size_(q) {
    std::vector<double> scratch(2 * q);
    const int n = static_cast<int>(q);
    const fftw_r2r_kind kind = FFTW_RODFT00;
    plan_ = fftw_plan_many_r2r(1, &n, 2, scratch.data(), nullptr, 1, n,
                               scratch.data(), nullptr, 1, n, &kind,
                               FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (plan_ == nullptr) {
      throw DimensionError("could not plan sine transform");
    }
  }
  SineTransform(const SineTransform &) = delete;
  SineTransform &operator=(const SineTransform &) = delete;
  ~SineTransform() { fftw_destroy_plan(plan_); }

  /// In-place transform of a split buffer of 2q doubles.
  void apply(double *split) const { fftw_execute_r2r(plan_, split, split); }

  std::size_t size() const noexcept { return size_; }

private:
  std::size_t size_;
  fftw_plan plan_;
};

inline const SineTransform &sine_transform(std::size_t q) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<SineTransform>> cache;
  std::lock_guard lock(mutex);
  auto &slot = cache[q];
  if (!slot) {
    slot = std::make_unique<SineTransform>(q);
  }
  return *slot;
}

} // namespace detail

/// Smallest grid size Q >= factor * M for which Q + 1 has only the prime
/// factors 2 and 3.
inline std::size_t grid_size_for(std::size_t modes, std::size_t factor) {
  std::size_t q = std::max<std::size_t>(1, modes * factor);
  while (!detail::is_smooth_size(q + 1)) {
    ++q;
  }
  return q;
}

/// Grid used for Lebesgue-norm quadrature: at least 4x oversampled.
inline std::size_t quadrature_grid_size(std::size_t modes) {
  return grid_size_for(modes, 4);
}

/// Grid used for the nonlinearity |u|^{2 sigma} u: oversampled by
/// ceil(sigma + 1).
inline std::size_t nonlinear_grid_size(std::size_t modes, double sigma) {
  return grid_size_for(modes,
                       static_cast<std::size_t>(std::ceil(sigma + 1.0)));
}

/// Reusable buffers for repeated transforms at a fixed (M, Q).
class SpectralWorkspace {
public:
  SpectralWorkspace(std::size_t modes, std::size_t grid)
      : modes_(modes), transform_(&detail::sine_transform(grid)),
        split_(2 * grid), buffer_(grid) {
    if (grid < modes) {
      throw DimensionError("grid size Q=" + std::to_string(grid) +
                           " smaller than mode count M=" +
                           std::to_string(modes));
    }
  }

  std::size_t modes() const noexcept { return modes_; }
  std::size_t grid() const noexcept { return buffer_.size(); }

  /// Coefficients -> grid values, left in buffer().
  std::span<Complex> synthesize(std::span<const Complex> coeffs) {
    if (coeffs.size() != modes_) {
      throw DimensionError("workspace mode count mismatch");
    }
    const std::size_t q = grid();
    const double scale = 1.0 / std::numbers::sqrt2;
    std::fill(split_.begin(), split_.end(), 0.0);
    for (std::size_t i = 0; i < modes_; ++i) {
      split_[i] = coeffs[i].real() * scale;
      split_[q + i] = coeffs[i].imag() * scale;
    }
    transform_->apply(split_.data());
    for (std::size_t j = 0; j < q; ++j) {
      buffer_[j] = Complex(split_[j], split_[q + j]);
    }
    return buffer_;
  }

  /// Grid values currently in buffer() -> first M coefficients.
  void analyze(std::span<Complex> coeffs) {
    if (coeffs.size() != modes_) {
      throw DimensionError("workspace mode count mismatch");
    }
    const std::size_t q = grid();
    for (std::size_t j = 0; j < q; ++j) {
      split_[j] = buffer_[j].real();
      split_[q + j] = buffer_[j].imag();
    }
    transform_->apply(split_.data());
    const double scale =
        1.0 / (std::numbers::sqrt2 * static_cast<double>(q + 1));
    for (std::size_t i = 0; i < modes_; ++i) {
      coeffs[i] = Complex(split_[i], split_[q + i]) * scale;
    }
  }

  std::span<Complex> buffer() noexcept { return buffer_; }

private:
  std::size_t modes_;
  const detail::SineTransform *transform_;
  std::vector<double> split_;
  std::vector<Complex> buffer_;
};

inline PhysicalGrid synthesize(const SpectralField &u, std::size_t grid) {
  SpectralWorkspace ws(u.modes(), grid);
  auto values = ws.synthesize(u.coeffs());
  return {std::vector<Complex>(values.begin(), values.end())};
}

inline SpectralField analyze(const PhysicalGrid &g, std::size_t modes) {
  SpectralWorkspace ws(modes, g.size());
  std::copy(g.samples.begin(), g.samples.end(), ws.buffer().begin());
  SpectralField u(modes);
  ws.analyze(u.coeffs());
  return u;
}

/// ||u||_s = (sum mu_n^s |u_n|^2)^{1/2}; s = 0 is the L2 norm, s = 1 the
/// gradient norm |grad u|_2.
inline double sobolev_norm(const SpectralField &u, double s) {
  if (!(s >= 0.0 && s <= 3.0)) {
    throw ParameterError("Sobolev index must lie in [0, 3]");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < u.modes(); ++i) {
    const double weight = s == 0.0 ? 1.0 : std::pow(eigenvalue(i + 1), s);
    total += weight * std::norm(u[i]);
  }
  return std::sqrt(total);
}

/// Real L2 inner product (u, v) = Re int u conj(v).
inline double inner(const SpectralField &u, const SpectralField &v) {
  if (u.modes() != v.modes()) {
    throw DimensionError("inner product of fields with different sizes");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < u.modes(); ++i) {
    total += (u[i] * std::conj(v[i])).real();
  }
  return total;
}

/// int_0^1 |u|^p dx by the trapezoid rule on the grid (endpoints vanish).
inline double lp_integral(const SpectralField &u, double p,
                          SpectralWorkspace &ws) {
  if (!(p >= 1.0)) {
    throw ParameterError("Lebesgue exponent must be >= 1");
  }
  const auto values = ws.synthesize(u.coeffs());
  const double half = 0.5 * p;
  double total = 0.0;
  if (p == 2.0) {
    for (const auto &z : values) {
      total += std::norm(z);
    }
  } else if (p == 4.0) {
    for (const auto &z : values) {
      const double m = std::norm(z);
      total += m * m;
    }
  } else {
    for (const auto &z : values) {
      total += std::pow(std::norm(z), half);
    }
  }
  return total / static_cast<double>(ws.grid() + 1);
}

inline double lp_integral(const SpectralField &u, double p) {
  SpectralWorkspace ws(u.modes(), quadrature_grid_size(u.modes()));
  return lp_integral(u, p, ws);
}

/// |u|_p = (int |u|^p)^{1/p}.
inline double lp_norm(const SpectralField &u, double p) {
  return std::pow(lp_integral(u, p), 1.0 / p);
}

enum class Part { low, high };

/// P_N (low: modes n <= N) or Q_N (high: n > N).
inline SpectralField project(const SpectralField &u, std::size_t n,
                             Part part) {
  if (n > u.modes()) {
    throw DimensionError("projector index N exceeds mode count");
  }
  SpectralField out(u.modes());
  if (part == Part::low) {
    std::copy_n(u.coeffs().begin(), n, out.coeffs().begin());
  } else {
    std::copy(u.coeffs().begin() + static_cast<std::ptrdiff_t>(n),
              u.coeffs().end(),
              out.coeffs().begin() + static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

/// Coefficients of F(u) = |u|^{2 sigma} u, evaluated pointwise on the
/// ceil(sigma + 1)-oversampled grid. The sign lambda is not applied.
inline SpectralField nonlinearity(const SpectralField &u, double sigma) {
  if (!(sigma >= 0.0)) {
    throw ParameterError("nonlinearity exponent sigma must be >= 0");
  }
  SpectralWorkspace ws(u.modes(), nonlinear_grid_size(u.modes(), sigma));
  auto values = ws.synthesize(u.coeffs());
  if (sigma != 0.0) {
    for (auto &z : values) {
      const double m = std::norm(z);
      z *= sigma == 1.0 ? m : std::pow(m, sigma);
    }
  }
  SpectralField out(u.modes());
  ws.analyze(out.coeffs());
  return out;
}

/// e^{-itA - alpha t} u: the damped linear group, diagonal in the basis.
inline SpectralField linear_flow(const SpectralField &u, double t,
                                 double alpha) {
  SpectralField out(u.modes());
  const double damping = std::exp(-alpha * t);
  for (std::size_t i = 0; i < u.modes(); ++i) {
    out[i] = u[i] * std::polar(damping, -eigenvalue(i + 1) * t);
  }
  return out;
}

} // namespace snls
