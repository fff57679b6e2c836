#pragma once

// Monte Carlo estimators: ensembles of trajectories and pairs, the Ito drift
// check, moment decay, Lyapunov tails, small-ball frequencies, Foias-Prodi
// contraction, mixing curves with rate fits, and coupling-condition
// statistics over cycle logs.

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "snls/coupling.hpp"
#include "snls/energy.hpp"
#include "snls/errors.hpp"
#include "snls/integrator.hpp"
#include "snls/rng.hpp"
#include "snls/spectral.hpp"

namespace snls {

namespace stats {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Mean and standard error of the finite entries.
inline MeanSe mean_se(std::span<const double> xs) {
  MeanSe out;
  double sum = 0.0;
  for (double x : xs) {
    if (std::isfinite(x)) {
      sum += x;
      ++out.n;
    }
  }
  if (out.n == 0) {
    out.mean = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.mean = sum / static_cast<double>(out.n);
  if (out.n > 1) {
    double ss = 0.0;
    for (double x : xs) {
      if (std::isfinite(x)) {
        ss += (x - out.mean) * (x - out.mean);
      }
    }
    out.se = std::sqrt(ss / static_cast<double>(out.n - 1) /
                           static_cast<double>(out.n));
  }
  return out;
}

/// Proportion with binomial standard error.
inline MeanSe proportion(std::size_t hits, std::size_t n) {
  MeanSe out;
  out.n = n;
  if (n == 0) {
    out.mean = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.mean = static_cast<double>(hits) / static_cast<double>(n);
  out.se = std::sqrt(out.mean * (1.0 - out.mean) / static_cast<double>(n));
  return out;
}

/// Linear-interpolated quantile of the finite entries.
inline double quantile(std::vector<double> xs, double p) {
  std::erase_if(xs, [](double x) { return !std::isfinite(x); });
  if (xs.empty()) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  std::sort(xs.begin(), xs.end());
  const double pos = p * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  std::size_t points = 0;
};

/// Ordinary least squares y = a + b x.
inline LinearFit ols(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ParameterError("least squares needs two or more paired points");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) {
    throw ParameterError("least squares needs distinct abscissae");
  }
  LinearFit fit;
  fit.points = x.size();
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (x.size() > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = y[i] - fit.intercept - fit.slope * x[i];
      rss += e * e;
    }
    fit.slope_se = std::sqrt(rss / (n - 2.0) / sxx);
  }
  return fit;
}

/// Two-sided 95% Student-t quantile.
inline double t95(std::size_t dof) {
  if (dof == 0) {
    return std::numeric_limits<double>::infinity();
  }
  boost::math::students_t dist(static_cast<double>(dof));
  return boost::math::quantile(boost::math::complement(dist, 0.025));
}

} // namespace stats

/// Runs f(i) for i in [0, n) on `threads` workers. Results must be written
/// to per-index slots so that the outcome does not depend on scheduling.
template <class F> void parallel_for(std::size_t n, std::size_t threads, F &&f) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      f(i);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) {
          return;
        }
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) {
            error = std::current_exception();
          }
          next = n;
        }
      }
    });
  }
  for (auto &t : pool) {
    t.join();
  }
  if (error) {
    std::rethrow_exception(error);
  }
}

/// Bounded test functionals phi with values in [-1, 1].
class Dictionary {
public:
  using Function = std::function<double(const SpectralField &, double)>;

  void add(std::string name, Function f) {
    names_.push_back(std::move(name));
    functions_.push_back(std::move(f));
  }

  std::size_t size() const noexcept { return functions_.size(); }
  const std::vector<std::string> &names() const noexcept { return names_; }

  /// Values at u given its energy H.
  void evaluate(const SpectralField &u, double H, std::span<double> out) const {
    for (std::size_t i = 0; i < functions_.size(); ++i) {
      out[i] = functions_[i](u, H);
    }
  }

  /// Clipped coordinates of modes 1-3, clipped energy and mass, and the
  /// phase of mode 1 weighted by min(1, |u_1|^2).
  static Dictionary standard() {
    Dictionary d;
    auto clip = [](double x) { return std::clamp(x, -1.0, 1.0); };
    for (std::size_t n = 1; n <= 3; ++n) {
      d.add("re_u" + std::to_string(n),
            [=](const SpectralField &u, double) { return clip(u.mode(n).real()); });
      d.add("im_u" + std::to_string(n),
            [=](const SpectralField &u, double) { return clip(u.mode(n).imag()); });
    }
    d.add("energy", [](const SpectralField &, double H) {
      return std::clamp(H, 0.0, 10.0) / 10.0;
    });
    d.add("mass", [](const SpectralField &u, double) {
      return std::min(1.0, std::pow(sobolev_norm(u, 0.0), 2));
    });
    d.add("cos_phase_u1", [](const SpectralField &u, double) {
      const Complex z = u.mode(1);
      return std::abs(z) == 0.0 ? 0.0
                                : std::cos(std::arg(z)) * std::min(1.0, std::norm(z));
    });
    d.add("sin_phase_u1", [](const SpectralField &u, double) {
      const Complex z = u.mode(1);
      return std::abs(z) == 0.0 ? 0.0
                                : std::sin(std::arg(z)) * std::min(1.0, std::norm(z));
    });
    return d;
  }

private:
  std::vector<std::string> names_;
  std::vector<Function> functions_;
};

/// Record grid helpers (step indices, ascending, starting at 0).
inline std::vector<std::size_t> uniform_record_steps(std::size_t total,
                                                     std::size_t every) {
  if (every == 0) {
    throw ParameterError("record interval must be positive");
  }
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s <= total; s += every) {
    out.push_back(s);
  }
  if (out.back() != total) {
    out.push_back(total);
  }
  return out;
}

/// 0 followed by first, first*factor, ... (rounded, deduplicated) up to total.
inline std::vector<std::size_t> log_record_steps(std::size_t total,
                                                 std::size_t first,
                                                 double factor) {
  if (first == 0 || !(factor > 1.0)) {
    throw ParameterError("log grid needs first >= 1 and factor > 1");
  }
  std::vector<std::size_t> out{0};
  for (double s = static_cast<double>(first); s < static_cast<double>(total);
       s *= factor) {
    const auto k = static_cast<std::size_t>(std::llround(s));
    if (k > out.back()) {
      out.push_back(k);
    }
  }
  if (out.back() != total) {
    out.push_back(total);
  }
  return out;
}

/// c e_1 with c >= 0 chosen by bisection so that H(c e_1) = H.
inline SpectralField state_with_energy(std::size_t modes,
                                       const EnergyParams &p, double H) {
  if (!(H >= 0.0)) {
    throw ParameterError("target energy must be nonnegative");
  }
  EnergyEvaluator ev(modes, p);
  auto at = [&](double c) {
    return ev.energy(SpectralField::basis(modes, 1, c));
  };
  if (H <= at(0.0)) {
    return SpectralField(modes);
  }
  double lo = 0.0, hi = 1.0;
  while (at(hi) < H) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e8) {
      throw ParameterError("target energy out of reach along e_1");
    }
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (at(mid) < H ? lo : hi) = mid;
  }
  return SpectralField::basis(modes, 1, 0.5 * (lo + hi));
}

struct EnsembleSpec {
  SimConfig sim;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0; // trajectory i draws from derive_stream(stream, i)
  std::size_t n = 100;
  std::vector<std::size_t> record_steps;
  std::size_t threads = 1;
};

/// Per-trajectory summaries on a common time grid. Aborted trajectories keep
/// NaN rows and a diagnostic; estimators skip them and report the fraction.
struct Ensemble {
  std::vector<double> times;
  std::vector<std::uint64_t> streams;
  std::vector<std::vector<double>> H;                     // [i][t]
  std::vector<std::vector<std::vector<double>>> features; // [i][t][phi]
  std::vector<std::string> feature_names;
  std::vector<std::optional<std::string>> aborted;

  std::size_t size() const noexcept { return H.size(); }
  std::size_t aborted_count() const {
    return static_cast<std::size_t>(
        std::count_if(aborted.begin(), aborted.end(),
                      [](const auto &a) { return a.has_value(); }));
  }
  double aborted_fraction() const {
    return size() == 0 ? 0.0
                       : static_cast<double>(aborted_count()) /
                             static_cast<double>(size());
  }

  /// Column t of H over non-aborted trajectories (NaN kept for alignment).
  std::vector<double> column(std::size_t t) const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < size(); ++i) {
      out[i] = H[i][t];
    }
    return out;
  }
};

namespace detail {

inline void check_record_steps(const std::vector<std::size_t> &steps,
                               std::size_t total) {
  if (steps.empty() || !std::is_sorted(steps.begin(), steps.end()) ||
      std::adjacent_find(steps.begin(), steps.end()) != steps.end() ||
      steps.back() > total) {
    throw ParameterError("record steps must be strictly increasing and "
                         "within the horizon");
  }
}

} // namespace detail

/// Simulates n independent trajectories from initial(i), recording H and,
/// if a dictionary is given, its functionals at the record steps.
inline Ensemble
run_ensemble(const EnsembleSpec &spec,
             const std::function<SpectralField(std::size_t)> &initial,
             const Dictionary *dictionary = nullptr) {
  spec.sim.validate();
  const std::size_t total =
      spec.record_steps.empty() ? spec.sim.steps() : spec.record_steps.back();
  const auto record = spec.record_steps.empty()
                          ? uniform_record_steps(total, 1)
                          : spec.record_steps;
  detail::check_record_steps(record, total);
  Ensemble ens;
  for (auto s : record) {
    ens.times.push_back(static_cast<double>(s) * spec.sim.dt);
  }
  const std::size_t nt = record.size();
  const std::size_t nf = dictionary ? dictionary->size() : 0;
  ens.streams.resize(spec.n);
  ens.H.assign(spec.n, std::vector<double>(
                           nt, std::numeric_limits<double>::quiet_NaN()));
  if (dictionary) {
    ens.feature_names = dictionary->names();
    ens.features.assign(spec.n, std::vector<std::vector<double>>(
                                    nt, std::vector<double>(nf, 0.0)));
  }
  ens.aborted.assign(spec.n, std::nullopt);
  parallel_for(spec.n, spec.threads, [&](std::size_t i) {
    const std::uint64_t stream = rng::derive_stream(spec.stream, i);
    ens.streams[i] = stream;
    Stepper stepper(spec.sim);
    EnergyEvaluator energies(spec.sim.modes, spec.sim.params);
    rng::CounterStream noise(spec.seed, stream);
    SpectralField u = initial(i);
    auto observe = [&](std::size_t slot) {
      const double h = energies.energy(u);
      ens.H[i][slot] = h;
      if (dictionary) {
        dictionary->evaluate(u, h, ens.features[i][slot]);
      }
    };
    try {
      std::size_t done = 0;
      for (std::size_t slot = 0; slot < nt; ++slot) {
        evolve(u, stepper, spec.sim.noise, noise, done, record[slot] - done);
        done = record[slot];
        observe(slot);
      }
    } catch (const BlowUpError &e) {
      ens.aborted[i] = e.what();
      std::fill(ens.H[i].begin(), ens.H[i].end(),
                std::numeric_limits<double>::quiet_NaN());
    }
  });
  return ens;
}

inline Ensemble run_ensemble(const EnsembleSpec &spec, const SpectralField &u0,
                             const Dictionary *dictionary = nullptr) {
  return run_ensemble(
      spec, [&](std::size_t) { return u0; }, dictionary);
}

struct CurvePoint {
  double time = 0.0;
  double estimate = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};
using Curve = std::vector<CurvePoint>;

/// Writes the curve as CSV; each line of `preamble` becomes a leading
/// "# " comment line.
inline void write_curve_csv(const std::string &path, const Curve &curve,
                            const std::string &preamble = {}) {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write " + path);
  }
  std::istringstream lines(preamble);
  for (std::string line; std::getline(lines, line);) {
    out << "# " << line << '\n';
  }
  out.precision(17);
  out << "time,estimate,stderr,n\n";
  for (const auto &p : curve) {
    out << p.time << ',' << p.estimate << ',' << p.se << ',' << p.n << '\n';
  }
}

inline nlohmann::json curve_json(const Curve &curve) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto &p : curve) {
    j.push_back({p.time, p.estimate, p.se, p.n});
  }
  return j;
}

// ---------------------------------------------------------------- drift

struct DriftBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n = 0;
  double mean = 0.0; // of H^k(t+d) - H^k(t) + (alpha k / 2) H^k(t) d
  double se = 0.0;
  bool violation = false;
};

struct DriftReport {
  double k = 1.0;
  double delta = 0.0;
  double C_hat = 0.0;
  std::vector<DriftBin> calibration;
  std::vector<DriftBin> validation;
  std::size_t violations = 0;
  bool coverage_warning = false;

  bool pass() const { return std::isfinite(C_hat) && violations == 0; }
};

/// Conditional drift of H^k over one record interval d, binned by H(t) in
/// equal-count bins of at least min_bin samples. Even trajectories fix the
/// bins and C_hat = max_bin (mean + 3 se) / d; odd trajectories are tested
/// against it, a bin violating when mean - 3 se > C_hat d.
inline DriftReport check_ito_drift(const Ensemble &ens, double k,
                                   const EnergyParams &p,
                                   std::size_t min_bin = 200) {
  if (ens.times.size() < 2) {
    throw ParameterError("drift check needs at least two record times");
  }
  const double delta = ens.times[1] - ens.times[0];
  for (std::size_t t = 1; t < ens.times.size(); ++t) {
    if (std::abs(ens.times[t] - ens.times[t - 1] - delta) > 1e-9 * delta) {
      throw ParameterError("drift check needs a uniform record grid");
    }
  }
  struct Sample {
    double h;
    double y;
  };
  std::vector<Sample> cal, val;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (ens.aborted[i]) {
      continue;
    }
    auto &dst = i % 2 == 0 ? cal : val;
    for (std::size_t t = 0; t + 1 < ens.times.size(); ++t) {
      const double a = energy_power(ens.H[i][t], k);
      const double b = energy_power(ens.H[i][t + 1], k);
      dst.push_back({ens.H[i][t], b - a + 0.5 * p.alpha * k * a * delta});
    }
  }
  DriftReport rep;
  rep.k = k;
  rep.delta = delta;
  const std::size_t bins = std::max<std::size_t>(1, cal.size() / min_bin);
  if (cal.size() < min_bin) {
    rep.coverage_warning = true;
  }
  std::sort(cal.begin(), cal.end(),
            [](const Sample &a, const Sample &b) { return a.h < b.h; });
  std::vector<double> edges{-std::numeric_limits<double>::infinity()};
  for (std::size_t b = 1; b < bins; ++b) {
    edges.push_back(cal[b * cal.size() / bins].h);
  }
  edges.push_back(std::numeric_limits<double>::infinity());
  auto summarize = [&](const std::vector<Sample> &src) {
    std::vector<std::vector<double>> ys(bins);
    for (const auto &s : src) {
      const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, s.h);
      ys[static_cast<std::size_t>(it - edges.begin() - 1)].push_back(s.y);
    }
    std::vector<DriftBin> out(bins);
    for (std::size_t b = 0; b < bins; ++b) {
      const auto ms = stats::mean_se(ys[b]);
      out[b] = {edges[b], edges[b + 1], ms.n, ms.n ? ms.mean : 0.0, ms.se,
                false};
    }
    return out;
  };
  rep.calibration = summarize(cal);
  rep.validation = summarize(val);
  double worst = 0.0;
  for (const auto &b : rep.calibration) {
    if (b.n > 0) {
      worst = std::max(worst, (b.mean + 3.0 * b.se) / delta);
    }
  }
  rep.C_hat = worst;
  for (auto &b : rep.validation) {
    if (b.n < min_bin / 2) {
      rep.coverage_warning = true;
    }
    if (b.n > 1 && b.mean - 3.0 * b.se > rep.C_hat * delta) {
      b.violation = true;
      ++rep.violations;
    }
  }
  return rep;
}

// ---------------------------------------------------------- moment decay

struct MomentDecay {
  Curve curve; // E H^k(u(t))
  double k = 1.0;
  double rate = 0.0; // decay rate in the bound
  double H0k = 0.0;
  double plateau = 0.0;
  double plateau_se = 0.0;
  double C_hat = 0.0; // 2 * plateau
  bool pass = true;
  std::optional<std::size_t> first_violation;
};

/// True where curve <= exp(-rate t) H0k + C / 2 + 3 se holds at every point.
inline bool moment_decay_holds(const Curve &curve, double H0k, double rate,
                               double C, std::optional<std::size_t> *first = nullptr) {
  for (std::size_t t = 0; t < curve.size(); ++t) {
    const auto &pt = curve[t];
    const double bound =
        std::exp(-rate * pt.time) * H0k + 0.5 * C + 3.0 * pt.se;
    if (pt.estimate > bound) {
      if (first) {
        *first = t;
      }
      return false;
    }
  }
  return true;
}

/// Mean of H^k on the record grid; the plateau is the mean over trajectories
/// of the time average on [window_start, window_end]. The default bound rate
/// is alpha k / 2.
inline MomentDecay estimate_moment_decay(const Ensemble &ens, double k,
                                         double alpha, double H0,
                                         double window_start, double window_end,
                                         std::optional<double> rate = {}) {
  MomentDecay out;
  out.k = k;
  out.rate = rate.value_or(0.5 * alpha * k);
  out.H0k = energy_power(H0, k);
  std::vector<double> window_avg;
  std::vector<double> column(ens.size());
  for (std::size_t t = 0; t < ens.times.size(); ++t) {
    for (std::size_t i = 0; i < ens.size(); ++i) {
      column[i] = ens.aborted[i] ? std::numeric_limits<double>::quiet_NaN()
                                 : energy_power(ens.H[i][t], k);
    }
    const auto ms = stats::mean_se(column);
    out.curve.push_back({ens.times[t], ms.mean, ms.se, ms.n});
  }
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (ens.aborted[i]) {
      continue;
    }
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t t = 0; t < ens.times.size(); ++t) {
      if (ens.times[t] >= window_start - 1e-12 &&
          ens.times[t] <= window_end + 1e-12) {
        sum += energy_power(ens.H[i][t], k);
        ++cnt;
      }
    }
    if (cnt == 0) {
      throw ParameterError("plateau window contains no record time");
    }
    window_avg.push_back(sum / static_cast<double>(cnt));
  }
  const auto ms = stats::mean_se(window_avg);
  out.plateau = ms.mean;
  out.plateau_se = ms.se;
  out.C_hat = 2.0 * ms.mean;
  out.pass = moment_decay_holds(out.curve, out.H0k, out.rate, out.C_hat,
                                &out.first_violation);
  return out;
}

// ------------------------------------------------------------------ tails

struct TailCurve {
  std::vector<double> rho;
  std::vector<double> probability;
  std::vector<double> se;
  std::vector<std::size_t> exceedances;
  double slope = std::numeric_limits<double>::quiet_NaN();
  bool monotone = true;
  bool inconclusive = false;
  bool pass = true; // slope <= -p_min when conclusive
};

/// P(sup_t (E_{u,k}(t) - C_k t) >= H0^k + rho (H0^{2k} + T)) per rho, with
/// E_{u,k} integrated on the record grid; slope is the log-log slope over
/// rho with positive probability.
inline TailCurve tail_probability(const Ensemble &ens, double k, double alpha,
                                  double C_k, double H0,
                                  std::span<const double> rhos,
                                  double p_min = 1.0) {
  TailCurve out;
  const double T = ens.times.back();
  std::vector<double> sup;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (ens.aborted[i]) {
      continue;
    }
    double integral = 0.0;
    double best = energy_power(ens.H[i][0], k);
    for (std::size_t t = 1; t < ens.times.size(); ++t) {
      const double a = energy_power(ens.H[i][t - 1], k);
      const double b = energy_power(ens.H[i][t], k);
      integral += 0.25 * alpha * k * (ens.times[t] - ens.times[t - 1]) * (a + b);
      best = std::max(best, b + integral - C_k * ens.times[t]);
    }
    sup.push_back(best);
  }
  const double base = energy_power(H0, k);
  const double scale = energy_power(H0, 2.0 * k) + T;
  std::vector<double> lx, ly;
  for (double rho : rhos) {
    const double level = base + rho * scale;
    const auto hits = static_cast<std::size_t>(std::count_if(
        sup.begin(), sup.end(), [&](double s) { return s >= level; }));
    const auto pr = stats::proportion(hits, sup.size());
    if (!out.probability.empty() && pr.mean > out.probability.back()) {
      out.monotone = false;
    }
    out.rho.push_back(rho);
    out.probability.push_back(pr.mean);
    out.se.push_back(pr.se);
    out.exceedances.push_back(hits);
    if (hits > 0 && rho > 0.0) {
      lx.push_back(std::log(rho));
      ly.push_back(std::log(pr.mean));
    }
  }
  out.inconclusive = out.exceedances.empty() || out.exceedances.back() < 10;
  if (lx.size() >= 2) {
    out.slope = stats::ols(lx, ly).slope;
  }
  out.pass = out.inconclusive || (std::isfinite(out.slope) && out.slope <= -p_min);
  return out;
}

// ------------------------------------------------------------- small ball

/// Pairs of trajectories recorded on a common grid.
struct PairEnsemble {
  std::vector<double> times;
  std::vector<std::vector<double>> H1, H2;
  std::vector<std::optional<std::string>> aborted;

  std::size_t size() const noexcept { return H1.size(); }
};

/// Pair i runs both members from initial(i); with shared_noise both use the
/// same Wiener path, otherwise independent ones.
inline PairEnsemble run_pair_ensemble(
    const EnsembleSpec &spec,
    const std::function<std::pair<SpectralField, SpectralField>(std::size_t)>
        &initial,
    bool shared_noise) {
  spec.sim.validate();
  const std::size_t total =
      spec.record_steps.empty() ? spec.sim.steps() : spec.record_steps.back();
  const auto record = spec.record_steps.empty()
                          ? uniform_record_steps(total, 1)
                          : spec.record_steps;
  detail::check_record_steps(record, total);
  PairEnsemble out;
  for (auto s : record) {
    out.times.push_back(static_cast<double>(s) * spec.sim.dt);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.H1.assign(spec.n, std::vector<double>(record.size(), nan));
  out.H2 = out.H1;
  out.aborted.assign(spec.n, std::nullopt);
  parallel_for(spec.n, spec.threads, [&](std::size_t i) {
    Stepper stepper(spec.sim);
    EnergyEvaluator energies(spec.sim.modes, spec.sim.params);
    const std::uint64_t base = rng::derive_stream(spec.stream, i);
    const rng::CounterStream w1(spec.seed,
                                shared_noise ? base : rng::derive_stream(base, 1));
    const rng::CounterStream w2(spec.seed,
                                shared_noise ? base : rng::derive_stream(base, 2));
    auto [u1, u2] = initial(i);
    try {
      std::size_t done = 0;
      for (std::size_t slot = 0; slot < record.size(); ++slot) {
        const std::size_t len = record[slot] - done;
        evolve(u1, stepper, spec.sim.noise, w1, done, len);
        evolve(u2, stepper, spec.sim.noise, w2, done, len);
        done = record[slot];
        out.H1[i][slot] = energies.energy(u1);
        out.H2[i][slot] = energies.energy(u2);
      }
    } catch (const BlowUpError &e) {
      out.aborted[i] = e.what();
      std::fill(out.H1[i].begin(), out.H1[i].end(), nan);
      std::fill(out.H2[i].begin(), out.H2[i].end(), nan);
    }
  });
  return out;
}

struct SmallBallReport {
  double R1 = 0.0;
  double large_threshold = 0.0;
  Curve small; // P(H1 + H2 <= R1)
  Curve large; // P(H1 + H2 >= large_threshold)
};

inline SmallBallReport smallball_frequency(const PairEnsemble &pairs, double R1,
                                           double large_threshold) {
  SmallBallReport rep;
  rep.R1 = R1;
  rep.large_threshold = large_threshold;
  for (std::size_t t = 0; t < pairs.times.size(); ++t) {
    std::size_t n = 0, small = 0, large = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs.aborted[i]) {
        continue;
      }
      const double s = pairs.H1[i][t] + pairs.H2[i][t];
      ++n;
      small += s <= R1 ? 1 : 0;
      large += s >= large_threshold ? 1 : 0;
    }
    const auto ps = stats::proportion(small, n);
    const auto pl = stats::proportion(large, n);
    rep.small.push_back({pairs.times[t], ps.mean, ps.se, n});
    rep.large.push_back({pairs.times[t], pl.mean, pl.se, n});
  }
  return rep;
}

// ----------------------------------------------------------- Foias-Prodi

struct FoiasProdiSpec {
  SimConfig sim;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::size_t n = 100;
  std::size_t record_every = 100;
  std::size_t steps = 0;
  std::size_t threads = 1;
  double k0 = 100.0; // control bound constant; its first violation is tau
};

/// Pairs in the equal-low-mode regime (shared eta, low modes copied).
/// J and the l-integral are stored so that J_FP can be formed for any
/// Lambda afterwards.
struct FoiasProdiEnsemble {
  std::vector<double> times;
  std::vector<std::vector<double>> r_norm;       // ||r||_1
  std::vector<std::vector<double>> j;            // J(u1, u2, r)
  std::vector<std::vector<double>> ell_integral; // int_0^t l ds
  std::vector<std::vector<double>> ell_r2;       // int_0^t l ||r||_1^2 ds
  std::vector<std::optional<std::size_t>> tau;   // record slot of tau
  double n_modes = 1.0;
  double alpha = 0.0;

  std::size_t size() const noexcept { return r_norm.size(); }

  /// J_FP^N(t ^ tau) of pair i at record slot t for the given Lambda.
  double jfp(std::size_t i, std::size_t t, double Lambda) const {
    const std::size_t s = tau[i] ? std::min(t, *tau[i]) : t;
    const double lw = 2.0 * alpha * times[s] -
                      Lambda / std::pow(n_modes, 0.25) * ell_integral[i][s];
    return std::exp(lw) * j[i][s];
  }

  Curve jfp_curve(double Lambda) const {
    Curve out;
    std::vector<double> col(size());
    for (std::size_t t = 0; t < times.size(); ++t) {
      for (std::size_t i = 0; i < size(); ++i) {
        col[i] = jfp(i, t, Lambda);
      }
      const auto ms = stats::mean_se(col);
      out.push_back({times[t], ms.mean, ms.se, ms.n});
    }
    return out;
  }
};

inline FoiasProdiEnsemble run_foias_prodi(
    const FoiasProdiSpec &spec,
    const std::function<std::pair<SpectralField, SpectralField>(std::size_t)>
        &initial) {
  spec.sim.validate();
  if (spec.record_every == 0 || spec.steps == 0) {
    throw ParameterError("Foias-Prodi run needs positive steps and record");
  }
  const std::size_t n_star = spec.sim.noise.n_star;
  FoiasProdiEnsemble out;
  out.n_modes = static_cast<double>(n_star);
  out.alpha = spec.sim.params.alpha;
  const auto record = uniform_record_steps(spec.steps, spec.record_every);
  for (auto s : record) {
    out.times.push_back(static_cast<double>(s) * spec.sim.dt);
  }
  const std::size_t nt = record.size();
  out.r_norm.assign(spec.n, std::vector<double>(nt, 0.0));
  out.j = out.ell_integral = out.ell_r2 = out.r_norm;
  out.tau.assign(spec.n, std::nullopt);
  const double expo = detail::bound_exponent(spec.sim.params.sigma);
  parallel_for(spec.n, spec.threads, [&](std::size_t i) {
    Stepper stepper(spec.sim);
    FoiasProdiForm form(spec.sim.modes, spec.sim.params);
    auto &ev = form.energies();
    const rng::CounterStream noise(spec.seed,
                                   rng::derive_stream(spec.stream, i));
    auto [u1, u2] = initial(i);
    if (!std::equal(u1.coeffs().begin(), u1.coeffs().begin() + n_star,
                    u2.coeffs().begin())) {
      throw ContractError("Foias-Prodi pairs need equal low modes");
    }
    auto ell_now = [&] {
      return ell_from_energies(ev.energy(u1), ev.energy(u2), spec.sim.params);
    };
    double ell_prev = ell_now();
    double r2_prev = std::pow(sobolev_norm(u1 - u2, 1.0), 2);
    double ell_int = 0.0, ell_r2 = 0.0;
    std::size_t done = 0;
    for (std::size_t slot = 0; slot < nt; ++slot) {
      double h2 = 0.0;
      for (; done < record[slot]; ++done) {
        h2 = shadow_step(u1, u2, stepper, spec.sim.noise, noise, done, n_star);
      }
      const SpectralField r = u1 - u2;
      const double rn = sobolev_norm(r, 1.0);
      const double ell = ell_now();
      if (slot > 0) {
        const double span = out.times[slot] - out.times[slot - 1];
        ell_int += 0.5 * span * (ell_prev + ell);
        ell_r2 += 0.5 * span * (ell_prev * r2_prev + ell * rn * rn);
        if (!out.tau[i] && h2 > spec.k0 * std::pow(ell, expo)) {
          out.tau[i] = slot;
        }
      }
      ell_prev = ell;
      r2_prev = rn * rn;
      out.r_norm[i][slot] = rn;
      out.j[i][slot] = form(u1, u2, r);
      out.ell_integral[i][slot] = ell_int;
      out.ell_r2[i][slot] = ell_r2;
    }
  });
  return out;
}

/// Smallest Lambda (bisection, times safety, at least floor) for which the
/// ensemble mean of J_FP stays at or below its initial value on the grid.
inline double calibrate_Lambda(const FoiasProdiEnsemble &pilot, double safety,
                               double floor) {
  auto ok = [&](double Lambda) {
    const auto curve = pilot.jfp_curve(Lambda);
    for (const auto &p : curve) {
      if (p.estimate > curve.front().estimate) {
        return false;
      }
    }
    return true;
  };
  double hi = std::max(1.0, floor);
  while (!ok(hi)) {
    hi *= 2.0;
    if (hi > 1e12) {
      throw CalibrationError("no Lambda keeps J_FP from growing");
    }
  }
  double lo = 0.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? hi : lo) = mid;
  }
  return std::max(floor, safety * hi);
}

struct ContractionReport {
  std::vector<double> times;
  std::vector<double> median, q10, q90;
  double slope = 0.0;    // of log median against t
  double slope_se = 0.0; // bootstrap over pairs
  bool monotone = true;  // median strictly decreasing
  bool degenerate = false; // median zero at every time
  double rate_target = 0.0;   // -alpha/4 (1 - tolerance)
  bool rate_pass = false;     // slope <= rate_target
  std::array<double, 3> ell_r2_quantiles{}; // 50, 90, 99 % of int l ||r||^2
};

namespace detail {

inline double log_median_slope(const FoiasProdiEnsemble &e,
                               std::span<const std::size_t> pick,
                               std::vector<double> *medians = nullptr) {
  std::vector<double> x, y;
  std::vector<double> col(pick.size());
  for (std::size_t t = 0; t < e.times.size(); ++t) {
    for (std::size_t k = 0; k < pick.size(); ++k) {
      col[k] = e.r_norm[pick[k]][t];
    }
    const double m = stats::quantile(col, 0.5);
    if (medians) {
      medians->push_back(m);
    }
    if (m > 0.0) {
      x.push_back(e.times[t]);
      y.push_back(std::log(m));
    }
  }
  return x.size() >= 2 ? stats::ols(x, y).slope : 0.0;
}

} // namespace detail

/// Quantiles of ||r(T)||_1 on the record grid, the log-median slope with a
/// pair bootstrap, and the tail of int l ||r||_1^2.
inline ContractionReport contraction_tail(const FoiasProdiEnsemble &e,
                                          std::size_t bootstrap = 200,
                                          std::uint64_t seed = 0,
                                          double tolerance = 0.5) {
  ContractionReport rep;
  rep.times = e.times;
  std::vector<std::size_t> all(e.size());
  std::iota(all.begin(), all.end(), 0);
  rep.slope = detail::log_median_slope(e, all, &rep.median);
  std::vector<double> col(e.size());
  for (std::size_t t = 0; t < e.times.size(); ++t) {
    for (std::size_t i = 0; i < e.size(); ++i) {
      col[i] = e.r_norm[i][t];
    }
    rep.q10.push_back(stats::quantile(col, 0.1));
    rep.q90.push_back(stats::quantile(col, 0.9));
  }
  rep.degenerate = std::all_of(rep.median.begin(), rep.median.end(),
                               [](double m) { return m == 0.0; });
  for (std::size_t t = 1; t < rep.median.size(); ++t) {
    if (!(rep.median[t] < rep.median[t - 1])) {
      rep.monotone = false;
    }
  }
  if (bootstrap > 1 && e.size() > 1) {
    rng::PhiloxEngine engine(seed, 0xB007);
    std::vector<double> slopes;
    std::vector<std::size_t> pick(e.size());
    for (std::size_t b = 0; b < bootstrap; ++b) {
      for (auto &p : pick) {
        p = engine.below(e.size());
      }
      slopes.push_back(detail::log_median_slope(e, pick));
    }
    const auto ms = stats::mean_se(slopes);
    rep.slope_se = ms.se * std::sqrt(static_cast<double>(ms.n));
  }
  rep.rate_target = -0.25 * e.alpha * (1.0 - tolerance);
  rep.rate_pass = rep.slope <= rep.rate_target;
  std::vector<double> tail;
  for (std::size_t i = 0; i < e.size(); ++i) {
    tail.push_back(e.ell_r2[i].back());
  }
  rep.ell_r2_quantiles = {stats::quantile(tail, 0.5), stats::quantile(tail, 0.9),
                          stats::quantile(tail, 0.99)};
  return rep;
}

// ------------------------------------------------------------------ mixing

struct MixingCurve {
  std::vector<double> times;
  std::vector<std::string> names;
  std::vector<std::vector<double>> gap;    // [phi][t]
  std::vector<std::vector<double>> se; // [phi][t]
  std::vector<double> aggregate;           // max over phi
  std::vector<double> aggregate_se;        // se of the maximizing phi
  std::vector<std::size_t> argmax;
  std::size_t n1 = 0, n2 = 0;
  bool paired = false;
};

/// Gap curves between two ensembles with dictionary features on the same
/// grid. Paired ensembles (common noise, equal sizes) use the standard error
/// of the paired differences, independent ones that of a difference of
/// independent means.
inline MixingCurve mixing_curve(const Ensemble &a, const Ensemble &b,
                                bool paired) {
  if (a.times != b.times || a.feature_names != b.feature_names ||
      a.feature_names.empty()) {
    throw ParameterError("mixing ensembles need the same grid and dictionary");
  }
  if (paired && a.size() != b.size()) {
    throw ParameterError("paired mixing ensembles need equal sizes");
  }
  MixingCurve m;
  m.times = a.times;
  m.names = a.feature_names;
  m.paired = paired;
  m.n1 = a.size() - a.aborted_count();
  m.n2 = b.size() - b.aborted_count();
  const std::size_t nf = m.names.size();
  m.gap.assign(nf, std::vector<double>(m.times.size(), 0.0));
  m.se = m.gap;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t f = 0; f < nf; ++f) {
    for (std::size_t t = 0; t < m.times.size(); ++t) {
      std::vector<double> xa(a.size()), xb(b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        xa[i] = a.aborted[i] ? nan : a.features[i][t][f];
      }
      for (std::size_t i = 0; i < b.size(); ++i) {
        xb[i] = b.aborted[i] ? nan : b.features[i][t][f];
      }
      if (paired) {
        std::vector<double> d(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
          d[i] = xa[i] - xb[i];
        }
        const auto ms = stats::mean_se(d);
        m.gap[f][t] = std::abs(ms.mean);
        m.se[f][t] = ms.se;
      } else {
        const auto ma = stats::mean_se(xa), mb = stats::mean_se(xb);
        m.gap[f][t] = std::abs(ma.mean - mb.mean);
        m.se[f][t] = std::hypot(ma.se, mb.se);
      }
    }
  }
  for (std::size_t t = 0; t < m.times.size(); ++t) {
    std::size_t best = 0;
    for (std::size_t f = 1; f < nf; ++f) {
      if (m.gap[f][t] > m.gap[best][t]) {
        best = f;
      }
    }
    m.argmax.push_back(best);
    m.aggregate.push_back(m.gap[best][t]);
    m.aggregate_se.push_back(m.se[best][t]);
  }
  return m;
}

/// Runs both ensembles (shared streams when common_noise) and forms the
/// gap curves.
inline MixingCurve mixing_curve(const SpectralField &u0_1,
                                const SpectralField &u0_2,
                                const Dictionary &dictionary,
                                const EnsembleSpec &spec, bool common_noise) {
  EnsembleSpec s1 = spec, s2 = spec;
  if (!common_noise) {
    s1.stream = rng::derive_stream(spec.stream, 1);
    s2.stream = rng::derive_stream(spec.stream, 2);
  }
  const auto a = run_ensemble(s1, u0_1, &dictionary);
  const auto b = run_ensemble(s2, u0_2, &dictionary);
  return mixing_curve(a, b, common_noise);
}

struct RateFit {
  double q_hat = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t points = 0;
  bool inconclusive = false;
  bool super_polynomial = false;
};

/// Least squares of log gap against log(1 + t) over points at least 3 se
/// above zero (exact points with se = 0 included); q_hat = -slope with a
/// 95% interval. Flags super-polynomial decay when the later half of the
/// points decays faster than the earlier half beyond their intervals.
inline RateFit fit_rate(std::span<const double> times,
                        std::span<const double> gap,
                        std::span<const double> se) {
  if (times.size() != gap.size() || gap.size() != se.size()) {
    throw DimensionError("rate fit inputs differ in length");
  }
  std::vector<double> x, y;
  for (std::size_t t = 0; t < times.size(); ++t) {
    if (gap[t] > 0.0 && gap[t] >= 3.0 * se[t]) {
      x.push_back(std::log1p(times[t]));
      y.push_back(std::log(gap[t]));
    }
  }
  RateFit out;
  out.points = x.size();
  if (x.size() < 8) {
    out.inconclusive = true;
    return out;
  }
  const auto fit = stats::ols(x, y);
  const double half = stats::t95(x.size() - 2) * fit.slope_se;
  out.q_hat = -fit.slope;
  out.ci_low = out.q_hat - half;
  out.ci_high = out.q_hat + half;
  const std::size_t mid = x.size() / 2;
  if (mid >= 3 && x.size() - mid >= 3) {
    const std::span<const double> xs(x), ys(y);
    const auto early = stats::ols(xs.first(mid), ys.first(mid));
    const auto late = stats::ols(xs.subspan(mid), ys.subspan(mid));
    const double slack = 2.0 * std::hypot(early.slope_se, late.slope_se);
    out.super_polynomial = -late.slope > -early.slope + slack + 1e-9;
  }
  return out;
}

inline RateFit fit_rate(const MixingCurve &curve) {
  return fit_rate(curve.times, curve.aggregate, curve.aggregate_se);
}

// ------------------------------------------------------ coupled ensembles

struct CoupledEnsemble {
  std::vector<std::vector<CycleDiagnostics>> logs; // [chain][cycle]
  /// Energies and dictionary values of both members at the end of each
  /// cycle: [chain][cycle][phi], energies last.
  std::vector<std::vector<std::vector<double>>> end1, end2;
  std::vector<std::optional<std::string>> aborted;
  double cycle_length = 0.0;
};

inline CoupledEnsemble run_coupled_chains(
    const SimConfig &sim, const CouplingConfig &cfg, std::uint64_t seed,
    std::uint64_t stream, std::size_t chains, std::size_t cycles,
    const std::function<std::pair<SpectralField, SpectralField>(std::size_t)>
        &initial,
    const Dictionary *dictionary = nullptr, std::size_t threads = 1) {
  CoupledEnsemble out;
  out.logs.resize(chains);
  out.end1.resize(chains);
  out.end2.resize(chains);
  out.aborted.assign(chains, std::nullopt);
  const std::size_t nf = dictionary ? dictionary->size() : 0;
  {
    CouplingRunner probe(sim, cfg, {seed, stream});
    out.cycle_length = probe.cycle_length();
  }
  parallel_for(chains, threads, [&](std::size_t c) {
    CouplingRunner runner(sim, cfg, {seed, rng::derive_stream(stream, c)});
    auto [u1, u2] = initial(c);
    auto state = runner.initial_state(u1, u2);
    auto features = [&](const SpectralField &u) {
      std::vector<double> v(nf + 1);
      const double h = runner.energies().energy(u);
      if (dictionary) {
        dictionary->evaluate(u, h, std::span(v).first(nf));
      }
      v[nf] = h;
      return v;
    };
    try {
      for (std::size_t k = 0; k < cycles; ++k) {
        out.logs[c].push_back(runner.cycle(state));
        out.end1[c].push_back(features(state.u1));
        out.end2[c].push_back(features(state.u2));
      }
    } catch (const BlowUpError &e) {
      out.aborted[c] = e.what();
    }
  });
  return out;
}

struct RateStratum {
  std::size_t duration = 0; // k - l0 at the start of the cycle
  std::size_t trials = 0;
  std::size_t events = 0;
  double frequency = 0.0;
  double se = 0.0;
};

struct ConditionReport {
  // (H1)
  bool h1_ok = true;
  std::vector<std::string> h1_violations;
  // (H2)
  double C0 = 0.0;
  double C0_bootstrap_se = 0.0;
  double q = 1.0;
  std::size_t h2_samples = 0;
  std::size_t h2_violations = 0;
  // (H3)
  std::vector<RateStratum> decoupling;
  bool h3_monotone = true;
  // (H4)
  std::size_t binding_trials = 0;
  std::size_t binding_successes = 0;
  double p_hat = 0.0;
  double p_se = 0.0;
  bool h4_pass = false;
  // summary
  std::size_t cycles = 0;
  std::size_t accepted_bindings = 0;
  double mean_attempts = 0.0;
  bool coverage_warning = false;
};

/// Statistics of (H1)-(H4) over chains of cycle logs. (H2) uses the distance
/// ||u1 - u2||_1 at cycle ends while coupled and the envelope
/// C0 ((k + 1 - l0) T)^{-q} with C0 the empirical maximum.
inline ConditionReport coupling_condition_stats(
    std::span<const std::vector<CycleDiagnostics>> logs, double d0, double T,
    double q, std::size_t bootstrap = 200, std::uint64_t seed = 0) {
  ConditionReport rep;
  rep.q = q;
  std::vector<double> scaled;
  std::map<std::size_t, RateStratum> strata;
  double attempts = 0.0;
  for (const auto &chain : logs) {
    const auto h1 = check_h1(chain, d0);
    if (!h1.ok) {
      rep.h1_ok = false;
      rep.h1_violations.insert(rep.h1_violations.end(), h1.violations.begin(),
                               h1.violations.end());
    }
    for (const auto &d : chain) {
      ++rep.cycles;
      attempts += static_cast<double>(d.attempts);
      if (d.branch == Branch::binding) {
        ++rep.binding_trials;
        rep.accepted_bindings += d.coupling_accepted ? 1 : 0;
        if (d.l0_after && *d.l0_after == d.cycle + 1) {
          ++rep.binding_successes;
        }
      }
      if (d.branch == Branch::continuing) {
        const std::size_t dur = d.cycle - *d.l0_before;
        auto &s = strata[dur];
        s.duration = dur;
        ++s.trials;
        if (d.l0_after != d.l0_before) {
          ++s.events;
        }
      }
      if (d.l0_after && *d.l0_after <= d.cycle) {
        const double elapsed =
            static_cast<double>(d.cycle + 1 - *d.l0_after) * T;
        scaled.push_back(d.distance * std::pow(elapsed, q));
      }
    }
  }
  rep.mean_attempts =
      rep.cycles ? attempts / static_cast<double>(rep.cycles) : 0.0;
  // (H2)
  rep.h2_samples = scaled.size();
  if (!scaled.empty()) {
    rep.C0 = *std::max_element(scaled.begin(), scaled.end());
    rep.h2_violations = static_cast<std::size_t>(std::count_if(
        scaled.begin(), scaled.end(), [&](double s) { return s > rep.C0; }));
    if (bootstrap > 1) {
      rng::PhiloxEngine engine(seed, 0xC0);
      std::vector<double> maxima;
      for (std::size_t b = 0; b < bootstrap; ++b) {
        double mx = 0.0;
        for (std::size_t i = 0; i < scaled.size(); ++i) {
          mx = std::max(mx, scaled[engine.below(scaled.size())]);
        }
        maxima.push_back(mx);
      }
      const auto ms = stats::mean_se(maxima);
      rep.C0_bootstrap_se = ms.se * std::sqrt(static_cast<double>(ms.n));
    }
  } else {
    rep.coverage_warning = true;
  }
  // (H3)
  for (auto &[dur, s] : strata) {
    const auto pr = stats::proportion(s.events, s.trials);
    s.frequency = pr.mean;
    s.se = pr.se;
    rep.decoupling.push_back(s);
  }
  for (std::size_t i = 1; i < rep.decoupling.size(); ++i) {
    const auto &a = rep.decoupling[i - 1];
    const auto &b = rep.decoupling[i];
    // an empirical zero carries no binomial spread; use the rule-of-three
    // bound 3/n as its error bar
    const double sa = a.events == 0 ? 3.0 / static_cast<double>(a.trials)
                                    : a.se;
    const double sb = b.events == 0 ? 3.0 / static_cast<double>(b.trials)
                                    : b.se;
    if (b.frequency > a.frequency + 3.0 * std::hypot(sa, sb)) {
      rep.h3_monotone = false;
    }
  }
  if (rep.decoupling.empty()) {
    rep.coverage_warning = true;
  }
  // (H4)
  const auto p = stats::proportion(rep.binding_successes, rep.binding_trials);
  rep.p_hat = rep.binding_trials ? p.mean : 0.0;
  rep.p_se = p.se;
  rep.h4_pass = rep.binding_trials > 0 && rep.p_hat - 3.0 * rep.p_se > 0.0;
  if (rep.binding_trials == 0) {
    rep.coverage_warning = true;
  }
  return rep;
}

inline nlohmann::json to_json(const ConditionReport &r) {
  nlohmann::json strata = nlohmann::json::array();
  for (const auto &s : r.decoupling) {
    strata.push_back({{"duration", s.duration},
                      {"trials", s.trials},
                      {"events", s.events},
                      {"frequency", s.frequency},
                      {"stderr", s.se}});
  }
  return {{"H1", {{"ok", r.h1_ok}, {"violations", r.h1_violations}}},
          {"H2",
           {{"C0", r.C0},
            {"C0_bootstrap_se", r.C0_bootstrap_se},
            {"q", r.q},
            {"samples", r.h2_samples},
            {"violations", r.h2_violations}}},
          {"H3", {{"strata", strata}, {"monotone", r.h3_monotone}}},
          {"H4",
           {{"trials", r.binding_trials},
            {"successes", r.binding_successes},
            {"p_hat", r.p_hat},
            {"stderr", r.p_se},
            {"pass", r.h4_pass}}},
          {"cycles", r.cycles},
          {"accepted_bindings", r.accepted_bindings},
          {"mean_attempts", r.mean_attempts},
          {"coverage_warning", r.coverage_warning}};
}

// ------------------------------------------------------------ calibration

struct LyapunovCap {
  double kappa = 0.0;
  double B = 0.0;
};

/// Calibrates the (P_{l,k}) growth cap from single trajectories started in
/// the d0 ball: B = safety (alpha k / 2) mean H^k over all records (the mean
/// growth rate of E_{u,k}) and kappa the `level` quantile over trajectories
/// of sup_t (E_{u,k}(t) - B t) - 1 - d0^{3s+1} - d0^{6s+2}, floored at 0.
inline LyapunovCap calibrate_lyapunov_cap(const Ensemble &ens,
                                          const EnergyParams &p, double d0,
                                          double level = 0.99,
                                          double safety = 1.5) {
  const double k = p.weight_power();
  std::vector<double> all;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (ens.aborted[i]) {
      continue;
    }
    for (double h : ens.H[i]) {
      all.push_back(energy_power(h, k));
    }
  }
  LyapunovCap cap;
  cap.B = safety * 0.5 * p.alpha * k * stats::mean_se(all).mean;
  const double offset =
      1.0 + std::pow(d0, 3.0 * p.sigma + 1.0) + std::pow(d0, 6.0 * p.sigma + 2.0);
  std::vector<double> sup;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    if (ens.aborted[i]) {
      continue;
    }
    LyapunovAccumulator acc(k, p.alpha, ens.times[0], ens.H[i][0]);
    double best = acc.value();
    for (std::size_t t = 1; t < ens.times.size(); ++t) {
      acc.advance(ens.H[i][t], ens.times[t] - ens.times[t - 1]);
      best = std::max(best, acc.value() - cap.B * (ens.times[t] - ens.times[0]));
    }
    sup.push_back(best - offset);
  }
  cap.kappa = std::max(0.0, stats::quantile(sup, level));
  return cap;
}

/// Coupling defaults from the plateau estimate C'_1: R0 = max(4 C'_1, d0)
/// and T = (2 / alpha) ln(R0 / C'_1).
inline CouplingConfig coupling_defaults(double C1_prime, double alpha,
                                        double d0, std::size_t n_star) {
  if (!(C1_prime > 0.0) || !(alpha > 0.0)) {
    throw ParameterError("coupling defaults need C'_1 > 0 and alpha > 0");
  }
  CouplingConfig c;
  c.d0 = d0;
  c.R0 = std::max(4.0 * C1_prime, d0);
  c.T = 2.0 / alpha * std::log(c.R0 / C1_prime);
  c.n_star = n_star;
  return c;
}

} // namespace snls
