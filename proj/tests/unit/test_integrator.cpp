#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "snls/integrator.hpp"

using namespace snls;
using std::numbers::pi;

namespace {

SimConfig deterministic_config(std::size_t modes, double dt, double horizon,
                               double sigma, int lambda, double alpha) {
  SimConfig cfg;
  cfg.modes = modes;
  cfg.dt = dt;
  cfg.horizon = horizon;
  cfg.params.sigma = sigma;
  cfg.params.lambda = lambda;
  cfg.params.alpha = alpha;
  cfg.noise = NoiseOperator{std::vector<double>(modes, 0.0), 1};
  return cfg;
}

SimConfig noisy_config(std::size_t modes = 64, double horizon = 0.5) {
  SimConfig cfg = deterministic_config(modes, 1e-3, horizon, 1.0, -1, 1.0);
  cfg.noise = NoiseOperator::power_law(modes, 1.0, 4.0, modes / 2, 8);
  return cfg;
}

SpectralField smooth_initial(std::size_t modes) {
  SpectralField u(modes);
  u.mode(1) = Complex(1.0, 0.2);
  u.mode(2) = Complex(-0.4, 0.5);
  u.mode(3) = Complex(0.1, -0.3);
  return u;
}

SpectralField run(const SimConfig &cfg, const SpectralField &u0) {
  rng::CounterStream stream(0, 0);
  return simulate(u0, cfg, stream, {false, cfg.steps()}).states.back();
}

} // namespace

TEST(Step, ZeroIsFixedPoint) {
  const auto cfg = deterministic_config(16, 0.01, 1.0, 1.0, 1, 0.5);
  const WienerIncrement dw{SpectralField(16), 0.01};
  EXPECT_EQ(step(SpectralField(16), dw, nullptr, cfg), SpectralField(16));
}

TEST(Step, SigmaZeroMatchesLinearSolution) {
  const auto cfg = deterministic_config(16, 0.05, 1.0, 0.0, 1, 0.0);
  const auto u0 = smooth_initial(16);
  const auto u1 = step(u0, {SpectralField(16), 0.05}, nullptr, cfg);
  for (std::size_t n = 1; n <= 16; ++n) {
    const Complex exact =
        u0.mode(n) * std::polar(1.0, (1.0 - eigenvalue(n)) * 0.05);
    EXPECT_NEAR(std::abs(u1.mode(n) - exact), 0.0, 1e-14);
  }
}

TEST(Step, ControlSupportedAboveNStarIsRejected) {
  auto cfg = noisy_config(16);
  const WienerIncrement dw{SpectralField(16), cfg.dt};
  const auto bad = SpectralField::basis(16, 12);
  EXPECT_THROW(step(SpectralField(16), dw, &bad, cfg), ContractError);
  const auto good = SpectralField::basis(16, 2, 3.0);
  const auto out = step(SpectralField(16), dw, &good, cfg);
  EXPECT_NEAR(std::abs(out.mode(2) - 3.0 * cfg.dt), 0.0, 1e-15);
}

TEST(Step, MismatchedIncrementDtRejected) {
  auto cfg = noisy_config(16);
  EXPECT_THROW(step(SpectralField(16), {SpectralField(16), 0.5}, nullptr, cfg),
               ParameterError);
}

TEST(Step, SecondOrderSelfConvergence) {
  const std::size_t m = 64;
  const auto u0 = smooth_initial(m);
  auto cfg = deterministic_config(m, 0.0, 1.0, 1.0, -1, 0.0);
  // dt well inside the asymptotic range
  const double base = 1.0 / 512;
  cfg.dt = base / 16;
  const auto ref = run(cfg, u0);
  cfg.dt = base;
  const double e1 = sobolev_norm(run(cfg, u0) - ref, 0.0);
  cfg.dt = base / 2;
  const double e2 = sobolev_norm(run(cfg, u0) - ref, 0.0);
  EXPECT_NEAR(e1 / e2, 4.0, 0.8);
}

TEST(Simulate, MassConservationWithoutDampingAndNoise) {
  for (int lambda : {-1, 1}) {
    const auto cfg = deterministic_config(64, 1e-3, 10.0, 1.0, lambda, 0.0);
    const auto u0 = smooth_initial(64);
    const auto out = run(cfg, u0);
    EXPECT_LT(std::abs(sobolev_norm(out, 0.0) - sobolev_norm(u0, 0.0)), 1e-8);
  }
}

TEST(Simulate, LinearDampedEnergyClosedForm) {
  // sigma = 0: the phase rotation is a global factor, H decays as e^{-2 alpha t}
  const auto cfg = deterministic_config(32, 1e-2, 2.0, 0.0, -1, 1.0);
  const auto u0 = smooth_initial(32);
  const auto traj = simulate(u0, cfg, rng::CounterStream(0, 0), {false, 50});
  const double h0 = energy(u0, cfg.params);
  for (std::size_t i = 0; i < traj.times.size(); ++i) {
    EXPECT_NEAR(energy(traj.states[i], cfg.params),
                std::exp(-2.0 * traj.times[i]) * h0, 1e-11);
  }
}

TEST(Simulate, BitwiseReproducible) {
  const auto cfg = noisy_config();
  const auto u0 = smooth_initial(64);
  const auto a = simulate(u0, cfg, rng::CounterStream(7, 1));
  const auto b = simulate(u0, cfg, rng::CounterStream(7, 1));
  EXPECT_EQ(a.states, b.states);
  const auto c = simulate(u0, cfg, rng::CounterStream(7, 2));
  EXPECT_NE(a.states.back(), c.states.back());
}

TEST(Simulate, RecordsNoiseAndTimes) {
  const auto cfg = noisy_config(32, 0.05);
  const auto traj = simulate(smooth_initial(32), cfg, rng::CounterStream(1, 1),
                             {true, 10});
  ASSERT_TRUE(traj.noise_record.has_value());
  EXPECT_EQ(traj.noise_record->size(), 50u);
  EXPECT_EQ(traj.times.size(), 6u);
  EXPECT_NEAR(traj.times.back(), 0.05, 1e-15);
  EXPECT_EQ(traj.times.size(), traj.states.size());
}

TEST(Simulate, NonFiniteStateReportsStep) {
  auto cfg = noisy_config(16, 0.01);
  SpectralField u0(16);
  u0[0] = Complex(std::nan(""), 0.0);
  try {
    simulate(u0, cfg, rng::CounterStream(0, 0));
    FAIL() << "expected blow-up";
  } catch (const BlowUpError &e) {
    EXPECT_EQ(e.step(), 1u);
  }
}

TEST(Simulate, InvalidConfigRejected) {
  auto cfg = noisy_config(16);
  cfg.dt = 0.0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = noisy_config(16);
  cfg.noise.n_star = 17;
  EXPECT_THROW(cfg.validate(), DimensionError);
  cfg = noisy_config(16);
  cfg.horizon = 1e-4;
  EXPECT_THROW(cfg.validate(), ParameterError);
}

TEST(Simulate, DampedDeterministicEnergyNonIncreasing) {
  rng::PhiloxEngine engine(3, 3);
  const auto cfg = deterministic_config(64, 1e-3, 1.0, 1.0, -1, 1.0);
  for (int i = 0; i < 5; ++i) {
    const auto u0 = random_field({64, 8, 0.5, 3.0}, engine);
    const auto traj = simulate(u0, cfg, rng::CounterStream(0, 0), {false, 20});
    for (std::size_t k = 1; k < traj.states.size(); ++k) {
      EXPECT_LE(energy(traj.states[k], cfg.params),
                energy(traj.states[k - 1], cfg.params) * (1 + 1e-10));
    }
  }
}

TEST(Simulate, GaugeEquivariance) {
  const auto cfg = deterministic_config(32, 1e-3, 0.2, 1.0, 1, 0.5);
  const auto u0 = smooth_initial(32);
  const Complex g = std::polar(1.0, 0.7);
  const auto a = run(cfg, u0 * g);
  const auto b = run(cfg, u0) * g;
  EXPECT_LT(sobolev_norm(a - b, 0.0), 1e-13);
}

TEST(Simulate, SplitSystemProjections) {
  const auto cfg = noisy_config(32, 0.05);
  const auto traj = simulate(smooth_initial(32), cfg, rng::CounterStream(2, 2),
                             {true, 1});
  Stepper stepper(cfg);
  const std::size_t n = cfg.n_star();
  for (std::size_t k = 0; k + 1 < traj.states.size(); ++k) {
    SpectralField x = project(traj.states[k], n, Part::low);
    SpectralField y = project(traj.states[k], n, Part::high);
    SpectralField u = x + y;
    stepper.step(u, &(*traj.noise_record)[k], nullptr);
    EXPECT_EQ(project(u, n, Part::low), project(traj.states[k + 1], n, Part::low));
    EXPECT_EQ(project(u, n, Part::high),
              project(traj.states[k + 1], n, Part::high));
  }
}

TEST(PhiReconstruct, MatchesDirectSimulation) {
  const auto cfg = noisy_config(64, 0.3);
  const auto u0 = smooth_initial(64) + SpectralField::basis(64, 20, 0.01);
  const auto traj = simulate(u0, cfg, rng::CounterStream(4, 4), {true, 1});
  const std::size_t n = cfg.n_star();
  std::vector<SpectralField> x, eta;
  for (const auto &s : traj.states) {
    x.push_back(project(s, n, Part::low));
  }
  for (const auto &w : *traj.noise_record) {
    eta.push_back(project(w, n, Part::high));
  }
  const auto y = phi_reconstruct(x, eta, u0, cfg);
  ASSERT_EQ(y.size(), traj.states.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    const auto direct = project(traj.states[k], n, Part::high);
    EXPECT_LE(sobolev_norm(y[k] - direct, 0.0),
              1e-10 * std::max(1.0, sobolev_norm(direct, 0.0)));
  }
}

TEST(PhiReconstruct, ZeroInputsGiveZero) {
  const auto cfg = noisy_config(32, 0.02);
  const std::size_t steps = cfg.steps();
  std::vector<SpectralField> x(steps + 1, SpectralField(32));
  std::vector<SpectralField> eta(steps, SpectralField(32));
  const auto u0 = project(smooth_initial(32), cfg.n_star(), Part::low);
  for (const auto &y : phi_reconstruct(x, eta, u0, cfg)) {
    EXPECT_EQ(y, SpectralField(32));
  }
}

TEST(PhiReconstruct, NonAnticipative) {
  const auto cfg = noisy_config(32, 0.1);
  const auto traj = simulate(smooth_initial(32), cfg, rng::CounterStream(5, 5),
                             {true, 1});
  const std::size_t n = cfg.n_star();
  std::vector<SpectralField> x, eta;
  for (const auto &s : traj.states) {
    x.push_back(project(s, n, Part::low));
  }
  for (const auto &w : *traj.noise_record) {
    eta.push_back(project(w, n, Part::high));
  }
  const auto full = phi_reconstruct(x, eta, traj.states[0], cfg);
  const std::size_t k = 37;
  std::vector<SpectralField> xt(x.begin(), x.begin() + k + 1);
  std::vector<SpectralField> et(eta.begin(), eta.begin() + k);
  const auto cut = phi_reconstruct(xt, et, traj.states[0], cfg);
  ASSERT_EQ(cut.size(), k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    EXPECT_EQ(cut[i], full[i]);
  }
  // altering inputs after step k leaves the prefix unchanged
  for (std::size_t i = k; i < eta.size(); ++i) {
    eta[i] *= Complex(2.0, 0.0);
  }
  const auto altered = phi_reconstruct(x, eta, traj.states[0], cfg);
  for (std::size_t i = 0; i <= k; ++i) {
    EXPECT_EQ(altered[i], full[i]);
  }
  EXPECT_THROW(phi_reconstruct(x, std::vector<SpectralField>(3, SpectralField(32)),
                               traj.states[0], cfg),
               ContractError);
}
