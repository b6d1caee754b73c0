#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "fieldcycle/errors.hpp"
#include "fieldcycle/spin.hpp"

using namespace fieldcycle;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Hamiltonian written out element by element on (0 up, 0 down, -1 up, -1 down).
Matrix4 hand_hamiltonian(double A, double theta, double B, const SpinConstants& c = {}) {
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double L = c.gamma_n_Hz_per_T * B;
  const double d = c.delta_zfs_Hz - c.gamma_e_Hz_per_T * B * cs;
  const double x = c.gamma_e_Hz_per_T * B * sn / std::sqrt(2.0);
  const double h = A / std::sqrt(2.0);
  Matrix4 H;
  // clang-format off
  H << -L * cs / 2,             -L * sn / 2,            x + h * cs / 2,  h * sn / 2,
       -L * sn / 2,              L * cs / 2,            h * sn / 2,      x - h * cs / 2,
        x + h * cs / 2,          h * sn / 2,            d - L * cs / 2 - A / 2, -L * sn / 2,
        h * sn / 2,              x - h * cs / 2,       -L * sn / 2,      d + L * cs / 2 + A / 2;
  // clang-format on
  return H;
}

// Thermal 13C polarization at 7 T and 298 K worked by hand:
// h * gamma_n * B / (2 k T) = 6.62607015e-34 * 10.7084e6 * 7 / (2 * 1.380649e-23 * 298).
constexpr double kBoltzmann7T = 6.0360e-6;

}  // namespace

TEST_SUITE("spin") {
  TEST_CASE("static Hamiltonian matches the element-wise form") {
    for (double theta : {0.0, 0.3, 1.1, std::numbers::pi / 2}) {
      const SpinSystem sys{2e6, theta, 7e-3};
      const Matrix4 H = static_hamiltonian(sys);
      CHECK((H - hand_hamiltonian(2e6, theta, 7e-3)).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((H - H.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  TEST_CASE("shifted Larmor limits") {
    for (double A : {0.1e6, 1e6, 5e6}) {
      const SpinSystem sys{A, 0.0, 10e-3};
      CHECK(shifted_larmor(sys) == SpinConstants{}.gamma_n_Hz_per_T * 10e-3);
    }
    for (double theta : {0.0, 0.4, 1.2, 1.5}) {
      const SpinSystem sys{0.0, theta, 10e-3};
      CHECK(shifted_larmor(sys) == doctest::Approx(107.084e3).epsilon(1e-12));
    }
  }

  TEST_CASE("shifted Larmor at 10 mT, 1 MHz, 90 degrees") {
    const SpinSystem sys{1e6, std::numbers::pi / 2, 10e-3};
    const double formula = shifted_larmor(sys);
    CHECK(formula == doctest::Approx(107084.0 + 0.28024e9 * 1e6 / 2.87e9).epsilon(1e-9));
    CHECK(formula == doctest::Approx(204.7e3).epsilon(1e-3));
    // Oracle: exact splitting of the element-wise Hamiltonian.
    const Eigen::SelfAdjointEigenSolver<Matrix4> es(hand_hamiltonian(1e6, std::numbers::pi / 2, 10e-3));
    const double exact = es.eigenvalues()[1] - es.eigenvalues()[0];
    CHECK(ms0_splitting(sys) == doctest::Approx(exact).epsilon(1e-9));
    CHECK(formula == doctest::Approx(exact).epsilon(0.01));
  }

  TEST_CASE("shifted Larmor tracks diagonalization in the perturbative regime") {
    // Second order holds while the Zeeman mixing gamma_e B / delta stays small.
    for (double B : {1e-3, 2e-3, 5e-3}) {
      for (double A : {0.1e6, 0.5e6, 1e6}) {
        for (double theta : {0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0}) {
          const SpinSystem sys{A, theta * kDeg, B};
          CHECK(shifted_larmor(sys) == doctest::Approx(ms0_splitting(sys)).epsilon(0.01));
        }
      }
    }
  }

  TEST_CASE("shifted Larmor guards the pole") {
    const SpinConstants c;
    const SpinSystem sys{1e6, 0.0, c.delta_zfs_Hz / c.gamma_e_Hz_per_T};
    try {
      (void)shifted_larmor(sys);
      FAIL("expected NearDivergence");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::NearDivergence);
    }
  }

  TEST_CASE("Landau-Zener probability") {
    CHECK(lz_probability(0.0, 1.0) == 1.0);
    CHECK(lz_probability(1.0, 1e300) == doctest::Approx(1.0));
    CHECK(lz_probability(1.0, 1e-300) == 0.0);
    const double gap = 1.0, rate = 2 * std::numbers::pi / std::log(2.0);
    CHECK(lz_probability(gap, rate) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(lz_probability(2.0, -3.0) == lz_probability(2.0, 3.0));
    CHECK_THROWS_AS(lz_probability(1.0, 0.0), Error);
    double prev_gap = 2.0;
    for (int i = 1; i <= 50; ++i) {
      const double p = lz_probability(0.1 * i, 10.0);
      CHECK(p < prev_gap);
      CHECK(p >= 0.0);
      prev_gap = p;
    }
    double prev_rate = -1.0;
    for (int i = 1; i <= 50; ++i) {
      const double p = lz_probability(1.0, 0.5 * i);
      CHECK(p > prev_rate);
      CHECK(p <= 1.0);
      prev_rate = p;
    }
  }

  TEST_CASE("dressed levels and crossings") {
    const SpinSystem sys{1e6, 45 * kDeg, 10e-3};
    const auto levels = dressed_levels(sys);
    CHECK(std::is_sorted(levels.energy_Hz.begin(), levels.energy_Hz.end()));
    CHECK(levels.energy_Hz[1] - levels.energy_Hz[0] == doctest::Approx(ms0_splitting(sys)));
    const auto crossings = band_crossings(levels, sys, SweepParams{});
    CHECK(crossings.size() == 4);
    for (std::size_t i = 1; i < crossings.size(); ++i) CHECK(crossings[i].frequency_Hz >= crossings[i - 1].frequency_Hz);
    SweepParams down;
    down.sweep_rate_Hz_per_s = -4e11;
    const auto reversed = band_crossings(levels, sys, down);
    CHECK(reversed.front().frequency_Hz == crossings.back().frequency_Hz);
  }

  TEST_CASE("propagation conserves the norm and is reproducible") {
    const SpinSystem sys{1e6, 45 * kDeg, 10e-3};
    const auto a = propagate_sweep(sys, SweepParams{});
    const auto b = propagate_sweep(sys, SweepParams{});
    CHECK(a.norm_drift < 1e-9);
    CHECK(a.polarization == b.polarization);
    // Regression value fixed at first run.
    CHECK(a.polarization == doctest::Approx(0.47387039476045029).epsilon(1e-9));
    for (int col = 0; col < 4; ++col) CHECK(a.transfer.col(col).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(a.transfer.minCoeff() >= -1e-12);
  }

  TEST_CASE("very fast sweeps transfer nothing") {
    const SpinSystem sys{1e6, 45 * kDeg, 10e-3};
    SweepParams fast;
    fast.sweep_rate_Hz_per_s = 1e15;
    CHECK(std::abs(propagate_sweep(sys, fast).polarization) < 1e-5);
    CHECK(std::abs(compose_crossings(sys, fast).polarization) < 1e-5);
  }

  TEST_CASE("no microwave drive transfers nothing") {
    const SpinSystem sys{1e6, 60 * kDeg, 10e-3};
    SweepParams off;
    off.mw_rabi_Hz = 0.0;
    CHECK(std::abs(propagate_sweep(sys, off).polarization) < 1e-9);
    CHECK(compose_crossings(sys, off).polarization == 0.0);
  }

  TEST_CASE("split-step propagator stays unitary at coarse steps") {
    // Each factor is an exact exponential, so a coarse step loses accuracy
    // but never norm; the drift guard only catches round-off blowups.
    const SpinSystem sys{1e6, 45 * kDeg, 10e-3};
    SweepParams coarse;
    coarse.max_phase_step = 3.0;
    const auto r = propagate_sweep(sys, coarse);
    CHECK(r.norm_drift < 1e-9);
    CHECK(r.steps < propagate_sweep(sys, SweepParams{}).steps / 100);
    coarse.max_phase_step = 0.0;
    CHECK_THROWS_AS((void)propagate_sweep(sys, coarse), Error);
  }

  TEST_CASE("repeated sweeps build polarization") {
    const SpinSystem sys{1e6, 45 * kDeg, 10e-3};
    SweepParams one, three;
    three.n_sweeps = 3;
    const double p1 = compose_crossings(sys, one).polarization;
    const double p3 = compose_crossings(sys, three).polarization;
    CHECK(std::abs(p3) > std::abs(p1));
    CHECK(std::abs(p3) <= 1.0);
    SweepParams none = three;
    none.repolarization_fidelity = 0.0;
    CHECK(std::abs(compose_crossings(sys, none).polarization) <= std::abs(p3));
  }

  TEST_CASE("powder quadrature") {
    const auto e = PowderEnsemble::gauss_legendre(16);
    CHECK(e.theta_rad.size() == 16);
    double sum = 0.0, moment = 0.0;
    for (std::size_t i = 0; i < e.weight.size(); ++i) {
      CHECK(e.weight[i] > 0.0);
      CHECK(e.theta_rad[i] > 0.0);
      CHECK(e.theta_rad[i] < std::numbers::pi / 2);
      sum += e.weight[i];
      moment += e.weight[i] * std::pow(std::cos(e.theta_rad[i]), 6);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    // integral of cos^6 over the hemisphere with sin weight is 1/7
    CHECK(moment == doctest::Approx(1.0 / 7.0).epsilon(1e-13));
    CHECK_THROWS_AS(powder_average(SpinSystem{}, SweepParams{}, PowderEnsemble{{0.1}, {0.5}}), Error);
  }

  TEST_CASE("single-node powder equals the single orientation") {
    const SpinSystem sys{1e6, 30 * kDeg, 10e-3};
    const auto powder = powder_average(sys, SweepParams{}, PowderEnsemble::single(30 * kDeg), {},
                                       SweepMethod::LandauZener);
    CHECK(powder.mean_polarization == compose_crossings(sys, SweepParams{}).polarization);
  }

  TEST_CASE("low-field sign uniformity with Landau-Zener composition") {
    const SpinSystem sys{1e6, 0.0, 10e-3};
    REQUIRE(sys.low_field());
    const auto powder =
        powder_average(sys, SweepParams{}, PowderEnsemble::gauss_legendre(32), {}, SweepMethod::LandauZener);
    CHECK(powder.sign_uniform(5 * kDeg, 90 * kDeg));
  }

  TEST_CASE("Boltzmann polarization") {
    CHECK(boltzmann_polarization(0.0, 298.0) == 0.0);
    const double p7 = boltzmann_polarization(7.0, 298.0);
    CHECK(p7 == doctest::Approx(6.0e-6).epsilon(0.05));
    CHECK(p7 == doctest::Approx(kBoltzmann7T).epsilon(1e-4));
    CHECK(boltzmann_polarization(-2.0, 298.0) == -boltzmann_polarization(2.0, 298.0));
    CHECK(boltzmann_polarization(2e-3, 298.0) / boltzmann_polarization(1e-3, 298.0) == doctest::Approx(2.0).epsilon(1e-10));
    double prev = -1.0;
    for (double B = -10.0; B <= 10.0; B += 0.5) {
      const double p = boltzmann_polarization(B, 298.0);
      CHECK(p > prev);
      prev = p;
    }
  }

  TEST_CASE("enhancement to equivalent field") {
    CHECK(enhancement_to_equivalent_field(277.0, 7.0) == doctest::Approx(1939.0).epsilon(1e-12));
    CHECK(enhancement_to_equivalent_field(277.0, 7.0) > 1900.0);
    CHECK(enhancement_to_equivalent_field(1.0, 7.0) == 7.0);
    CHECK(enhancement_to_equivalent_field(0.5, 7.0) == 3.5);
    try {
      (void)enhancement_to_equivalent_field(1e5, 7.0);
      FAIL("expected NonlinearRegime");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::NonlinearRegime);
    }
  }

  TEST_CASE("SNR field scaling") {
    CHECK(snr_field_scaling(7.0, 7.0) == 1.0);
    CHECK(snr_field_scaling(0.008, 7.0) == doctest::Approx(1.41e5).epsilon(0.01));
    CHECK(snr_field_scaling(1.0, 2.0) == doctest::Approx(3.3636).epsilon(1e-4));
  }

  TEST_CASE("powder CSV header") {
    PowderResult r;
    r.orientations.push_back({0.5, 1.0, 0.25});
    std::ostringstream out;
    write_powder_csv(out, r);
    CHECK(out.str() == "theta_rad,weight,polarization\n0.5,1,0.25\n");
  }
}
