#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "fieldcycle/errors.hpp"
#include "fieldcycle/relaxometry.hpp"

using namespace fieldcycle;

namespace {

DecayCurve synthetic(double A, double T1, double beta, int n, double span) {
  DecayCurve c;
  for (int i = 0; i < n; ++i) {
    const double t = span * i / (n - 1);
    c.t_relax_s.push_back(t);
    c.signal.push_back(A * std::exp(-std::pow(t / T1, beta)));
  }
  return c;
}

// Composite Simpson on the log-attenuation integral, sampling the profile
// directly. Independent of the RK4 stepping in the library.
double attenuation_oracle(const MotionProfile& p, const FieldMap& map, const RelaxationModel& m, int n = 20000) {
  const double T = p.total_duration_s;
  const double h = T / n;
  auto rate = [&](double t) { return 1.0 / m.t1(map.field_at(p.state_at(t).z_m)); };
  double s = rate(0.0) + rate(T);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * rate(i * h);
  return std::exp(-s * h / 3.0);
}

}  // namespace

TEST_SUITE("relaxometry") {
  TEST_CASE("model anchors and knee") {
    const RelaxationModel m;
    CHECK(m.t1(7.0) == doctest::Approx(395.7).epsilon(0.01));
    CHECK(m.t1(8e-3) == doctest::Approx(10.19).epsilon(0.05));
    CHECK(m.t1(0.5) == doctest::Approx(10.19 + (395.7 - 10.19) / 2).epsilon(1e-14));
    CHECK(t1_of_field(0.5, m) == m.t1(0.5));
    double prev = 0.0;
    for (double B = 0.0; B <= 7.0; B += 0.01) {
      const double t = m.t1(B);
      CHECK(t > prev);
      prev = t;
    }
    CHECK(m.field_for_t1(m.t1(0.37)) == doctest::Approx(0.37).epsilon(1e-12));
  }

  TEST_CASE("anchored model passes through both anchors") {
    const auto m = RelaxationModel::anchored();
    CHECK(m.t1(8e-3) == doctest::Approx(10.19).epsilon(1e-12));
    CHECK(m.t1(7.0) == doctest::Approx(395.7).epsilon(1e-12));
    CHECK(m.B_knee_T == 0.5);
  }

  TEST_CASE("hold decay matches the closed form") {
    const auto& map = canonical_field_map();
    const RelaxationModel m;
    const double z = map.position_of_field(0.1);
    const double p = decay_along(hold(z, 3.0), map, m, 1.0, 1e-3);
    CHECK(p == doctest::Approx(std::exp(-3.0 / m.t1(map.field_at(z)))).epsilon(1e-10));
  }

  TEST_CASE("transport decay matches an independent quadrature") {
    const auto& map = canonical_field_map();
    const RelaxationModel m;
    const auto move = plan_move(map.position_of_field(8e-3), map.position_of_field(7.0));
    const double rk4 = decay_along(move, map, m, 1.0, 1e-3);
    CHECK(rk4 == doctest::Approx(attenuation_oracle(move, map, m)).epsilon(1e-8));
    const double half = decay_along(move, map, m, 1.0, 5e-4);
    CHECK(std::abs(rk4 - half) / half < 1e-6);
    // positivity and a bound from the shortest T1 en route
    CHECK(rk4 > 0.0);
    CHECK(rk4 < 1.0);
    CHECK(rk4 >= std::exp(-move.total_duration_s / m.t1(8e-3)));
  }

  TEST_CASE("instant shuttles give exact exponential ratios") {
    const auto& map = canonical_field_map();
    RelaxometryProtocol p;
    p.T_relax_list_s = {5, 10, 20, 40};
    p.instant_shuttle = true;
    const RelaxationModel m;
    const auto curve = simulate_protocol(p, map, {}, m);
    const double t1 = m.t1(map.field_at(map.position_of_field(8e-3)));
    for (std::size_t i = 1; i < curve.size(); ++i) {
      const double ratio = curve.signal[i] / curve.signal[i - 1];
      CHECK(ratio == doctest::Approx(std::exp(-(p.T_relax_list_s[i] - p.T_relax_list_s[i - 1]) / t1)).epsilon(1e-6));
    }
    CHECK(curve.signal[0] == doctest::Approx(std::exp(-5.0 / t1)).epsilon(1e-12));
  }

  TEST_CASE("real shuttles lose signal within the transport bound") {
    const auto& map = canonical_field_map();
    RelaxometryProtocol p;
    p.T_relax_list_s = {0, 5, 10};
    const RelaxationModel m;
    auto instant = p;
    instant.instant_shuttle = true;
    const auto real = simulate_protocol(p, map, {}, m);
    const auto ideal = simulate_protocol(instant, map, {}, m);
    const double shuttle = duration(plan_move(map.position_of_field(8e-3), map.position_of_field(7.0)));
    for (std::size_t i = 0; i < real.size(); ++i) {
      CHECK(real.signal[i] < ideal.signal[i]);
      CHECK(real.signal[i] >= ideal.signal[i] * std::exp(-shuttle / m.t1(8e-3)));
    }
  }

  TEST_CASE("infinite T1 gives a flat curve") {
    const auto& map = canonical_field_map();
    const double inf = std::numeric_limits<double>::infinity();
    RelaxationModel m;
    m.T1_min_s = inf;
    m.T1_max_s = inf;
    RelaxometryProtocol p;
    p.B_relax_T = 0.2;
    p.T_relax_list_s = {0, 10, 100};
    p.initial_polarization = 0.8;
    const auto curve = simulate_protocol(p, map, {}, m);
    for (double s : curve.signal) CHECK(s == doctest::Approx(0.8).epsilon(1e-15));
  }

  TEST_CASE("anti-aligned polarization flips the sign only") {
    const auto& map = canonical_field_map();
    RelaxometryProtocol p;
    p.B_relax_T = 0.3;
    for (int i = 0; i < 16; ++i) p.T_relax_list_s.push_back(5.0 * i);
    auto anti = p;
    anti.sign = PolarizationSign::AntiAligned;
    const auto a = simulate_protocol(p, map, {}, RelaxationModel{});
    const auto b = simulate_protocol(anti, map, {}, RelaxationModel{});
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b.signal[i] == -a.signal[i]);
    const auto fa = fit_decay(a), fb = fit_decay(b);
    CHECK(fb.amplitude < 0.0);
    CHECK(fb.T1_s == doctest::Approx(fa.T1_s).epsilon(1e-9));
  }

  TEST_CASE("noise is seeded") {
    const auto& map = canonical_field_map();
    RelaxometryProtocol p;
    p.T_relax_list_s = {0, 5, 10, 20};
    p.noise_sigma = 0.01;
    const auto a = simulate_protocol(p, map, {}, RelaxationModel{}, 7);
    const auto b = simulate_protocol(p, map, {}, RelaxationModel{}, 7);
    const auto c = simulate_protocol(p, map, {}, RelaxationModel{}, 8);
    CHECK(a.signal == b.signal);
    CHECK(a.signal != c.signal);
  }

  TEST_CASE("protocol validation") {
    RelaxometryProtocol p;
    p.T_relax_list_s = {0, 5, 5};
    CHECK_THROWS_AS(p.validate(), Error);
    RelaxometryProtocol far;
    far.B_relax_T = 9.0;
    far.T_relax_list_s = {0, 1};
    try {
      (void)simulate_protocol(far, canonical_field_map(), {}, RelaxationModel{});
      FAIL("expected FieldNotReachable");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::FieldNotReachable);
    }
  }

  TEST_CASE("mono fit round trip across T1") {
    for (double T1 : {5.0, 10.19, 30.0, 100.0, 395.7, 500.0}) {
      const auto fit = fit_decay(synthetic(0.7, T1, 1.0, 32, 2.5 * T1));
      CHECK(std::abs(fit.T1_s - T1) / T1 <= 1e-3);
      CHECK(fit.amplitude == doctest::Approx(0.7).epsilon(1e-6));
      CHECK(fit.beta == 1.0);
      CHECK(fit.residual_rms < 1e-9);
    }
  }

  TEST_CASE("stretched fit recovers beta") {
    const auto fit = fit_decay(synthetic(1.0, 40.0, 1.3, 40, 100.0), DecayModel::Stretched);
    CHECK(fit.beta == doctest::Approx(1.3).epsilon(0.02));
    CHECK(fit.T1_s == doctest::Approx(40.0).epsilon(1e-3));
    CHECK(fit.beta >= kMinStretch);
    CHECK(fit.beta <= kMaxStretch);
  }

  TEST_CASE("super-exponential decay is visible in the residuals") {
    const auto curve = synthetic(1.0, 20.0, 1.4, 40, 50.0);
    const auto mono = fit_decay(curve, DecayModel::Monoexponential);
    const auto stretched = fit_decay(curve, DecayModel::Stretched);
    CHECK(mono.residual_rms > stretched.residual_rms);
  }

  TEST_CASE("fit errors") {
    try {
      (void)fit_decay(synthetic(1.0, 10.0, 1.0, 3, 20.0));
      FAIL("expected InsufficientPoints");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InsufficientPoints);
    }
  }

  TEST_CASE("standard errors shrink with noise") {
    const auto& map = canonical_field_map();
    RelaxometryProtocol p;
    for (int i = 0; i < 64; ++i) p.T_relax_list_s.push_back(i * 0.4);
    p.noise_sigma = 0.01;
    const auto noisy = fit_decay(simulate_protocol(p, map, {}, RelaxationModel{}, 3));
    p.noise_sigma = 0.001;
    const auto quiet = fit_decay(simulate_protocol(p, map, {}, RelaxationModel{}, 3));
    CHECK(noisy.T1_std_error_s > quiet.T1_std_error_s);
    CHECK(quiet.T1_std_error_s > 0.0);
    CHECK(noisy.covariance(1, 1) == doctest::Approx(noisy.T1_std_error_s * noisy.T1_std_error_s));
  }

  TEST_CASE("T1 map on synthetic data") {
    const auto& map = canonical_field_map();
    const RelaxationModel m;
    const std::vector<double> fields{7.0, 8e-3, 0.5, 0.1, 1.0};
    std::vector<DecayCurve> curves;
    for (double B : fields) {
      RelaxometryProtocol p;
      p.B_relax_T = B;
      for (int i = 0; i < 24; ++i) p.T_relax_list_s.push_back(2.0 * m.t1(B) * i / 23.0);
      curves.push_back(simulate_protocol(p, map, {}, m));
    }
    const auto t1map = build_t1_map(fields, curves);
    REQUIRE(t1map.entries.size() == 5);
    for (std::size_t i = 1; i < t1map.entries.size(); ++i) {
      CHECK(t1map.entries[i].B_T > t1map.entries[i - 1].B_T);
      CHECK(t1map.entries[i].fit->T1_s > t1map.entries[i - 1].fit->T1_s);
      CHECK(1.0 / t1map.entries[i].fit->T1_s < 1.0 / t1map.entries[i - 1].fit->T1_s);
    }
    for (const auto& e : t1map.entries) CHECK(e.fit->T1_s == doctest::Approx(m.t1(e.B_T)).epsilon(1e-3));
    const auto knee = knee_field(t1map);
    REQUIRE(knee);
    CHECK(*knee > 0.1);
    CHECK(*knee < 1.0);

    const auto single = build_t1_map({0.5}, {curves[2]});
    CHECK(single.entries.size() == 1);
  }

  TEST_CASE("T1 map keeps partial results") {
    const auto good = synthetic(1.0, 10.0, 1.0, 10, 20.0);
    const auto bad = synthetic(1.0, 10.0, 1.0, 2, 20.0);
    const auto t1map = build_t1_map({0.1, 0.2}, {good, bad});
    REQUIRE(t1map.entries.size() == 2);
    CHECK(t1map.entries[0].fit.has_value());
    CHECK_FALSE(t1map.entries[1].fit.has_value());
    CHECK_FALSE(t1map.entries[1].error.empty());
  }

  TEST_CASE("curve CSV round trip") {
    const auto c = synthetic(1.0, 10.0, 1.0, 5, 20.0);
    std::stringstream ss;
    write_curve_csv(ss, c);
    CHECK(ss.str().rfind("T_relax_s,signal_au\n", 0) == 0);
    const auto back = read_curve_csv(ss);
    CHECK(back.t_relax_s == c.t_relax_s);
    CHECK(back.signal == c.signal);
    std::ostringstream m;
    write_t1_map_csv(m, build_t1_map({0.1}, {c}));
    CHECK(m.str().rfind("B_T,T1_s,beta,residual_rms\n", 0) == 0);
  }
}
