#include "fieldcycle/relaxometry.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/random.hpp"

namespace fieldcycle {

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

void RelaxationModel::validate() const {
  if (!(T1_min_s > 0.0 && T1_max_s >= T1_min_s)) {
    throw Error(ErrorKind::SpecInvalid, "relaxation model needs 0 < T1_min <= T1_max");
  }
  if (!(B_knee_T > 0.0 && exponent > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "knee field and exponent must be positive");
  }
}

double RelaxationModel::t1(double B_T) const {
  if (!(B_T >= 0.0)) throw Error(ErrorKind::InvalidTarget, "field must be non-negative");
  if (T1_max_s == T1_min_s) return T1_min_s;
  const double r = std::pow(B_T / B_knee_T, exponent);
  return T1_min_s + (T1_max_s - T1_min_s) * r / (1.0 + r);
}

double RelaxationModel::field_for_t1(double T1_s) const {
  if (!(T1_s > T1_min_s && T1_s < T1_max_s)) {
    throw Error(ErrorKind::FieldNotReachable, "T1 " + format_double(T1_s) + " s outside the model range");
  }
  const double s = (T1_s - T1_min_s) / (T1_max_s - T1_min_s);
  return B_knee_T * std::pow(s / (1.0 - s), 1.0 / exponent);
}

RelaxationModel RelaxationModel::anchored(double B_low_T, double T1_low_s, double B_high_T, double T1_high_s,
                                          double B_knee_T, double exponent) {
  const auto saturation = [&](double b) {
    const double r = std::pow(b / B_knee_T, exponent);
    return r / (1.0 + r);
  };
  const double s_lo = saturation(B_low_T);
  const double s_hi = saturation(B_high_T);
  // T1(B) = T1_min (1 - s) + T1_max s at both anchors.
  Eigen::Matrix2d m;
  m << 1.0 - s_lo, s_lo, 1.0 - s_hi, s_hi;
  const Eigen::Vector2d sol = m.fullPivLu().solve(Eigen::Vector2d(T1_low_s, T1_high_s));
  RelaxationModel model{sol[1], sol[0], B_knee_T, exponent};
  model.validate();
  return model;
}

double t1_of_field(double B_T, const RelaxationModel& model) { return model.t1(B_T); }

void RelaxometryProtocol::validate() const {
  if (!(B_pol_T > 0.0 && B_relax_T > 0.0 && detect_field_T > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "protocol fields must be positive");
  }
  if (!(t_pol_s >= 0.0)) throw Error(ErrorKind::SpecInvalid, "polarization time must be non-negative");
  for (std::size_t i = 0; i < T_relax_list_s.size(); ++i) {
    if (!(T_relax_list_s[i] >= 0.0)) throw Error(ErrorKind::SpecInvalid, "wait times must be non-negative");
    if (i > 0 && !(T_relax_list_s[i] > T_relax_list_s[i - 1])) {
      throw Error(ErrorKind::SpecInvalid, "wait times must be strictly increasing");
    }
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::SpecInvalid, "noise sigma must be non-negative");
  if (!(stretch_beta > 0.0)) throw Error(ErrorKind::SpecInvalid, "stretch exponent must be positive");
  if (!(integration_dt_s > 0.0)) throw Error(ErrorKind::SpecInvalid, "integration step must be positive");
}

// ---------------------------------------------------------------------------
// Protocol simulation
// ---------------------------------------------------------------------------

double decay_along(const MotionProfile& profile, const FieldMap& map, const RelaxationModel& model,
                   double polarization, double dt_s) {
  const auto rate = [&](double t) { return 1.0 / model.t1(map.field_at(profile.state_at(t).z_m)); };
  double p = polarization;
  double t0 = 0.0;
  // Per segment so that the acceleration kinks fall on step boundaries.
  for (const auto& seg : profile.segments) {
    const auto n = static_cast<long>(std::max(1.0, std::ceil(seg.duration_s / dt_s)));
    const double h = seg.duration_s / static_cast<double>(n);
    for (long k = 0; k < n; ++k) {
      const double t = t0 + static_cast<double>(k) * h;
      const double k1 = -p * rate(t);
      const double k2 = -(p + 0.5 * h * k1) * rate(t + 0.5 * h);
      const double k3 = -(p + 0.5 * h * k2) * rate(t + 0.5 * h);
      const double k4 = -(p + h * k3) * rate(t + h);
      p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    t0 += seg.duration_s;
  }
  return p;
}

DecayCurve simulate_protocol(const RelaxometryProtocol& protocol, const FieldMap& map, const MotionLimits& limits,
                             const RelaxationModel& model, std::uint64_t seed) {
  protocol.validate();
  model.validate();
  const double z_pol = map.position_of_field(protocol.B_pol_T);
  const double z_relax = map.position_of_field(protocol.B_relax_T);
  const double z_detect = map.position_of_field(protocol.detect_field_T);
  const auto to_relax = plan_move(z_pol, z_relax, limits);
  const auto to_detect = plan_move(z_relax, z_detect, limits);

  double p = protocol.initial_polarization;
  if (protocol.sign == PolarizationSign::AntiAligned) p = -p;
  // The decay is linear in P and transport is identical for every wait, so
  // each leg reduces to one attenuation factor.
  double out_factor = 1.0;
  if (!protocol.instant_shuttle) {
    p = decay_along(to_relax, map, model, p, protocol.integration_dt_s);
    out_factor = decay_along(to_detect, map, model, 1.0, protocol.integration_dt_s);
  }
  const double t1_relax = model.t1(map.field_at(z_relax));

  DecayCurve curve;
  curve.noise_sigma = protocol.noise_sigma;
  for (std::size_t i = 0; i < protocol.T_relax_list_s.size(); ++i) {
    const double wait = protocol.T_relax_list_s[i];
    double q = p * std::exp(-std::pow(wait / t1_relax, protocol.stretch_beta));
    double signal = q * out_factor * protocol.gain;
    if (protocol.noise_sigma > 0.0) signal += protocol.noise_sigma * standard_normal(seed, i);
    curve.t_relax_s.push_back(wait);
    curve.signal.push_back(signal);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

namespace {

// beta = 0.5 + 2 / (1 + exp(-s)) keeps the exponent inside [0.5, 2.5].
double stretch_from(double s) { return kMinStretch + (kMaxStretch - kMinStretch) / (1.0 + std::exp(-s)); }

double stretch_parameter(double beta) {
  const double u = (beta - kMinStretch) / (kMaxStretch - kMinStretch);
  return std::log(u / (1.0 - u));
}

struct DecayObjective {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  const DecayCurve* curve = nullptr;
  double sign = 1.0;
  int params = 2;

  int inputs() const { return params; }
  int values() const { return static_cast<int>(curve->size()); }

  // x = (amplitude, ln T1 [, stretch parameter]).
  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
    const double t1 = std::exp(x[1]);
    const double beta = params == 3 ? stretch_from(x[2]) : 1.0;
    f.resize(values());
    for (std::size_t i = 0; i < curve->size(); ++i) {
      const double model = x[0] * std::exp(-std::pow(curve->t_relax_s[i] / t1, beta));
      f[static_cast<Eigen::Index>(i)] = model - sign * curve->signal[i];
    }
    return 0;
  }
};

}  // namespace

FitResult fit_decay(const DecayCurve& curve, DecayModel model) {
  const std::size_t n = curve.size();
  if (n < 4) throw Error(ErrorKind::InsufficientPoints, "decay fit needs at least 4 points");
  if (curve.signal.size() != n) throw Error(ErrorKind::SpecInvalid, "curve columns differ in length");

  const double mean = std::accumulate(curve.signal.begin(), curve.signal.end(), 0.0) / static_cast<double>(n);
  const double sign = mean < 0.0 ? -1.0 : 1.0;

  // Log-linear regression on the positive points gives the starting guess.
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = sign * curve.signal[i];
    if (y <= 0.0) continue;
    const double x = curve.t_relax_s[i];
    sx += x;
    sy += std::log(y);
    sxx += x * x;
    sxy += x * std::log(y);
    ++used;
  }
  if (used < 2) throw Error(ErrorKind::FitDiverged, "fewer than two positive points after sign handling");
  const double denom = used * sxx - sx * sx;
  double slope = denom != 0.0 ? (used * sxy - sx * sy) / denom : 0.0;
  const double t_max = *std::max_element(curve.t_relax_s.begin(), curve.t_relax_s.end());
  if (!(slope < 0.0)) slope = -1.0 / std::max(t_max, 1e-9);
  const double intercept = (sy - slope * sx) / used;

  const int params = model == DecayModel::Stretched ? 3 : 2;
  Eigen::VectorXd x(params);
  x[0] = std::exp(intercept);
  x[1] = std::log(-1.0 / slope);
  if (params == 3) x[2] = stretch_parameter(1.0);

  DecayObjective objective{&curve, sign, params};
  Eigen::NumericalDiff<DecayObjective, Eigen::Central> numeric(objective);
  Eigen::LevenbergMarquardt<Eigen::NumericalDiff<DecayObjective, Eigen::Central>> lm(numeric);
  lm.parameters.maxfev = 2000;
  lm.parameters.xtol = 1e-14;
  lm.parameters.ftol = 1e-16;
  const auto status = lm.minimize(x);

  if (!x.allFinite() || status == Eigen::LevenbergMarquardtSpace::ImproperInputParameters ||
      !(x[1] > std::log(1e-9) && x[1] < std::log(1e12))) {
    throw Error(ErrorKind::FitDiverged, "decay fit did not converge");
  }

  FitResult out;
  out.model = model;
  out.amplitude = sign * x[0];
  out.T1_s = std::exp(x[1]);
  out.beta = params == 3 ? stretch_from(x[2]) : 1.0;
  out.iterations = static_cast<int>(lm.iter);

  Eigen::VectorXd residual(static_cast<Eigen::Index>(n));
  objective(x, residual);
  out.residual_rms = std::sqrt(residual.squaredNorm() / static_cast<double>(n));

  // Covariance in natural parameters from the analytic Jacobian.
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(n), params);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = curve.t_relax_s[i];
    const double ratio = t / out.T1_s;
    const double power = std::pow(ratio, out.beta);
    const double e = std::exp(-power);
    const auto r = static_cast<Eigen::Index>(i);
    jac(r, 0) = e;
    jac(r, 1) = x[0] * e * out.beta * power / out.T1_s;
    if (params == 3) jac(r, 2) = t > 0.0 ? -x[0] * e * power * std::log(ratio) : 0.0;
  }
  const int dof = static_cast<int>(n) - params;
  const double variance = dof > 0 ? residual.squaredNorm() / dof : 0.0;
  const Eigen::MatrixXd normal = jac.transpose() * jac;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(normal);
  if (lu.isInvertible()) {
    const Eigen::MatrixXd cov = variance * lu.inverse();
    out.covariance.topLeftCorner(params, params) = cov;
    out.T1_std_error_s = std::sqrt(std::max(0.0, cov(1, 1)));
    if (params == 3) out.beta_std_error = std::sqrt(std::max(0.0, cov(2, 2)));
  }
  return out;
}

T1Map build_t1_map(const std::vector<double>& fields_T, const std::vector<DecayCurve>& curves, DecayModel model) {
  if (fields_T.size() != curves.size()) {
    throw Error(ErrorKind::SpecInvalid, "one decay curve is required per field");
  }
  std::vector<std::size_t> order(fields_T.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fields_T[a] < fields_T[b]; });
  T1Map map;
  for (std::size_t i : order) {
    T1MapEntry entry{fields_T[i], std::nullopt, {}};
    try {
      entry.fit = fit_decay(curves[i], model);
    } catch (const Error& e) {
      entry.error = e.what();
    }
    map.entries.push_back(std::move(entry));
  }
  return map;
}

std::optional<double> knee_field(const T1Map& map) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& e : map.entries) {
    if (e.fit && e.B_T > 0.0) pts.emplace_back(e.B_T, e.fit->T1_s);
  }
  if (pts.size() < 2) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(pts.begin(), pts.end(),
                                            [](const auto& a, const auto& b) { return a.second < b.second; });
  const double mid = 0.5 * (lo->second + hi->second);
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const auto [b0, t0] = pts[i];
    const auto [b1, t1] = pts[i + 1];
    if ((t0 - mid) * (t1 - mid) <= 0.0 && t0 != t1) {
      const double w = (mid - t0) / (t1 - t0);
      return std::exp(std::log(b0) + w * (std::log(b1) - std::log(b0)));
    }
  }
  return std::nullopt;
}

void write_curve_csv(std::ostream& out, const DecayCurve& curve) {
  CsvWriter csv(out, {"T_relax_s", "signal_au"});
  for (std::size_t i = 0; i < curve.size(); ++i) {
    csv.cell(curve.t_relax_s[i]).cell(curve.signal[i]);
    csv.end_row();
  }
}

DecayCurve read_curve_csv(std::istream& in) {
  const auto table = read_csv(in);
  const auto c_t = table.column("T_relax_s");
  const auto c_s = table.column("signal_au");
  DecayCurve curve;
  for (const auto& row : table.rows) {
    const auto t = parse_optional_double(row[c_t]);
    const auto s = parse_optional_double(row[c_s]);
    if (!t || !s) throw Error(ErrorKind::Io, "decay curve row with empty cell");
    curve.t_relax_s.push_back(*t);
    curve.signal.push_back(*s);
  }
  return curve;
}

void write_t1_map_csv(std::ostream& out, const T1Map& map) {
  CsvWriter csv(out, {"B_T", "T1_s", "beta", "residual_rms"});
  for (const auto& e : map.entries) {
    csv.cell(e.B_T);
    if (e.fit) {
      csv.cell(e.fit->T1_s).cell(e.fit->beta).cell(e.fit->residual_rms);
    } else {
      csv.cell("").cell("").cell("");
    }
    csv.end_row();
  }
}

}  // namespace fieldcycle
