#include "fieldcycle/fieldmap.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include <Eigen/Dense>

// Boost 1.74's pchip calls isnan unqualified.
using std::isnan;
#include <boost/math/interpolators/pchip.hpp>
#include <boost/math/tools/roots.hpp>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"

namespace fieldcycle {

void FieldAnchor::validate() const {
  if (!(field_T > 0.0)) throw Error(ErrorKind::SpecInvalid, "anchor field must be positive");
  if (kind == AnchorKind::GradientAtField && (!gradient_T_per_m || *gradient_T_per_m == 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "gradient anchor needs a non-zero gradient");
  }
  if (!(tolerance_rel > 0.0)) throw Error(ErrorKind::SpecInvalid, "anchor tolerance must be positive");
}

// ---------------------------------------------------------------------------
// Finite solenoid
// ---------------------------------------------------------------------------

namespace {

// 1 - u / sqrt(u^2 + R^2) for u >= 0, without cancellation far from the coil.
double one_minus_cosine(double u, double r) noexcept {
  const double s = std::hypot(u, r);
  return r * r / (s * (s + u));
}

double sgn(double x) noexcept { return x < 0.0 ? -1.0 : 1.0; }

// (L+z)/sqrt((L+z)^2+R^2) + (L-z)/sqrt((L-z)^2+R^2)
double solenoid_shape(double half_length, double radius, double z) noexcept {
  const double a = half_length + z;
  const double b = half_length - z;
  const double ones = sgn(a) + sgn(b);
  return ones - sgn(a) * one_minus_cosine(std::abs(a), radius) - sgn(b) * one_minus_cosine(std::abs(b), radius);
}

double solenoid_shape_derivative(double half_length, double radius, double z) noexcept {
  const double r2 = radius * radius;
  const double sa = std::hypot(half_length + z, radius);
  const double sb = std::hypot(half_length - z, radius);
  return r2 / (sa * sa * sa) - r2 / (sb * sb * sb);
}

}  // namespace

double solenoid_field(const SolenoidParams& p, double z_m) noexcept {
  return p.center_field_T * solenoid_shape(p.half_length_m, p.radius_m, z_m) /
         solenoid_shape(p.half_length_m, p.radius_m, 0.0);
}

double solenoid_gradient(const SolenoidParams& p, double z_m) noexcept {
  return p.center_field_T * solenoid_shape_derivative(p.half_length_m, p.radius_m, z_m) /
         solenoid_shape(p.half_length_m, p.radius_m, 0.0);
}

// ---------------------------------------------------------------------------
// FieldMap
// ---------------------------------------------------------------------------

struct FieldMap::Spline {
  // Interpolates ln B so the clamped-monotone cubic keeps B positive.
  boost::math::interpolators::pchip<std::vector<double>> log_field;
};

FieldMap FieldMap::finite_solenoid(const SolenoidParams& params, const FieldMapGeometry& geometry) {
  if (!(params.center_field_T > 0.0 && params.half_length_m > 0.0 && params.radius_m > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "solenoid parameters must be positive");
  }
  if (!(geometry.domain_m.lo >= 0.0 && geometry.domain_m.hi > geometry.domain_m.lo)) {
    throw Error(ErrorKind::SpecInvalid, "field map domain must be a non-empty interval at z >= 0");
  }
  FieldMap map;
  map.model_ = FieldModelKind::FiniteSolenoid;
  map.solenoid_ = params;
  map.geometry_ = geometry;
  return map;
}

FieldMap FieldMap::monotone_spline(std::vector<SplineKnot> knots, FieldMapGeometry geometry) {
  if (knots.size() < 2) throw Error(ErrorKind::NonMonotonicModel, "spline needs at least two knots");
  for (std::size_t i = 1; i < knots.size(); ++i) {
    if (!(knots[i].z_m > knots[i - 1].z_m)) {
      throw Error(ErrorKind::NonMonotonicModel, "spline knots must be strictly increasing in z");
    }
    if (!(knots[i].field_T < knots[i - 1].field_T)) {
      throw Error(ErrorKind::NonMonotonicModel, "spline knot fields must be strictly decreasing");
    }
  }
  if (!(knots.back().field_T > 0.0)) throw Error(ErrorKind::NonMonotonicModel, "spline fields must be positive");

  std::vector<double> z;
  std::vector<double> log_b;
  for (const auto& k : knots) {
    z.push_back(k.z_m);
    log_b.push_back(std::log(k.field_T));
  }
  FieldMap map;
  map.model_ = FieldModelKind::MonotoneSpline;
  map.knots_ = std::move(knots);
  geometry.domain_m = {map.knots_.front().z_m, map.knots_.back().z_m};
  map.geometry_ = geometry;
  if (z.size() == 2) {
    // pchip needs four points; a straight line in ln B is its two-knot limit.
    const double third = (z[1] - z[0]) / 3.0;
    z = {z[0], z[0] + third, z[0] + 2.0 * third, z[1]};
    const double slope = (log_b[1] - log_b[0]) / (3.0 * third);
    log_b = {log_b[0], log_b[0] + slope * third, log_b[0] + 2.0 * slope * third, log_b[1]};
  } else if (z.size() == 3) {
    const double zm = 0.5 * (z[1] + z[2]);
    const double bm = 0.5 * (log_b[1] + log_b[2]);
    z.insert(z.begin() + 2, zm);
    log_b.insert(log_b.begin() + 2, bm);
  }
  map.spline_ = std::make_shared<const Spline>(Spline{
      boost::math::interpolators::pchip<std::vector<double>>(std::move(z), std::move(log_b))});
  return map;
}

const SolenoidParams& FieldMap::solenoid() const {
  if (model_ != FieldModelKind::FiniteSolenoid) {
    throw Error(ErrorKind::SpecInvalid, "field map is not a finite-solenoid model");
  }
  return solenoid_;
}

double FieldMap::model_field(double z_m) const {
  if (model_ == FieldModelKind::FiniteSolenoid) return solenoid_field(solenoid_, z_m);
  return std::exp(spline_->log_field(z_m));
}

double FieldMap::model_gradient(double z_m) const {
  if (model_ == FieldModelKind::FiniteSolenoid) return solenoid_gradient(solenoid_, z_m);
  return std::exp(spline_->log_field(z_m)) * spline_->log_field.prime(z_m);
}

void FieldMap::require_in_domain(double z_m) const {
  if (!geometry_.domain_m.contains(z_m)) {
    throw Error(ErrorKind::OutOfDomain, "z = " + format_double(z_m) + " m outside [" +
                                            format_double(geometry_.domain_m.lo) + ", " +
                                            format_double(geometry_.domain_m.hi) + "]");
  }
}

FieldSample FieldMap::sample(double z_m) const {
  require_in_domain(z_m);
  const double b = model_field(z_m);
  if (b < geometry_.floor_T) return {geometry_.floor_T, true};
  return {b, false};
}

double FieldMap::field_at(double z_m) const { return sample(z_m).field_T; }

double FieldMap::gradient_at(double z_m) const {
  require_in_domain(z_m);
  if (model_field(z_m) < geometry_.floor_T) return 0.0;
  return model_gradient(z_m);
}

Interval FieldMap::reachable_fields() const {
  const auto d = geometry_.domain_m;
  return {std::max(model_field(d.hi), geometry_.floor_T), model_field(d.lo)};
}

double FieldMap::position_of_field(double field_T) const {
  const auto d = geometry_.domain_m;
  const auto range = reachable_fields();
  if (!(field_T >= range.lo && field_T <= range.hi)) {
    throw Error(ErrorKind::FieldNotReachable, format_double(field_T) + " T outside reachable range [" +
                                                  format_double(range.lo) + ", " + format_double(range.hi) +
                                                  "] T");
  }
  const auto residual = [&](double z) { return model_field(z) - field_T; };
  const double f_lo = residual(d.lo);
  const double f_hi = residual(d.hi);
  if (f_lo == 0.0) return d.lo;
  if (f_hi == 0.0) return d.hi;
  if (f_lo < 0.0 || f_hi > 0.0) {
    // Only reachable at the floor clamp: return the first clamped position.
    if (field_T == geometry_.floor_T && f_hi < 0.0) {
      std::uintmax_t iters = 200;
      const auto [a, b] = boost::math::tools::toms748_solve(
          [&](double z) { return model_field(z) - geometry_.floor_T; }, d.lo, d.hi,
          boost::math::tools::eps_tolerance<double>(std::numeric_limits<double>::digits - 2), iters);
      return 0.5 * (a + b);
    }
    throw Error(ErrorKind::FieldNotReachable, "field " + format_double(field_T) + " T not bracketed");
  }
  std::uintmax_t iters = 200;
  const auto [a, b] = boost::math::tools::toms748_solve(
      residual, d.lo, d.hi, f_lo, f_hi,
      boost::math::tools::eps_tolerance<double>(std::numeric_limits<double>::digits - 2), iters);
  return 0.5 * (a + b);
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

namespace {

constexpr double kMinGeometry = 1e-3;
constexpr double kMaxGeometry = 10.0;

// Position of `field` on a solenoid over the unbounded half-axis z >= 0.
std::optional<double> solenoid_position(const SolenoidParams& p, double field) {
  if (!(field > 0.0 && field < p.center_field_T)) return std::nullopt;
  double hi = 1.0;
  while (solenoid_field(p, hi) > field) {
    hi *= 2.0;
    if (hi > 1e6) return std::nullopt;
  }
  std::uintmax_t iters = 200;
  const auto [a, b] = boost::math::tools::toms748_solve(
      [&](double z) { return solenoid_field(p, z) - field; }, 0.0, hi,
      boost::math::tools::eps_tolerance<double>(std::numeric_limits<double>::digits - 2), iters);
  return 0.5 * (a + b);
}

bool is_center_anchor(const FieldAnchor& a) {
  return a.kind == AnchorKind::FieldValue && a.position_m && std::abs(*a.position_m) <= 1e-12;
}

double relative(double value, double target) { return (value - target) / std::abs(target); }

// Relative residuals of every anchor against an arbitrary field model.
template <typename Field, typename Gradient, typename Position>
std::vector<double> anchor_residuals(std::span<const FieldAnchor> anchors, Field&& field, Gradient&& gradient,
                                     Position&& position) {
  constexpr double kUnreachable = 1e3;
  std::vector<double> out;
  out.reserve(anchors.size());
  for (const auto& a : anchors) {
    if (a.kind == AnchorKind::FieldValue) {
      if (!a.position_m) {
        out.push_back(position(a.field_T) ? 0.0 : kUnreachable);
        continue;
      }
      const auto b = field(*a.position_m);
      out.push_back(b ? relative(*b, a.field_T) : kUnreachable);
      continue;
    }
    std::optional<double> z = a.position_m ? a.position_m : position(a.field_T);
    if (!z) {
      out.push_back(kUnreachable);
      continue;
    }
    const auto g = gradient(*z);
    out.push_back(g ? relative(std::abs(*g), std::abs(*a.gradient_T_per_m)) : kUnreachable);
  }
  return out;
}

SolenoidParams solenoid_from(double b0, double log_half_length, double log_radius) {
  return {b0, std::clamp(std::exp(log_half_length), kMinGeometry, kMaxGeometry),
          std::clamp(std::exp(log_radius), kMinGeometry, kMaxGeometry)};
}

std::vector<double> solenoid_residuals(std::span<const FieldAnchor> anchors, const SolenoidParams& p) {
  return anchor_residuals(
      anchors, [&](double z) -> std::optional<double> { return solenoid_field(p, z); },
      [&](double z) -> std::optional<double> { return solenoid_gradient(p, z); },
      [&](double b) { return solenoid_position(p, b); });
}

struct SolenoidObjective {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  std::span<const FieldAnchor> anchors;
  double center_field = 0.0;
  int rows = 0;

  int inputs() const { return 2; }
  int values() const { return rows; }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
    const auto r = solenoid_residuals(anchors, solenoid_from(center_field, x[0], x[1]));
    f = Eigen::VectorXd::Zero(rows);
    for (std::size_t i = 0; i < r.size(); ++i) f[static_cast<Eigen::Index>(i)] = r[i];
    return 0;
  }
};

double sum_squares(const std::vector<double>& r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return s;
}

Calibration calibrate_solenoid(std::span<const FieldAnchor> anchors, double center_field,
                               const CalibrationOptions& options) {
  const SolenoidParams defaults{};
  std::vector<FieldAnchor> constraining;
  for (const auto& a : anchors) {
    if (!is_center_anchor(a)) constraining.push_back(a);
  }

  SolenoidParams best{center_field, defaults.half_length_m, defaults.radius_m};
  int iterations = 0;
  if (!constraining.empty()) {
    // Deterministic start: coarse log grid over the two geometric parameters.
    constexpr int kGrid = 24;
    double best_cost = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x(2);
    const double lo = std::log(0.01);
    const double hi_l = std::log(3.0);
    const double hi_r = std::log(1.0);
    for (int i = 0; i < kGrid; ++i) {
      for (int j = 0; j < kGrid; ++j) {
        const double ll = lo + (hi_l - lo) * i / (kGrid - 1);
        const double lr = lo + (hi_r - lo) * j / (kGrid - 1);
        const double cost = sum_squares(solenoid_residuals(constraining, solenoid_from(center_field, ll, lr)));
        if (cost < best_cost) {
          best_cost = cost;
          x << ll, lr;
        }
      }
    }

    SolenoidObjective objective{constraining, center_field,
                                std::max(2, static_cast<int>(constraining.size()))};
    Eigen::NumericalDiff<SolenoidObjective, Eigen::Central> numeric(objective);
    Eigen::LevenbergMarquardt<Eigen::NumericalDiff<SolenoidObjective, Eigen::Central>> lm(numeric);
    lm.parameters.maxfev = options.max_iterations;
    lm.parameters.xtol = options.tolerance;
    lm.parameters.ftol = options.tolerance;
    lm.minimize(x);
    iterations = static_cast<int>(lm.iter);
    best = solenoid_from(center_field, x[0], x[1]);
  }

  auto map = FieldMap::finite_solenoid(best, options.geometry);
  return {map, solenoid_residuals(anchors, best), iterations};
}

Calibration calibrate_spline(std::span<const FieldAnchor> anchors, const CalibrationOptions& options) {
  std::vector<SplineKnot> knots;
  for (const auto& a : anchors) {
    if (a.kind == AnchorKind::FieldValue && a.position_m) knots.push_back({*a.position_m, a.field_T});
  }
  std::sort(knots.begin(), knots.end(), [](const auto& l, const auto& r) { return l.z_m < r.z_m; });
  auto map = FieldMap::monotone_spline(std::move(knots), options.geometry);
  const auto in_domain = [&](double z) { return map.domain().contains(z); };
  auto residuals = anchor_residuals(
      anchors, [&](double z) -> std::optional<double> {
        if (!in_domain(z)) return std::nullopt;
        return map.field_at(z);
      },
      [&](double z) -> std::optional<double> {
        if (!in_domain(z)) return std::nullopt;
        return map.gradient_at(z);
      },
      [&](double b) -> std::optional<double> {
        try {
          return map.position_of_field(b);
        } catch (const Error&) {
          return std::nullopt;
        }
      });
  return {map, std::move(residuals), 0};
}

}  // namespace

Calibration calibrate(std::span<const FieldAnchor> anchors, const CalibrationOptions& options) {
  if (anchors.empty()) throw Error(ErrorKind::SpecInvalid, "calibration needs at least one anchor");
  for (const auto& a : anchors) a.validate();
  const auto center = std::find_if(anchors.begin(), anchors.end(), is_center_anchor);
  if (center == anchors.end()) {
    throw Error(ErrorKind::SpecInvalid, "calibration needs a field_value anchor at the magnet center (z = 0)");
  }

  auto result = options.model == FieldModelKind::FiniteSolenoid
                    ? calibrate_solenoid(anchors, center->field_T, options)
                    : calibrate_spline(anchors, options);

  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (!(std::abs(result.residuals[i]) <= anchors[i].tolerance_rel)) {
      throw Error(ErrorKind::NoConvergence, "anchor " + std::to_string(i) + " residual " +
                                                format_double(result.residuals[i]) + " exceeds tolerance " +
                                                format_double(anchors[i].tolerance_rel));
    }
  }
  return result;
}

std::vector<FieldAnchor> canonical_anchors() {
  // Gradients follow from the quoted LAC resolutions at 50 um precision:
  // 0.114 G / 50 um = 0.228 T/m at 510 G, 0.303 G / 50 um = 0.606 T/m at 1020 G.
  return {
      {AnchorKind::FieldValue, 0.0, 7.0, std::nullopt, 1e-6},
      {AnchorKind::GradientAtField, std::nullopt, 0.051, -0.228, 0.01},
      {AnchorKind::GradientAtField, std::nullopt, 0.102, -0.606, 0.01},
      {AnchorKind::FieldValue, 1.06, 0.030, std::nullopt, 0.20},
  };
}

const FieldMap& canonical_field_map() {
  static const FieldMap map = calibrate(canonical_anchors()).map;
  return map;
}

LacPlan plan_lac_access(const FieldMap& map, double target_field_T, double precision_m, double v_max_mps) {
  if (!(precision_m > 0.0)) throw Error(ErrorKind::InvalidTarget, "positional precision must be positive");
  if (!(v_max_mps >= 0.0)) throw Error(ErrorKind::InvalidTarget, "velocity cap must be non-negative");
  LacPlan plan;
  plan.target_field_T = target_field_T;
  plan.position_m = map.position_of_field(target_field_T);
  plan.gradient_T_per_m = map.gradient_at(plan.position_m);
  plan.resolution_T = std::abs(plan.gradient_T_per_m) * precision_m;
  plan.max_sweep_rate_T_per_s = std::abs(plan.gradient_T_per_m) * v_max_mps;
  return plan;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::vector<FieldAnchor> read_anchor_csv(std::istream& in) {
  const auto table = read_csv(in);
  const auto c_kind = table.column("kind");
  const auto c_pos = table.column("position_m");
  const auto c_field = table.column("field_T");
  const auto c_grad = table.column("gradient_T_per_m");
  const auto c_tol = table.column("tolerance_rel");
  std::vector<FieldAnchor> anchors;
  for (const auto& row : table.rows) {
    FieldAnchor a;
    if (row[c_kind] == "field_value") {
      a.kind = AnchorKind::FieldValue;
    } else if (row[c_kind] == "gradient_at_field") {
      a.kind = AnchorKind::GradientAtField;
    } else {
      throw Error(ErrorKind::Io, "unknown anchor kind '" + row[c_kind] + "'");
    }
    a.position_m = parse_optional_double(row[c_pos]);
    const auto field = parse_optional_double(row[c_field]);
    if (!field) throw Error(ErrorKind::Io, "anchor row without field_T");
    a.field_T = *field;
    a.gradient_T_per_m = parse_optional_double(row[c_grad]);
    a.tolerance_rel = parse_optional_double(row[c_tol]).value_or(1e-6);
    a.validate();
    anchors.push_back(a);
  }
  return anchors;
}

void write_anchor_csv(std::ostream& out, std::span<const FieldAnchor> anchors) {
  CsvWriter csv(out, {"kind", "position_m", "field_T", "gradient_T_per_m", "tolerance_rel"});
  for (const auto& a : anchors) {
    csv.cell(a.kind == AnchorKind::FieldValue ? "field_value" : "gradient_at_field");
    a.position_m ? csv.cell(*a.position_m) : csv.cell("");
    csv.cell(a.field_T);
    a.gradient_T_per_m ? csv.cell(*a.gradient_T_per_m) : csv.cell("");
    csv.cell(a.tolerance_rel);
    csv.end_row();
  }
}

nlohmann::json to_json(const FieldMap& map) {
  nlohmann::json doc;
  doc["schema"] = 1;
  const auto& g = map.geometry();
  doc["domain_m"] = {g.domain_m.lo, g.domain_m.hi};
  doc["travel_range_m"] = g.travel_range_m;
  doc["center_separation_m"] = g.center_separation_m;
  doc["floor_T"] = g.floor_T;
  if (map.model() == FieldModelKind::FiniteSolenoid) {
    const auto& p = map.solenoid();
    doc["model"] = "finite_solenoid";
    doc["params"] = {{"center_field_T", p.center_field_T},
                     {"half_length_m", p.half_length_m},
                     {"radius_m", p.radius_m}};
  } else {
    doc["model"] = "monotone_spline";
    auto knots = nlohmann::json::array();
    for (const auto& k : map.knots()) knots.push_back({k.z_m, k.field_T});
    doc["params"] = {{"knots", knots}};
  }
  return doc;
}

FieldMap field_map_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("schema").get<int>() != 1) {
      throw Error(ErrorKind::UnsupportedVersion, "field map schema must be 1");
    }
    FieldMapGeometry g;
    const auto& domain = doc.at("domain_m");
    g.domain_m = {domain.at(0).get<double>(), domain.at(1).get<double>()};
    g.travel_range_m = doc.value("travel_range_m", g.travel_range_m);
    g.center_separation_m = doc.value("center_separation_m", g.center_separation_m);
    g.floor_T = doc.value("floor_T", g.floor_T);
    const auto model = doc.at("model").get<std::string>();
    const auto& params = doc.at("params");
    if (model == "finite_solenoid") {
      SolenoidParams p{params.at("center_field_T").get<double>(), params.at("half_length_m").get<double>(),
                       params.at("radius_m").get<double>()};
      return FieldMap::finite_solenoid(p, g);
    }
    if (model == "monotone_spline") {
      std::vector<SplineKnot> knots;
      for (const auto& k : params.at("knots")) knots.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
      return FieldMap::monotone_spline(std::move(knots), g);
    }
    throw Error(ErrorKind::SchemaViolation, "unknown field map model '" + model + "'");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaViolation, std::string("field map document: ") + e.what());
  }
}

}  // namespace fieldcycle
