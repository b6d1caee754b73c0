#include "fieldcycle/motion.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/random.hpp"

namespace fieldcycle {

void MotionLimits::validate() const {
  if (!(v_max_mps > 0.0 && a_max_mps2 > 0.0 && precision_m > 0.0 && travel_range_m > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "motion limits must be strictly positive");
  }
  if (!(precision_m < travel_range_m)) {
    throw Error(ErrorKind::SpecInvalid, "positional precision must be smaller than the travel range");
  }
}

void JitterModel::validate() const {
  if (!(sigma_s >= 0.0)) throw Error(ErrorKind::SpecInvalid, "jitter sigma must be non-negative");
}

double closed_form_duration(double distance_m, double v_mps, double a_mps2) {
  if (distance_m >= v_mps * v_mps / a_mps2) return distance_m / v_mps + v_mps / a_mps2;
  return 2.0 * std::sqrt(distance_m / a_mps2);
}

KinematicState MotionProfile::state_at(double t_s) const {
  // Right-continuous: at t = 0 the first segment's acceleration already applies.
  if (segments.empty() || t_s < 0.0) return {t_s, t_s < 0.0 ? z_start_m : z_end_m(), 0.0, 0.0};
  if (t_s >= total_duration_s) return {t_s, z_end_m(), 0.0, 0.0};
  const double z_lo = std::min(z_start_m, z_end_m());
  const double z_hi = std::max(z_start_m, z_end_m());
  double t0 = 0.0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (t_s < t0 + s.duration_s || i + 1 == segments.size()) {
      const double tau = t_s - t0;
      const double z = s.z_start_m + s.v_start_mps * tau + 0.5 * s.accel_mps2 * tau * tau;
      return {t_s, std::clamp(z, z_lo, z_hi), s.v_start_mps + s.accel_mps2 * tau, s.accel_mps2};
    }
    t0 += s.duration_s;
  }
  return {t_s, z_end_m(), 0.0, 0.0};
}

MotionProfile plan(double distance_m, const MotionLimits& limits, std::optional<double> v_target,
                   double z_start_m) {
  limits.validate();
  if (!(distance_m >= 0.0)) throw Error(ErrorKind::InvalidTarget, "distance must be non-negative");
  if (distance_m > limits.travel_range_m) {
    throw Error(ErrorKind::DistanceExceedsTravel, format_double(distance_m) + " m exceeds travel range " +
                                                      format_double(limits.travel_range_m) + " m");
  }
  const double v = v_target.value_or(limits.v_max_mps);
  if (!(v > 0.0 && v <= limits.v_max_mps)) {
    throw Error(ErrorKind::InvalidTarget, "target velocity must lie in (0, v_max]");
  }
  const double a = limits.a_max_mps2;

  MotionProfile p;
  p.z_start_m = z_start_m;
  p.total_distance_m = distance_m;
  if (distance_m == 0.0) return p;

  if (distance_m >= v * v / a) {
    const double t_ramp = v / a;
    const double d_ramp = 0.5 * v * v / a;
    const double t_cruise = (distance_m - v * v / a) / v;
    p.shape = ProfileShape::Trapezoidal;
    p.segments.push_back({t_ramp, a, 0.0, z_start_m});
    if (t_cruise > 0.0) p.segments.push_back({t_cruise, 0.0, v, z_start_m + d_ramp});
    p.segments.push_back({t_ramp, -a, v, z_start_m + distance_m - d_ramp});
  } else {
    const double v_peak = std::sqrt(a * distance_m);
    const double t_ramp = v_peak / a;
    p.shape = ProfileShape::Triangular;
    p.segments.push_back({t_ramp, a, 0.0, z_start_m});
    p.segments.push_back({t_ramp, -a, v_peak, z_start_m + 0.5 * distance_m});
  }
  for (const auto& s : p.segments) p.total_duration_s += s.duration_s;
  return p;
}

MotionProfile plan_move(double z_from_m, double z_to_m, const MotionLimits& limits, std::optional<double> v_target) {
  auto p = plan(std::abs(z_to_m - z_from_m), limits, v_target, z_from_m);
  if (z_to_m < z_from_m) {
    for (auto& s : p.segments) {
      s.accel_mps2 = -s.accel_mps2;
      s.v_start_mps = -s.v_start_mps;
      s.z_start_m = z_from_m - (s.z_start_m - z_from_m);
    }
    p.total_distance_m = -p.total_distance_m;
  }
  return p;
}

MotionProfile hold(double z_m, double duration_s) {
  if (!(duration_s >= 0.0)) throw Error(ErrorKind::InvalidTarget, "hold duration must be non-negative");
  MotionProfile p;
  p.z_start_m = z_m;
  if (duration_s > 0.0) p.segments.push_back({duration_s, 0.0, 0.0, z_m});
  p.total_duration_s = duration_s;
  return p;
}

double duration(const MotionProfile& profile) noexcept {
  double t = 0.0;
  for (const auto& s : profile.segments) t += s.duration_s;
  return t;
}

std::vector<KinematicState> sample_trajectory(const MotionProfile& profile, double dt_s) {
  if (!(dt_s > 0.0)) throw Error(ErrorKind::InvalidTarget, "sampling step must be positive");
  const double total = profile.total_duration_s;
  // Segment boundaries are sampled exactly so that the reported acceleration
  // (right-continuous) is constant over every sampling interval.
  std::vector<double> times;
  const auto n = static_cast<std::size_t>(std::floor(total / dt_s));
  for (std::size_t i = 0; i <= n; ++i) times.push_back(static_cast<double>(i) * dt_s);
  double boundary = 0.0;
  for (const auto& s : profile.segments) {
    boundary += s.duration_s;
    times.push_back(std::min(boundary, total));
  }
  std::sort(times.begin(), times.end());
  const double merge = 1e-9 * dt_s;
  std::vector<double> unique;
  for (double t : times) {
    if (t > total) continue;
    if (!unique.empty() && t - unique.back() <= merge) {
      unique.back() = t;
      continue;
    }
    unique.push_back(t);
  }
  std::vector<KinematicState> out;
  out.reserve(unique.size());
  for (double t : unique) out.push_back(profile.state_at(t));
  return out;
}

std::vector<FieldTimeSample> field_vs_time(const MotionProfile& profile, const FieldMap& map, double dt_s) {
  std::vector<FieldTimeSample> out;
  for (const auto& s : sample_trajectory(profile, dt_s)) {
    out.push_back({s.t_s, s.z_m, map.field_at(s.z_m), map.gradient_at(s.z_m) * s.v_mps});
  }
  return out;
}

double peak_field_rate(const std::vector<FieldTimeSample>& series) noexcept {
  double peak = 0.0;
  for (const auto& s : series) peak = std::max(peak, std::abs(s.field_rate_T_per_s));
  return peak;
}

double field_rate_at_crossing(const std::vector<FieldTimeSample>& series, double field_T) {
  for (std::size_t i = 0; i + 1 < series.size(); ++i) {
    const double a = series[i].field_T - field_T;
    const double b = series[i + 1].field_T - field_T;
    if (a == 0.0) return std::abs(series[i].field_rate_T_per_s);
    if (a * b < 0.0) {
      const double w = a / (a - b);
      return std::abs((1.0 - w) * series[i].field_rate_T_per_s + w * series[i + 1].field_rate_T_per_s);
    }
  }
  if (!series.empty() && series.back().field_T == field_T) return std::abs(series.back().field_rate_T_per_s);
  throw Error(ErrorKind::FieldNotReachable, "trajectory never crosses " + format_double(field_T) + " T");
}

double apply_jitter(double duration_s, const JitterModel& model, std::uint64_t index) {
  model.validate();
  if (!(duration_s >= 0.0)) throw Error(ErrorKind::InvalidTarget, "duration must be non-negative");
  if (model.sigma_s == 0.0) return duration_s;
  return std::max(0.0, duration_s + model.sigma_s * standard_normal(model.seed, index));
}

void write_trajectory_csv(std::ostream& out, const MotionProfile& profile, double dt_s, const FieldMap* map) {
  CsvWriter csv(out, {"t_s", "z_m", "v_mps", "a_mps2", "B_T"});
  for (const auto& s : sample_trajectory(profile, dt_s)) {
    csv.cell(s.t_s).cell(s.z_m).cell(s.v_mps).cell(s.a_mps2);
    map ? csv.cell(map->field_at(s.z_m)) : csv.cell("");
    csv.end_row();
  }
}

}  // namespace fieldcycle
