#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "fieldcycle/fieldmap.hpp"

namespace fieldcycle {

struct MotionLimits {
  double v_max_mps = 2.0;
  double a_max_mps2 = 30.0;
  double precision_m = 50e-6;
  double travel_range_m = 1.6;

  void validate() const;
};

enum class ProfileShape { Null, Trapezoidal, Triangular };

/// Constant-acceleration piece of a move.
struct MotionSegment {
  double duration_s = 0.0;
  double accel_mps2 = 0.0;
  double v_start_mps = 0.0;
  double z_start_m = 0.0;
};

struct KinematicState {
  double t_s = 0.0;
  double z_m = 0.0;
  double v_mps = 0.0;
  double a_mps2 = 0.0;
};

/// Piecewise-constant-acceleration move that starts and ends at rest.
/// total_distance_m is the signed displacement.
struct MotionProfile {
  std::vector<MotionSegment> segments;
  double z_start_m = 0.0;
  double total_distance_m = 0.0;
  double total_duration_s = 0.0;
  ProfileShape shape = ProfileShape::Null;

  double z_end_m() const noexcept { return z_start_m + total_distance_m; }
  /// State at time t; clamps to rest at the endpoints outside [0, duration].
  KinematicState state_at(double t_s) const;
};

/// t = d/v + v/a when d >= v^2/a, else 2 sqrt(d/a).
double closed_form_duration(double distance_m, double v_mps, double a_mps2);

/// Time-optimal move of `distance_m` in +z from `z_start_m`.
MotionProfile plan(double distance_m, const MotionLimits& limits = {}, std::optional<double> v_target = {},
                   double z_start_m = 0.0);
/// Time-optimal move between two positions in either direction.
MotionProfile plan_move(double z_from_m, double z_to_m, const MotionLimits& limits = {},
                        std::optional<double> v_target = {});
/// Stationary profile of the given length.
MotionProfile hold(double z_m, double duration_s);

double duration(const MotionProfile& profile) noexcept;

/// Samples at t = 0, dt, 2dt, ... plus the exact end time.
std::vector<KinematicState> sample_trajectory(const MotionProfile& profile, double dt_s);

struct FieldTimeSample {
  double t_s = 0.0;
  double z_m = 0.0;
  double field_T = 0.0;
  /// Chain rule dB/dz * v; exact for the sampled state.
  double field_rate_T_per_s = 0.0;
};

std::vector<FieldTimeSample> field_vs_time(const MotionProfile& profile, const FieldMap& map, double dt_s);
double peak_field_rate(const std::vector<FieldTimeSample>& series) noexcept;
/// |dB/dt| where the series crosses `field_T`, linearly interpolated between
/// bracketing samples. Throws FieldNotReachable if never crossed.
double field_rate_at_crossing(const std::vector<FieldTimeSample>& series, double field_T);

struct JitterModel {
  double sigma_s = 2.6e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// duration + N(0, sigma) for draw `index`; never negative.
double apply_jitter(double duration_s, const JitterModel& model, std::uint64_t index = 0);

/// CSV `t_s,z_m,v_mps,a_mps2,B_T`; B_T is left empty without a map.
void write_trajectory_csv(std::ostream& out, const MotionProfile& profile, double dt_s,
                          const FieldMap* map = nullptr);

/// Back-solved 8 mT -> 7 T shuttle length reproducing 648 ms at full limits.
inline constexpr double kDefaultShuttleDistance_m = 1.1627;

}  // namespace fieldcycle
