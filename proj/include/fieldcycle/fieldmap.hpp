#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

namespace fieldcycle {

/// Closed interval of axial positions or field values.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double x) const noexcept { return x >= lo && x <= hi; }
  double width() const noexcept { return hi - lo; }
};

enum class AnchorKind { FieldValue, GradientAtField };

/// A calibration constraint on the on-axis field. Positions are measured
/// along the shuttle axis from the magnet center toward the shield.
struct FieldAnchor {
  AnchorKind kind = AnchorKind::FieldValue;
  std::optional<double> position_m;
  double field_T = 0.0;
  std::optional<double> gradient_T_per_m;
  double tolerance_rel = 1e-6;

  void validate() const;
};

enum class FieldModelKind { FiniteSolenoid, MonotoneSpline };

struct SolenoidParams {
  double center_field_T = 7.0;
  double half_length_m = 0.4513;
  double radius_m = 0.08692;
};

struct SplineKnot {
  double z_m = 0.0;
  double field_T = 0.0;
};

struct FieldSample {
  double field_T = 0.0;
  /// True when the fringe model fell below the shield floor and was clamped.
  bool shield_region = false;
};

struct FieldMapGeometry {
  Interval domain_m{0.0, 1.6};
  double travel_range_m = 1.6;
  double center_separation_m = 0.830;
  /// Fields below this value are clamped; the interior of the shield is set
  /// by the shielding layers, not by the fringe model.
  double floor_T = 1e-3;
};

/// On-axis longitudinal field B(z). Immutable after construction and safe to
/// share between threads.
class FieldMap {
 public:
  static FieldMap finite_solenoid(const SolenoidParams& params, const FieldMapGeometry& geometry = {});
  /// Knots must be strictly increasing in z and strictly decreasing in B;
  /// the domain becomes the knot span.
  static FieldMap monotone_spline(std::vector<SplineKnot> knots, FieldMapGeometry geometry = {});

  FieldModelKind model() const noexcept { return model_; }
  const SolenoidParams& solenoid() const;
  const std::vector<SplineKnot>& knots() const noexcept { return knots_; }
  const FieldMapGeometry& geometry() const noexcept { return geometry_; }
  Interval domain() const noexcept { return geometry_.domain_m; }

  double field_at(double z_m) const;
  FieldSample sample(double z_m) const;
  /// dB/dz in T/m; negative for a map decreasing away from the magnet.
  double gradient_at(double z_m) const;
  /// Unique z with field_at(z) == field_T; throws FieldNotReachable.
  double position_of_field(double field_T) const;
  /// Fields reachable on the domain without clamping.
  Interval reachable_fields() const;

 private:
  struct Spline;

  FieldMap() = default;
  double model_field(double z_m) const;
  double model_gradient(double z_m) const;
  void require_in_domain(double z_m) const;

  FieldModelKind model_ = FieldModelKind::FiniteSolenoid;
  SolenoidParams solenoid_{};
  std::vector<SplineKnot> knots_;
  std::shared_ptr<const Spline> spline_;
  FieldMapGeometry geometry_{};
};

/// Closed-form on-axis field of a finite solenoid normalised to the center
/// field. Defined for every z, not only a map's domain.
double solenoid_field(const SolenoidParams& params, double z_m) noexcept;
double solenoid_gradient(const SolenoidParams& params, double z_m) noexcept;

struct CalibrationOptions {
  FieldModelKind model = FieldModelKind::FiniteSolenoid;
  FieldMapGeometry geometry{};
  int max_iterations = 500;
  double tolerance = 1e-10;
};

struct Calibration {
  FieldMap map;
  /// Relative residual per anchor, in input order.
  std::vector<double> residuals;
  int iterations = 0;
};

/// Fits the chosen model to the anchors by damped least squares on relative
/// residuals. Requires a field_value anchor at z = 0.
Calibration calibrate(std::span<const FieldAnchor> anchors, const CalibrationOptions& options = {});

/// Anchors reproducing the instrument: 7 T at center, ESLAC/GSLAC gradients
/// and roughly 300 G at the shield entry.
std::vector<FieldAnchor> canonical_anchors();
/// Calibrated from canonical_anchors(); computed once.
const FieldMap& canonical_field_map();

/// Level anti-crossing access figures at a target field.
struct LacPlan {
  double target_field_T = 0.0;
  double position_m = 0.0;
  double gradient_T_per_m = 0.0;
  double resolution_T = 0.0;
  double max_sweep_rate_T_per_s = 0.0;
};

LacPlan plan_lac_access(const FieldMap& map, double target_field_T, double precision_m = 50e-6,
                        double v_max_mps = 2.0);

std::vector<FieldAnchor> read_anchor_csv(std::istream& in);
void write_anchor_csv(std::ostream& out, std::span<const FieldAnchor> anchors);

nlohmann::json to_json(const FieldMap& map);
FieldMap field_map_from_json(const nlohmann::json& doc);

}  // namespace fieldcycle
