#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fieldcycle/fieldmap.hpp"
#include "fieldcycle/motion.hpp"

namespace fieldcycle {

/// Phenomenological saturating knee:
/// T1(B) = T1_min + (T1_max - T1_min) B^p / (B^p + B_knee^p).
struct RelaxationModel {
  double T1_max_s = 395.7;
  double T1_min_s = 10.19;
  double B_knee_T = 0.5;
  double exponent = 2.0;

  void validate() const;
  double t1(double B_T) const;
  /// Inverse of t1(); requires T1_min < T1_s < T1_max.
  double field_for_t1(double T1_s) const;

  /// Knee model whose curve passes exactly through two (B, T1) points.
  static RelaxationModel anchored(double B_low_T = 8e-3, double T1_low_s = 10.19, double B_high_T = 7.0,
                                  double T1_high_s = 395.7, double B_knee_T = 0.5, double exponent = 2.0);
};

double t1_of_field(double B_T, const RelaxationModel& model);

enum class PolarizationSign { Aligned, AntiAligned };

struct RelaxometryProtocol {
  double B_pol_T = 8e-3;
  double t_pol_s = 40.0;
  double B_relax_T = 8e-3;
  std::vector<double> T_relax_list_s;
  double detect_field_T = 7.0;
  PolarizationSign sign = PolarizationSign::Aligned;
  double initial_polarization = 1.0;
  double gain = 1.0;
  /// Absolute gaussian noise on each detected signal.
  double noise_sigma = 0.0;
  /// Wait-period decay exp(-(t/T1)^beta); beta > 1 mimics super-exponential
  /// loss at low field.
  double stretch_beta = 1.0;
  /// Skip decay during transport.
  bool instant_shuttle = false;
  double integration_dt_s = 1e-3;

  void validate() const;
};

struct DecayCurve {
  std::vector<double> t_relax_s;
  std::vector<double> signal;
  double noise_sigma = 0.0;

  std::size_t size() const noexcept { return t_relax_s.size(); }
};

/// Polarization after a shuttle, integrating dP/dt = -P / T1(B(z(t))) by RK4.
double decay_along(const MotionProfile& profile, const FieldMap& map, const RelaxationModel& model,
                   double polarization, double dt_s);

DecayCurve simulate_protocol(const RelaxometryProtocol& protocol, const FieldMap& map, const MotionLimits& limits,
                             const RelaxationModel& model, std::uint64_t seed = 0);

enum class DecayModel { Monoexponential, Stretched };

struct FitResult {
  DecayModel model = DecayModel::Monoexponential;
  double T1_s = 0.0;
  double beta = 1.0;
  double amplitude = 0.0;
  /// Over (amplitude, T1, beta); beta row and column are zero for mono fits.
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
  double T1_std_error_s = 0.0;
  double beta_std_error = 0.0;
  double residual_rms = 0.0;
  int iterations = 0;
};

inline constexpr double kMinStretch = 0.5;
inline constexpr double kMaxStretch = 2.5;

/// Least-squares fit of A exp(-(t/T1)^beta). Curves with negative mean
/// signal are fitted with a negative amplitude.
FitResult fit_decay(const DecayCurve& curve, DecayModel model = DecayModel::Monoexponential);

struct T1MapEntry {
  double B_T = 0.0;
  std::optional<FitResult> fit;
  std::string error;
};

struct T1Map {
  /// Sorted by field.
  std::vector<T1MapEntry> entries;
};

/// Fits every curve; failures are kept as entries with an error message.
T1Map build_t1_map(const std::vector<double>& fields_T, const std::vector<DecayCurve>& curves,
                   DecayModel model = DecayModel::Monoexponential);

/// Field where the fitted T1 crosses the midpoint of its range, by linear
/// interpolation in log B. Empty when fewer than two fits succeeded.
std::optional<double> knee_field(const T1Map& map);

void write_curve_csv(std::ostream& out, const DecayCurve& curve);
DecayCurve read_curve_csv(std::istream& in);
void write_t1_map_csv(std::ostream& out, const T1Map& map);

}  // namespace fieldcycle
