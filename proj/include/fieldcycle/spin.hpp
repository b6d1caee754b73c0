#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <vector>

#include <Eigen/Core>

namespace fieldcycle {

struct SpinConstants {
  double gamma_e_Hz_per_T = 28.024e9;
  double gamma_n_Hz_per_T = 10.7084e6;
  double delta_zfs_Hz = 2.87e9;
  double planck_J_s = 6.62607015e-34;
  double boltzmann_J_per_K = 1.380649e-23;

  void validate() const;
};

/// NV electron restricted to {ms=0, ms=-1} coupled to one 13C spin. The
/// field makes angle theta with the NV axis.
struct SpinSystem {
  double A_Hz = 1e6;
  double theta_rad = 0.0;
  double B_pol_T = 10e-3;

  bool low_field(const SpinConstants& c = {}) const noexcept;
  void validate() const;
};

struct SweepParams {
  /// Defaults to delta_zfs - gamma_e B / 2, the middle of the orientation spread.
  std::optional<double> band_center_Hz;
  double band_width_Hz = 400e6;
  /// Signed; positive sweeps upward in frequency.
  double sweep_rate_Hz_per_s = 4e11;
  double mw_rabi_Hz = 0.3e6;
  int n_sweeps = 1;
  /// Fraction of ms=-1 population returned to ms=0 between sweeps.
  double repolarization_fidelity = 1.0;
  /// Bound on the per-step phase ||H|| * 2 pi * dt of the propagator.
  double max_phase_step = 1e-2;
  /// Detuning propagated on each side of the outermost crossings; defaults
  /// to 20 x max(rabi, sqrt|rate|).
  std::optional<double> window_margin_Hz;

  void validate() const;
  double center(const SpinSystem& sys, const SpinConstants& c) const;
};

using Matrix4 = Eigen::Matrix4d;

/// Static Hamiltonian in Hz on the basis |ms> x |mI> ordered
/// (0,up), (0,down), (-1,up), (-1,down); quantization along the NV axis.
Matrix4 static_hamiltonian(const SpinSystem& sys, const SpinConstants& c = {});

/// Eigenstates of the static Hamiltonian. Indices 0, 1 are the ms=0 manifold
/// (alpha), 2, 3 the ms=-1 manifold (beta), each in ascending energy.
struct DressedLevels {
  std::array<double, 4> energy_Hz{};
  Matrix4 vectors = Matrix4::Zero();
  /// Alpha state whose nuclear spin points along the field.
  int alpha_up = 0;
  /// <beta_j| X_e |alpha_i> as (j, i).
  Eigen::Matrix2d coupling = Eigen::Matrix2d::Zero();
};

DressedLevels dressed_levels(const SpinSystem& sys, const SpinConstants& c = {});

/// Exact nuclear splitting of the ms=0 manifold.
double ms0_splitting(const SpinSystem& sys, const SpinConstants& c = {});

/// Second-order hyperfine-shifted Larmor frequency
/// gamma_n B + gamma_e B A sin(theta) / (delta - gamma_e B cos(theta)).
double shifted_larmor(const SpinSystem& sys, const SpinConstants& c = {});

inline constexpr double kDivergenceGuard_Hz = 1e6;

/// Diabatic passage probability exp(-2 pi gap^2 / |rate|), with gap the
/// off-diagonal coupling and rate the sweep rate of the diabatic energy
/// difference in matching angular units (rad/s and rad/s^2).
double lz_probability(double gap, double rate);

struct LevelCrossing {
  double frequency_Hz = 0.0;
  int alpha = 0;
  int beta = 0;
  /// |<beta|X_e|alpha>|; the avoided-crossing gap is rabi * coupling.
  double coupling = 0.0;
};

/// Rotating-frame crossings inside the sweep band, in sweep order.
std::vector<LevelCrossing> band_crossings(const DressedLevels& levels, const SpinSystem& sys,
                                          const SweepParams& sweep, const SpinConstants& c = {});

struct SweepResult {
  double polarization = 0.0;
  /// Column-stochastic single-sweep population map on (a0, a1, b0, b1).
  Eigen::Matrix4d transfer = Eigen::Matrix4d::Identity();
  double norm_drift = 0.0;
  long steps = 0;
};

/// Time-dependent propagation of one chirped sweep, repeated n_sweeps times
/// with electron repolarization in between. Starts from ms=0 with an
/// unpolarized nucleus. Throws StepTooCoarse if unitarity drifts by more
/// than 1e-9.
SweepResult propagate_sweep(const SpinSystem& sys, const SweepParams& sweep, const SpinConstants& c = {});

/// Same protocol with each crossing replaced by an independent two-level
/// Landau-Zener passage.
SweepResult compose_crossings(const SpinSystem& sys, const SweepParams& sweep, const SpinConstants& c = {});

/// Orientation nodes in theta over [0, pi/2] with sin(theta) weights summing to 1.
struct PowderEnsemble {
  std::vector<double> theta_rad;
  std::vector<double> weight;

  /// Gauss-Legendre in cos(theta).
  static PowderEnsemble gauss_legendre(int nodes);
  static PowderEnsemble single(double theta_rad);
  void validate() const;
};

struct OrientationResult {
  double theta_rad = 0.0;
  double weight = 0.0;
  double polarization = 0.0;
};

struct PowderResult {
  double mean_polarization = 0.0;
  std::vector<OrientationResult> orientations;

  /// True when every orientation with theta in [theta_min, theta_max] has
  /// the same non-zero sign.
  bool sign_uniform(double theta_min_rad = 0.0, double theta_max_rad = 10.0) const noexcept;
};

enum class SweepMethod { Propagation, LandauZener };

PowderResult powder_average(const SpinSystem& tmpl, const SweepParams& sweep, const PowderEnsemble& ensemble,
                            const SpinConstants& c = {}, SweepMethod method = SweepMethod::Propagation);

/// tanh(h gamma_n B / 2 k T).
double boltzmann_polarization(double B_T, double T_K, const SpinConstants& c = {});

/// Field whose thermal polarization equals epsilon times that at B_ref.
/// Throws NonlinearRegime once the tanh argument exceeds 0.1.
double enhancement_to_equivalent_field(double epsilon, double B_ref_T, double T_K = 298.0,
                                       const SpinConstants& c = {});

/// (B2 / B1)^(7/4).
double snr_field_scaling(double B1_T, double B2_T);

void write_powder_csv(std::ostream& out, const PowderResult& result);

}  // namespace fieldcycle
