#include "fieldcycle/spin.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>

#include <Eigen/Eigenvalues>

#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/parallel.hpp"

namespace fieldcycle {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kNormTolerance = 1e-9;

using Matrix2 = Eigen::Matrix2d;
using Complex = std::complex<double>;
using Matrix4c = Eigen::Matrix4cd;

Matrix4 kron(const Matrix2& a, const Matrix2& b) {
  Matrix4 out;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) out.block<2, 2>(2 * i, 2 * j) = a(i, j) * b;
  }
  return out;
}

const Matrix2 kIx = (Matrix2() << 0.0, 0.5, 0.5, 0.0).finished();
const Matrix2 kIz = (Matrix2() << 0.5, 0.0, 0.0, -0.5).finished();
const Matrix2 kPauliX = (Matrix2() << 0.0, 1.0, 1.0, 0.0).finished();
const Matrix2 kMinusOne = (Matrix2() << 0.0, 0.0, 0.0, 1.0).finished();

Matrix2 nuclear_projection(double theta) { return std::cos(theta) * kIz + std::sin(theta) * kIx; }

}  // namespace

void SpinConstants::validate() const {
  if (!(gamma_e_Hz_per_T > 0.0 && gamma_n_Hz_per_T > 0.0 && delta_zfs_Hz > 0.0 && planck_J_s > 0.0 &&
        boltzmann_J_per_K > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "spin constants must be positive");
  }
}

bool SpinSystem::low_field(const SpinConstants& c) const noexcept {
  return c.gamma_n_Hz_per_T * B_pol_T <= std::abs(A_Hz);
}

void SpinSystem::validate() const {
  if (!(theta_rad >= 0.0 && theta_rad <= std::numbers::pi)) {
    throw Error(ErrorKind::SpecInvalid, "theta must lie in [0, pi]");
  }
  if (!(B_pol_T > 0.0)) throw Error(ErrorKind::SpecInvalid, "polarizing field must be positive");
  if (!std::isfinite(A_Hz)) throw Error(ErrorKind::SpecInvalid, "hyperfine coupling must be finite");
}

void SweepParams::validate() const {
  if (!(band_width_Hz > 0.0)) throw Error(ErrorKind::SpecInvalid, "band width must be positive");
  if (!(sweep_rate_Hz_per_s != 0.0) || !std::isfinite(sweep_rate_Hz_per_s)) {
    throw Error(ErrorKind::SpecInvalid, "sweep rate must be non-zero and finite");
  }
  if (!(mw_rabi_Hz >= 0.0)) throw Error(ErrorKind::SpecInvalid, "Rabi frequency must be non-negative");
  if (n_sweeps < 1) throw Error(ErrorKind::SpecInvalid, "at least one sweep is required");
  if (!(repolarization_fidelity >= 0.0 && repolarization_fidelity <= 1.0)) {
    throw Error(ErrorKind::SpecInvalid, "repolarization fidelity must lie in [0, 1]");
  }
  if (!(max_phase_step > 0.0)) throw Error(ErrorKind::SpecInvalid, "phase step bound must be positive");
  if (window_margin_Hz && !(*window_margin_Hz > 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "window margin must be positive");
  }
}

double SweepParams::center(const SpinSystem& sys, const SpinConstants& c) const {
  return band_center_Hz.value_or(c.delta_zfs_Hz - 0.5 * c.gamma_e_Hz_per_T * sys.B_pol_T);
}

// ---------------------------------------------------------------------------
// Static structure
// ---------------------------------------------------------------------------

Matrix4 static_hamiltonian(const SpinSystem& sys, const SpinConstants& c) {
  const double ge_b = c.gamma_e_Hz_per_T * sys.B_pol_T;
  const double larmor = c.gamma_n_Hz_per_T * sys.B_pol_T;
  const Matrix2 along_field = nuclear_projection(sys.theta_rad);
  const Matrix2 id = Matrix2::Identity();
  // The transverse field mixes ms=0 and ms=-1 through (S_x restricted)/sqrt2;
  // the hyperfine term keeps the secular part plus the same transverse mixing.
  return (c.delta_zfs_Hz - ge_b * std::cos(sys.theta_rad)) * kron(kMinusOne, id) +
         (ge_b * std::sin(sys.theta_rad) / std::numbers::sqrt2) * kron(kPauliX, id) -
         larmor * kron(id, along_field) +
         sys.A_Hz * (-kron(kMinusOne, kIz) + kron(kPauliX, along_field) / std::numbers::sqrt2);
}

DressedLevels dressed_levels(const SpinSystem& sys, const SpinConstants& c) {
  sys.validate();
  c.validate();
  const Eigen::SelfAdjointEigenSolver<Matrix4> solver(static_hamiltonian(sys, c));
  DressedLevels out;
  for (int i = 0; i < 4; ++i) out.energy_Hz[static_cast<std::size_t>(i)] = solver.eigenvalues()[i];
  out.vectors = solver.eigenvectors();
  for (int i = 0; i < 2; ++i) {
    const double ms0_weight = out.vectors.col(i).head<2>().squaredNorm();
    if (ms0_weight < 0.5) {
      throw Error(ErrorKind::InvalidTarget, "field too high: ms=0 is no longer the lowest manifold");
    }
  }
  const Matrix4 along = kron(Matrix2::Identity(), nuclear_projection(sys.theta_rad));
  const double p0 = out.vectors.col(0).dot(along * out.vectors.col(0));
  const double p1 = out.vectors.col(1).dot(along * out.vectors.col(1));
  out.alpha_up = p0 >= p1 ? 0 : 1;
  const Matrix4 x = out.vectors.transpose() * kron(kPauliX, Matrix2::Identity()) * out.vectors;
  out.coupling = x.block<2, 2>(2, 0);
  return out;
}

double ms0_splitting(const SpinSystem& sys, const SpinConstants& c) {
  const auto levels = dressed_levels(sys, c);
  return levels.energy_Hz[1] - levels.energy_Hz[0];
}

double shifted_larmor(const SpinSystem& sys, const SpinConstants& c) {
  sys.validate();
  const double ge_b = c.gamma_e_Hz_per_T * sys.B_pol_T;
  const double denominator = c.delta_zfs_Hz - ge_b * std::cos(sys.theta_rad);
  if (std::abs(denominator) < kDivergenceGuard_Hz) {
    throw Error(ErrorKind::NearDivergence, "operating point within " + format_double(kDivergenceGuard_Hz) +
                                               " Hz of the shifted-Larmor pole");
  }
  return c.gamma_n_Hz_per_T * sys.B_pol_T + ge_b * sys.A_Hz * std::sin(sys.theta_rad) / denominator;
}

double lz_probability(double gap, double rate) {
  if (!(rate != 0.0)) throw Error(ErrorKind::InvalidTarget, "Landau-Zener rate must be non-zero");
  if (std::isinf(rate)) return 1.0;
  return std::exp(-kTwoPi * gap * gap / std::abs(rate));
}

std::vector<LevelCrossing> band_crossings(const DressedLevels& levels, const SpinSystem& sys,
                                          const SweepParams& sweep, const SpinConstants& c) {
  const double center = sweep.center(sys, c);
  const double lo = center - 0.5 * sweep.band_width_Hz;
  const double hi = center + 0.5 * sweep.band_width_Hz;
  std::vector<LevelCrossing> out;
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      const double f = levels.energy_Hz[static_cast<std::size_t>(2 + j)] - levels.energy_Hz[static_cast<std::size_t>(i)];
      if (f >= lo && f <= hi) out.push_back({f, i, j, std::abs(levels.coupling(j, i))});
    }
  }
  const bool upward = sweep.sweep_rate_Hz_per_s > 0.0;
  std::sort(out.begin(), out.end(), [upward](const LevelCrossing& a, const LevelCrossing& b) {
    return upward ? a.frequency_Hz < b.frequency_Hz : a.frequency_Hz > b.frequency_Hz;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Sweep maps
// ---------------------------------------------------------------------------

namespace {

// Returns beta population to the ms=0 manifold: the nucleus keeps the state
// it had in the beta level, traced over the electron.
Eigen::Matrix4d repolarization_map(const DressedLevels& levels, double fidelity) {
  Eigen::Matrix4d r = Eigen::Matrix4d::Identity();
  std::array<Eigen::Vector2d, 2> alpha_nuclear;
  for (int k = 0; k < 2; ++k) alpha_nuclear[static_cast<std::size_t>(k)] = levels.vectors.col(k).head<2>().normalized();
  for (int j = 0; j < 2; ++j) {
    const Eigen::Vector4d beta = levels.vectors.col(2 + j);
    // Reduced nuclear density matrix of beta_j.
    const Eigen::Vector2d ms0 = beta.head<2>();
    const Eigen::Vector2d msm = beta.tail<2>();
    const Matrix2 rho = ms0 * ms0.transpose() + msm * msm.transpose();
    std::array<double, 2> w{};
    for (int k = 0; k < 2; ++k) {
      const auto& a = alpha_nuclear[static_cast<std::size_t>(k)];
      w[static_cast<std::size_t>(k)] = a.dot(rho * a);
    }
    const double total = w[0] + w[1];
    r(2 + j, 2 + j) = 1.0 - fidelity;
    for (int k = 0; k < 2; ++k) r(k, 2 + j) = fidelity * w[static_cast<std::size_t>(k)] / total;
  }
  return r;
}

SweepResult apply_protocol(const DressedLevels& levels, const SweepParams& sweep, Eigen::Matrix4d transfer) {
  const Eigen::Matrix4d step = repolarization_map(levels, sweep.repolarization_fidelity) * transfer;
  Eigen::Vector4d p(0.5, 0.5, 0.0, 0.0);
  for (int n = 0; n < sweep.n_sweeps; ++n) p = step * p;
  SweepResult out;
  const int up = levels.alpha_up;
  out.polarization = p[up] - p[1 - up];
  out.transfer = transfer;
  return out;
}

struct Window {
  double lo = 0.0;
  double hi = 0.0;
  double ramp = 0.0;
};

// Drive envelope: sin^2 turn-on and turn-off over `ramp` at both window ends.
double envelope(const Window& w, double f) {
  if (w.ramp <= 0.0) return 1.0;
  const double edge = std::min(f - w.lo, w.hi - f);
  if (edge >= w.ramp) return 1.0;
  if (edge <= 0.0) return 0.0;
  const double s = std::sin(0.5 * std::numbers::pi * edge / w.ramp);
  return s * s;
}

}  // namespace

SweepResult compose_crossings(const SpinSystem& sys, const SweepParams& sweep, const SpinConstants& c) {
  sweep.validate();
  const auto levels = dressed_levels(sys, c);
  Eigen::Matrix4d transfer = Eigen::Matrix4d::Identity();
  for (const auto& x : band_crossings(levels, sys, sweep, c)) {
    const double gap = std::numbers::pi * sweep.mw_rabi_Hz * x.coupling;
    const double p = lz_probability(gap, kTwoPi * sweep.sweep_rate_Hz_per_s);
    Eigen::Matrix4d swap = Eigen::Matrix4d::Identity();
    const int a = x.alpha;
    const int b = 2 + x.beta;
    swap(a, a) = p;
    swap(b, b) = p;
    swap(a, b) = 1.0 - p;
    swap(b, a) = 1.0 - p;
    transfer = swap * transfer;
  }
  return apply_protocol(levels, sweep, transfer);
}

SweepResult propagate_sweep(const SpinSystem& sys, const SweepParams& sweep, const SpinConstants& c) {
  sweep.validate();
  const auto levels = dressed_levels(sys, c);
  const auto crossings = band_crossings(levels, sys, sweep, c);
  if (crossings.empty() || sweep.mw_rabi_Hz == 0.0) {
    return apply_protocol(levels, sweep, Eigen::Matrix4d::Identity());
  }

  const double rate = sweep.sweep_rate_Hz_per_s;
  const double margin =
      sweep.window_margin_Hz.value_or(20.0 * std::max(sweep.mw_rabi_Hz, std::sqrt(std::abs(rate))));
  const double band_center = sweep.center(sys, c);
  double f_min = crossings.front().frequency_Hz;
  double f_max = f_min;
  for (const auto& x : crossings) {
    f_min = std::min(f_min, x.frequency_Hz);
    f_max = std::max(f_max, x.frequency_Hz);
  }
  Window w;
  w.lo = std::max(band_center - 0.5 * sweep.band_width_Hz, f_min - margin);
  w.hi = std::min(band_center + 0.5 * sweep.band_width_Hz, f_max + margin);
  // Keep the turn-on clear of the crossings when the band clips the window.
  w.ramp = std::min({0.5 * margin, 0.5 * (f_min - w.lo), 0.5 * (w.hi - f_max)});

  // Coupling block in singular-value form: exp of the off-diagonal part is
  // then closed form for any drive amplitude.
  const Eigen::JacobiSVD<Matrix2> svd(levels.coupling, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Matrix2 u_beta = svd.matrixU();
  const Matrix2 v_alpha = svd.matrixV();
  const Eigen::Vector2d sigma = svd.singularValues();

  // Traceless bound on ||H|| over the window; diagonal terms are linear in f
  // so their extremes sit at the window ends.
  const auto diagonal = [&](double f) {
    Eigen::Vector4d d(levels.energy_Hz[0], levels.energy_Hz[1], levels.energy_Hz[2] - f, levels.energy_Hz[3] - f);
    return d;
  };
  double h_bound = 0.0;
  for (double f : {w.lo, w.hi}) {
    const Eigen::Vector4d d = diagonal(f);
    h_bound = std::max(h_bound, (d.array() - d.mean()).abs().maxCoeff());
  }
  h_bound += 0.5 * sweep.mw_rabi_Hz * sigma[0];

  const double duration = (w.hi - w.lo) / std::abs(rate);
  const double dt_max = sweep.max_phase_step / (kTwoPi * h_bound);
  const long steps = static_cast<long>(std::ceil(duration / dt_max));
  const double dt = duration / static_cast<double>(steps);
  const double f_start = rate > 0.0 ? w.lo : w.hi;

  Matrix4c u = Matrix4c::Identity();
  Eigen::Vector4cd half_phase;
  Matrix4c coupling_step = Matrix4c::Zero();
  for (long k = 0; k < steps; ++k) {
    const double f_mid = f_start + rate * (static_cast<double>(k) + 0.5) * dt;
    const Eigen::Vector4d d = diagonal(f_mid);
    const double d_ref = d.mean();
    for (int i = 0; i < 4; ++i) half_phase[i] = std::polar(1.0, -0.5 * kTwoPi * (d[i] - d_ref) * dt);

    const double amplitude = 0.5 * sweep.mw_rabi_Hz * envelope(w, f_mid);
    Eigen::Vector2d cos_t;
    Eigen::Vector2d sin_t;
    for (int s = 0; s < 2; ++s) {
      const double angle = kTwoPi * dt * amplitude * sigma[s];
      cos_t[s] = std::cos(angle);
      sin_t[s] = std::sin(angle);
    }
    const Matrix2 aa = v_alpha * cos_t.asDiagonal() * v_alpha.transpose();
    const Matrix2 bb = u_beta * cos_t.asDiagonal() * u_beta.transpose();
    const Matrix2 ba = u_beta * sin_t.asDiagonal() * v_alpha.transpose();
    coupling_step.block<2, 2>(0, 0) = aa.cast<Complex>();
    coupling_step.block<2, 2>(2, 2) = bb.cast<Complex>();
    coupling_step.block<2, 2>(2, 0) = Complex(0.0, -1.0) * ba.cast<Complex>();
    coupling_step.block<2, 2>(0, 2) = Complex(0.0, -1.0) * ba.transpose().cast<Complex>();

    u = half_phase.asDiagonal() * u;
    u = coupling_step * u;
    u = half_phase.asDiagonal() * u;
  }

  double drift = 0.0;
  for (int i = 0; i < 4; ++i) drift = std::max(drift, std::abs(u.col(i).norm() - 1.0));
  if (drift > kNormTolerance) {
    throw Error(ErrorKind::StepTooCoarse, "norm drift " + format_double(drift) + " exceeds 1e-9");
  }
  // Coherences are discarded at the end of each sweep: only populations
  // survive the optical repolarization.
  const Eigen::Matrix4d transfer = u.cwiseAbs2();
  auto out = apply_protocol(levels, sweep, transfer);
  out.norm_drift = drift;
  out.steps = steps;
  return out;
}

// ---------------------------------------------------------------------------
// Orientation averaging
// ---------------------------------------------------------------------------

PowderEnsemble PowderEnsemble::gauss_legendre(int nodes) {
  if (nodes < 1) throw Error(ErrorKind::SpecInvalid, "quadrature needs at least one node");
  // Golub-Welsch on the Legendre Jacobi matrix, mapped from [-1, 1] to
  // cos(theta) in [0, 1].
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(nodes, nodes);
  for (int k = 1; k < nodes; ++k) {
    const double b = k / std::sqrt(4.0 * k * k - 1.0);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  PowderEnsemble e;
  for (int k = 0; k < nodes; ++k) {
    const double x = solver.eigenvalues()[k];
    const double v0 = solver.eigenvectors()(0, k);
    e.theta_rad.push_back(std::acos(0.5 * (x + 1.0)));
    e.weight.push_back(v0 * v0);
  }
  return e;
}

PowderEnsemble PowderEnsemble::single(double theta_rad) { return {{theta_rad}, {1.0}}; }

void PowderEnsemble::validate() const {
  if (theta_rad.empty() || theta_rad.size() != weight.size()) {
    throw Error(ErrorKind::SpecInvalid, "ensemble needs matching nodes and weights");
  }
  double sum = 0.0;
  for (double w : weight) {
    if (!(w >= 0.0)) throw Error(ErrorKind::SpecInvalid, "ensemble weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw Error(ErrorKind::SpecInvalid, "ensemble weights must sum to 1");
}

bool PowderResult::sign_uniform(double theta_min_rad, double theta_max_rad) const noexcept {
  int sign = 0;
  for (const auto& o : orientations) {
    if (o.theta_rad < theta_min_rad || o.theta_rad > theta_max_rad) continue;
    const int s = o.polarization > 0.0 ? 1 : (o.polarization < 0.0 ? -1 : 0);
    if (s == 0) return false;
    if (sign == 0) sign = s;
    if (s != sign) return false;
  }
  return sign != 0;
}

PowderResult powder_average(const SpinSystem& tmpl, const SweepParams& sweep, const PowderEnsemble& ensemble,
                            const SpinConstants& c, SweepMethod method) {
  ensemble.validate();
  PowderResult out;
  out.orientations.resize(ensemble.theta_rad.size());
  parallel_for(out.orientations.size(), [&](std::size_t i) {
    SpinSystem sys = tmpl;
    sys.theta_rad = ensemble.theta_rad[i];
    const auto r = method == SweepMethod::Propagation ? propagate_sweep(sys, sweep, c)
                                                      : compose_crossings(sys, sweep, c);
    out.orientations[i] = {sys.theta_rad, ensemble.weight[i], r.polarization};
  });
  for (const auto& o : out.orientations) out.mean_polarization += o.weight * o.polarization;
  return out;
}

// ---------------------------------------------------------------------------
// Thermal accounting
// ---------------------------------------------------------------------------

namespace {

double thermal_argument(double B_T, double T_K, const SpinConstants& c) {
  return c.planck_J_s * c.gamma_n_Hz_per_T * B_T / (2.0 * c.boltzmann_J_per_K * T_K);
}

}  // namespace

double boltzmann_polarization(double B_T, double T_K, const SpinConstants& c) {
  if (!(T_K > 0.0)) throw Error(ErrorKind::InvalidTarget, "temperature must be positive");
  return std::tanh(thermal_argument(B_T, T_K, c));
}

double enhancement_to_equivalent_field(double epsilon, double B_ref_T, double T_K, const SpinConstants& c) {
  if (!(epsilon > 0.0)) throw Error(ErrorKind::InvalidTarget, "enhancement must be positive");
  if (!(T_K > 0.0)) throw Error(ErrorKind::InvalidTarget, "temperature must be positive");
  const double equivalent = epsilon * B_ref_T;
  for (double b : {B_ref_T, equivalent}) {
    if (std::abs(thermal_argument(b, T_K, c)) > 0.1) {
      throw Error(ErrorKind::NonlinearRegime, format_double(b) + " T is outside the linear Boltzmann regime");
    }
  }
  return equivalent;
}

double snr_field_scaling(double B1_T, double B2_T) {
  if (!(B1_T > 0.0 && B2_T > 0.0)) throw Error(ErrorKind::InvalidTarget, "fields must be positive");
  return std::pow(B2_T / B1_T, 1.75);
}

void write_powder_csv(std::ostream& out, const PowderResult& result) {
  CsvWriter csv(out, {"theta_rad", "weight", "polarization"});
  for (const auto& o : result.orientations) {
    csv.cell(o.theta_rad).cell(o.weight).cell(o.polarization);
    csv.end_row();
  }
}

}  // namespace fieldcycle
