#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fieldcycle/errors.hpp"
#include "fieldcycle/fieldmap.hpp"
#include "fieldcycle/motion.hpp"
#include "fieldcycle/relaxometry.hpp"
#include "fieldcycle/sequencer.hpp"
#include "fieldcycle/spin.hpp"

namespace fieldcycle {

enum class RunKind { ShuttleCharacterization, LacPlan, DnpSweep, T1FieldMap, SequenceValidation };

std::string_view to_string(RunKind kind) noexcept;

struct FieldMapSource {
  /// "canonical", an anchor CSV path or a field-map JSON path.
  std::string origin = "canonical";
  FieldModelKind model = FieldModelKind::FiniteSolenoid;
  std::vector<FieldAnchor> anchors = canonical_anchors();
  /// Set when the map was loaded from a saved document.
  std::optional<nlohmann::json> document;

  FieldMap resolve() const;
};

struct ShuttleBlock {
  double distance_m = kDefaultShuttleDistance_m;
  std::vector<double> velocities_mps{0.5, 1.0, 1.5, 2.0};
  double jitter_sigma_s = 2.6e-3;
  std::int64_t trials = 1400;
  double dt_s = 1e-3;
};

struct LacTarget {
  std::string name;
  double field_T = 0.0;
};

struct LacBlock {
  std::vector<LacTarget> targets{{"ESLAC", 0.051}, {"GSLAC", 0.102}};
};

struct DnpBlock {
  SpinSystem system{1e6, 0.0, 10e-3};
  SweepParams sweep;
  int nodes = 16;
  SweepMethod method = SweepMethod::Propagation;
};

struct T1Block {
  std::vector<double> fields_T{8e-3, 0.1, 0.5, 1.0, 7.0};
  RelaxationModel model;
  RelaxometryProtocol protocol;
  /// Used when protocol.T_relax_list_s is empty: evenly spaced waits over
  /// [0, span x T1(B)] per field.
  int wait_count = 128;
  double wait_span_T1 = 2.0;
  /// Signal-to-noise ratio against the zero-wait signal; 0 disables noise.
  double snr = 0.0;
  DecayModel fit_model = DecayModel::Monoexponential;
};

struct SequenceBlock {
  SequenceSpec spec;
  double shuttle_distance_m = kDefaultShuttleDistance_m;
  std::optional<double> shuttle_velocity_mps;
  double jitter_sigma_s = 2.6e-3;
  std::int64_t runs = 0;
};

struct ExperimentSpec {
  int schema_version = 1;
  RunKind kind = RunKind::ShuttleCharacterization;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "fieldcycle_out";
  FieldMapSource field_map;
  MotionLimits motion;
  ShuttleBlock shuttle;
  LacBlock lac;
  DnpBlock dnp;
  T1Block t1;
  SequenceBlock sequence;
  /// The document as given, used for the spec hash.
  nlohmann::json document;
};

/// Parses and validates a JSON spec. Relative paths resolve against
/// `base_dir`. Errors carry a JSON path or line number.
ExperimentSpec parse_spec(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentSpec load_spec(const std::filesystem::path& file);

/// Every setting after defaults and file references are applied.
nlohmann::json resolved_config(const ExperimentSpec& spec);

/// FNV-1a over the key-sorted compact dump; independent of key order.
std::string spec_hash(const nlohmann::json& document);
/// Per-module stream: seed XOR FNV-1a(module tag).
std::uint64_t module_seed(std::uint64_t seed, std::string_view module) noexcept;

struct ManifestEntry {
  std::string file;
  std::uint64_t bytes = 0;
  std::string fnv1a64;
};

enum class RunStatus { Succeeded, Violations, Failed };

struct RunRecord {
  std::string spec_hash;
  std::string tool_version;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  RunStatus status = RunStatus::Failed;
  std::optional<ErrorKind> error_kind;
  std::string error_message;
  nlohmann::json config;
  nlohmann::json summary = nlohmann::json::object();
  std::vector<ManifestEntry> manifest;

  nlohmann::json to_json() const;
  /// 0 success, 2 violations, 3 spec error, 4 numerical failure.
  int exit_code() const noexcept;
};

std::string_view tool_version() noexcept;

/// Runs the experiment, writes result files and run_record.json into the
/// output directory. Module errors are captured in the record, not thrown.
RunRecord run(const ExperimentSpec& spec);

/// Writes via a temporary file and rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// UTC ISO-8601 timestamp; SOURCE_DATE_EPOCH overrides the clock.
std::string timestamp_now();

}  // namespace fieldcycle
