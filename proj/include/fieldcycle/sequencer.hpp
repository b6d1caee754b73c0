#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fieldcycle/fieldmap.hpp"
#include "fieldcycle/motion.hpp"

namespace fieldcycle {

enum class ChannelId {
  PulseGen,
  ServoTrigger,
  ActuatorMotion,
  CompletionPulse,
  NmrAcquire,
  Laser,
  MwSweep,
  CryoFillValve,
  CryoEjectValve,
};

inline constexpr std::size_t kChannelCount = 9;

std::string_view to_string(ChannelId id) noexcept;
std::optional<ChannelId> channel_from_string(std::string_view name) noexcept;

/// Fixed propagation delay per channel, in seconds.
class ChannelLatencies {
 public:
  double operator[](ChannelId id) const noexcept { return values_[static_cast<std::size_t>(id)]; }
  double& operator[](ChannelId id) noexcept { return values_[static_cast<std::size_t>(id)]; }

 private:
  std::array<double, kChannelCount> values_{};
};

/// Electrical stages between the pulse generator and the actuator, each a
/// pure delay. The servo_trigger channel latency is inverter + switch; the
/// completion pulse passes through the divider.
struct TriggerChain {
  double inverter_s = 0.0;
  double switch_s = 0.0;
  double divider_s = 0.0;

  double trigger_latency_s() const noexcept { return inverter_s + switch_s; }
  double total_s() const noexcept { return inverter_s + switch_s + divider_s; }
};

struct SweepBand {
  double f_lo_Hz = 0.0;
  double f_hi_Hz = 0.0;
};

struct MotionRef {
  int profile_id = 0;
};

using EventPayload = std::variant<std::monostate, SweepBand, MotionRef>;

/// The event starts `lag_s` after the referenced event's end has propagated
/// through that event's channel latency.
struct Dependency {
  int event_id = 0;
  double lag_s = 0.0;
};

struct Event {
  int id = 0;
  ChannelId channel = ChannelId::PulseGen;
  std::string name;
  /// Commanded start; realized start adds the channel latency and slip.
  double t_start_s = 0.0;
  double duration_s = 0.0;
  std::optional<Dependency> after;
  EventPayload payload;

  double t_end_s() const noexcept { return t_start_s + duration_s; }
};

struct Timeline {
  std::vector<Event> events;
  std::map<int, MotionProfile> profiles;
  ChannelLatencies latencies;
  TriggerChain chain;
  /// Sample position before the first motion event.
  double sample_start_z_m = kDefaultShuttleDistance_m;
  double low_field_max_T = 0.030;
  /// Set for cryogenic timelines: the sample counts as frozen this long after
  /// the eject valve opens.
  std::optional<double> sample_cold_delay_s;

  const Event* find(int id) const noexcept;
  /// Sample axial position at time t implied by the actuator events.
  double sample_position(double t_s) const;
};

enum class ExperimentKind { Dnp, CryoDnp };

struct SequenceSpec {
  ExperimentKind kind = ExperimentKind::Dnp;
  double t_pol_s = 40.0;
  SweepBand mw_band{2.6e9, 3.0e9};
  /// Defaults to the canonical 8 mT -> 7 T shuttle at full limits.
  std::optional<MotionProfile> shuttle;
  double trigger_pulse_s = 0.010;
  double completion_pulse_s = 0.010;
  double acquire_delay_s = 1e-3;
  double acquire_duration_s = 0.1;
  double eject_duration_s = 1.0;
  double fill_duration_s = 1.0;
  double cold_delay_s = 3.5;
  double low_field_max_T = 0.030;
  TriggerChain chain;
  /// Per-channel latencies; the servo_trigger and completion_pulse entries are
  /// derived from the chain and ignored here.
  ChannelLatencies latencies = default_latencies();

  static ChannelLatencies default_latencies() noexcept;
};

/// Lays out the canonical event sequence without checking it.
Timeline assemble_timeline(const SequenceSpec& spec);

/// Builds and checks the canonical event sequence for the spec. Throws
/// SpecInvalid on negative durations or any violated timeline invariant.
Timeline build_timeline(const SequenceSpec& spec, const FieldMap& map = canonical_field_map());

struct Violation {
  std::string code;
  std::vector<int> event_ids;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  bool has(std::string_view code) const noexcept;
};

inline constexpr double kMaxValveLatency_s = 1e-3;

ValidationReport validate(const Timeline& timeline, const FieldMap& map = canonical_field_map());

struct LogRow {
  std::int64_t run_id = 0;
  ChannelId channel = ChannelId::PulseGen;
  std::string event;
  double t_nominal_s = 0.0;
  double t_realized_s = 0.0;
  double duration_s = 0.0;
};

struct EventLog {
  std::int64_t run_id = 0;
  double chain_latency_s = 0.0;
  /// Ordered by realized start.
  std::vector<LogRow> rows;

  const LogRow* find(std::string_view event) const noexcept;
};

/// Realized start = nominal + channel latency + accumulated slip from jittered
/// actuator moves upstream; actuator durations draw from (seed, run, index).
EventLog simulate(const Timeline& timeline, const JitterModel& jitter, std::int64_t run_id = 0);
std::vector<EventLog> simulate_runs(const Timeline& timeline, const JitterModel& jitter, std::int64_t runs);

void write_event_log_csv(std::ostream& out, const std::vector<EventLog>& logs);

}  // namespace fieldcycle
