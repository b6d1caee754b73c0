#include "fieldcycle/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <set>

#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/parallel.hpp"

namespace fieldcycle {

namespace {

constexpr std::array<std::string_view, kChannelCount> kChannelNames{
    "pulse_gen", "servo_trigger", "actuator_motion", "completion_pulse", "nmr_acquire",
    "laser",     "mw_sweep",      "cryo_fill_valve", "cryo_eject_valve",
};

constexpr double kTimeSlack_s = 1e-12;

bool is_optical(ChannelId c) { return c == ChannelId::Laser || c == ChannelId::MwSweep; }
bool is_valve(ChannelId c) { return c == ChannelId::CryoFillValve || c == ChannelId::CryoEjectValve; }

}  // namespace

std::string_view to_string(ChannelId id) noexcept { return kChannelNames[static_cast<std::size_t>(id)]; }

std::optional<ChannelId> channel_from_string(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kChannelCount; ++i) {
    if (kChannelNames[i] == name) return static_cast<ChannelId>(i);
  }
  return std::nullopt;
}

ChannelLatencies SequenceSpec::default_latencies() noexcept {
  ChannelLatencies l;
  l[ChannelId::CryoFillValve] = 1e-3;
  l[ChannelId::CryoEjectValve] = 1e-3;
  return l;
}

const Event* Timeline::find(int id) const noexcept {
  const auto it = std::find_if(events.begin(), events.end(), [id](const Event& e) { return e.id == id; });
  return it == events.end() ? nullptr : &*it;
}

double Timeline::sample_position(double t_s) const {
  double z = sample_start_z_m;
  for (const auto& e : events) {
    if (e.channel != ChannelId::ActuatorMotion) continue;
    const auto* ref = std::get_if<MotionRef>(&e.payload);
    if (!ref) continue;
    const auto it = profiles.find(ref->profile_id);
    if (it == profiles.end()) continue;
    if (t_s < e.t_start_s) return z;
    if (t_s <= e.t_end_s()) return it->second.state_at(t_s - e.t_start_s).z_m;
    z = it->second.z_end_m();
  }
  return z;
}

bool ValidationReport::has(std::string_view code) const noexcept {
  return std::any_of(violations.begin(), violations.end(), [&](const Violation& v) { return v.code == code; });
}

const LogRow* EventLog::find(std::string_view event) const noexcept {
  const auto it = std::find_if(rows.begin(), rows.end(), [&](const LogRow& r) { return r.event == event; });
  return it == rows.end() ? nullptr : &*it;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

Timeline assemble_timeline(const SequenceSpec& spec) {
  for (double d : {spec.t_pol_s, spec.trigger_pulse_s, spec.completion_pulse_s, spec.acquire_delay_s,
                   spec.acquire_duration_s, spec.eject_duration_s, spec.fill_duration_s, spec.cold_delay_s}) {
    if (!(d >= 0.0)) throw Error(ErrorKind::SpecInvalid, "sequence durations and delays must be non-negative");
  }
  for (std::size_t i = 0; i < kChannelCount; ++i) {
    if (!(spec.latencies[static_cast<ChannelId>(i)] >= 0.0)) {
      throw Error(ErrorKind::SpecInvalid, "channel latencies must be non-negative");
    }
  }
  if (!(spec.chain.inverter_s >= 0.0 && spec.chain.switch_s >= 0.0 && spec.chain.divider_s >= 0.0)) {
    throw Error(ErrorKind::SpecInvalid, "trigger chain latencies must be non-negative");
  }

  Timeline tl;
  tl.latencies = spec.latencies;
  tl.latencies[ChannelId::ServoTrigger] = spec.chain.trigger_latency_s();
  tl.latencies[ChannelId::CompletionPulse] = spec.chain.divider_s;
  tl.chain = spec.chain;
  tl.low_field_max_T = spec.low_field_max_T;

  const auto shuttle = spec.shuttle.value_or(plan_move(kDefaultShuttleDistance_m, 0.0));
  tl.profiles.emplace(0, shuttle);
  tl.sample_start_z_m = shuttle.z_start_m;

  int next_id = 0;
  const auto add = [&](ChannelId channel, std::string name, double start, double duration,
                       std::optional<Dependency> after = {}, EventPayload payload = {}) {
    Event e{next_id++, channel, std::move(name), start, duration, after, payload};
    if (after) {
      const auto& dep = tl.events.at(static_cast<std::size_t>(after->event_id));
      e.t_start_s = dep.t_end_s() + tl.latencies[dep.channel] + after->lag_s;
    }
    tl.events.push_back(std::move(e));
    return tl.events.back().id;
  };

  const int epoch = add(ChannelId::PulseGen, "epoch", 0.0, 0.0);
  double optical_start = 0.0;
  if (spec.kind == ExperimentKind::CryoDnp) {
    const int eject = add(ChannelId::CryoEjectValve, "ln2_eject", 0.0, spec.eject_duration_s, Dependency{epoch, 0.0});
    add(ChannelId::CryoFillValve, "dewar_refill", 0.0, spec.fill_duration_s, Dependency{eject, 0.0});
    tl.sample_cold_delay_s = spec.cold_delay_s;
    const auto& e = tl.events.at(static_cast<std::size_t>(eject));
    optical_start = e.t_start_s + tl.latencies[e.channel] + spec.cold_delay_s;
  }

  int trigger_source = epoch;
  if (spec.t_pol_s > 0.0) {
    trigger_source = add(ChannelId::Laser, "optical_pumping", optical_start, spec.t_pol_s);
    add(ChannelId::MwSweep, "mw_sweep", optical_start, spec.t_pol_s, {}, spec.mw_band);
  }
  const int edge = add(ChannelId::PulseGen, "shuttle_trigger", 0.0, 0.0, Dependency{trigger_source, 0.0});
  const int servo = add(ChannelId::ServoTrigger, "servo_trigger", 0.0, spec.trigger_pulse_s, Dependency{edge, 0.0});
  const int motion = add(ChannelId::ActuatorMotion, "shuttle", 0.0, shuttle.total_duration_s,
                         Dependency{servo, 0.0}, MotionRef{0});
  const int done = add(ChannelId::CompletionPulse, "motion_complete", 0.0, spec.completion_pulse_s,
                       Dependency{motion, 0.0});
  add(ChannelId::NmrAcquire, "acquire", 0.0, spec.acquire_duration_s, Dependency{done, spec.acquire_delay_s});

  std::stable_sort(tl.events.begin(), tl.events.end(),
                   [](const Event& a, const Event& b) { return a.t_start_s < b.t_start_s; });
  return tl;
}

Timeline build_timeline(const SequenceSpec& spec, const FieldMap& map) {
  auto tl = assemble_timeline(spec);
  const auto report = validate(tl, map);
  if (!report.ok()) {
    const auto& v = report.violations.front();
    throw Error(ErrorKind::SpecInvalid, "timeline violates " + v.code + ": " + v.detail);
  }
  return tl;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

ValidationReport validate(const Timeline& tl, const FieldMap& map) {
  ValidationReport report;
  const auto flag = [&](std::string code, std::vector<int> ids, std::string detail) {
    report.violations.push_back({std::move(code), std::move(ids), std::move(detail)});
  };

  std::set<int> ids;
  for (std::size_t i = 0; i < tl.events.size(); ++i) {
    const auto& e = tl.events[i];
    if (!ids.insert(e.id).second) flag("unordered_events", {e.id}, "duplicate event id");
    if (!(e.duration_s >= 0.0)) flag("negative_duration", {e.id}, e.name + " has negative duration");
    if (i > 0 && e.t_start_s < tl.events[i - 1].t_start_s) {
      flag("unordered_events", {tl.events[i - 1].id, e.id}, e.name + " listed after a later event");
    }
    if (e.after) {
      const auto* dep = tl.find(e.after->event_id);
      if (!dep) {
        flag("unordered_events", {e.id}, e.name + " depends on a missing event");
      } else if (e.after->lag_s < 0.0 ||
                 e.t_start_s + kTimeSlack_s < dep->t_end_s() + tl.latencies[dep->channel] + e.after->lag_s) {
        flag("unordered_events", {dep->id, e.id}, e.name + " starts before its dependency has completed");
      }
    }
  }

  for (std::size_t c = 0; c < kChannelCount; ++c) {
    const auto channel = static_cast<ChannelId>(c);
    if (is_valve(channel) && tl.latencies[channel] > kMaxValveLatency_s) {
      std::vector<int> offending;
      for (const auto& e : tl.events) {
        if (e.channel == channel) offending.push_back(e.id);
      }
      if (!offending.empty()) {
        flag("valve_latency_exceeded", offending,
             std::string(to_string(channel)) + " latency " + format_double(tl.latencies[channel]) + " s");
      }
    }
  }

  std::vector<const Event*> motions;
  std::vector<const Event*> completions;
  for (const auto& e : tl.events) {
    if (e.channel == ChannelId::ActuatorMotion) {
      motions.push_back(&e);
      const auto* ref = std::get_if<MotionRef>(&e.payload);
      const auto it = ref ? tl.profiles.find(ref->profile_id) : tl.profiles.end();
      if (it == tl.profiles.end()) {
        flag("missing_motion_profile", {e.id}, e.name + " has no linked motion profile");
      } else if (std::abs(it->second.total_duration_s - e.duration_s) > 1e-9) {
        flag("missing_motion_profile", {e.id}, e.name + " duration differs from its profile");
      }
    }
    if (e.channel == ChannelId::CompletionPulse) completions.push_back(&e);
  }

  for (const auto& a : tl.events) {
    if (a.channel != ChannelId::NmrAcquire) continue;
    for (const auto* m : motions) {
      if (a.t_start_s < m->t_end_s() && m->t_start_s < a.t_end_s()) {
        flag("acquire_during_motion", {m->id, a.id}, a.name + " overlaps " + m->name);
      }
    }
    const Event* last_completion = nullptr;
    for (const auto* c : completions) {
      if (c->t_start_s <= a.t_start_s) last_completion = c;
    }
    const bool moved_before = std::any_of(motions.begin(), motions.end(),
                                          [&](const Event* m) { return m->t_start_s <= a.t_start_s; });
    if (last_completion) {
      const double ready = last_completion->t_end_s() + tl.latencies[last_completion->channel];
      if (!(a.t_start_s > ready)) {
        flag("acquire_before_completion", {last_completion->id, a.id},
             a.name + " does not start strictly after the completion pulse");
      }
    } else if (moved_before) {
      flag("acquire_before_completion", {a.id}, a.name + " has no completion pulse before it");
    }
  }

  const Event* eject = nullptr;
  for (const auto& e : tl.events) {
    if (e.channel == ChannelId::CryoEjectValve) {
      eject = &e;
      break;
    }
  }

  for (const auto& e : tl.events) {
    if (!is_optical(e.channel)) continue;
    // Fine sampling plus both endpoints; moves are monotone so this catches
    // any excursion longer than a sampling step.
    constexpr int kSamples = 256;
    for (int k = 0; k <= kSamples; ++k) {
      const double t = e.t_start_s + e.duration_s * k / kSamples;
      const double z = tl.sample_position(t);
      bool outside = !map.domain().contains(z);
      if (!outside) outside = map.field_at(z) > tl.low_field_max_T * (1.0 + 1e-12);
      if (outside) {
        flag("optical_outside_shield", {e.id},
             e.name + " active at z = " + format_double(z) + " m, t = " + format_double(t) + " s");
        break;
      }
    }
    if (tl.sample_cold_delay_s) {
      if (!eject) {
        flag("optical_before_sample_cold", {e.id}, "cryogenic timeline without an eject valve event");
      } else {
        const double cold = eject->t_start_s + tl.latencies[eject->channel] + *tl.sample_cold_delay_s;
        if (e.t_start_s + kTimeSlack_s < cold) {
          flag("optical_before_sample_cold", {eject->id, e.id}, e.name + " starts before the sample is frozen");
        }
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

EventLog simulate(const Timeline& tl, const JitterModel& jitter, std::int64_t run_id) {
  jitter.validate();
  // Only actuator moves carry jitter; delays propagate to dependents as slip.
  std::map<int, double> extra;
  std::uint64_t draw = 0;
  for (const auto& e : tl.events) {
    if (e.channel != ChannelId::ActuatorMotion) continue;
    const auto index = static_cast<std::uint64_t>(run_id) * 64u + draw++;
    extra[e.id] = apply_jitter(e.duration_s, jitter, index) - e.duration_s;
  }

  std::map<int, double> slip;
  std::function<double(const Event&)> slip_of = [&](const Event& e) -> double {
    if (const auto it = slip.find(e.id); it != slip.end()) return it->second;
    double s = 0.0;
    if (e.after) {
      if (const auto* dep = tl.find(e.after->event_id)) {
        s = slip_of(*dep);
        if (const auto x = extra.find(dep->id); x != extra.end()) s += x->second;
      }
    }
    slip[e.id] = s;
    return s;
  };

  EventLog log;
  log.run_id = run_id;
  log.chain_latency_s = tl.chain.total_s();
  for (const auto& e : tl.events) {
    const double realized = e.t_start_s + tl.latencies[e.channel] + slip_of(e);
    const auto x = extra.find(e.id);
    log.rows.push_back({run_id, e.channel, e.name, e.t_start_s, realized,
                        e.duration_s + (x == extra.end() ? 0.0 : x->second)});
  }
  if (tl.sample_cold_delay_s) {
    for (const auto& e : tl.events) {
      if (e.channel != ChannelId::CryoEjectValve) continue;
      const double realized = e.t_start_s + tl.latencies[e.channel] + slip_of(e);
      log.rows.push_back({run_id, e.channel, "sample_cold", e.t_start_s + *tl.sample_cold_delay_s,
                          realized + *tl.sample_cold_delay_s, 0.0});
      break;
    }
  }
  std::stable_sort(log.rows.begin(), log.rows.end(),
                   [](const LogRow& a, const LogRow& b) { return a.t_realized_s < b.t_realized_s; });
  return log;
}

std::vector<EventLog> simulate_runs(const Timeline& tl, const JitterModel& jitter, std::int64_t runs) {
  if (runs < 0) throw Error(ErrorKind::InvalidTarget, "run count must be non-negative");
  std::vector<EventLog> logs(static_cast<std::size_t>(runs));
  parallel_for(logs.size(), [&](std::size_t i) { logs[i] = simulate(tl, jitter, static_cast<std::int64_t>(i)); });
  return logs;
}

void write_event_log_csv(std::ostream& out, const std::vector<EventLog>& logs) {
  if (!logs.empty()) out << "# chain_latency_s=" << format_double(logs.front().chain_latency_s) << '\n';
  CsvWriter csv(out, {"run_id", "channel", "event", "t_nominal_s", "t_realized_s", "duration_s"});
  for (const auto& log : logs) {
    for (const auto& r : log.rows) {
      csv.cell(r.run_id).cell(to_string(r.channel)).cell(r.event).cell(r.t_nominal_s).cell(r.t_realized_s)
          .cell(r.duration_s);
      csv.end_row();
    }
  }
}

}  // namespace fieldcycle
