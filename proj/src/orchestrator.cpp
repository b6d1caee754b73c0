#include "fieldcycle/orchestrator.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "fieldcycle/io.hpp"
#include "fieldcycle/random.hpp"

namespace fieldcycle {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 5> kKindNames{
    "shuttle_characterization", "lac_plan", "dnp_sweep", "t1_field_map", "sequence_validation"};
constexpr std::array<std::string_view, 5> kKindBlocks{"shuttle", "lac", "dnp", "t1", "sequence"};

[[noreturn]] void schema_error(const std::string& path, const std::string& message) {
  throw Error(ErrorKind::SchemaViolation, path + ": " + message);
}

// Strict view of one JSON object: every key must be consumed, and type
// mismatches are reported with their path.
class Block {
 public:
  Block(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) schema_error(path_or_root(), "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string path(const char* key) const { return path_ + "/" + key; }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  double number(const char* key, double fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_number()) schema_error(path(key), "expected a number");
    return v->get<double>();
  }

  std::optional<double> optional_number(const char* key) {
    const json* v = child(key);
    if (!v || v->is_null()) return std::nullopt;
    if (!v->is_number()) schema_error(path(key), "expected a number");
    return v->get<double>();
  }

  std::int64_t integer(const char* key, std::int64_t fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_number_integer()) schema_error(path(key), "expected an integer");
    return v->get<std::int64_t>();
  }

  bool boolean(const char* key, bool fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_boolean()) schema_error(path(key), "expected true or false");
    return v->get<bool>();
  }

  std::string string(const char* key, std::string fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_string()) schema_error(path(key), "expected a string");
    return v->get<std::string>();
  }

  std::vector<double> numbers(const char* key, std::vector<double> fallback) {
    const json* v = child(key);
    if (!v) return fallback;
    if (!v->is_array()) schema_error(path(key), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_number()) schema_error(path(key) + "/" + std::to_string(i), "expected a number");
      out.push_back((*v)[i].get<double>());
    }
    return out;
  }

  std::optional<Block> object(const char* key) {
    const json* v = child(key);
    if (!v) return std::nullopt;
    return Block(*v, path(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) schema_error(path_ + "/" + key, "unknown key");
    }
  }

 private:
  std::string path_or_root() const { return path_.empty() ? "/" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum, std::size_t N>
Enum choice(Block& b, const char* key, Enum fallback, const std::array<std::pair<std::string_view, Enum>, N>& options) {
  if (!b.has(key)) {
    b.child(key);
    return fallback;
  }
  const auto value = b.string(key, "");
  for (const auto& [name, e] : options) {
    if (name == value) return e;
  }
  std::string allowed;
  for (const auto& [name, e] : options) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  schema_error(b.path(key), "'" + value + "' is not one of " + allowed);
}

constexpr std::array<std::pair<std::string_view, FieldModelKind>, 2> kModelNames{
    {{"finite_solenoid", FieldModelKind::FiniteSolenoid}, {"monotone_spline", FieldModelKind::MonotoneSpline}}};
constexpr std::array<std::pair<std::string_view, SweepMethod>, 2> kMethodNames{
    {{"propagation", SweepMethod::Propagation}, {"landau_zener", SweepMethod::LandauZener}}};
constexpr std::array<std::pair<std::string_view, DecayModel>, 2> kDecayNames{
    {{"monoexponential", DecayModel::Monoexponential}, {"stretched", DecayModel::Stretched}}};
constexpr std::array<std::pair<std::string_view, PolarizationSign>, 2> kSignNames{
    {{"aligned", PolarizationSign::Aligned}, {"anti_aligned", PolarizationSign::AntiAligned}}};
constexpr std::array<std::pair<std::string_view, ExperimentKind>, 2> kSequenceNames{
    {{"dnp", ExperimentKind::Dnp}, {"cryo_dnp", ExperimentKind::CryoDnp}}};

template <typename Enum, std::size_t N>
std::string name_of(Enum e, const std::array<std::pair<std::string_view, Enum>, N>& options) {
  for (const auto& [name, value] : options) {
    if (value == e) return std::string(name);
  }
  return {};
}

std::size_t line_of(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

FieldMapSource parse_field_map(Block b, const std::filesystem::path& base) {
  FieldMapSource src;
  const auto source = b.string("source", "canonical");
  src.model = choice(b, "model", FieldModelKind::FiniteSolenoid, kModelNames);
  const bool has_path = b.has("path");
  const auto path = b.string("path", "");
  if (source == "canonical") {
    if (has_path) schema_error(b.path("path"), "canonical field map takes no path");
  } else if (source == "anchors_csv" || source == "map_json") {
    if (!has_path) schema_error(b.path("path"), "required for source '" + source + "'");
    const auto file = resolve_path(base, path);
    src.origin = path;
    if (source == "anchors_csv") {
      std::ifstream in(file);
      if (!in) throw Error(ErrorKind::Io, "cannot open anchor file " + file.string());
      src.anchors = read_anchor_csv(in);
    } else {
      try {
        src.document = json::parse(read_text_file(file));
      } catch (const json::parse_error& e) {
        throw Error(ErrorKind::SchemaViolation, file.string() + ": " + e.what());
      }
      src.anchors.clear();
      (void)field_map_from_json(*src.document);
    }
  } else {
    schema_error(b.path("source"), "'" + source + "' is not one of canonical, anchors_csv, map_json");
  }
  b.finish();
  return src;
}

MotionLimits parse_motion(Block b) {
  MotionLimits m;
  m.v_max_mps = b.number("v_max_mps", m.v_max_mps);
  m.a_max_mps2 = b.number("a_max_mps2", m.a_max_mps2);
  m.precision_m = b.number("precision_m", m.precision_m);
  m.travel_range_m = b.number("travel_range_m", m.travel_range_m);
  b.finish();
  try {
    m.validate();
  } catch (const Error& e) {
    schema_error(b.path("").substr(0, b.path("").size() - 1), e.what());
  }
  return m;
}

ShuttleBlock parse_shuttle(Block b) {
  ShuttleBlock s;
  s.distance_m = b.number("distance_m", s.distance_m);
  s.velocities_mps = b.numbers("velocities_mps", s.velocities_mps);
  s.jitter_sigma_s = b.number("jitter_sigma_s", s.jitter_sigma_s);
  s.trials = b.integer("trials", s.trials);
  s.dt_s = b.number("dt_s", s.dt_s);
  b.finish();
  if (s.trials < 0) schema_error(b.path("trials"), "must be non-negative");
  if (!(s.dt_s > 0.0)) schema_error(b.path("dt_s"), "must be positive");
  if (!(s.jitter_sigma_s >= 0.0)) schema_error(b.path("jitter_sigma_s"), "must be non-negative");
  return s;
}

LacBlock parse_lac(Block b) {
  LacBlock l;
  if (const json* targets = b.child("targets")) {
    if (!targets->is_array()) schema_error(b.path("targets"), "expected an array");
    l.targets.clear();
    for (std::size_t i = 0; i < targets->size(); ++i) {
      Block t((*targets)[i], b.path("targets") + "/" + std::to_string(i));
      LacTarget target;
      target.field_T = t.number("field_T", 0.0);
      target.name = t.string("name", format_double(target.field_T) + " T");
      if (!t.has("field_T")) schema_error(t.path("field_T"), "required");
      t.finish();
      l.targets.push_back(target);
    }
  }
  b.finish();
  return l;
}

DnpBlock parse_dnp(Block b) {
  DnpBlock d;
  d.system.A_Hz = b.number("A_Hz", d.system.A_Hz);
  d.system.B_pol_T = b.number("B_pol_T", d.system.B_pol_T);
  d.sweep.band_center_Hz = b.optional_number("band_center_Hz");
  d.sweep.band_width_Hz = b.number("band_width_Hz", d.sweep.band_width_Hz);
  d.sweep.sweep_rate_Hz_per_s = b.number("sweep_rate_Hz_per_s", d.sweep.sweep_rate_Hz_per_s);
  d.sweep.mw_rabi_Hz = b.number("mw_rabi_Hz", d.sweep.mw_rabi_Hz);
  d.sweep.n_sweeps = static_cast<int>(b.integer("n_sweeps", d.sweep.n_sweeps));
  d.sweep.repolarization_fidelity = b.number("repolarization_fidelity", d.sweep.repolarization_fidelity);
  d.sweep.max_phase_step = b.number("max_phase_step", d.sweep.max_phase_step);
  d.nodes = static_cast<int>(b.integer("nodes", d.nodes));
  d.method = choice(b, "method", d.method, kMethodNames);
  b.finish();
  if (d.nodes < 8) schema_error(b.path("nodes"), "at least 8 quadrature nodes are required");
  try {
    d.sweep.validate();
    SpinSystem probe = d.system;
    probe.validate();
  } catch (const Error& e) {
    schema_error("/dnp", e.what());
  }
  return d;
}

T1Block parse_t1(Block b) {
  T1Block t;
  t.fields_T = b.numbers("fields_T", t.fields_T);
  t.protocol.B_pol_T = b.number("B_pol_T", t.protocol.B_pol_T);
  t.protocol.t_pol_s = b.number("t_pol_s", t.protocol.t_pol_s);
  t.protocol.detect_field_T = b.number("detect_field_T", t.protocol.detect_field_T);
  t.protocol.sign = choice(b, "sign", t.protocol.sign, kSignNames);
  t.protocol.stretch_beta = b.number("stretch_beta", t.protocol.stretch_beta);
  t.protocol.T_relax_list_s = b.numbers("waits_s", {});
  t.wait_count = static_cast<int>(b.integer("wait_count", t.wait_count));
  t.wait_span_T1 = b.number("wait_span_T1", t.wait_span_T1);
  t.snr = b.number("snr", t.snr);
  t.fit_model = choice(b, "fit_model", t.fit_model, kDecayNames);
  const bool anchored = b.boolean("anchored", false);
  if (auto m = b.object("model")) {
    t.model.T1_max_s = m->number("T1_max_s", t.model.T1_max_s);
    t.model.T1_min_s = m->number("T1_min_s", t.model.T1_min_s);
    t.model.B_knee_T = m->number("B_knee_T", t.model.B_knee_T);
    t.model.exponent = m->number("exponent", t.model.exponent);
    m->finish();
  }
  b.finish();
  if (t.fields_T.empty()) schema_error(b.path("fields_T"), "at least one field is required");
  if (t.wait_count < 4) schema_error(b.path("wait_count"), "at least 4 waits are required");
  if (!(t.wait_span_T1 > 0.0)) schema_error(b.path("wait_span_T1"), "must be positive");
  if (!(t.snr >= 0.0)) schema_error(b.path("snr"), "must be non-negative");
  try {
    if (anchored) {
      t.model = RelaxationModel::anchored(8e-3, t.model.T1_min_s, 7.0, t.model.T1_max_s, t.model.B_knee_T,
                                          t.model.exponent);
    }
    t.model.validate();
    RelaxometryProtocol probe = t.protocol;
    probe.validate();
  } catch (const Error& e) {
    schema_error("/t1", e.what());
  }
  return t;
}

SequenceBlock parse_sequence(Block b) {
  SequenceBlock s;
  auto& q = s.spec;
  q.kind = choice(b, "experiment", q.kind, kSequenceNames);
  q.t_pol_s = b.number("t_pol_s", q.t_pol_s);
  q.trigger_pulse_s = b.number("trigger_pulse_s", q.trigger_pulse_s);
  q.completion_pulse_s = b.number("completion_pulse_s", q.completion_pulse_s);
  q.acquire_delay_s = b.number("acquire_delay_s", q.acquire_delay_s);
  q.acquire_duration_s = b.number("acquire_duration_s", q.acquire_duration_s);
  q.eject_duration_s = b.number("eject_duration_s", q.eject_duration_s);
  q.fill_duration_s = b.number("fill_duration_s", q.fill_duration_s);
  q.cold_delay_s = b.number("cold_delay_s", q.cold_delay_s);
  q.low_field_max_T = b.number("low_field_max_T", q.low_field_max_T);
  const auto band = b.numbers("mw_band_Hz", {q.mw_band.f_lo_Hz, q.mw_band.f_hi_Hz});
  if (band.size() != 2) schema_error(b.path("mw_band_Hz"), "expected [low, high]");
  q.mw_band = {band[0], band[1]};
  if (auto chain = b.object("chain")) {
    q.chain.inverter_s = chain->number("inverter_s", q.chain.inverter_s);
    q.chain.switch_s = chain->number("switch_s", q.chain.switch_s);
    q.chain.divider_s = chain->number("divider_s", q.chain.divider_s);
    chain->finish();
  }
  if (const json* lat = b.child("latencies_s")) {
    if (!lat->is_object()) schema_error(b.path("latencies_s"), "expected an object");
    for (const auto& [name, value] : lat->items()) {
      const auto channel = channel_from_string(name);
      const auto path = b.path("latencies_s") + "/" + name;
      if (!channel) schema_error(path, "unknown channel");
      if (*channel == ChannelId::ServoTrigger || *channel == ChannelId::CompletionPulse) {
        schema_error(path, "set by the trigger chain");
      }
      if (!value.is_number()) schema_error(path, "expected a number");
      q.latencies[*channel] = value.get<double>();
    }
  }
  s.shuttle_distance_m = b.number("shuttle_distance_m", s.shuttle_distance_m);
  s.shuttle_velocity_mps = b.optional_number("shuttle_velocity_mps");
  s.jitter_sigma_s = b.number("jitter_sigma_s", s.jitter_sigma_s);
  s.runs = b.integer("runs", s.runs);
  b.finish();
  if (s.runs < 0) schema_error(b.path("runs"), "must be non-negative");
  if (!(s.jitter_sigma_s >= 0.0)) schema_error(b.path("jitter_sigma_s"), "must be non-negative");
  return s;
}

json anchor_json(const FieldAnchor& a) {
  return {{"kind", a.kind == AnchorKind::FieldValue ? "field_value" : "gradient_at_field"},
          {"position_m", a.position_m ? json(*a.position_m) : json(nullptr)},
          {"field_T", a.field_T},
          {"gradient_T_per_m", a.gradient_T_per_m ? json(*a.gradient_T_per_m) : json(nullptr)},
          {"tolerance_rel", a.tolerance_rel}};
}

}  // namespace

std::string_view to_string(RunKind kind) noexcept { return kKindNames[static_cast<std::size_t>(kind)]; }

std::string_view tool_version() noexcept { return FIELDCYCLE_VERSION; }

FieldMap FieldMapSource::resolve() const {
  if (document) return field_map_from_json(*document);
  CalibrationOptions options;
  options.model = model;
  return calibrate(anchors, options).map;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

ExperimentSpec parse_spec(std::string_view text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::SchemaViolation,
                "line " + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": " + e.what());
  }

  ExperimentSpec spec;
  spec.document = doc;
  Block root(doc, "");
  if (!root.has("schema_version")) schema_error("/schema_version", "required");
  const json* version = root.child("schema_version");
  if (!version->is_number_integer()) schema_error("/schema_version", "expected an integer");
  spec.schema_version = version->get<int>();
  if (spec.schema_version != 1) {
    throw Error(ErrorKind::UnsupportedVersion,
                "/schema_version: version " + std::to_string(spec.schema_version) + " is not supported (expected 1)");
  }
  if (!root.has("kind")) schema_error("/kind", "required");
  const auto kind = root.string("kind", "");
  const auto it = std::find(kKindNames.begin(), kKindNames.end(), kind);
  if (it == kKindNames.end()) throw Error(ErrorKind::UnknownKind, "/kind: unknown experiment kind '" + kind + "'");
  spec.kind = static_cast<RunKind>(it - kKindNames.begin());

  if (const json* seed = root.child("seed")) {
    if (!seed->is_number_unsigned()) schema_error("/seed", "expected a non-negative integer");
    spec.seed = seed->get<std::uint64_t>();
  }
  spec.output_dir = root.string("output_dir", spec.output_dir.string());
  if (auto b = root.object("field_map")) spec.field_map = parse_field_map(*b, base_dir);
  if (auto b = root.object("motion")) spec.motion = parse_motion(*b);

  const auto own = kKindBlocks[static_cast<std::size_t>(spec.kind)];
  for (const auto block : kKindBlocks) {
    if (block != own && root.has(std::string(block).c_str())) {
      schema_error("/" + std::string(block), "block is not used by kind '" + kind + "'");
    }
  }
  if (auto b = root.object(std::string(own).c_str())) {
    switch (spec.kind) {
      case RunKind::ShuttleCharacterization: spec.shuttle = parse_shuttle(*b); break;
      case RunKind::LacPlan: spec.lac = parse_lac(*b); break;
      case RunKind::DnpSweep: spec.dnp = parse_dnp(*b); break;
      case RunKind::T1FieldMap: spec.t1 = parse_t1(*b); break;
      case RunKind::SequenceValidation: spec.sequence = parse_sequence(*b); break;
    }
  }
  root.finish();
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& file) {
  return parse_spec(read_text_file(file), file.parent_path());
}

json resolved_config(const ExperimentSpec& spec) {
  json out;
  out["schema_version"] = spec.schema_version;
  out["kind"] = std::string(to_string(spec.kind));
  out["seed"] = spec.seed;

  json fm;
  fm["origin"] = spec.field_map.origin;
  fm["model"] = name_of(spec.field_map.model, kModelNames);
  if (spec.field_map.document) {
    fm["document"] = *spec.field_map.document;
  } else {
    fm["anchors"] = json::array();
    for (const auto& a : spec.field_map.anchors) fm["anchors"].push_back(anchor_json(a));
  }
  out["field_map"] = fm;

  const auto& m = spec.motion;
  out["motion"] = {{"v_max_mps", m.v_max_mps},
                   {"a_max_mps2", m.a_max_mps2},
                   {"precision_m", m.precision_m},
                   {"travel_range_m", m.travel_range_m}};

  switch (spec.kind) {
    case RunKind::ShuttleCharacterization: {
      const auto& s = spec.shuttle;
      out["shuttle"] = {{"distance_m", s.distance_m},   {"velocities_mps", s.velocities_mps},
                        {"jitter_sigma_s", s.jitter_sigma_s}, {"trials", s.trials},
                        {"dt_s", s.dt_s}};
      break;
    }
    case RunKind::LacPlan: {
      json targets = json::array();
      for (const auto& t : spec.lac.targets) targets.push_back({{"name", t.name}, {"field_T", t.field_T}});
      out["lac"] = {{"targets", targets}};
      break;
    }
    case RunKind::DnpSweep: {
      const auto& d = spec.dnp;
      out["dnp"] = {{"A_Hz", d.system.A_Hz},
                    {"B_pol_T", d.system.B_pol_T},
                    {"band_center_Hz", d.sweep.band_center_Hz ? json(*d.sweep.band_center_Hz) : json(nullptr)},
                    {"band_width_Hz", d.sweep.band_width_Hz},
                    {"sweep_rate_Hz_per_s", d.sweep.sweep_rate_Hz_per_s},
                    {"mw_rabi_Hz", d.sweep.mw_rabi_Hz},
                    {"n_sweeps", d.sweep.n_sweeps},
                    {"repolarization_fidelity", d.sweep.repolarization_fidelity},
                    {"max_phase_step", d.sweep.max_phase_step},
                    {"nodes", d.nodes},
                    {"method", name_of(d.method, kMethodNames)}};
      break;
    }
    case RunKind::T1FieldMap: {
      const auto& t = spec.t1;
      out["t1"] = {{"fields_T", t.fields_T},
                   {"B_pol_T", t.protocol.B_pol_T},
                   {"t_pol_s", t.protocol.t_pol_s},
                   {"detect_field_T", t.protocol.detect_field_T},
                   {"sign", name_of(t.protocol.sign, kSignNames)},
                   {"stretch_beta", t.protocol.stretch_beta},
                   {"waits_s", t.protocol.T_relax_list_s},
                   {"wait_count", t.wait_count},
                   {"wait_span_T1", t.wait_span_T1},
                   {"snr", t.snr},
                   {"fit_model", name_of(t.fit_model, kDecayNames)},
                   {"model",
                    {{"T1_max_s", t.model.T1_max_s},
                     {"T1_min_s", t.model.T1_min_s},
                     {"B_knee_T", t.model.B_knee_T},
                     {"exponent", t.model.exponent}}}};
      break;
    }
    case RunKind::SequenceValidation: {
      const auto& s = spec.sequence;
      const auto& q = s.spec;
      json lat;
      for (std::size_t i = 0; i < kChannelCount; ++i) {
        const auto c = static_cast<ChannelId>(i);
        if (c == ChannelId::ServoTrigger || c == ChannelId::CompletionPulse) continue;
        lat[std::string(to_string(c))] = q.latencies[c];
      }
      out["sequence"] = {{"experiment", name_of(q.kind, kSequenceNames)},
                         {"t_pol_s", q.t_pol_s},
                         {"trigger_pulse_s", q.trigger_pulse_s},
                         {"completion_pulse_s", q.completion_pulse_s},
                         {"acquire_delay_s", q.acquire_delay_s},
                         {"acquire_duration_s", q.acquire_duration_s},
                         {"eject_duration_s", q.eject_duration_s},
                         {"fill_duration_s", q.fill_duration_s},
                         {"cold_delay_s", q.cold_delay_s},
                         {"low_field_max_T", q.low_field_max_T},
                         {"mw_band_Hz", {q.mw_band.f_lo_Hz, q.mw_band.f_hi_Hz}},
                         {"chain",
                          {{"inverter_s", q.chain.inverter_s},
                           {"switch_s", q.chain.switch_s},
                           {"divider_s", q.chain.divider_s}}},
                         {"latencies_s", lat},
                         {"shuttle_distance_m", s.shuttle_distance_m},
                         {"shuttle_velocity_mps", s.shuttle_velocity_mps ? json(*s.shuttle_velocity_mps) : json(nullptr)},
                         {"jitter_sigma_s", s.jitter_sigma_s},
                         {"runs", s.runs}};
      break;
    }
  }
  return out;
}

std::string spec_hash(const json& document) { return hex64(fnv1a64(document.dump())); }

std::uint64_t module_seed(std::uint64_t seed, std::string_view module) noexcept { return seed ^ fnv1a64(module); }

// ---------------------------------------------------------------------------
// Records and files
// ---------------------------------------------------------------------------

json RunRecord::to_json() const {
  json out;
  out["spec_hash"] = spec_hash;
  out["tool_version"] = tool_version;
  out["seed"] = seed;
  out["started_at"] = started_at;
  out["finished_at"] = finished_at;
  out["status"] = status == RunStatus::Succeeded ? "succeeded" : status == RunStatus::Violations ? "violations" : "failed";
  if (error_kind) {
    out["error"] = {{"kind", std::string(fieldcycle::to_string(*error_kind))}, {"message", error_message}};
  }
  out["config"] = config;
  out["summary"] = summary;
  out["manifest"] = json::array();
  for (const auto& m : manifest) out["manifest"].push_back({{"file", m.file}, {"bytes", m.bytes}, {"fnv1a64", m.fnv1a64}});
  return out;
}

int RunRecord::exit_code() const noexcept {
  switch (status) {
    case RunStatus::Succeeded: return 0;
    case RunStatus::Violations: return 2;
    case RunStatus::Failed: return error_kind ? exit_code_for(*error_kind) : 4;
  }
  return 4;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
}

std::string timestamp_now() {
  std::time_t t = 0;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) {
    t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace {

struct Outputs {
  std::vector<std::pair<std::string, std::string>> files;
  json summary = json::object();

  std::ostringstream& open(std::string name) {
    streams.emplace_back(std::move(name), std::make_unique<std::ostringstream>());
    return *streams.back().second;
  }
  void close_all() {
    for (auto& [name, s] : streams) files.emplace_back(name, s->str());
    streams.clear();
  }

  std::vector<std::pair<std::string, std::unique_ptr<std::ostringstream>>> streams;
};

double sample_std(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

void run_shuttle(const ExperimentSpec& spec, Outputs& out) {
  const auto& s = spec.shuttle;
  const auto map = spec.field_map.resolve();
  {
    CsvWriter csv(out.open("shuttle_durations.csv"), {"v_mps", "duration_s", "shape"});
    for (double v : s.velocities_mps) {
      const auto p = plan(s.distance_m, spec.motion, v);
      csv.cell(v).cell(p.total_duration_s);
      csv.cell(p.shape == ProfileShape::Trapezoidal ? "trapezoidal" : p.shape == ProfileShape::Triangular ? "triangular" : "null");
      csv.end_row();
    }
  }
  const auto full = plan(s.distance_m, spec.motion);
  const JitterModel jitter{s.jitter_sigma_s, module_seed(spec.seed, "motion")};
  std::vector<double> trials;
  {
    CsvWriter csv(out.open("jitter_trials.csv"), {"trial", "duration_s"});
    for (std::int64_t i = 0; i < s.trials; ++i) {
      trials.push_back(apply_jitter(full.total_duration_s, jitter, static_cast<std::uint64_t>(i)));
      csv.cell(i).cell(trials.back());
      csv.end_row();
    }
  }
  write_trajectory_csv(out.open("trajectory.csv"), plan_move(s.distance_m, 0.0, spec.motion), s.dt_s, &map);
  out.summary["duration_s"] = full.total_duration_s;
  if (!trials.empty()) {
    out.summary["trial_mean_s"] = std::accumulate(trials.begin(), trials.end(), 0.0) / static_cast<double>(trials.size());
    out.summary["trial_std_s"] = sample_std(trials);
  }
}

void run_lac(const ExperimentSpec& spec, Outputs& out) {
  const auto map = spec.field_map.resolve();
  CsvWriter csv(out.open("lac_plan.csv"), {"name", "target_field_T", "position_m", "gradient_T_per_m", "resolution_T",
                                           "resolution_G", "max_sweep_rate_T_per_s"});
  for (const auto& t : spec.lac.targets) {
    const auto p = plan_lac_access(map, t.field_T, spec.motion.precision_m, spec.motion.v_max_mps);
    csv.cell(t.name).cell(p.target_field_T).cell(p.position_m).cell(p.gradient_T_per_m).cell(p.resolution_T);
    csv.cell(p.resolution_T * 1e4).cell(p.max_sweep_rate_T_per_s);
    csv.end_row();
  }
}

void run_dnp(const ExperimentSpec& spec, Outputs& out) {
  const auto& d = spec.dnp;
  const auto ensemble = PowderEnsemble::gauss_legendre(d.nodes);
  const auto result = powder_average(d.system, d.sweep, ensemble, {}, d.method);
  write_powder_csv(out.open("dnp_powder.csv"), result);
  out.summary["mean_polarization"] = result.mean_polarization;
  out.summary["sign_uniform"] = result.sign_uniform();
  out.summary["low_field"] = d.system.low_field();
}

void run_t1(const ExperimentSpec& spec, Outputs& out) {
  const auto& t = spec.t1;
  const auto map = spec.field_map.resolve();
  const auto seed = module_seed(spec.seed, "relaxometry");
  std::vector<DecayCurve> curves;
  for (std::size_t k = 0; k < t.fields_T.size(); ++k) {
    auto protocol = t.protocol;
    protocol.B_relax_T = t.fields_T[k];
    if (protocol.T_relax_list_s.empty()) {
      const double span = t.wait_span_T1 * t.model.t1(t.fields_T[k]);
      for (int i = 0; i < t.wait_count; ++i) protocol.T_relax_list_s.push_back(span * i / (t.wait_count - 1));
    }
    if (t.snr > 0.0) {
      const auto clean = simulate_protocol(protocol, map, spec.motion, t.model);
      protocol.noise_sigma = std::abs(clean.signal.front()) / t.snr;
    }
    curves.push_back(simulate_protocol(protocol, map, spec.motion, t.model, splitmix64(seed + k)));
    char name[32];
    std::snprintf(name, sizeof name, "t1_curve_%02zu.csv", k);
    write_curve_csv(out.open(name), curves.back());
  }
  const auto t1map = build_t1_map(t.fields_T, curves, t.fit_model);
  write_t1_map_csv(out.open("t1_map.csv"), t1map);
  if (const auto knee = knee_field(t1map)) out.summary["knee_T"] = *knee;
  int failed = 0;
  for (const auto& e : t1map.entries) failed += e.fit ? 0 : 1;
  out.summary["failed_fits"] = failed;
}

bool run_sequence(const ExperimentSpec& spec, Outputs& out) {
  const auto& s = spec.sequence;
  const auto map = spec.field_map.resolve();
  auto q = s.spec;
  q.shuttle = plan_move(s.shuttle_distance_m, 0.0, spec.motion, s.shuttle_velocity_mps);
  const auto timeline = assemble_timeline(q);
  const auto report = validate(timeline, map);
  {
    CsvWriter csv(out.open("timeline.csv"), {"id", "channel", "event", "t_start_s", "duration_s", "latency_s"});
    for (const auto& e : timeline.events) {
      csv.cell(static_cast<std::int64_t>(e.id)).cell(to_string(e.channel)).cell(e.name).cell(e.t_start_s);
      csv.cell(e.duration_s).cell(timeline.latencies[e.channel]);
      csv.end_row();
    }
  }
  {
    CsvWriter csv(out.open("validation.csv"), {"code", "event_ids", "detail"});
    for (const auto& v : report.violations) {
      std::string ids;
      for (int id : v.event_ids) ids += (ids.empty() ? "" : " ") + std::to_string(id);
      csv.cell(v.code).cell(ids).cell(v.detail);
      csv.end_row();
    }
  }
  out.summary["violations"] = report.violations.size();
  if (report.ok() && s.runs > 0) {
    const JitterModel jitter{s.jitter_sigma_s, module_seed(spec.seed, "sequencer")};
    const auto logs = simulate_runs(timeline, jitter, s.runs);
    write_event_log_csv(out.open("event_log.csv"), logs);
    std::vector<double> transit;
    for (const auto& log : logs) {
      const auto* trigger = log.find("servo_trigger");
      const auto* done = log.find("motion_complete");
      if (trigger && done) transit.push_back(done->t_realized_s - trigger->t_realized_s);
    }
    out.summary["trigger_to_completion_std_s"] = sample_std(transit);
    out.summary["chain_latency_s"] = timeline.chain.total_s();
  }
  return report.ok();
}

}  // namespace

RunRecord run(const ExperimentSpec& spec) {
  RunRecord record;
  record.spec_hash = spec_hash(spec.document);
  record.tool_version = std::string(tool_version());
  record.seed = spec.seed;
  record.started_at = timestamp_now();
  record.config = resolved_config(spec);

  std::error_code ec;
  std::filesystem::create_directories(spec.output_dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + spec.output_dir.string() + ": " + ec.message());

  Outputs out;
  try {
    bool clean = true;
    switch (spec.kind) {
      case RunKind::ShuttleCharacterization: run_shuttle(spec, out); break;
      case RunKind::LacPlan: run_lac(spec, out); break;
      case RunKind::DnpSweep: run_dnp(spec, out); break;
      case RunKind::T1FieldMap: run_t1(spec, out); break;
      case RunKind::SequenceValidation: clean = run_sequence(spec, out); break;
    }
    out.close_all();
    // Results are published only once every file has been produced.
    for (const auto& [name, contents] : out.files) {
      write_file_atomic(spec.output_dir / name, contents);
      record.manifest.push_back({name, contents.size(), hex64(fnv1a64(contents))});
    }
    record.summary = out.summary;
    record.status = clean ? RunStatus::Succeeded : RunStatus::Violations;
  } catch (const Error& e) {
    record.status = RunStatus::Failed;
    record.error_kind = e.kind();
    record.error_message = e.what();
    record.manifest.clear();
  }
  record.finished_at = timestamp_now();
  write_file_atomic(spec.output_dir / "run_record.json", record.to_json().dump(2) + "\n");
  return record;
}

}  // namespace fieldcycle
