// Command-line front end. Every experiment verb composes a spec document and
// hands it to the orchestrator, so each invocation leaves a run_record.json.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fieldcycle/fieldmap.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/orchestrator.hpp"

namespace fc = fieldcycle;
using nlohmann::json;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
};

void print_files(const fc::RunRecord& record, const std::filesystem::path& dir) {
  for (const auto& m : record.manifest) std::cout << (dir / m.file).string() << "  " << m.bytes << " bytes\n";
}

int execute(fc::ExperimentSpec spec, const Globals& g, bool echo_tables = false) {
  if (g.seed) spec.seed = *g.seed;
  if (g.out) spec.output_dir = *g.out;
  const auto record = fc::run(spec);
  if (record.status == fc::RunStatus::Failed) {
    std::cerr << "fieldcycle: " << record.error_message << "\n";
  } else if (!g.quiet) {
    if (echo_tables) {
      for (const auto& m : record.manifest) std::cout << fc::read_text_file(spec.output_dir / m.file);
    }
    if (!record.summary.empty()) std::cout << record.summary.dump(2) << "\n";
    print_files(record, spec.output_dir);
  }
  if (record.status == fc::RunStatus::Violations && !g.quiet) {
    std::cout << fc::read_text_file(spec.output_dir / "validation.csv");
  }
  return record.exit_code();
}

fc::ExperimentSpec from_document(const json& doc) { return fc::parse_spec(doc.dump()); }

json field_map_block(const std::string& anchors, const std::string& map) {
  if (!map.empty()) return {{"source", "map_json"}, {"path", std::filesystem::absolute(map).string()}};
  if (!anchors.empty()) return {{"source", "anchors_csv"}, {"path", std::filesystem::absolute(anchors).string()}};
  return {{"source", "canonical"}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Digital twin of a mechanical field-cycling NMR instrument"};
  app.set_version_flag("--version", std::string(fc::tool_version()));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Random seed (overrides the spec)");
  app.add_option("--out", g.out, "Output directory (overrides the spec)");
  app.add_flag("--quiet", g.quiet, "Suppress stdout");

  std::function<int()> action;

  // plan-motion
  auto* motion = app.add_subcommand("plan-motion", "Plan a shuttle move and characterize its timing jitter");
  double distance = fc::kDefaultShuttleDistance_m;
  double vmax = 2.0, amax = 30.0, dt = 1e-3, sigma = 2.6e-3;
  std::int64_t trials = 1400;
  motion->add_option("--distance", distance, "Move distance [m]")->required();
  motion->add_option("--vmax", vmax, "Velocity cap [m/s]");
  motion->add_option("--amax", amax, "Acceleration cap [m/s^2]");
  motion->add_option("--dt", dt, "Trajectory sample step [s]");
  motion->add_option("--jitter", sigma, "Timing jitter standard deviation [s]");
  motion->add_option("--trials", trials, "Jittered repetitions");
  motion->callback([&] {
    action = [&] {
      const json doc = {{"schema_version", 1},
                        {"kind", "shuttle_characterization"},
                        {"motion", {{"v_max_mps", vmax}, {"a_max_mps2", amax}}},
                        {"shuttle",
                         {{"distance_m", distance},
                          {"velocities_mps", {vmax}},
                          {"dt_s", dt},
                          {"jitter_sigma_s", sigma},
                          {"trials", trials}}}};
      return execute(from_document(doc), g);
    };
  });

  // calibrate-field
  auto* calib = app.add_subcommand("calibrate-field", "Fit a field map to anchors and save it as JSON");
  std::string anchors_file, model = "finite_solenoid";
  calib->add_option("--anchors", anchors_file, "Anchor CSV (canonical anchors when omitted)");
  calib->add_option("--model", model, "finite_solenoid or monotone_spline")
      ->check(CLI::IsMember({"finite_solenoid", "monotone_spline"}));
  calib->callback([&] {
    action = [&] {
      std::vector<fc::FieldAnchor> anchors = fc::canonical_anchors();
      if (!anchors_file.empty()) {
        std::ifstream in(anchors_file);
        if (!in) throw fc::Error(fc::ErrorKind::Io, "cannot open " + anchors_file);
        anchors = fc::read_anchor_csv(in);
      }
      fc::CalibrationOptions options;
      options.model = model == "monotone_spline" ? fc::FieldModelKind::MonotoneSpline : fc::FieldModelKind::FiniteSolenoid;
      const auto cal = fc::calibrate(anchors, options);
      const std::filesystem::path dir = g.out.value_or("fieldcycle_out");
      std::filesystem::create_directories(dir);
      fc::write_file_atomic(dir / "field_map.json", fc::to_json(cal.map).dump(2) + "\n");
      std::ostringstream res;
      {
        fc::CsvWriter csv(res, {"anchor", "relative_residual"});
        for (std::size_t i = 0; i < cal.residuals.size(); ++i) {
          csv.cell(static_cast<std::int64_t>(i)).cell(cal.residuals[i]);
          csv.end_row();
        }
      }
      fc::write_file_atomic(dir / "calibration_residuals.csv", res.str());
      if (!g.quiet) {
        std::cout << "iterations " << cal.iterations << "\n" << res.str();
        std::cout << (dir / "field_map.json").string() << "\n";
      }
      return 0;
    };
  });

  // plan-lac
  auto* lac = app.add_subcommand("plan-lac", "Field resolution and sweep rate at level anti-crossings");
  std::string lac_anchors, lac_map;
  std::vector<std::string> targets;
  double precision = 50e-6, lac_vmax = 2.0;
  lac->add_option("--anchors", lac_anchors, "Anchor CSV");
  lac->add_option("--map", lac_map, "Saved field-map JSON");
  lac->add_option("--target", targets, "NAME=FIELD_T (default ESLAC and GSLAC)");
  lac->add_option("--precision", precision, "Positional precision [m]");
  lac->add_option("--vmax", lac_vmax, "Velocity cap [m/s]");
  lac->callback([&] {
    action = [&] {
      json doc = {{"schema_version", 1},
                  {"kind", "lac_plan"},
                  {"field_map", field_map_block(lac_anchors, lac_map)},
                  {"motion", {{"precision_m", precision}, {"v_max_mps", lac_vmax}}}};
      if (!targets.empty()) {
        json list = json::array();
        for (const auto& t : targets) {
          const auto eq = t.find('=');
          if (eq == std::string::npos) throw fc::Error(fc::ErrorKind::SchemaViolation, "--target expects NAME=FIELD_T");
          const auto field = fc::parse_optional_double(t.substr(eq + 1));
          if (!field) throw fc::Error(fc::ErrorKind::SchemaViolation, "--target field is not a number: " + t);
          list.push_back({{"name", t.substr(0, eq)}, {"field_T", *field}});
        }
        doc["lac"] = {{"targets", list}};
      }
      return execute(from_document(doc), g, true);
    };
  });

  // dnp-sweep
  auto* dnp = app.add_subcommand("dnp-sweep", "Powder-averaged microwave sweep polarization transfer");
  std::string dnp_config;
  int nodes = 0;
  dnp->add_option("--config", dnp_config, "dnp_sweep spec")->required()->check(CLI::ExistingFile);
  dnp->add_option("--nodes", nodes, "Quadrature nodes")->check(CLI::Range(8, 4096));
  dnp->callback([&] {
    action = [&] {
      auto spec = fc::load_spec(dnp_config);
      if (spec.kind != fc::RunKind::DnpSweep) throw fc::Error(fc::ErrorKind::SchemaViolation, "/kind: expected dnp_sweep");
      if (nodes > 0) spec.dnp.nodes = nodes;
      return execute(std::move(spec), g);
    };
  });

  // t1-map
  auto* t1 = app.add_subcommand("t1-map", "Simulated field-dependent T1 relaxometry");
  std::string t1_config;
  t1->add_option("--config", t1_config, "t1_field_map spec")->required()->check(CLI::ExistingFile);
  t1->callback([&] {
    action = [&] {
      auto spec = fc::load_spec(t1_config);
      if (spec.kind != fc::RunKind::T1FieldMap) throw fc::Error(fc::ErrorKind::SchemaViolation, "/kind: expected t1_field_map");
      return execute(std::move(spec), g);
    };
  });

  // validate-sequence / simulate-sequence
  auto* validate = app.add_subcommand("validate-sequence", "Check a trigger timeline for constraint violations");
  std::string seq_spec;
  validate->add_option("--spec", seq_spec, "sequence_validation spec")->required()->check(CLI::ExistingFile);
  validate->callback([&] {
    action = [&] {
      auto spec = fc::load_spec(seq_spec);
      if (spec.kind != fc::RunKind::SequenceValidation) {
        throw fc::Error(fc::ErrorKind::SchemaViolation, "/kind: expected sequence_validation");
      }
      spec.sequence.runs = 0;
      return execute(std::move(spec), g);
    };
  });

  auto* simulate = app.add_subcommand("simulate-sequence", "Simulate jittered executions of a trigger timeline");
  std::string sim_spec;
  std::int64_t runs = 100;
  simulate->add_option("--spec", sim_spec, "sequence_validation spec")->required()->check(CLI::ExistingFile);
  simulate->add_option("--runs", runs, "Number of runs")->check(CLI::Range(std::int64_t{1}, std::int64_t{1000000}));
  simulate->callback([&] {
    action = [&] {
      auto spec = fc::load_spec(sim_spec);
      if (spec.kind != fc::RunKind::SequenceValidation) {
        throw fc::Error(fc::ErrorKind::SchemaViolation, "/kind: expected sequence_validation");
      }
      spec.sequence.runs = runs;
      return execute(std::move(spec), g);
    };
  });

  // run
  auto* run = app.add_subcommand("run", "Run any experiment spec");
  std::string run_spec;
  run->add_option("--spec", run_spec, "Experiment spec")->required()->check(CLI::ExistingFile);
  run->callback([&] { action = [&] { return execute(fc::load_spec(run_spec), g); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }

  try {
    return action();
  } catch (const fc::Error& e) {
    std::cerr << "fieldcycle: " << e.what() << "\n";
    return fc::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "fieldcycle: " << e.what() << "\n";
    return 4;
  }
}
