#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fieldcycle/io.hpp"
#include "fieldcycle/orchestrator.hpp"

using namespace fieldcycle;
namespace fs = std::filesystem;

namespace {

ErrorKind parse_error_kind(std::string_view text, std::string* message = nullptr) {
  try {
    (void)parse_spec(text);
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  FAIL("spec was accepted");
  return ErrorKind::Io;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fieldcycle_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("orchestrator") {
  TEST_CASE("minimal spec takes defaults") {
    const auto spec = parse_spec(R"({"schema_version": 1, "kind": "shuttle_characterization"})");
    CHECK(spec.kind == RunKind::ShuttleCharacterization);
    CHECK(spec.seed == 0);
    CHECK(spec.shuttle.distance_m == kDefaultShuttleDistance_m);
    CHECK(spec.shuttle.trials == 1400);
    CHECK(spec.motion.v_max_mps == 2.0);
    CHECK(spec.field_map.origin == "canonical");
  }

  TEST_CASE("schema errors name their path") {
    std::string msg;
    CHECK(parse_error_kind(R"({"schema_version": 1})", &msg) == ErrorKind::SchemaViolation);
    CHECK(msg.find("/kind") != std::string::npos);
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "shuttle_characterization", "shuttle": {"trails": 3}})",
                           &msg) == ErrorKind::SchemaViolation);
    CHECK(msg.find("/shuttle/trails") != std::string::npos);
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "lac_plan", "motion": {"v_max_mps": "fast"}})", &msg) ==
          ErrorKind::SchemaViolation);
    CHECK(msg.find("/motion/v_max_mps") != std::string::npos);
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "lac_plan", "t1": {}})", &msg) ==
          ErrorKind::SchemaViolation);
    CHECK(msg.find("/t1") != std::string::npos);
    CHECK(parse_error_kind(R"({"kind": "lac_plan"})") == ErrorKind::SchemaViolation);
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "lac_plan", "lac": {"targets": [{"name": "x"}]}})", &msg) ==
          ErrorKind::SchemaViolation);
    CHECK(msg.find("/lac/targets/0/field_T") != std::string::npos);
  }

  TEST_CASE("syntax errors report a line") {
    std::string msg;
    CHECK(parse_error_kind("{\n  \"schema_version\": 1,\n  \"kind\": \"lac_plan\",,\n}", &msg) ==
          ErrorKind::SchemaViolation);
    CHECK(msg.find("line 3") != std::string::npos);
  }

  TEST_CASE("unknown kinds and versions") {
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "nmr_imaging"})") == ErrorKind::UnknownKind);
    CHECK(parse_error_kind(R"({"schema_version": 2, "kind": "lac_plan"})") == ErrorKind::UnsupportedVersion);
  }

  TEST_CASE("spec hash ignores key order") {
    const auto a = parse_spec(R"({"schema_version": 1, "kind": "lac_plan", "seed": 4})");
    const auto b = parse_spec(R"({"seed": 4, "kind": "lac_plan", "schema_version": 1})");
    const auto c = parse_spec(R"({"seed": 5, "kind": "lac_plan", "schema_version": 1})");
    CHECK(spec_hash(a.document) == spec_hash(b.document));
    CHECK(spec_hash(a.document) != spec_hash(c.document));
    CHECK(spec_hash(a.document).size() == 16);
  }

  TEST_CASE("module seeds differ per module") {
    CHECK(module_seed(1, "motion") != module_seed(1, "sequencer"));
    CHECK(module_seed(1, "motion") == (1 ^ fnv1a64("motion")));
  }

  TEST_CASE("canonical t1 spec resolves to the golden config") {
    const fs::path root = FIELDCYCLE_SOURCE_DIR;
    const auto spec = load_spec(root / "configs" / "t1_field_map.json");
    const auto golden = nlohmann::json::parse(read_text_file(root / "tests" / "golden" / "t1_field_map.resolved.json"));
    CHECK(resolved_config(spec) == golden);
  }

  TEST_CASE("anchor files resolve against the spec directory") {
    const fs::path root = FIELDCYCLE_SOURCE_DIR;
    const auto spec = load_spec(root / "configs" / "lac_plan.json");
    CHECK(spec.field_map.origin == "../data/canonical_anchors.csv");
    REQUIRE(spec.field_map.anchors.size() == canonical_anchors().size());
    CHECK(spec.field_map.resolve().field_at(0.9) == canonical_field_map().field_at(0.9));
    CHECK(parse_error_kind(R"({"schema_version": 1, "kind": "lac_plan",
                               "field_map": {"source": "anchors_csv", "path": "/nonexistent.csv"}})") == ErrorKind::Io);
  }

  TEST_CASE("shuttle characterization run") {
    auto spec = parse_spec(R"({"schema_version": 1, "kind": "shuttle_characterization", "seed": 3})");
    spec.output_dir = scratch_dir("shuttle");
    const auto record = run(spec);
    CHECK(record.status == RunStatus::Succeeded);
    CHECK(record.exit_code() == 0);
    REQUIRE(record.manifest.size() == 3);
    for (const auto& m : record.manifest) {
      const auto text = read_text_file(spec.output_dir / m.file);
      CHECK(text.size() == m.bytes);
      CHECK(hex64(fnv1a64(text)) == m.fnv1a64);
    }
    const auto table = read_csv_file(spec.output_dir / "shuttle_durations.csv");
    REQUIRE(table.rows.size() == 4);
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
      CHECK(std::stod(table.rows[i][1]) < std::stod(table.rows[i - 1][1]));
    }
    CHECK(fs::exists(spec.output_dir / "run_record.json"));
    const auto doc = nlohmann::json::parse(read_text_file(spec.output_dir / "run_record.json"));
    CHECK(doc.at("status") == "succeeded");
    CHECK(doc.at("spec_hash") == record.spec_hash);
  }

  TEST_CASE("lac plan run reproduces resolutions and rates") {
    auto spec = parse_spec(R"({"schema_version": 1, "kind": "lac_plan"})");
    spec.output_dir = scratch_dir("lac");
    REQUIRE(run(spec).status == RunStatus::Succeeded);
    const auto table = read_csv_file(spec.output_dir / "lac_plan.csv");
    REQUIRE(table.rows.size() == 2);
    const auto g = table.column("resolution_G");
    const auto r = table.column("max_sweep_rate_T_per_s");
    CHECK(std::stod(table.rows[0][g]) == doctest::Approx(0.114).epsilon(0.02));
    CHECK(std::stod(table.rows[0][r]) == doctest::Approx(0.456).epsilon(0.02));
    CHECK(std::stod(table.rows[1][g]) == doctest::Approx(0.303).epsilon(0.02));
    CHECK(std::stod(table.rows[1][r]) == doctest::Approx(1.212).epsilon(0.02));
  }

  TEST_CASE("identical spec and seed give identical files") {
    auto spec = parse_spec(R"({"schema_version": 1, "kind": "sequence_validation", "seed": 9,
                               "sequence": {"runs": 50}})");
    spec.output_dir = scratch_dir("det_a");
    const auto a = run(spec);
    spec.output_dir = scratch_dir("det_b");
    const auto b = run(spec);
    REQUIRE(a.manifest.size() == b.manifest.size());
    for (std::size_t i = 0; i < a.manifest.size(); ++i) CHECK(a.manifest[i].fnv1a64 == b.manifest[i].fnv1a64);
  }

  TEST_CASE("failed runs record the error and publish nothing") {
    auto spec = parse_spec(R"({"schema_version": 1, "kind": "lac_plan",
                               "lac": {"targets": [{"name": "ok", "field_T": 0.1}, {"name": "far", "field_T": 20}]}})");
    spec.output_dir = scratch_dir("failed");
    const auto record = run(spec);
    CHECK(record.status == RunStatus::Failed);
    CHECK(record.error_kind == ErrorKind::FieldNotReachable);
    CHECK(record.exit_code() == 4);
    CHECK(record.manifest.empty());
    CHECK_FALSE(fs::exists(spec.output_dir / "lac_plan.csv"));
    const auto doc = nlohmann::json::parse(read_text_file(spec.output_dir / "run_record.json"));
    CHECK(doc.at("status") == "failed");
    CHECK(doc.at("manifest").empty());
  }

  TEST_CASE("sequence violations set exit status 2") {
    // Starting the shuttle 0.5 m from the magnet center puts the laser in a high field.
    auto spec = parse_spec(R"({"schema_version": 1, "kind": "sequence_validation",
                               "sequence": {"shuttle_distance_m": 0.5}})");
    spec.output_dir = scratch_dir("violations");
    const auto record = run(spec);
    CHECK(record.status == RunStatus::Violations);
    CHECK(record.exit_code() == 2);
    const auto table = read_csv_file(spec.output_dir / "validation.csv");
    REQUIRE_FALSE(table.rows.empty());
    CHECK(table.rows[0][0] == "optical_outside_shield");
  }

  TEST_CASE("atomic writes leave no temporary files") {
    const auto dir = scratch_dir("atomic");
    fs::create_directories(dir);
    write_file_atomic(dir / "x.txt", "hello");
    write_file_atomic(dir / "x.txt", "world");
    CHECK(read_text_file(dir / "x.txt") == "world");
    CHECK(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}) == 1);
  }

  TEST_CASE("timestamps honor SOURCE_DATE_EPOCH") {
    ::setenv("SOURCE_DATE_EPOCH", "0", 1);
    CHECK(timestamp_now() == "1970-01-01T00:00:00Z");
    ::unsetenv("SOURCE_DATE_EPOCH");
    CHECK(timestamp_now().size() == 20);
  }
}
