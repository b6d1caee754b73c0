#include <cmath>
#include <cstdlib>
#include <sstream>

#include "doctest.h"
#include "fieldcycle/errors.hpp"
#include "fieldcycle/io.hpp"
#include "fieldcycle/parallel.hpp"
#include "fieldcycle/random.hpp"

using namespace fieldcycle;

TEST_SUITE("io") {
  TEST_CASE("doubles round trip through their text form") {
    for (double v : {0.0, 1.0, -2.5, 0.1, 1.0 / 3.0, 6.02214076e23, 5e-324, 0.6480166666666667}) {
      CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
    }
    CHECK(format_double(0.25) == "0.25");
    CHECK(parse_optional_double("") == std::nullopt);
    CHECK(parse_optional_double("1e-3") == 1e-3);
    CHECK_THROWS_AS(parse_optional_double("abc"), Error);
  }

  TEST_CASE("CSV write and read") {
    std::stringstream ss;
    {
      CsvWriter csv(ss, {"a", "b", "c"});
      csv.cell(1.5).cell(std::int64_t{7}).cell("x, \"y\"");
      csv.end_row();
    }
    const auto table = read_csv(ss);
    REQUIRE(table.rows.size() == 1);
    CHECK(table.column("b") == 1);
    CHECK(table.rows[0][0] == "1.5");
    CHECK(table.rows[0][2] == "x, \"y\"");
    CHECK_THROWS_AS(table.column("zzz"), Error);
  }

  TEST_CASE("FNV-1a reference vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
  }

  TEST_CASE("counter-based normal draws") {
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double x = standard_normal(12345, static_cast<std::uint64_t>(i));
      sum += x;
      sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(standard_normal(1, 2) == standard_normal(1, 2));
    CHECK(standard_normal(1, 2) != standard_normal(2, 2));
    for (int i = 0; i < 1000; ++i) {
      const double u = uniform_open(3, static_cast<std::uint64_t>(i));
      CHECK(u > 0.0);
      CHECK(u < 1.0);
    }
  }

  TEST_CASE("parallel_for fills every slot and rethrows") {
    std::vector<int> out(1000, 0);
    parallel_for(out.size(), [&](std::size_t i) { out[i] = static_cast<int>(i) * 2; }, 4);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i) * 2);
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) { if (i == 3) throw Error(ErrorKind::Io, "x"); }, 3), Error);
  }

  TEST_CASE("exit codes") {
    CHECK(exit_code_for(ErrorKind::SchemaViolation) == 3);
    CHECK(exit_code_for(ErrorKind::UnsupportedVersion) == 3);
    CHECK(exit_code_for(ErrorKind::FitDiverged) == 4);
    CHECK(exit_code_for(ErrorKind::StepTooCoarse) == 4);
  }
}
