#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fieldcycle {

/// Shortest decimal representation that round-trips to the same double.
std::string format_double(double value);

std::optional<double> parse_optional_double(std::string_view cell);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index for `name`; throws Error(Io) when absent.
  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::filesystem::path& path);

class CsvWriter {
 public:
  CsvWriter(std::ostream& out, const std::vector<std::string>& header);

  CsvWriter& cell(double value);
  CsvWriter& cell(std::int64_t value);
  CsvWriter& cell(std::string_view value);
  void end_row();

 private:
  std::ostream& out_;
  bool row_started_ = false;
};

/// 64-bit FNV-1a; stable across platforms, used for spec hashes and seed tags.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::string hex64(std::uint64_t value);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace fieldcycle
