#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace offkd {

struct TsvRow {
  std::size_t line = 0;  // 1-based line number in the source file
  std::vector<std::string> fields;
};

struct TsvTable {
  std::vector<std::string> header;
  std::vector<TsvRow> rows;

  // Index of a header column, or npos.
  std::size_t column(std::string_view name) const noexcept;
};

std::vector<std::string> split_tabs(std::string_view line);

// Reads a tab-separated file with one header row. A trailing '\r' on each line
// is tolerated; a final empty line is ignored. Throws IoError / ParseError.
TsvTable read_tsv(const std::filesystem::path& path);
TsvTable parse_tsv(std::string_view content, const std::string& source_name);

std::string read_file(const std::filesystem::path& path);
// Writes via a sibling temporary file and rename, so readers never observe a
// half-written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// Reads a text corpus: one document per line; empty lines are skipped.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace offkd
