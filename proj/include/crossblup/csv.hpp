#pragma once

#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace crossblup {

// Comma-separated, RFC 4180 quoting, header row required. Lines whose first
// character is '#' and blank lines are skipped outside quoted fields.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  // Index of a header column; throws DataError naming the file when absent.
  std::size_t column(const std::string& name) const;
  std::string source;
};

// Throws DataError on unterminated quotes or ragged rows.
CsvTable read_csv(std::istream& in, const std::string& source = "<stream>");
CsvTable read_csv_file(const std::string& path);

std::string csv_escape(const std::string& field);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace crossblup
