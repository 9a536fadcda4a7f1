#include "crossblup/csv.hpp"

#include <fstream>

#include "crossblup/errors.hpp"

namespace crossblup {

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (header[k] == name) return k;
  }
  throw DataError(source + ": no column named '" + name + "' in header");
}

namespace {

// Splits one record starting at `pos`; advances pos past the record terminator.
// `line` tracks the current physical line for diagnostics.
bool next_record(const std::string& text, std::size_t& pos, std::size_t& line, std::vector<std::string>& fields,
                 const std::string& source) {
  fields.clear();
  std::string field;
  bool quoted = false;
  bool any = false;
  const std::size_t start_line = line;
  while (pos < text.size()) {
    const char c = text[pos];
    if (quoted) {
      if (c == '"') {
        if (pos + 1 < text.size() && text[pos + 1] == '"') {
          field.push_back('"');
          pos += 2;
        } else {
          quoted = false;
          ++pos;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
        ++pos;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      any = true;
      ++pos;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      any = true;
      ++pos;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
      ++pos;
      ++line;
      fields.push_back(std::move(field));
      return true;
    } else {
      field.push_back(c);
      any = true;
      ++pos;
    }
  }
  if (quoted) throw DataError(source + ":" + std::to_string(start_line) + ": unterminated quoted field");
  if (any || !field.empty()) {
    fields.push_back(std::move(field));
    return true;
  }
  return false;
}

}  // namespace

CsvTable read_csv(std::istream& in, const std::string& source) {
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);
  CsvTable table;
  table.source = source;
  std::size_t pos = 0, line = 1;
  std::vector<std::string> fields;
  bool have_header = false;
  while (pos < text.size()) {
    // Comment and blank lines are only recognized at the start of a record.
    if (text[pos] == '#' || text[pos] == '\n' || text[pos] == '\r') {
      while (pos < text.size() && text[pos] != '\n') ++pos;
      if (pos < text.size()) ++pos;
      ++line;
      continue;
    }
    const std::size_t record_line = line;
    if (!next_record(text, pos, line, fields, source)) break;
    if (!have_header) {
      table.header = fields;
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw DataError(source + ":" + std::to_string(record_line) + ": expected " +
                      std::to_string(table.header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    table.rows.push_back(fields);
    table.line_numbers.push_back(record_line);
  }
  if (!have_header) throw DataError(source + ": empty file (a header row is required)");
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return read_csv(in, path);
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos && (field.empty() || field[0] != '#')) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t k = 0; k < fields.size(); ++k) {
    if (k > 0) out << ',';
    out << csv_escape(fields[k]);
  }
  out << '\n';
}

}  // namespace crossblup
