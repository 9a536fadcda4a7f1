#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "crossblup/csv.hpp"
#include "crossblup/design.hpp"
#include "crossblup/layout.hpp"

namespace crossblup {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

enum class CovariateRole { Row, Column, Interaction, Within, Auto };

// Column roles, e.g. "row=customer,column=movie,rep=r,response=y,DayGap=auto,Pop=column".
// Any key other than row/column/rep/response names a covariate column and its role.
struct RoleSpec {
  std::string row;
  std::string column;
  std::optional<std::string> rep;
  std::string response;
  std::vector<std::pair<std::string, CovariateRole>> covariates;
};

// Throws DomainError on a malformed spec.
RoleSpec parse_roles(const std::string& spec);

struct IngestOptions {
  bool standardize = false;  // z-score each covariate column before role processing
};

// A balanced long-format data set bound to labels.
struct Dataset {
  BalancedLayout layout;
  CenteredDesign design;
  VectorXd y;
  std::vector<std::string> row_labels;  // first-appearance order
  std::vector<std::string> col_labels;
  std::vector<std::string> rep_labels;
  std::vector<std::string> coefficient_names;  // "(Intercept)" then the design columns
};

// Throws DataError for missing columns, non-numeric values, duplicate keys or
// an unbalanced cross (the message lists missing tuples, 1-based line numbers
// for duplicates).
Dataset ingest(const CsvTable& table, const RoleSpec& roles, const IngestOptions& options = {});
Dataset ingest_csv(const std::string& path, const RoleSpec& roles, const IngestOptions& options = {});

// Long-format writer: columns row, column, [rep], y, then one column per
// design covariate. Returns the role spec that reads the file back into an
// identical data set.
RoleSpec write_long_csv(std::ostream& out, const Dataset& data);
std::string to_string(const RoleSpec& roles);

// 64-bit FNV-1a, used for the provenance footer.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Entry point for the command-line tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace crossblup
