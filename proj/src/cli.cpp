#include "crossblup/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "crossblup/errors.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/predict.hpp"
#include "crossblup/simlab.hpp"
#include "crossblup/uncertainty.hpp"

namespace crossblup {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string role_name(CovariateRole r) {
  switch (r) {
    case CovariateRole::Row: return "row";
    case CovariateRole::Column: return "column";
    case CovariateRole::Interaction: return "interaction";
    case CovariateRole::Within: return "within";
    case CovariateRole::Auto: return "auto";
  }
  return {};
}

// Shortest representation that parses back to the same double.
std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

bool parse_double(const std::string& text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && std::isfinite(out);
}

}  // namespace

RoleSpec parse_roles(const std::string& spec) {
  RoleSpec r;
  std::stringstream ss(spec);
  std::string item;
  std::vector<std::string> seen;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw DomainError("roles: expected key=value, got '" + item + "'");
    const std::string key = trim(item.substr(0, eq));
    const std::string value = trim(item.substr(eq + 1));
    if (key.empty() || value.empty()) throw DomainError("roles: empty key or value in '" + item + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw DomainError("roles: '" + key + "' given more than once");
    }
    seen.push_back(key);
    const std::string lk = lower(key);
    if (lk == "row") {
      r.row = value;
    } else if (lk == "column" || lk == "col") {
      r.column = value;
    } else if (lk == "rep") {
      r.rep = value;
    } else if (lk == "response" || lk == "y") {
      r.response = value;
    } else {
      const std::string lv = lower(value);
      CovariateRole role;
      if (lv == "row") role = CovariateRole::Row;
      else if (lv == "column" || lv == "col") role = CovariateRole::Column;
      else if (lv == "interaction" || lv == "cell") role = CovariateRole::Interaction;
      else if (lv == "within" || lv == "obs") role = CovariateRole::Within;
      else if (lv == "auto") role = CovariateRole::Auto;
      else throw DomainError("roles: unknown role '" + value + "' for covariate '" + key +
                             "' (expected row, column, interaction, within or auto)");
      r.covariates.emplace_back(key, role);
    }
  }
  if (r.row.empty() || r.column.empty() || r.response.empty()) {
    throw DomainError("roles: row=, column= and response= are required");
  }
  return r;
}

std::string to_string(const RoleSpec& roles) {
  std::string s = "row=" + roles.row + ",column=" + roles.column;
  if (roles.rep) s += ",rep=" + *roles.rep;
  s += ",response=" + roles.response;
  for (const auto& [name, role] : roles.covariates) s += "," + name + "=" + role_name(role);
  return s;
}

Dataset ingest(const CsvTable& table, const RoleSpec& roles, const IngestOptions& options) {
  const std::string& src = table.source;
  const std::size_t c_row = table.column(roles.row);
  const std::size_t c_col = table.column(roles.column);
  const std::size_t c_y = table.column(roles.response);
  std::optional<std::size_t> c_rep;
  if (roles.rep) c_rep = table.column(*roles.rep);
  std::vector<std::size_t> c_cov;
  for (const auto& [name, role] : roles.covariates) c_cov.push_back(table.column(name));

  Dataset d;
  std::map<std::string, std::size_t> row_ix, col_ix, rep_ix;
  auto intern = [](std::map<std::string, std::size_t>& ix, std::vector<std::string>& labels, const std::string& s) {
    auto it = ix.find(s);
    if (it != ix.end()) return it->second;
    ix.emplace(s, labels.size());
    labels.push_back(s);
    return labels.size() - 1;
  };
  struct Key {
    std::size_t i, j, k;
  };
  std::vector<Key> keys(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& f = table.rows[r];
    keys[r].i = intern(row_ix, d.row_labels, f[c_row]);
    keys[r].j = intern(col_ix, d.col_labels, f[c_col]);
    keys[r].k = c_rep ? intern(rep_ix, d.rep_labels, f[*c_rep]) : 0;
  }
  const std::size_t g = d.row_labels.size(), h = d.col_labels.size();
  const std::size_t m = c_rep ? d.rep_labels.size() : 1;
  if (g < 2 || h < 2) {
    throw DataError(src + ": need at least 2 row labels and 2 column labels, found " + std::to_string(g) + " and " +
                    std::to_string(h));
  }
  d.layout = BalancedLayout(g, h, m);

  auto tuple_name = [&](std::size_t i, std::size_t j, std::size_t k) {
    std::string s = "(" + d.row_labels[i] + ", " + d.col_labels[j];
    if (c_rep) s += ", " + d.rep_labels[k];
    return s + ")";
  };
  std::vector<std::size_t> slot(d.layout.n(), table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const std::size_t p = flat_index(d.layout, keys[r].i, keys[r].j, keys[r].k);
    if (slot[p] != table.rows.size()) {
      throw DataError(src + ": duplicate record " + tuple_name(keys[r].i, keys[r].j, keys[r].k) + " at lines " +
                      std::to_string(table.line_numbers[slot[p]]) + " and " + std::to_string(table.line_numbers[r]));
    }
    slot[p] = r;
  }
  std::vector<std::string> missing;
  std::size_t n_missing = 0;
  for (std::size_t p = 0; p < slot.size(); ++p) {
    if (slot[p] != table.rows.size()) continue;
    ++n_missing;
    if (missing.size() < 20) {
      const CellIndex c = unflatten(d.layout, p);
      missing.push_back(tuple_name(c.i, c.j, c.k));
    }
  }
  if (n_missing > 0) {
    std::string msg = src + ": unbalanced design, " + std::to_string(n_missing) + " of " +
                      std::to_string(d.layout.n()) + " (row, column" + (c_rep ? ", rep" : "") +
                      ") combinations are missing:";
    for (const auto& s : missing) msg += " " + s;
    if (n_missing > missing.size()) msg += " ...";
    throw DataError(msg);
  }

  const auto n = static_cast<Eigen::Index>(d.layout.n());
  auto numeric = [&](std::size_t col, std::size_t r) {
    double v = 0.0;
    if (!parse_double(table.rows[r][col], v)) {
      throw DataError(src + ":" + std::to_string(table.line_numbers[r]) + ": column '" + table.header[col] +
                      "' has non-numeric value '" + table.rows[r][col] + "'");
    }
    return v;
  };
  d.y.resize(n);
  for (Eigen::Index p = 0; p < n; ++p) d.y[p] = numeric(c_y, slot[static_cast<std::size_t>(p)]);

  std::vector<std::pair<std::string, VectorXd>> row_b, col_b, int_b, within_b;
  const auto gi = static_cast<Eigen::Index>(g), hi = static_cast<Eigen::Index>(h);
  const auto mi = static_cast<Eigen::Index>(m);
  for (std::size_t c = 0; c < roles.covariates.size(); ++c) {
    const auto& [name, role] = roles.covariates[c];
    VectorXd x(n);
    for (Eigen::Index p = 0; p < n; ++p) x[p] = numeric(c_cov[c], slot[static_cast<std::size_t>(p)]);
    if (options.standardize) {
      const double mean = x.mean();
      const double sd = std::sqrt((x.array() - mean).square().sum() / static_cast<double>(n));
      if (!(sd > 0.0)) throw DataError(src + ": covariate '" + name + "' is constant and cannot be standardized");
      x = (x.array() - mean) / sd;
    }
    const double tol = 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff());
    // Values of a row/column/cell-level covariate must agree within the level.
    auto collapse = [&](const char* level, Eigen::Index levels, auto level_of) {
      VectorXd v = VectorXd::Constant(levels, std::nan(""));
      for (Eigen::Index p = 0; p < n; ++p) {
        const Eigen::Index l = level_of(p);
        if (std::isnan(v[l])) {
          v[l] = x[p];
        } else if (std::abs(v[l] - x[p]) > tol) {
          throw DataError(src + ":" + std::to_string(table.line_numbers[slot[static_cast<std::size_t>(p)]]) +
                          ": covariate '" + name + "' is declared " + level + "-level but varies within a " + level);
        }
      }
      return v;
    };
    auto row_of = [&](Eigen::Index p) { return p / (hi * mi); };
    auto col_of = [&](Eigen::Index p) { return (p / mi) % hi; };
    auto cell_of = [&](Eigen::Index p) { return p / mi; };
    switch (role) {
      case CovariateRole::Row: row_b.emplace_back(name, collapse("row", gi, row_of)); break;
      case CovariateRole::Column: col_b.emplace_back(name, collapse("column", hi, col_of)); break;
      case CovariateRole::Interaction:
        if (m > 1) {
          int_b.emplace_back(name, collapse("cell", gi * hi, cell_of));
        } else {
          within_b.emplace_back(name, x);
        }
        break;
      case CovariateRole::Within: within_b.emplace_back(name, x); break;
      case CovariateRole::Auto: {
        const DecomposedCovariate dc = decompose_covariate(d.layout, x);
        auto nonzero = [&](const VectorXd& v) { return v.size() > 0 && v.cwiseAbs().maxCoeff() > tol; };
        if (nonzero(dc.row_cent)) row_b.emplace_back(name + "_row_cent", dc.row_cent);
        if (nonzero(dc.column_cent)) col_b.emplace_back(name + "_column_cent", dc.column_cent);
        if (nonzero(dc.cell_cent)) {
          if (m > 1) {
            int_b.emplace_back(name + "_cell_cent", dc.cell_cent);
          } else {
            within_b.emplace_back(name + "_cell_cent", dc.cell_cent);
          }
        }
        if (nonzero(dc.within_cent)) within_b.emplace_back(name + "_within_cent", dc.within_cent);
        break;
      }
    }
  }
  auto stack = [](const std::vector<std::pair<std::string, VectorXd>>& blocks, Eigen::Index rows) {
    MatrixXd out(rows, static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t k = 0; k < blocks.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = blocks[k].second;
    return out;
  };
  RawCovariates raw;
  raw.row = stack(row_b, gi);
  raw.col = stack(col_b, hi);
  raw.interaction = stack(int_b, gi * hi);
  raw.within = stack(within_b, n);
  d.design = CenteredDesign(d.layout, std::move(raw));
  d.coefficient_names = {"(Intercept)"};
  for (const auto* blocks : {&row_b, &col_b, &int_b, &within_b}) {
    for (const auto& b : *blocks) d.coefficient_names.push_back(b.first);
  }
  return d;
}

Dataset ingest_csv(const std::string& path, const RoleSpec& roles, const IngestOptions& options) {
  return ingest(read_csv_file(path), roles, options);
}

RoleSpec write_long_csv(std::ostream& out, const Dataset& data) {
  const BalancedLayout& l = data.layout;
  const RawCovariates& raw = data.design.raw();
  const CovariateRoles& pr = data.design.roles();
  RoleSpec spec;
  spec.row = "row";
  spec.column = "column";
  if (l.replicated()) spec.rep = "rep";
  spec.response = "y";
  std::vector<std::string> header = {"row", "column"};
  if (spec.rep) header.push_back("rep");
  header.push_back("y");
  for (std::size_t k = 1; k < data.coefficient_names.size(); ++k) {
    const std::size_t c = k - 1;
    CovariateRole role = CovariateRole::Within;
    if (c < pr.p_a) role = CovariateRole::Row;
    else if (c < pr.p_a + pr.p_b) role = CovariateRole::Column;
    else if (c < pr.p_a + pr.p_b + pr.p_ab) role = CovariateRole::Interaction;
    header.push_back(data.coefficient_names[k]);
    spec.covariates.emplace_back(data.coefficient_names[k], role);
  }
  write_csv_row(out, header);
  const MatrixXd x = data.design.model_matrix();
  for (std::size_t p = 0; p < l.n(); ++p) {
    const CellIndex c = unflatten(l, p);
    std::vector<std::string> f = {data.row_labels[c.i], data.col_labels[c.j]};
    if (spec.rep) f.push_back(data.rep_labels[c.k]);
    f.push_back(num(data.y[static_cast<Eigen::Index>(p)]));
    for (Eigen::Index k = 1; k < x.cols(); ++k) f.push_back(num(x(static_cast<Eigen::Index>(p), k)));
    write_csv_row(out, f);
  }
  (void)raw;
  return spec;
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t seed) {
  std::uint64_t hsh = seed;
  for (unsigned char c : bytes) {
    hsh ^= c;
    hsh *= 0x100000001b3ULL;
  }
  return hsh;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

struct Provenance {
  std::string seed = "none";
  std::string config_hash;

  json to_json() const { return json{{"tool", "crossblup"}, {"version", kVersion}, {"seed", seed}, {"config_hash", config_hash}}; }
  std::string footer() const {
    return std::string("# crossblup ") + kVersion + " seed=" + seed + " config_hash=" + config_hash + "\n";
  }
};

std::string slurp(const std::string& path, bool data_file) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (data_file) throw DataError("cannot open '" + path + "'");
    throw ConfigError("", "cannot open '" + path + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- fit ----------------------------------------------------------------

struct FitArgs {
  std::string data;
  std::string roles;
  std::string method = "reml";
  std::string out = "fit.json";
  bool standardize = false;
};

json fixed_effect_table(const Dataset& d, const VectorXd& xi, const MatrixXd& cov) {
  json arr = json::array();
  for (Eigen::Index k = 0; k < xi.size(); ++k) {
    const double se = std::sqrt(std::max(0.0, cov(k, k)));
    const double z = se > 0.0 ? xi[k] / se : 0.0;
    arr.push_back({{"name", d.coefficient_names[static_cast<std::size_t>(k)]},
                   {"estimate", xi[k]},
                   {"std_error", se},
                   {"z", z},
                   {"p_value", se > 0.0 ? two_sided_p(z) : 1.0}});
  }
  return arr;
}

json variance_json(const VarianceComponents& t, bool interaction, const std::array<bool, 4>& boundary) {
  json v;
  v["sigma_a2"] = t.sigma_a2;
  v["sigma_b2"] = t.sigma_b2;
  if (interaction) v["sigma_g2"] = t.sigma_g2;
  v["sigma_e2"] = t.sigma_e2;
  json sd;
  sd["row"] = std::sqrt(t.sigma_a2);
  sd["column"] = std::sqrt(t.sigma_b2);
  if (interaction) sd["interaction"] = std::sqrt(t.sigma_g2);
  sd["residual"] = std::sqrt(t.sigma_e2);
  v["sd"] = sd;
  v["boundary"] = {{"row", boundary[1]}, {"column", boundary[2]}, {"interaction", boundary[3]}};
  return v;
}

void print_fit_summary(std::ostream& out, const Dataset& d, const RoleSpec& roles, const json& fe, const json& vc,
                       const FitResult& r) {
  out << "Balanced crossed design: g=" << d.layout.g << " (" << roles.row << "), h=" << d.layout.h << " ("
      << roles.column << "), m=" << d.layout.m << ", n=" << d.layout.n() << "\n";
  out << "Method: " << to_string(r.method) << ", converged=" << (r.converged ? "yes" : "no")
      << ", iterations=" << r.iterations << ", criterion=" << fixed(r.criterion, 6) << "\n\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %12s %12s %9s %10s\n", "Fixed effect", "Estimate", "Std.Error", "z", "p");
  out << line;
  for (const auto& row : fe) {
    std::snprintf(line, sizeof line, "%-28s %12.4f %12.4f %9.3f %10.4g\n", row["name"].get<std::string>().c_str(),
                  row["estimate"].get<double>(), row["std_error"].get<double>(), row["z"].get<double>(),
                  row["p_value"].get<double>());
    out << line;
  }
  out << "\nRandom effect (SD)\n";
  const json& sd = vc["sd"];
  std::snprintf(line, sizeof line, "  %-26s %12.4f\n", (roles.row + " (row)").c_str(), sd["row"].get<double>());
  out << line;
  std::snprintf(line, sizeof line, "  %-26s %12.4f\n", (roles.column + " (column)").c_str(), sd["column"].get<double>());
  out << line;
  if (sd.contains("interaction")) {
    std::snprintf(line, sizeof line, "  %-26s %12.4f\n", "interaction", sd["interaction"].get<double>());
    out << line;
  }
  std::snprintf(line, sizeof line, "  %-26s %12.4f\n", "residual", sd["residual"].get<double>());
  out << line;
}

int cmd_fit(const FitArgs& a, std::ostream& out) {
  const RoleSpec roles = parse_roles(a.roles);
  IngestOptions io;
  io.standardize = a.standardize;
  const std::string bytes = slurp(a.data, true);
  std::istringstream is(bytes);
  const Dataset d = ingest(read_csv(is, a.data), roles, io);
  FitOptions fo;
  fo.method = parse_method(a.method);
  const ResponseTable table(d.layout, d.y);
  const FitResult r = fit(d.design, table, fo);

  Provenance prov;
  prov.config_hash =
      hex64(fnv1a(to_string(roles) + "|" + to_string(fo.method) + "|" + (a.standardize ? "z" : "raw"), fnv1a(bytes)));
  json doc;
  doc["format"] = "crossblup-fit";
  doc["data"] = fs::absolute(a.data).lexically_normal().string();
  doc["roles"] = to_string(roles);
  doc["standardize"] = a.standardize;
  doc["method"] = to_string(r.method);
  doc["layout"] = {{"g", d.layout.g}, {"h", d.layout.h}, {"m", d.layout.m}, {"n", d.layout.n()}};
  doc["converged"] = r.converged;
  doc["iterations"] = r.iterations;
  doc["criterion"] = r.criterion;
  doc["gradient_norm"] = r.gradient_norm;
  doc["fixed_effects"] = fixed_effect_table(d, r.xi, r.xi_covariance);
  doc["variance_components"] = variance_json(r.theta, d.layout.replicated(), r.boundary);
  doc["provenance"] = prov.to_json();
  const fs::path target(a.out);
  if (target.has_parent_path()) ensure_dir(target.parent_path());
  write_file(target, doc.dump(2) + "\n");
  print_fit_summary(out, d, roles, doc["fixed_effects"], doc["variance_components"], r);
  out << "\nwrote " << a.out << "\n";
  return kExitOk;
}

// ---- predict --------------------------------------------------------------

struct PredictArgs {
  std::string fit = "fit.json";
  std::string mse = "lsw";
  double level = 0.95;
  std::string out = ".";
  std::string backend = "structured";
};

struct EffectRow {
  std::string effect;  // row | column | interaction
  std::string row_label, col_label;
  double eblup = 0.0, mse = 0.0;
  PredictionInterval pi;
};

void write_qq(const fs::path& path, const std::vector<EffectRow>& rows, const Provenance& prov) {
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rows[a].eblup < rows[b].eblup; });
  const boost::math::normal_distribution<double> nd;
  std::ostringstream os;
  write_csv_row(os, {"rank", "probability", "normal_quantile", "label", "eblup", "lower", "upper"});
  const auto count = static_cast<double>(rows.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const EffectRow& e = rows[order[r]];
    const double prob = (static_cast<double>(r + 1) - 0.5) / count;
    write_csv_row(os, {std::to_string(r + 1), num(prob), num(boost::math::quantile(nd, prob)),
                       e.effect == "row" ? e.row_label : e.col_label, num(e.eblup), num(e.pi.lower()),
                       num(e.pi.upper())});
  }
  os << prov.footer();
  write_file(path, os.str());
}

int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
  const std::string fit_text = slurp(a.fit, true);
  json fitdoc;
  try {
    fitdoc = json::parse(fit_text);
  } catch (const json::parse_error& e) {
    throw DataError(a.fit + ": not a valid fit file: " + e.what());
  }
  if (fitdoc.value("format", "") != "crossblup-fit") throw DataError(a.fit + ": not a crossblup fit file");
  if (!(a.level > 0.0 && a.level < 1.0)) throw DomainError("--level must lie in (0, 1)");
  const MseMethod method = parse_mse_method(a.mse);
  const std::string backend_name = lower(a.backend);
  if (backend_name != "structured" && backend_name != "dense") {
    throw DomainError("--backend must be structured or dense");
  }
  const Backend backend = backend_name == "dense" ? Backend::Dense : Backend::Structured;

  const RoleSpec roles = parse_roles(fitdoc.at("roles").get<std::string>());
  IngestOptions io;
  io.standardize = fitdoc.value("standardize", false);
  const std::string data_path = fitdoc.at("data").get<std::string>();
  const std::string bytes = slurp(data_path, true);
  std::istringstream is(bytes);
  const Dataset d = ingest(read_csv(is, data_path), roles, io);
  const json& lay = fitdoc.at("layout");
  if (lay.at("g").get<std::size_t>() != d.layout.g || lay.at("h").get<std::size_t>() != d.layout.h ||
      lay.at("m").get<std::size_t>() != d.layout.m) {
    throw DataError(data_path + ": data no longer matches the layout recorded in " + a.fit);
  }
  VectorXd xi(static_cast<Eigen::Index>(d.coefficient_names.size()));
  const json& fe = fitdoc.at("fixed_effects");
  if (fe.size() != d.coefficient_names.size()) throw DataError(a.fit + ": fixed effects do not match the data columns");
  for (std::size_t k = 0; k < fe.size(); ++k) xi[static_cast<Eigen::Index>(k)] = fe[k].at("estimate").get<double>();
  const json& vc = fitdoc.at("variance_components");
  VarianceComponents theta;
  theta.sigma_a2 = vc.at("sigma_a2").get<double>();
  theta.sigma_b2 = vc.at("sigma_b2").get<double>();
  theta.sigma_g2 = d.layout.replicated() ? vc.at("sigma_g2").get<double>() : 0.0;
  theta.sigma_e2 = vc.at("sigma_e2").get<double>();

  const ResponseTable table(d.layout, d.y);
  const Eblups e = d.layout.replicated() ? blup_interaction(theta, xi, d.design, table)
                                         : blup_no_interaction(theta, xi, d.design, table);
  const double q = 1.0 - a.level;
  std::optional<SecondOrderCalculator> so;
  if (method != MseMethod::LSW) so.emplace(theta, d.design, backend);
  const Leverage ha(d.design, Factor::A), hb(d.design, Factor::B);

  std::vector<EffectRow> rows_a, rows_b, rows_g;
  auto mse_for = [&](const Target& t, double lev) {
    if (method == MseMethod::LSW) return mse_lsw(theta, d.layout, t.effect, lev);
    const SecondOrderMse s = so->compute(t);
    return method == MseMethod::KH ? s.kh() : s.pr();
  };
  for (std::size_t i = 0; i < d.layout.g; ++i) {
    EffectRow r{"row", d.row_labels[i], "", e.alpha[static_cast<Eigen::Index>(i)], 0.0, {}};
    r.mse = mse_for(Target::row(i), ha.diag(i));
    r.pi = prediction_interval(r.eblup, r.mse, q, method);
    rows_a.push_back(r);
  }
  for (std::size_t j = 0; j < d.layout.h; ++j) {
    EffectRow r{"column", "", d.col_labels[j], e.beta[static_cast<Eigen::Index>(j)], 0.0, {}};
    r.mse = mse_for(Target::column(j), hb.diag(j));
    r.pi = prediction_interval(r.eblup, r.mse, q, method);
    rows_b.push_back(r);
  }
  std::string note;
  if (d.layout.replicated()) {
    if (method == MseMethod::LSW) {
      const double mse = mse_lsw(theta, d.layout, Effect::Interaction, 1.0);
      for (std::size_t i = 0; i < d.layout.g; ++i) {
        for (std::size_t j = 0; j < d.layout.h; ++j) {
          EffectRow r{"interaction", d.row_labels[i], d.col_labels[j],
                      e.gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), mse, {}};
          r.pi = prediction_interval(r.eblup, r.mse, q, method);
          rows_g.push_back(r);
        }
      }
    } else {
      note = "interaction effects are reported with --mse lsw only";
      err << "note: " << note << "\n";
    }
  }

  Provenance prov;
  prov.config_hash = hex64(fnv1a(to_string(method) + "|" + num(a.level) + "|" + backend_name, fnv1a(fit_text)));
  const fs::path dir(a.out);
  ensure_dir(dir);

  json rep;
  rep["format"] = "crossblup-report";
  rep["fit"] = fs::absolute(a.fit).lexically_normal().string();
  rep["mse_method"] = to_string(method);
  rep["level"] = a.level;
  rep["critical_value"] = normal_critical_value(q);
  rep["layout"] = fitdoc["layout"];
  rep["fixed_effects"] = fe;
  rep["variance_components"] = vc;
  auto effect_json = [](const std::vector<EffectRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows) {
      json x;
      if (!r.row_label.empty()) x["row"] = r.row_label;
      if (!r.col_label.empty()) x["column"] = r.col_label;
      x["eblup"] = r.eblup;
      x["mse"] = r.mse;
      x["half_width"] = r.pi.half_width;
      x["lower"] = r.pi.lower();
      x["upper"] = r.pi.upper();
      arr.push_back(x);
    }
    return arr;
  };
  rep["effects"] = {{"row", effect_json(rows_a)}, {"column", effect_json(rows_b)}};
  if (!rows_g.empty()) rep["effects"]["interaction"] = effect_json(rows_g);
  if (!note.empty()) rep["notes"] = json::array({note});
  rep["provenance"] = prov.to_json();
  write_file(dir / "report.json", rep.dump(2) + "\n");

  std::ostringstream ec;
  write_csv_row(ec, {"effect", "row", "column", "eblup", "mse", "half_width", "lower", "upper"});
  for (const auto* rows : {&rows_a, &rows_b, &rows_g}) {
    for (const auto& r : *rows) {
      write_csv_row(ec, {r.effect, r.row_label, r.col_label, num(r.eblup), num(r.mse), num(r.pi.half_width),
                         num(r.pi.lower()), num(r.pi.upper())});
    }
  }
  ec << prov.footer();
  write_file(dir / "effects.csv", ec.str());
  write_qq(dir / "qq_row.csv", rows_a, prov);
  write_qq(dir / "qq_column.csv", rows_b, prov);

  out << "EBLUPs with " << fixed(100.0 * a.level, 1) << "% prediction intervals (" << to_string(method)
      << " MSE): " << rows_a.size() << " " << roles.row << " effects, " << rows_b.size() << " " << roles.column
      << " effects";
  if (!rows_g.empty()) out << ", " << rows_g.size() << " interaction effects";
  out << "\nwrote " << (dir / "report.json").string() << ", effects.csv, qq_row.csv, qq_column.csv\n";
  return kExitOk;
}

// ---- simulate / report ------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::string out = "sim_out";
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out, std::ostream& err) {
  const std::string text = slurp(a.config, false);
  ScenarioConfig cfg = parse_scenario_config(text);
  if (a.seed) cfg.seed = *a.seed;
  const std::size_t workers = default_workers();
  const std::vector<ScenarioResult> results = run_scenarios(cfg, workers);

  Provenance prov;
  prov.seed = std::to_string(cfg.seed);
  prov.config_hash = hex64(fnv1a(text));
  const fs::path dir(a.out);
  ensure_dir(dir);
  json doc = json::parse(emit_table(results, TableFormat::Json));
  doc["provenance"] = prov.to_json();
  write_file(dir / "results.json", doc.dump(2) + "\n");
  write_file(dir / "results.csv", emit_table(results, TableFormat::Csv) + prov.footer());
  const std::string txt = emit_table(results, TableFormat::Text);
  write_file(dir / "results.txt", txt + prov.footer());
  out << txt;
  for (const auto& r : results) {
    for (const auto& w : r.warnings) err << "warning: " << r.name << " g=" << r.layout.g << " h=" << r.layout.h
                                         << " m=" << r.layout.m << ": " << w << "\n";
  }
  out << "wrote " << (dir / "results.json").string() << ", results.csv, results.txt\n";
  return kExitOk;
}

struct ReportArgs {
  std::string in = "sim_out";
  std::string format = "text";
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const TableFormat fmt = parse_table_format(a.format);
  const fs::path p = fs::path(a.in) / "results.json";
  const std::string text = slurp(p.string(), true);
  std::vector<ScenarioResult> results;
  try {
    results = parse_results_json(text);
  } catch (const ConfigError& e) {
    throw DataError(p.string() + ": " + e.what());
  }
  out << emit_table(results, fmt);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Crossed random-effects models: REML/ML fitting, EBLUPs, prediction intervals and coverage studies"};
  app.set_version_flag("--version", std::string("crossblup ") + kVersion);
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a balanced crossed model to long-format CSV data");
  fit_cmd->add_option("--data", fa.data, "Long-format CSV file")->required();
  fit_cmd->add_option("--roles", fa.roles, "Column roles, e.g. row=customer,column=movie,response=y,X=auto")
      ->required();
  fit_cmd->add_option("--method", fa.method, "reml or ml")->check(CLI::IsMember({"reml", "ml"}, CLI::ignore_case));
  fit_cmd->add_option("--out", fa.out, "Output fit file (JSON)");
  fit_cmd->add_flag("--standardize", fa.standardize, "z-score covariates before fitting");

  PredictArgs pa;
  auto* pred_cmd = app.add_subcommand("predict", "EBLUPs, MSEs and prediction intervals from a fit");
  pred_cmd->add_option("--fit", pa.fit, "Fit file written by 'fit'")->required();
  pred_cmd->add_option("--mse", pa.mse, "lsw, kh or pr")->check(CLI::IsMember({"lsw", "kh", "pr"}, CLI::ignore_case));
  pred_cmd->add_option("--level", pa.level, "Interval coverage level")->check(CLI::Range(0.0, 1.0));
  pred_cmd->add_option("--out", pa.out, "Output directory");
  pred_cmd->add_option("--backend", pa.backend, "KH/PR backend: structured or dense (n <= 5000)");

  SimulateArgs sa;
  std::uint64_t seed = 0;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a Monte Carlo coverage study");
  sim_cmd->add_option("--config", sa.config, "Scenario configuration (JSON)")->required();
  sim_cmd->add_option("--out", sa.out, "Output directory");
  auto* seed_opt = sim_cmd->add_option("--seed", seed, "Master seed (overrides the configuration)");

  ReportArgs ra;
  auto* rep_cmd = app.add_subcommand("report", "Re-emit simulation results");
  rep_cmd->add_option("--in", ra.in, "Directory written by 'simulate'")->required();
  rep_cmd->add_option("--format", ra.format, "text, csv or json")
      ->check(CLI::IsMember({"text", "csv", "json"}, CLI::ignore_case));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*fit_cmd) return cmd_fit(fa, out);
    if (*pred_cmd) return cmd_predict(pa, out, err);
    if (*sim_cmd) {
      if (*seed_opt) sa.seed = seed;
      return cmd_simulate(sa, out, err);
    }
    if (*rep_cmd) return cmd_report(ra, out);
  } catch (const ConvergenceError& e) {
    const FitResult& b = e.best();
    err << "error: " << e.what() << "\n  best iterate: sigma_a2=" << b.theta.sigma_a2 << " sigma_b2=" << b.theta.sigma_b2
        << " sigma_g2=" << b.theta.sigma_g2 << " sigma_e2=" << b.theta.sigma_e2 << " criterion=" << b.criterion
        << " iterations=" << b.iterations << " |grad|=" << b.gradient_norm << "\n";
    return kExitNumeric;
  } catch (const ResourceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const SingularCovarianceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const RankDeficiencyError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace crossblup
