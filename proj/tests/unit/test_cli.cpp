#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "../support/oracles.hpp"
#include "crossblup/cli.hpp"
#include "crossblup/errors.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/simlab.hpp"
#include "crossblup/uncertainty.hpp"

using namespace crossblup;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "crossblup");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("crossblup_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Long CSV for a g x h x m cross with one observation-level covariate.
std::string make_csv(std::size_t g, std::size_t h, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<double> a(g), b(h);
  for (auto& v : a) v = 2.0 * n01(rng);
  for (auto& v : b) v = 1.5 * n01(rng);
  std::ostringstream os;
  os << "cust,item" << (m > 1 ? ",r" : "") << ",score,x\n";
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double gam = m > 1 ? n01(rng) : 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double x = n01(rng) + 0.1 * static_cast<double>(i);
        os << "c" << i << ",m" << j;
        if (m > 1) os << ",k" << k;
        os << "," << 3.0 + 0.8 * x + a[i] + b[j] + gam + n01(rng) << "," << x << "\n";
      }
    }
  }
  return os.str();
}

}  // namespace

TEST_CASE("role specification parsing") {
  const RoleSpec r = parse_roles("row=cust, column=item,response=score,x=auto,pop=column");
  CHECK(r.row == "cust");
  CHECK(r.column == "item");
  CHECK(!r.rep);
  REQUIRE(r.covariates.size() == 2);
  CHECK(r.covariates[1].second == CovariateRole::Column);
  CHECK(parse_roles(to_string(r)).covariates.size() == 2);
  CHECK_THROWS_AS(parse_roles("row=a,column=b"), DomainError);
  CHECK_THROWS_AS(parse_roles("row=a,column=b,response=y,x=sideways"), DomainError);
  CHECK_THROWS_AS(parse_roles("row=a,row=b,column=c,response=y"), DomainError);
}

TEST_CASE("CSV reader handles quoting, comments and ragged rows") {
  std::istringstream in("\xEF\xBB\xBF# comment\na,b\n\"x,1\",\"say \"\"hi\"\"\"\n\n# tail\n2,3\n");
  const CsvTable t = read_csv(in, "mem");
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][0] == "x,1");
  CHECK(t.rows[0][1] == "say \"hi\"");
  CHECK(t.line_numbers[1] == 6);
  std::istringstream bad("a,b\n1\n");
  CHECK_THROWS_AS(read_csv(bad, "mem"), DataError);
  std::ostringstream w;
  write_csv_row(w, {"#x", "a\"b", "plain"});
  CHECK(w.str() == "\"#x\",\"a\"\"b\",plain\n");
}

TEST_CASE("ingest rejects unbalanced and duplicated data") {
  std::istringstream missing("r,c,y\na,x,1\na,y,2\nb,x,3\n");
  try {
    ingest(read_csv(missing, "d.csv"), parse_roles("row=r,column=c,response=y"));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("(b, y)") != std::string::npos);
  }
  std::istringstream dup("r,c,y\na,x,1\na,y,2\nb,x,3\nb,y,4\na,x,5\n");
  try {
    ingest(read_csv(dup, "d.csv"), parse_roles("row=r,column=c,response=y"));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lines 2 and 6") != std::string::npos);
  }
  std::istringstream nonnum("r,c,y\na,x,1\na,y,oops\nb,x,3\nb,y,4\n");
  CHECK_THROWS_AS(ingest(read_csv(nonnum, "d.csv"), parse_roles("row=r,column=c,response=y")), DataError);
  std::istringstream varying("r,c,y,z\na,x,1,1\na,y,2,2\nb,x,3,3\nb,y,4,3\n");
  CHECK_THROWS_AS(ingest(read_csv(varying, "d.csv"), parse_roles("row=r,column=c,response=y,z=row")), DataError);
}

TEST_CASE("long CSV round trip reproduces the data set") {
  for (std::size_t m : {1u, 3u}) {
    std::istringstream in(make_csv(5, 4, m, 3 + m));
    std::string roles = "row=cust,column=item,response=score,x=auto";
    if (m > 1) roles += ",rep=r";
    const Dataset d = ingest(read_csv(in, "gen"), parse_roles(roles));
    CHECK(d.layout.g == 5);
    CHECK(d.layout.h == 4);
    CHECK(d.layout.m == m);
    CHECK(d.coefficient_names.size() == (m > 1 ? 5u : 4u));
    std::stringstream buf;
    const RoleSpec spec = write_long_csv(buf, d);
    const Dataset back = ingest(read_csv(buf, "rt"), spec);
    CHECK(back.row_labels == d.row_labels);
    CHECK(back.col_labels == d.col_labels);
    CHECK(back.rep_labels == d.rep_labels);
    CHECK(back.coefficient_names == d.coefficient_names);
    CHECK((back.y - d.y).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.design.model_matrix() - d.design.model_matrix()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("command line exit codes") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"fit", "--data"}).code == kExitUsage);
  CHECK(cli({"predict", "--fit", "f.json", "--mse", "bogus"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"fit", "--data", "/nonexistent/x.csv", "--roles", "row=a,column=b,response=y"}).code == kExitData);

  const fs::path dir = scratch("codes");
  {
    std::ofstream f(dir / "unbalanced.csv");
    f << "r,c,y\na,x,1\na,y,2\nb,x,3\n";
  }
  const Run r = cli({"fit", "--data", (dir / "unbalanced.csv").string(), "--roles", "row=r,column=c,response=y"});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("unbalanced") != std::string::npos);
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"layouts":[{"g":10,"h":10}],"replicates":-3})";
  }
  const Run s = cli({"simulate", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  CHECK(s.code == kExitData);
  CHECK(s.err.find("/replicates") != std::string::npos);
}

TEST_CASE("fit and predict through the command line") {
  const fs::path dir = scratch("fit");
  {
    std::ofstream f(dir / "data.csv");
    f << make_csv(8, 6, 1, 21);
  }
  const std::string fit_path = (dir / "fit.json").string();
  const Run f = cli({"fit", "--data", (dir / "data.csv").string(), "--roles",
                     "row=cust,column=item,response=score,x=auto", "--method", "reml", "--out", fit_path});
  REQUIRE_MESSAGE(f.code == kExitOk, f.err);
  CHECK(f.out.find("Fixed effect") != std::string::npos);
  std::ifstream fin(fit_path);
  const nlohmann::json doc = nlohmann::json::parse(fin);
  CHECK(doc["layout"]["g"] == 8);
  CHECK(doc["provenance"]["seed"] == "none");

  for (const char* mse : {"lsw", "kh", "pr"}) {
    const fs::path out = dir / mse;
    const Run p = cli({"predict", "--fit", fit_path, "--mse", mse, "--level", "0.9", "--out", out.string()});
    REQUIRE_MESSAGE(p.code == kExitOk, p.err);
    std::ifstream rin(out / "report.json");
    const nlohmann::json rep = nlohmann::json::parse(rin);
    const double z = normal_critical_value(0.1);
    CHECK(rep["critical_value"].get<double>() == doctest::Approx(z));
    REQUIRE(rep["effects"]["row"].size() == 8);
    REQUIRE(rep["effects"]["column"].size() == 6);
    for (const auto& e : rep["effects"]["row"]) {
      CHECK(e["half_width"].get<double>() == doctest::Approx(z * std::sqrt(e["mse"].get<double>())));
      CHECK(e["upper"].get<double>() - e["lower"].get<double>() ==
            doctest::Approx(2 * e["half_width"].get<double>()));
    }
    CHECK(fs::exists(out / "effects.csv"));
    const CsvTable qq = read_csv_file((out / "qq_row.csv").string());
    CHECK(qq.rows.size() == 8);
    CHECK(qq.header[2] == "normal_quantile");
    std::ifstream ein(out / "effects.csv");
    std::string all((std::istreambuf_iterator<char>(ein)), std::istreambuf_iterator<char>());
    CHECK(all.find("# crossblup ") != std::string::npos);
  }
  const Run kh = cli({"predict", "--fit", (dir / "missing.json").string()});
  CHECK(kh.code == kExitData);
}

TEST_CASE("dense backend refuses oversized problems") {
  const fs::path dir = scratch("dense");
  {
    std::ofstream f(dir / "data.csv");
    f << make_csv(80, 70, 1, 5);
  }
  const std::string fit_path = (dir / "fit.json").string();
  REQUIRE(cli({"fit", "--data", (dir / "data.csv").string(), "--roles", "row=cust,column=item,response=score,x=auto",
               "--out", fit_path})
              .code == kExitOk);
  const Run p = cli({"predict", "--fit", fit_path, "--mse", "kh", "--backend", "dense", "--out", (dir / "o").string()});
  CHECK(p.code == kExitNumeric);
  CHECK(p.err.find("structured") != std::string::npos);
  const Run ok = cli({"predict", "--fit", fit_path, "--mse", "kh", "--out", (dir / "s").string()});
  CHECK(ok.code == kExitOk);
}

TEST_CASE("simulate and report") {
  const fs::path dir = scratch("sim");
  {
    std::ofstream f(dir / "cfg.json");
    f << R"({"name":"tiny","layouts":[{"g":4,"h":4,"m":1}],"replicates":8})";
  }
  const Run s = cli({"simulate", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string(), "--seed", "5"});
  REQUIRE_MESSAGE(s.code == kExitOk, s.err);
  std::ifstream in(dir / "o" / "results.json");
  const nlohmann::json doc = nlohmann::json::parse(in);
  CHECK(doc["provenance"]["seed"] == "5");
  for (const char* fmt : {"text", "csv", "json"}) {
    const Run r = cli({"report", "--in", (dir / "o").string(), "--format", fmt});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("alpha[1]") != std::string::npos);
  }
  const Run again = cli({"simulate", "--config", (dir / "cfg.json").string(), "--out", (dir / "p").string(), "--seed", "5"});
  const Run r1 = cli({"report", "--in", (dir / "o").string(), "--format", "csv"});
  const Run r2 = cli({"report", "--in", (dir / "p").string(), "--format", "csv"});
  CHECK(r1.out == r2.out);
  CHECK(cli({"report", "--in", (dir / "nowhere").string()}).code == kExitData);
}

TEST_CASE("fit recovers simulation truth and predict is deterministic") {
  const fs::path dir = scratch("truth");
  const BalancedLayout l(40, 40, 1);
  ScenarioConfig cfg;
  Rng rng(stream_seed(2024, 1));
  const VectorXd x = gen_covariate(l, rng);
  const RandomEffects eff = gen_random_effects(l, cfg.theta_for(l), EffectDistributions{}, rng);
  const VectorXd xi = cfg.xi_for(l);
  const ResponseTable table = gen_response(l, x, xi, eff);
  {
    std::ofstream f(dir / "data.csv");
    f << "r,c,y,x\n";
    for (std::size_t p = 0; p < l.n(); ++p) {
      const CellIndex c = unflatten(l, p);
      f << "r" << c.i << ",c" << c.j << "," << table.values()[static_cast<Eigen::Index>(p)] << ","
        << x[static_cast<Eigen::Index>(p)] << "\n";
    }
  }
  const std::string fit_path = (dir / "fit.json").string();
  const Run run = cli({"fit", "--data", (dir / "data.csv").string(), "--roles", "row=r,column=c,response=y,x=auto",
                       "--out", fit_path});
  REQUIRE_MESSAGE(run.code == kExitOk, run.err);
  std::ifstream fin(fit_path);
  const nlohmann::json doc = nlohmann::json::parse(fin);
  const auto& fe = doc["fixed_effects"];
  REQUIRE(fe.size() == 4);
  CHECK(fe[1]["name"] == "x_row_cent");
  CHECK(fe[2]["name"] == "x_column_cent");
  CHECK(fe[3]["name"] == "x_cell_cent");
  for (int k = 1; k <= 3; ++k) {
    const double est = fe[k]["estimate"].get<double>(), se = fe[k]["std_error"].get<double>();
    CHECK_MESSAGE(std::abs(est - xi[k]) <= 3.0 * se, fe[k]["name"].get<std::string>());
  }
  CHECK(doc["variance_components"]["sigma_e2"].get<double>() == doctest::Approx(81.0).epsilon(0.15));

  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  REQUIRE(cli({"predict", "--fit", fit_path, "--mse", "pr", "--out", (dir / "a").string()}).code == kExitOk);
  REQUIRE(cli({"predict", "--fit", fit_path, "--mse", "pr", "--out", (dir / "b").string()}).code == kExitOk);
  for (const char* f : {"report.json", "effects.csv", "qq_row.csv", "qq_column.csv"}) {
    CHECK(read(dir / "a" / f) == read(dir / "b" / f));
  }
}
