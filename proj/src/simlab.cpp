#include "crossblup/simlab.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "crossblup/errors.hpp"
#include "crossblup/predict.hpp"

namespace crossblup {

using json = nlohmann::ordered_json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::string to_string(Distribution d) { return d == Distribution::Normal ? "normal" : "mixture"; }

MixtureSpec MixtureSpec::for_variance(double variance) {
  MixtureSpec s;
  s.var2 = (variance - s.weight1 * (s.var1 + s.mean1 * s.mean1) - s.weight2 * s.mean2 * s.mean2) / s.weight2;
  if (!(s.var2 > 0.0)) {
    throw ConfigError("", "mixture distribution cannot reach variance " + std::to_string(variance) +
                              " (second component variance would be " + std::to_string(s.var2) + ")");
  }
  return s;
}

VectorXd gen_covariate(const BalancedLayout& layout, Rng& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  const auto g = static_cast<Eigen::Index>(layout.g);
  const auto h = static_cast<Eigen::Index>(layout.h);
  const auto m = static_cast<Eigen::Index>(layout.m);
  VectorXd t(g), u(h), v(g * h);
  for (auto& x : t) x = z(rng);
  for (auto& x : u) x = z(rng);
  for (auto& x : v) x = z(rng);
  VectorXd out(g * h * m);
  for (Eigen::Index i = 0; i < g; ++i) {
    for (Eigen::Index j = 0; j < h; ++j) {
      const double base = 4.0 + t[i] + 1.5 * u[j] + 2.0 * v[i * h + j];
      for (Eigen::Index k = 0; k < m; ++k) out[(i * h + j) * m + k] = base;
    }
  }
  if (layout.replicated()) {
    for (Eigen::Index p = 0; p < out.size(); ++p) out[p] += 3.0 * z(rng);
  }
  return out;
}

VectorXd gen_effects(Distribution dist, std::size_t count, double variance, Rng& rng) {
  VectorXd out(static_cast<Eigen::Index>(count));
  if (variance == 0.0) return VectorXd::Zero(static_cast<Eigen::Index>(count));
  if (dist == Distribution::Normal) {
    std::normal_distribution<double> z(0.0, std::sqrt(variance));
    for (auto& x : out) x = z(rng);
    return out;
  }
  const MixtureSpec s = MixtureSpec::for_variance(variance);
  std::uniform_real_distribution<double> pick(0.0, 1.0);
  std::normal_distribution<double> c1(s.mean1, std::sqrt(s.var1));
  std::normal_distribution<double> c2(s.mean2, std::sqrt(s.var2));
  for (auto& x : out) x = pick(rng) < s.weight1 ? c1(rng) : c2(rng);
  return out;
}

RandomEffects gen_random_effects(const BalancedLayout& layout, const VarianceComponents& theta,
                                 const EffectDistributions& dists, Rng& rng) {
  RandomEffects fx;
  fx.alpha = gen_effects(dists.alpha, layout.g, theta.sigma_a2, rng);
  fx.beta = gen_effects(dists.beta, layout.h, theta.sigma_b2, rng);
  if (layout.replicated()) fx.gamma = gen_effects(dists.gamma, layout.cells(), theta.sigma_g2, rng);
  fx.e = gen_effects(dists.e, layout.n(), theta.sigma_e2, rng);
  return fx;
}

ResponseTable gen_response(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& covariate,
                           const Eigen::Ref<const VectorXd>& xi, const RandomEffects& effects) {
  const std::size_t want = layout.replicated() ? 5 : 4;
  if (static_cast<std::size_t>(xi.size()) != want) {
    throw DomainError("gen_response: xi must have " + std::to_string(want) + " entries for this layout");
  }
  if (static_cast<std::size_t>(covariate.size()) != layout.n() ||
      static_cast<std::size_t>(effects.e.size()) != layout.n()) {
    throw DomainError("gen_response: covariate and error vectors must have length n");
  }
  const DecomposedCovariate d = decompose_covariate(layout, covariate);
  VectorXd y(static_cast<Eigen::Index>(layout.n()));
  for (std::size_t p = 0; p < layout.n(); ++p) {
    const CellIndex c = unflatten(layout, p);
    const auto i = static_cast<Eigen::Index>(c.i), j = static_cast<Eigen::Index>(c.j);
    const auto cell = static_cast<Eigen::Index>(c.i * layout.h + c.j);
    const auto pp = static_cast<Eigen::Index>(p);
    double v = d.mean * xi[0] + d.row_cent[i] * xi[1] + d.column_cent[j] * xi[2] + d.cell_cent[cell] * xi[3];
    v += effects.alpha[i] + effects.beta[j] + effects.e[pp];
    if (layout.replicated()) v += d.within_cent[pp] * xi[4] + effects.gamma[cell];
    y[pp] = v;
  }
  return ResponseTable(layout, std::move(y));
}

VectorXd ScenarioConfig::xi_for(const BalancedLayout& layout) const {
  const Eigen::Index want = layout.replicated() ? 5 : 4;
  if (xi) {
    if (xi->size() == want) return *xi;
    if (!layout.replicated() && xi->size() == 5) return xi->head(4);
    throw ConfigError("/xi", "expected " + std::to_string(want) + " entries for m = " + std::to_string(layout.m));
  }
  VectorXd out(want);
  if (layout.replicated()) {
    out << 0, 5, 7, 3, 4;
  } else {
    out << 0, 5, 7, 3;
  }
  return out;
}

VarianceComponents ScenarioConfig::theta_for(const BalancedLayout& layout) const {
  VarianceComponents t = theta;
  if (!layout.replicated()) t.sigma_g2 = 0.0;
  return t;
}

std::vector<MseMethod> ScenarioConfig::methods_for(const BalancedLayout& layout) const {
  if (methods) return *methods;
  if (layout.replicated()) return {MseMethod::LSW};
  return {MseMethod::LSW, MseMethod::KH, MseMethod::PR};
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

const json& require(const json& obj, const std::string& key, const std::string& ptr) {
  if (!obj.contains(key)) throw ConfigError(ptr + "/" + key, "required key is missing");
  return obj.at(key);
}

double as_number(const json& v, const std::string& ptr) {
  if (!v.is_number()) throw ConfigError(ptr, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(ptr, "expected a finite number");
  return d;
}

std::size_t as_count(const json& v, const std::string& ptr, std::size_t min) {
  if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(min)) {
    throw ConfigError(ptr, "expected an integer >= " + std::to_string(min));
  }
  return v.get<std::size_t>();
}

std::vector<std::size_t> as_count_list(const json& v, const std::string& ptr, std::size_t min) {
  std::vector<std::size_t> out;
  if (v.is_array()) {
    if (v.empty()) throw ConfigError(ptr, "expected a non-empty list");
    for (std::size_t k = 0; k < v.size(); ++k) out.push_back(as_count(v[k], ptr + "/" + std::to_string(k), min));
  } else {
    out.push_back(as_count(v, ptr, min));
  }
  return out;
}

Distribution parse_distribution(const json& v, const std::string& ptr) {
  if (!v.is_string()) throw ConfigError(ptr, "expected \"normal\" or \"mixture\"");
  const std::string s = lower(v.get<std::string>());
  if (s == "normal") return Distribution::Normal;
  if (s == "mixture") return Distribution::Mixture;
  throw ConfigError(ptr, "unknown distribution \"" + v.get<std::string>() + "\" (expected normal or mixture)");
}

BalancedLayout make_layout(std::size_t g, std::size_t h, std::size_t m, const std::string& ptr) {
  try {
    return BalancedLayout(g, h, m);
  } catch (const DomainError& e) {
    throw ConfigError(ptr, e.what());
  }
}

}  // namespace

ScenarioConfig parse_scenario_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("", "configuration must be a JSON object");
  static const char* known[] = {"name",     "layouts", "grid",   "xi",         "theta",       "distributions",
                                "replicates", "level", "seed",   "methods",    "estimation",  "information",
                                "freeze_covariates", "description"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known)) {
      throw ConfigError("/" + it.key(), "unknown key");
    }
  }

  ScenarioConfig cfg;
  if (doc.contains("name")) {
    if (!doc["name"].is_string()) throw ConfigError("/name", "expected a string");
    cfg.name = doc["name"].get<std::string>();
  }
  if (doc.contains("layouts") == doc.contains("grid")) {
    throw ConfigError("/layouts", "exactly one of \"layouts\" or \"grid\" must be given");
  }
  if (doc.contains("layouts")) {
    const json& ls = doc["layouts"];
    if (!ls.is_array() || ls.empty()) throw ConfigError("/layouts", "expected a non-empty list of {g, h, m}");
    for (std::size_t k = 0; k < ls.size(); ++k) {
      const std::string p = "/layouts/" + std::to_string(k);
      if (!ls[k].is_object()) throw ConfigError(p, "expected an object {g, h, m}");
      const std::size_t g = as_count(require(ls[k], "g", p), p + "/g", 2);
      const std::size_t h = as_count(require(ls[k], "h", p), p + "/h", 2);
      const std::size_t m = ls[k].contains("m") ? as_count(ls[k]["m"], p + "/m", 1) : 1;
      cfg.layouts.push_back(make_layout(g, h, m, p));
    }
  } else {
    const json& grid = doc["grid"];
    if (!grid.is_object()) throw ConfigError("/grid", "expected an object of lists {g, h, m}");
    const auto gs = as_count_list(require(grid, "g", "/grid"), "/grid/g", 2);
    const auto hs = as_count_list(require(grid, "h", "/grid"), "/grid/h", 2);
    const auto ms = grid.contains("m") ? as_count_list(grid["m"], "/grid/m", 1) : std::vector<std::size_t>{1};
    for (auto g : gs) {
      for (auto h : hs) {
        for (auto m : ms) cfg.layouts.push_back(make_layout(g, h, m, "/grid"));
      }
    }
  }
  if (doc.contains("xi")) {
    const json& x = doc["xi"];
    if (!x.is_array() || (x.size() != 4 && x.size() != 5)) throw ConfigError("/xi", "expected a list of 4 or 5 numbers");
    VectorXd xi(static_cast<Eigen::Index>(x.size()));
    for (std::size_t k = 0; k < x.size(); ++k) xi[static_cast<Eigen::Index>(k)] = as_number(x[k], "/xi/" + std::to_string(k));
    cfg.xi = xi;
  }
  if (doc.contains("theta")) {
    const json& t = doc["theta"];
    if (!t.is_object()) throw ConfigError("/theta", "expected an object");
    for (auto it = t.begin(); it != t.end(); ++it) {
      const std::string p = "/theta/" + it.key();
      const double v = as_number(it.value(), p);
      if (v < 0.0) throw ConfigError(p, "variance must be >= 0");
      if (it.key() == "sigma_a2") cfg.theta.sigma_a2 = v;
      else if (it.key() == "sigma_b2") cfg.theta.sigma_b2 = v;
      else if (it.key() == "sigma_g2") cfg.theta.sigma_g2 = v;
      else if (it.key() == "sigma_e2") cfg.theta.sigma_e2 = v;
      else throw ConfigError(p, "unknown variance component (expected sigma_a2, sigma_b2, sigma_g2, sigma_e2)");
    }
    if (cfg.theta.sigma_e2 <= 0.0) throw ConfigError("/theta/sigma_e2", "error variance must be > 0");
  }
  if (doc.contains("distributions")) {
    const json& d = doc["distributions"];
    if (!d.is_object()) throw ConfigError("/distributions", "expected an object");
    for (auto it = d.begin(); it != d.end(); ++it) {
      const std::string p = "/distributions/" + it.key();
      const Distribution dist = parse_distribution(it.value(), p);
      if (it.key() == "alpha") cfg.distributions.alpha = dist;
      else if (it.key() == "beta") cfg.distributions.beta = dist;
      else if (it.key() == "gamma") cfg.distributions.gamma = dist;
      else if (it.key() == "e") cfg.distributions.e = dist;
      else throw ConfigError(p, "unknown effect (expected alpha, beta, gamma, e)");
    }
  }
  // Mixture admissibility is a property of the configuration, so check it up front.
  const std::pair<Distribution, std::pair<double, const char*>> checks[] = {
      {cfg.distributions.alpha, {cfg.theta.sigma_a2, "/distributions/alpha"}},
      {cfg.distributions.beta, {cfg.theta.sigma_b2, "/distributions/beta"}},
      {cfg.distributions.gamma, {cfg.theta.sigma_g2, "/distributions/gamma"}},
      {cfg.distributions.e, {cfg.theta.sigma_e2, "/distributions/e"}}};
  for (const auto& [dist, info] : checks) {
    if (dist != Distribution::Mixture || info.first == 0.0) continue;
    try {
      MixtureSpec::for_variance(info.first);
    } catch (const ConfigError& e) {
      throw ConfigError(info.second, e.what());
    }
  }
  if (doc.contains("replicates")) cfg.replicates = as_count(doc["replicates"], "/replicates", 1);
  if (doc.contains("level")) {
    cfg.level = as_number(doc["level"], "/level");
    if (!(cfg.level > 0.0 && cfg.level < 1.0)) throw ConfigError("/level", "expected a coverage level in (0, 1)");
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) throw ConfigError("/seed", "expected a non-negative integer");
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("methods")) {
    const json& ms = doc["methods"];
    if (!ms.is_array() || ms.empty()) throw ConfigError("/methods", "expected a non-empty list of lsw|kh|pr");
    std::vector<MseMethod> out;
    for (std::size_t k = 0; k < ms.size(); ++k) {
      const std::string p = "/methods/" + std::to_string(k);
      if (!ms[k].is_string()) throw ConfigError(p, "expected lsw, kh or pr");
      try {
        out.push_back(parse_mse_method(ms[k].get<std::string>()));
      } catch (const DomainError& e) {
        throw ConfigError(p, e.what());
      }
    }
    cfg.methods = out;
  }
  if (doc.contains("estimation")) {
    if (!doc["estimation"].is_string()) throw ConfigError("/estimation", "expected \"reml\" or \"ml\"");
    try {
      cfg.method = parse_method(doc["estimation"].get<std::string>());
    } catch (const DomainError& e) {
      throw ConfigError("/estimation", e.what());
    }
  }
  if (doc.contains("information")) {
    const std::string s = doc["information"].is_string() ? lower(doc["information"].get<std::string>()) : "";
    if (s == "twice_inverse") cfg.info = InfoConvention::TwiceInverseTrace;
    else if (s == "inverse_twice") cfg.info = InfoConvention::InverseOfTwiceTrace;
    else throw ConfigError("/information", "expected \"twice_inverse\" or \"inverse_twice\"");
  }
  if (doc.contains("freeze_covariates")) {
    if (!doc["freeze_covariates"].is_boolean()) throw ConfigError("/freeze_covariates", "expected true or false");
    cfg.freeze_covariates = doc["freeze_covariates"].get<bool>();
  }
  return cfg;
}

ScenarioConfig load_scenario_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open configuration file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario_config(ss.str());
}

const MetricRow* ScenarioResult::find(const std::string& target, MseMethod method) const {
  for (const auto& r : rows) {
    if (r.target == target && r.method == method) return &r;
  }
  return nullptr;
}

std::size_t default_workers() {
  if (const char* env = std::getenv("CROSSBLUP_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

namespace {

// Outcome of one replicate for one target.
struct TargetDraw {
  double error = 0.0;       // EBLUP - realized effect
  std::vector<double> mse;  // one per method
};

struct ReplicateDraw {
  bool ok = false;
  std::vector<TargetDraw> targets;
};

std::uint64_t layout_seed(std::uint64_t master, const BalancedLayout& l) {
  return stream_seed(stream_seed(stream_seed(master, l.g), l.h), l.m);
}

ReplicateDraw run_replicate(const ScenarioConfig& cfg, const BalancedLayout& layout, const std::vector<Target>& targets,
                            const std::vector<MseMethod>& methods, const VectorXd* frozen, std::uint64_t seed) {
  Rng rng(seed);
  const VarianceComponents truth = cfg.theta_for(layout);
  const VectorXd x = frozen ? *frozen : gen_covariate(layout, rng);
  const RandomEffects fx = gen_random_effects(layout, truth, cfg.distributions, rng);
  const ResponseTable table = gen_response(layout, x, cfg.xi_for(layout), fx);
  const CenteredDesign design(layout, auto_design(layout, x));

  ReplicateDraw out;
  try {
    FitOptions opts;
    opts.method = cfg.method;
    const FitResult fitted = fit(design, table, opts);
    const Eblups e = eblup(fitted, design, table);
    const bool need_second = std::any_of(methods.begin(), methods.end(), [](MseMethod m) { return m != MseMethod::LSW; });
    std::optional<SecondOrderCalculator> so;
    if (need_second) so.emplace(fitted.theta, design, Backend::Structured, cfg.info);
    for (const Target& t : targets) {
      TargetDraw d;
      switch (t.effect) {
        case Effect::Row: d.error = e.alpha[static_cast<Eigen::Index>(t.i)] - fx.alpha[static_cast<Eigen::Index>(t.i)]; break;
        case Effect::Column: d.error = e.beta[static_cast<Eigen::Index>(t.j)] - fx.beta[static_cast<Eigen::Index>(t.j)]; break;
        case Effect::Interaction:
          d.error = e.gamma(static_cast<Eigen::Index>(t.i), static_cast<Eigen::Index>(t.j)) -
                    fx.gamma[static_cast<Eigen::Index>(t.i * layout.h + t.j)];
          break;
      }
      for (MseMethod m : methods) {
        if (m == MseMethod::LSW) {
          d.mse.push_back(mse_lsw(fitted.theta, design, t));
        } else if (t.effect == Effect::Interaction) {
          d.mse.push_back(std::numeric_limits<double>::quiet_NaN());
        } else {
          const SecondOrderMse s = so->compute(t);
          d.mse.push_back(m == MseMethod::KH ? s.kh() : s.pr());
        }
      }
      out.targets.push_back(std::move(d));
    }
    out.ok = true;
  } catch (const Error&) {
    out.ok = false;
    out.targets.clear();
  }
  return out;
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& config, const BalancedLayout& layout, std::size_t workers) {
  if (config.replicates < 1) throw ConfigError("/replicates", "expected an integer >= 1");
  std::vector<Target> targets = {Target::row(0), Target::column(0)};
  if (layout.replicated()) targets.push_back(Target::cell(0, 0));
  const std::vector<MseMethod> methods = config.methods_for(layout);
  const std::uint64_t base = layout_seed(config.seed, layout);

  std::optional<VectorXd> frozen;
  if (config.freeze_covariates) {
    Rng rng(stream_seed(base, std::numeric_limits<std::uint64_t>::max()));
    frozen = gen_covariate(layout, rng);
  }

  std::vector<ReplicateDraw> draws(config.replicates);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&]() {
    for (;;) {
      const std::size_t r = next.fetch_add(1);
      if (r >= config.replicates) return;
      try {
        draws[r] = run_replicate(config, layout, targets, methods, frozen ? &*frozen : nullptr, stream_seed(base, r));
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(config.replicates);
        return;
      }
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(workers, config.replicates));
  if (nthreads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < nthreads; ++k) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  ScenarioResult res;
  res.name = config.name;
  res.layout = layout;
  res.replicates = config.replicates;
  res.level = config.level;
  const double z = normal_critical_value(1.0 - config.level);
  for (const auto& d : draws) {
    if (!d.ok) ++res.failures;
  }
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      if (methods[mi] != MseMethod::LSW && targets[ti].effect == Effect::Interaction) continue;
      CompensatedSum sq, root, hits, abs_err;
      std::size_t used = 0;
      for (const auto& d : draws) {
        if (!d.ok) continue;
        const TargetDraw& td = d.targets[ti];
        const double mse = td.mse[mi];
        ++used;
        sq.add(td.error * td.error);
        abs_err.add(std::abs(td.error));
        root.add(std::sqrt(mse));
        hits.add(std::abs(td.error) <= z * std::sqrt(mse) ? 1.0 : 0.0);
      }
      MetricRow row;
      row.target = targets[ti].label();
      row.method = methods[mi];
      row.used = used;
      if (used > 0) {
        const auto u = static_cast<double>(used);
        row.coverage = hits.value() / u;
        row.coverage_se = std::sqrt(row.coverage * (1.0 - row.coverage) / u);
        row.rmse_true = std::sqrt(sq.value() / u);
        row.rmse_est = root.value() / u;
        row.mae_true = abs_err.value() / u;
        row.rlen_abs = row.mae_true > 0.0 ? (row.rmse_est - row.mae_true) / row.mae_true : 0.0;
        row.rlen = row.rmse_true > 0.0 ? (row.rmse_est - row.rmse_true) / row.rmse_true : 0.0;
      }
      res.rows.push_back(row);
    }
  }
  if (res.failures * 100 > res.replicates) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu of %zu replicates failed to fit (%.1f%%) and were excluded", res.failures,
                  res.replicates, 100.0 * static_cast<double>(res.failures) / static_cast<double>(res.replicates));
    res.warnings.emplace_back(buf);
  }
  return res;
}

std::vector<ScenarioResult> run_scenarios(const ScenarioConfig& config, std::size_t workers) {
  std::vector<ScenarioResult> out;
  for (const auto& l : config.layouts) out.push_back(run_scenario(config, l, workers));
  return out;
}

TableFormat parse_table_format(const std::string& text) {
  const std::string s = lower(text);
  if (s == "text") return TableFormat::Text;
  if (s == "csv") return TableFormat::Csv;
  if (s == "json") return TableFormat::Json;
  throw DomainError("unknown format '" + text + "' (expected text, csv or json)");
}

namespace {

constexpr const char* kSeNote =
    "MC standard error of Cvge is sqrt(Cvge(1-Cvge)/R); about 0.005 at R = 1000 near the nominal level.";
constexpr const char* kRlenNote =
    "RLen = (mean sqrt(MSE) - RMSE_T) / RMSE_T; RLen_abs uses the mean absolute prediction error in place of RMSE_T.";

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

json to_json(const ScenarioResult& r) {
  json j;
  j["name"] = r.name;
  j["g"] = r.layout.g;
  j["h"] = r.layout.h;
  j["m"] = r.layout.m;
  j["replicates"] = r.replicates;
  j["failures"] = r.failures;
  j["level"] = r.level;
  j["rows"] = json::array();
  for (const auto& row : r.rows) {
    json x;
    x["target"] = row.target;
    x["method"] = to_string(row.method);
    x["used"] = row.used;
    x["cvge"] = row.coverage;
    x["cvge_se"] = row.coverage_se;
    x["rlen"] = row.rlen;
    x["rmse_true"] = row.rmse_true;
    x["rmse_est"] = row.rmse_est;
    x["mae_true"] = row.mae_true;
    x["rlen_abs"] = row.rlen_abs;
    j["rows"].push_back(x);
  }
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace

std::string emit_table(const std::vector<ScenarioResult>& results, TableFormat format) {
  std::ostringstream os;
  if (format == TableFormat::Json) {
    json doc;
    doc["results"] = json::array();
    for (const auto& r : results) doc["results"].push_back(to_json(r));
    doc["notes"] = json::array({kSeNote, kRlenNote});
    os << doc.dump(2) << '\n';
    return os.str();
  }
  if (format == TableFormat::Csv) {
    os << "scenario,g,h,m,target,method,used,failures,cvge,cvge_se,rlen,rmse_true,rmse_est,mae_true,rlen_abs\n";
    for (const auto& r : results) {
      for (const auto& row : r.rows) {
        os << r.name << ',' << r.layout.g << ',' << r.layout.h << ',' << r.layout.m << ',' << '"' << row.target << '"'
           << ',' << to_string(row.method) << ',' << row.used << ',' << r.failures << ',' << fmt(row.coverage, 4) << ','
           << fmt(row.coverage_se, 4) << ',' << fmt(row.rlen, 4) << ',' << fmt(row.rmse_true, 4) << ','
           << fmt(row.rmse_est, 4) << ',' << fmt(row.mae_true, 4) << ',' << fmt(row.rlen_abs, 4) << '\n';
      }
    }
    os << "# " << kSeNote << '\n' << "# " << kRlenNote << '\n';
    return os.str();
  }
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %5s %5s %4s  %-12s %-6s %6s %7s %7s %7s %9s %9s %9s\n", "scenario", "g", "h",
                "m", "target", "method", "used", "Cvge", "SE", "RLen", "RMSE_T", "RMSE_est", "RLen_abs");
  os << line;
  for (const auto& r : results) {
    for (const auto& row : r.rows) {
      std::snprintf(line, sizeof line, "%-12s %5zu %5zu %4zu  %-12s %-6s %6zu %7.3f %7.3f %7.3f %9.4f %9.4f %9.3f\n",
                    r.name.c_str(), r.layout.g, r.layout.h, r.layout.m, row.target.c_str(),
                    to_string(row.method).c_str(), row.used, row.coverage, row.coverage_se, row.rlen, row.rmse_true,
                    row.rmse_est, row.rlen_abs);
      os << line;
    }
    for (const auto& w : r.warnings) os << "warning (" << r.name << "): " << w << '\n';
  }
  os << "note: " << kSeNote << '\n' << "note: " << kRlenNote << '\n';
  return os.str();
}

std::vector<ScenarioResult> parse_results_json(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid results JSON: ") + e.what());
  }
  std::vector<ScenarioResult> out;
  const json& rs = require(doc, "results", "");
  if (!rs.is_array()) throw ConfigError("/results", "expected a list");
  for (std::size_t k = 0; k < rs.size(); ++k) {
    const std::string p = "/results/" + std::to_string(k);
    const json& r = rs[k];
    try {
      ScenarioResult s;
      s.name = r.at("name").get<std::string>();
      s.layout = BalancedLayout(r.at("g").get<std::size_t>(), r.at("h").get<std::size_t>(), r.at("m").get<std::size_t>());
      s.replicates = r.at("replicates").get<std::size_t>();
      s.failures = r.at("failures").get<std::size_t>();
      s.level = r.at("level").get<double>();
      for (const auto& x : r.at("rows")) {
        MetricRow row;
        row.target = x.at("target").get<std::string>();
        row.method = parse_mse_method(x.at("method").get<std::string>());
        row.used = x.at("used").get<std::size_t>();
        row.coverage = x.at("cvge").get<double>();
        row.coverage_se = x.at("cvge_se").get<double>();
        row.rlen = x.at("rlen").get<double>();
        row.rmse_true = x.at("rmse_true").get<double>();
        row.rmse_est = x.at("rmse_est").get<double>();
        row.mae_true = x.value("mae_true", 0.0);
        row.rlen_abs = x.value("rlen_abs", 0.0);
        s.rows.push_back(row);
      }
      if (r.contains("warnings")) s.warnings = r["warnings"].get<std::vector<std::string>>();
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ConfigError(p, std::string("malformed result: ") + e.what());
    } catch (const DomainError& e) {
      throw ConfigError(p, e.what());
    }
  }
  return out;
}

}  // namespace crossblup
