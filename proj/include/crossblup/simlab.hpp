#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crossblup/design.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/uncertainty.hpp"

namespace crossblup {

using Rng = std::mt19937_64;

// Counter-based stream splitting: the seed of stream `index` depends only on
// (master, index), so replicate results do not depend on scheduling.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index);

enum class Distribution { Normal, Mixture };
std::string to_string(Distribution d);

// Two-component normal mixture w1 N(mean1, var1) + w2 N(mean2, var2) with
// mean2 chosen for an overall mean of 0 and var2 for a target variance.
struct MixtureSpec {
  double weight1 = 0.3;
  double mean1 = 0.5;
  double var1 = 1.0;
  double weight2 = 0.7;
  double mean2 = -0.3 * 0.5 / 0.7;
  double var2 = 1.0;

  // Throws ConfigError when the target variance is too small for var2 > 0.
  static MixtureSpec for_variance(double variance);
  double mean() const { return weight1 * mean1 + weight2 * mean2; }
  double variance() const {
    return weight1 * (var1 + mean1 * mean1) + weight2 * (var2 + mean2 * mean2) - mean() * mean();
  }
};

// Observation-level covariate x = 4 + t_i + 1.5 u_j + 2 v_ij (+ 3 w_ijk when m > 1)
// with t, u, v, w independent standard normal.
VectorXd gen_covariate(const BalancedLayout& layout, Rng& rng);

// `count` iid draws with mean 0 and the given variance.
VectorXd gen_effects(Distribution dist, std::size_t count, double variance, Rng& rng);

struct EffectDistributions {
  Distribution alpha = Distribution::Normal;
  Distribution beta = Distribution::Normal;
  Distribution gamma = Distribution::Normal;
  Distribution e = Distribution::Normal;
};

RandomEffects gen_random_effects(const BalancedLayout& layout, const VarianceComponents& theta,
                                 const EffectDistributions& dists, Rng& rng);

// y = xbar xi0 + (xbar_i. - xbar) xi1 + (xbar_.j - xbar) xi2 + (cell part) xi3
//     [+ (x_ijk - xbar_ij.) xi4] + alpha_i + beta_j [+ gamma_ij] + e_ijk.
ResponseTable gen_response(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& covariate,
                           const Eigen::Ref<const VectorXd>& xi, const RandomEffects& effects);

struct ScenarioConfig {
  std::string name = "scenario";
  std::vector<BalancedLayout> layouts;
  std::optional<VectorXd> xi;  // default [0,5,7,3] (m = 1) or [0,5,7,3,4]
  VarianceComponents theta{9.0, 49.0, 36.0, 81.0};
  EffectDistributions distributions;
  std::size_t replicates = 1000;
  double level = 0.95;  // interval coverage 1 - q
  std::uint64_t seed = 20240601;
  std::optional<std::vector<MseMethod>> methods;  // default: all three for m = 1, LSW for m > 1
  Method method = Method::REML;
  InfoConvention info = kDefaultInfoConvention;
  bool freeze_covariates = false;

  VectorXd xi_for(const BalancedLayout& layout) const;
  VarianceComponents theta_for(const BalancedLayout& layout) const;
  std::vector<MseMethod> methods_for(const BalancedLayout& layout) const;
};

// Parses the JSON configuration. Throws ConfigError carrying a JSON pointer.
//   {"name", "layouts": [{"g","h","m"}] | "grid": {"g": [...], "h": [...], "m": [...]},
//    "xi", "theta": {"sigma_a2", ...}, "distributions": {"alpha": "normal"|"mixture", ...},
//    "replicates", "level", "seed", "methods": ["lsw", ...], "estimation": "reml"|"ml",
//    "information": "twice_inverse"|"inverse_twice", "freeze_covariates"}
ScenarioConfig parse_scenario_config(const std::string& json_text);
ScenarioConfig load_scenario_config(const std::string& path);

struct MetricRow {
  std::string target;  // alpha[1], beta[1], gamma[1,1]
  MseMethod method = MseMethod::LSW;
  std::size_t used = 0;
  double coverage = 0.0;
  double coverage_se = 0.0;
  double rlen = 0.0;
  double rmse_true = 0.0;
  double rmse_est = 0.0;
  double mae_true = 0.0;  // mean |EBLUP - realized effect|
  double rlen_abs = 0.0;  // (rmse_est - mae_true) / mae_true, diagnostic companion of rlen
};

struct ScenarioResult {
  std::string name;
  BalancedLayout layout;
  std::size_t replicates = 0;
  std::size_t failures = 0;
  double level = 0.95;
  std::vector<MetricRow> rows;
  std::vector<std::string> warnings;

  const MetricRow* find(const std::string& target, MseMethod method) const;
};

// Worker count from CROSSBLUP_WORKERS, else the hardware concurrency (at least 1).
std::size_t default_workers();

ScenarioResult run_scenario(const ScenarioConfig& config, const BalancedLayout& layout,
                            std::size_t workers = default_workers());
std::vector<ScenarioResult> run_scenarios(const ScenarioConfig& config, std::size_t workers = default_workers());

enum class TableFormat { Text, Csv, Json };
TableFormat parse_table_format(const std::string& text);

std::string emit_table(const std::vector<ScenarioResult>& results, TableFormat format);
// Inverse of emit_table(..., Json).
std::vector<ScenarioResult> parse_results_json(const std::string& json_text);

}  // namespace crossblup
