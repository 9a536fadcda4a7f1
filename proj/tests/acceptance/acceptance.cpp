// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion followed by
// indented details; exits non-zero when any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "../support/oracles.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/kron.hpp"
#include "crossblup/predict.hpp"
#include "crossblup/simlab.hpp"
#include "crossblup/uncertainty.hpp"

using namespace crossblup;

namespace {

constexpr std::uint64_t kSeed = 20240601;

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { details.push_back("     " + what); }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome structured_inverse() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(kSeed);
  std::uniform_int_distribution<std::size_t> gh(2, 4), mm(1, 3);
  double worst_inv = 0.0, worst_det = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const BalancedLayout l(gh(rng), gh(rng), mm(rng));
    const VarianceComponents t = oracle::random_theta(rng, l.m > 1);
    const MatrixXd v = oracle::v_matrix(t, l);
    const VectorXd x = oracle::normal_vector(rng, v.rows(), 2.0);
    const VectorXd want = v.inverse() * x;
    worst_inv = std::max(worst_inv, (apply_v_inv(t, l, x) - want).cwiseAbs().maxCoeff());
    const double dense_logdet = std::log(v.determinant());
    worst_det = std::max(worst_det, std::abs(lambdas(t, l).log_det() - dense_logdet));
  }
  const double secs = seconds_since(t0);
  o.check(worst_inv <= 1e-10, fmt("max |V^-1 x - dense| = %.2e (tol 1e-10)", worst_inv));
  o.check(worst_det <= 1e-8, fmt("max |log det - dense| = %.2e (tol 1e-8)", worst_det));
  o.check(secs < 5.0, fmt("runtime %.2f s (limit 5 s)", secs));
  return o;
}

Outcome blup_oracle() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(kSeed + 1);
  std::uniform_int_distribution<std::size_t> gh(2, 4), mm(1, 3);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const BalancedLayout l(gh(rng), gh(rng), mm(rng));
    const VarianceComponents t = oracle::random_theta(rng, l.m > 1);
    const CenteredDesign d(l, oracle::random_covariates(rng, l));
    const VectorXd xi = oracle::normal_vector(rng, static_cast<Eigen::Index>(1 + d.roles().p()));
    const VectorXd y = oracle::normal_vector(rng, static_cast<Eigen::Index>(l.n()), 3.0);
    const ResponseTable table(l, y);
    const Eblups e = l.m > 1 ? blup_interaction(t, xi, d, table) : blup_no_interaction(t, xi, d, table);
    const VectorXd want = oracle::blup(t, l, y - d.model_matrix() * xi);
    const auto g = static_cast<Eigen::Index>(l.g), h = static_cast<Eigen::Index>(l.h);
    worst = std::max(worst, (e.alpha - want.head(g)).cwiseAbs().maxCoeff());
    worst = std::max(worst, (e.beta - want.segment(g, h)).cwiseAbs().maxCoeff());
    if (l.m > 1) {
      for (Eigen::Index i = 0; i < g; ++i) {
        for (Eigen::Index j = 0; j < h; ++j) worst = std::max(worst, std::abs(e.gamma(i, j) - want[g + h + i * h + j]));
      }
    }
  }
  const double secs = seconds_since(t0);
  o.check(worst <= 1e-10, fmt("max |BLUP - G Z'V^-1 r| = %.2e (tol 1e-10)", worst));
  o.check(secs < 5.0, fmt("runtime %.2f s (limit 5 s)", secs));
  return o;
}

Outcome reml_vs_dense() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(kSeed + 2);
  double worst_crit = 0.0, worst_theta = 0.0;
  bool all_converged = true;
  for (int inst = 0; inst < 5; ++inst) {
    const std::size_t m = inst % 2 == 0 ? 1 : 3;
    const BalancedLayout l(6, 6, m);
    const VarianceComponents truth{2.0, 3.0, m > 1 ? 1.0 : 0.0, 1.5};
    const CenteredDesign d(l, oracle::random_covariates(rng, l));
    const MatrixXd x = d.model_matrix();
    const auto n = static_cast<Eigen::Index>(l.n());
    VectorXd y = x * oracle::normal_vector(rng, x.cols()) + oracle::normal_vector(rng, n, std::sqrt(truth.sigma_e2));
    y += oracle::z_row(l) * oracle::normal_vector(rng, 6, std::sqrt(truth.sigma_a2));
    y += oracle::z_col(l) * oracle::normal_vector(rng, 6, std::sqrt(truth.sigma_b2));
    if (m > 1) y += oracle::z_cell(l) * oracle::normal_vector(rng, 36, std::sqrt(truth.sigma_g2));
    const FitResult r = fit(d, ResponseTable(l, y));
    all_converged = all_converged && r.converged;
    const int k = m > 1 ? 4 : 3;
    auto negcrit = [&](const VectorXd& phi) {
      const VarianceComponents t{std::exp(phi[1]), std::exp(phi[2]), k == 4 ? std::exp(phi[3]) : 0.0,
                                 std::exp(phi[0])};
      return -oracle::criterion(t, l, x, y, true);
    };
    const VectorXd best = oracle::nelder_mead(negcrit, VectorXd::Zero(k), 0.5, 20000, 1e-14);
    worst_crit = std::max(worst_crit, std::abs(r.criterion + negcrit(best)));
    const Eigen::Vector4d fitted = to_vector(r.theta);
    const Eigen::Vector4d brute = to_vector(
        VarianceComponents{std::exp(best[1]), std::exp(best[2]), k == 4 ? std::exp(best[3]) : 0.0, std::exp(best[0])});
    for (int c = 0; c < k; ++c) worst_theta = std::max(worst_theta, std::abs(fitted[c] - brute[c]) / brute[c]);
  }
  const double secs = seconds_since(t0);
  o.check(all_converged, "structured REML converged on all 5 instances (g=h=6, m in {1,3})");
  o.check(worst_crit <= 1e-6, fmt("max |criterion - dense optimum| = %.2e (tol 1e-6)", worst_crit));
  o.check(worst_theta <= 1e-4, fmt("max relative |theta - dense optimum| = %.2e (tol 1e-4)", worst_theta));
  o.check(secs < 60.0, fmt("runtime %.2f s (limit 60 s)", secs));
  return o;
}

void check_cell(Outcome& o, const ScenarioResult& r, const std::string& target, MseMethod method, double tabled,
                double tol) {
  const MetricRow* row = r.find(target, method);
  if (row == nullptr) {
    o.check(false, target + " " + to_string(method) + " missing from results");
    return;
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "(%zu,%zu,%zu) %s %s Cvge %.3f (SE %.3f) vs %.3f +- %.2f", r.layout.g, r.layout.h,
                r.layout.m, target.c_str(), to_string(method).c_str(), row->coverage, row->coverage_se, tabled, tol);
  o.check(std::abs(row->coverage - tabled) <= tol, buf);
}

void check_rlen(Outcome& o, const ScenarioResult& r, const std::string& target, MseMethod method, double tabled) {
  const MetricRow* row = r.find(target, method);
  if (row == nullptr) {
    o.check(false, target + " " + to_string(method) + " missing from results");
    return;
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "(%zu,%zu) %s %s RLen %.3f vs %.3f +- 0.15 [mean-abs-error variant %.3f]",
                r.layout.g, r.layout.h, target.c_str(), to_string(method).c_str(), row->rlen, tabled, row->rlen_abs);
  o.check(std::abs(row->rlen - tabled) <= 0.15, buf);
}

void note_run(Outcome& o, const ScenarioResult& r, double secs) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "(%zu,%zu,%zu): %zu replicates, %zu failed fits, %.1f s", r.layout.g, r.layout.h,
                r.layout.m, r.replicates, r.failures, secs);
  o.note(buf);
  for (const auto& w : r.warnings) o.note("warning: " + w);
}

Outcome table3() {
  Outcome o;
  ScenarioConfig cfg;
  cfg.name = "normal, no interaction";
  cfg.seed = kSeed;
  cfg.replicates = 1000;
  auto t0 = std::chrono::steady_clock::now();
  const ScenarioResult small = run_scenario(cfg, BalancedLayout(10, 10, 1));
  const double s_small = seconds_since(t0);
  note_run(o, small, s_small);
  check_cell(o, small, "alpha[1]", MseMethod::LSW, 0.977, 0.02);
  check_cell(o, small, "alpha[1]", MseMethod::KH, 0.913, 0.02);
  check_cell(o, small, "alpha[1]", MseMethod::PR, 0.947, 0.02);
  check_rlen(o, small, "alpha[1]", MseMethod::LSW, 0.634);
  check_rlen(o, small, "alpha[1]", MseMethod::KH, 0.215);
  check_rlen(o, small, "alpha[1]", MseMethod::PR, 0.384);
  o.check(s_small < 120.0, fmt("(10,10) runtime %.1f s (limit 120 s)", s_small));

  cfg.methods = std::vector<MseMethod>{MseMethod::LSW};
  t0 = std::chrono::steady_clock::now();
  const ScenarioResult large = run_scenario(cfg, BalancedLayout(100, 100, 1));
  const double s_large = seconds_since(t0);
  note_run(o, large, s_large);
  check_cell(o, large, "alpha[1]", MseMethod::LSW, 0.968, 0.02);
  check_rlen(o, large, "alpha[1]", MseMethod::LSW, 0.336);
  o.check(s_large < 1800.0, fmt("(100,100) LSW runtime %.1f s (limit 1800 s)", s_large));
  return o;
}

Outcome table4() {
  Outcome o;
  ScenarioConfig cfg;
  cfg.name = "mixture beta";
  cfg.seed = kSeed;
  cfg.distributions.beta = Distribution::Mixture;
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioResult r = run_scenario(cfg, BalancedLayout(10, 10, 1));
  note_run(o, r, seconds_since(t0));
  check_cell(o, r, "beta[1]", MseMethod::LSW, 0.958, 0.02);
  return o;
}

Outcome table1() {
  Outcome o;
  ScenarioConfig cfg;
  cfg.name = "normal, interaction";
  cfg.seed = kSeed;
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioResult r = run_scenario(cfg, BalancedLayout(10, 10, 10));
  const double secs = seconds_since(t0);
  note_run(o, r, secs);
  check_cell(o, r, "alpha[1]", MseMethod::LSW, 0.953, 0.02);
  check_cell(o, r, "beta[1]", MseMethod::LSW, 0.917, 0.02);
  check_cell(o, r, "gamma[1,1]", MseMethod::LSW, 0.967, 0.02);
  o.check(secs < 600.0, fmt("runtime %.1f s (limit 600 s)", secs));
  return o;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k] / n;
    mb += b[k] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Linear representation of sigma_a^2 and the asymptotic variance of the row
// EBLUP at g = h = 100, m = 5 with the design held fixed.
Outcome asymptotics() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const BalancedLayout l(100, 100, 5);
  ScenarioConfig cfg;
  const VarianceComponents truth = cfg.theta_for(l);
  const VectorXd xi = cfg.xi_for(l);
  Rng design_rng(stream_seed(kSeed, 0xD5));
  const VectorXd covariate = gen_covariate(l, design_rng);
  const CenteredDesign design(l, auto_design(l, covariate));
  const std::size_t corr_reps = 200, var_reps = 1000;
  std::vector<double> actual, predicted, with_cross, scaled_err;
  std::size_t failures = 0;
  for (std::size_t rep = 0; rep < var_reps; ++rep) {
    Rng rng(stream_seed(kSeed + 7, rep));
    const RandomEffects eff = gen_random_effects(l, truth, EffectDistributions{}, rng);
    const ResponseTable table = gen_response(l, covariate, xi, eff);
    FitResult r;
    try {
      r = fit(design, table);
    } catch (const Error&) {
      ++failures;
      continue;
    }
    if (rep < corr_reps) {
      actual.push_back(r.theta.sigma_a2 - truth.sigma_a2);
      predicted.push_back(linear_approx_parameter_errors(design, eff, truth).sigma_a2);
      // Diagnostic only: adds the 2 alpha_i (gamma_bar_i. + e_bar_i..) terms that vanish as h, m grow.
      const Averages gam = averages(BalancedLayout(l.g, l.h, 1), eff.gamma);
      const Averages err = averages(l, eff.e);
      double s = 0.0;
      for (Eigen::Index i = 0; i < eff.alpha.size(); ++i) {
        s += eff.alpha[i] * eff.alpha[i] + 2.0 * eff.alpha[i] * (gam.row[i] + err.row[i]);
      }
      with_cross.push_back(s / static_cast<double>(l.g) - truth.sigma_a2);
    }
    const Eblups e = eblup(r, design, table);
    scaled_err.push_back(std::sqrt(static_cast<double>(l.g)) * (e.alpha[0] - eff.alpha[0]));
  }
  const double corr = correlation(actual, predicted);
  o.check(corr >= 0.95, fmt("corr(sigma_a2 error, linear approximation) = %.4f over %.0f replicates (need >= 0.95)",
                            corr, static_cast<double>(actual.size())));
  o.note(fmt("diagnostic: corr with the row-mean cross terms added = %.4f", correlation(actual, with_cross)));
  double mean = 0.0;
  for (double v : scaled_err) mean += v / static_cast<double>(scaled_err.size());
  double var = 0.0;
  for (double v : scaled_err) var += (v - mean) * (v - mean) / static_cast<double>(scaled_err.size() - 1);
  const JointCovariance jc = joint_covariance(truth, design, 0, 1, 0, 1);
  const double f11 = jc.matrix(0, 0);
  o.check(std::abs(var / f11 - 1.0) <= 0.15,
          fmt("var(sqrt(g)(alpha_hat_1 - alpha_1)) = %.3f vs F11 = %.3f, ratio %.3f over %.0f replicates (need within 15%%)",
              var, f11, var / f11, static_cast<double>(scaled_err.size())));
  const double finite_m = static_cast<double>(l.g) * truth.sigma_e2 / static_cast<double>(l.h * l.m);
  o.note(fmt("diagnostic: F11 + g sigma_e2/(hm) = %.3f, ratio %.3f (the added term vanishes as m grows)",
             f11 + finite_m, var / (f11 + finite_m)));
  if (failures > 0) o.note(std::to_string(failures) + " replicates failed to fit");
  o.note(fmt("runtime %.1f s", seconds_since(t0)));
  return o;
}

Outcome m1_monte_carlo() {
  Outcome o;
  const BalancedLayout l(3, 3, 2);
  const VarianceComponents truth{1.5, 2.0, 0.8, 1.2};
  Rng design_rng(stream_seed(kSeed, 0xA8));
  const VectorXd covariate = gen_covariate(l, design_rng);
  const CenteredDesign design(l, auto_design(l, covariate));
  ScenarioConfig cfg;
  const VectorXd xi = cfg.xi_for(l);
  const SecondOrderCalculator calc(truth, design);
  const double m1 = calc.compute(Target::row(0)).m1;
  const std::size_t reps = 50000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t rep = 0; rep < reps; ++rep) {
    Rng rng(stream_seed(kSeed + 8, rep));
    const RandomEffects eff = gen_random_effects(l, truth, EffectDistributions{}, rng);
    const ResponseTable table = gen_response(l, covariate, xi, eff);
    const double err = calc.blup(Target::row(0), table.values()) - eff.alpha[0];
    sum += err * err;
    sum2 += err * err * err * err;
  }
  const double n = static_cast<double>(reps);
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / (n - 1));
  o.check(std::abs(mean - m1) <= 2.0 * se,
          fmt("E(alpha_hat_1 - alpha_1)^2 = %.5f (MC SE %.5f) vs M1 = %.5f, |diff| = %.2f SE", mean, se, m1,
              std::abs(mean - m1) / se));
  return o;
}

Outcome finite_differences() {
  Outcome o;
  std::mt19937_64 rng(kSeed + 9);
  double worst_ell = 0.0, worst_gam = 0.0;
  for (std::size_t m : {1u, 2u}) {
    const BalancedLayout l(3, 3, m);
    const CenteredDesign d(l, oracle::random_covariates(rng, l));
    const VarianceComponents t = oracle::random_theta(rng, m > 1);
    const auto n = static_cast<Eigen::Index>(l.n());
    const SecondOrderCalculator base(t, d);
    for (const Target target : {Target::row(0), Target::row(2), Target::column(1)}) {
      const MatrixXd ell = base.derivative_functionals(target);
      const MatrixXd gam = base.gamma_rows(target);
      const Eigen::Vector4d tv = to_vector(t);
      for (std::size_t s = 0; s < parameter_count(l); ++s) {
        const auto si = static_cast<Eigen::Index>(s);
        const double step = 1e-5 * tv[si];
        Eigen::Vector4d up = tv, dn = tv;
        up[si] += step;
        dn[si] -= step;
        const SecondOrderCalculator cu(from_vector(up), d), cd(from_vector(dn), d);
        // Column k of the weight matrices: response equal to the k-th unit vector.
        VectorXd fd_ell(n), fd_gam(n);
        for (Eigen::Index k = 0; k < n; ++k) {
          const VectorXd e = VectorXd::Unit(n, k);
          fd_ell[k] = (cu.blup(target, e) - cd.blup(target, e)) / (2 * step);
          fd_gam[k] = (cu.gamma_base(target, e) - cd.gamma_base(target, e)) / (2 * step);
        }
        worst_ell = std::max(worst_ell, (ell.col(si) - fd_ell).norm() / std::max(fd_ell.norm(), 1e-300));
        worst_gam = std::max(worst_gam, (gam.col(si) - fd_gam).norm() / std::max(fd_gam.norm(), 1e-300));
      }
    }
  }
  o.check(worst_ell <= 1e-6, fmt("KH derivative vectors: max relative error %.2e (tol 1e-6)", worst_ell));
  o.check(worst_gam <= 1e-6, fmt("PR Gamma rows: max relative error %.2e (tol 1e-6)", worst_gam));
  return o;
}

Outcome joint_identity() {
  Outcome o;
  std::mt19937_64 rng(kSeed + 10);
  double worst = 0.0;
  for (const BalancedLayout l : {BalancedLayout(10, 10, 1), BalancedLayout(12, 7, 4), BalancedLayout(30, 50, 10)}) {
    const CenteredDesign d(l, oracle::random_covariates(rng, l));
    const VarianceComponents t{9, 49, l.m > 1 ? 36.0 : 0.0, 81};
    const Leverage ha(d, Factor::A), hb(d, Factor::B);
    const std::size_t i = 0, i2 = l.g - 1, j = 1, j2 = l.h - 1;
    const JointCovariance jc = joint_covariance(t, l, ha, hb, i, i2, j, j2);
    std::vector<double> want = {mse_lsw(t, l, Effect::Row, ha.diag(i)), mse_lsw(t, l, Effect::Row, ha.diag(i2)),
                                mse_lsw(t, l, Effect::Column, hb.diag(j)), mse_lsw(t, l, Effect::Column, hb.diag(j2))};
    if (l.m > 1) want.resize(8, mse_lsw(t, l, Effect::Interaction, 1.0));
    if (jc.matrix.rows() != static_cast<Eigen::Index>(want.size())) {
      o.check(false, "joint covariance has unexpected dimension");
      continue;
    }
    for (std::size_t k = 0; k < want.size(); ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      worst = std::max(worst, std::abs(jc.matrix(ki, ki) / jc.normalization - want[k]) / want[k]);
    }
  }
  o.check(worst <= 1e-12, fmt("max relative |diag / normalization - MSE_LSW| = %.2e (tol 1e-12)", worst));
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"structured inverse and log determinant", structured_inverse},
      {"closed-form BLUPs", blup_oracle},
      {"REML against dense brute force", reml_vs_dense},
      {"coverage and relative length, normal effects", table3},
      {"coverage with mixture column effects", table4},
      {"coverage with interaction", table1},
      {"linear representation and asymptotic variance", asymptotics},
      {"M1 Monte Carlo", m1_monte_carlo},
      {"finite differences of KH and PR ingredients", finite_differences},
      {"joint covariance against LSW", joint_identity},
  };
  std::printf("acceptance seed %llu, workers %zu\n", static_cast<unsigned long long>(kSeed), default_workers());
  int failed = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    Outcome o;
    try {
      o = criteria[c].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::printf("criterion %2zu: %s  %s\n", c + 1, o.pass ? "PASS" : "FAIL", criteria[c].first.c_str());
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
