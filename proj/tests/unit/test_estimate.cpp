#include <doctest.h>

#include <random>

#include "../support/oracles.hpp"
#include "crossblup/errors.hpp"
#include "crossblup/estimate.hpp"

using namespace crossblup;

namespace {

struct Instance {
  BalancedLayout layout;
  CenteredDesign design;
  VectorXd y;
};

Instance make_instance(std::mt19937_64& rng, const BalancedLayout& l, const VarianceComponents& truth) {
  const CenteredDesign d(l, oracle::random_covariates(rng, l));
  const MatrixXd x = d.model_matrix();
  const auto n = static_cast<Eigen::Index>(l.n());
  VectorXd y = x * oracle::normal_vector(rng, x.cols()) + oracle::normal_vector(rng, n, std::sqrt(truth.sigma_e2));
  y += oracle::z_row(l) * oracle::normal_vector(rng, static_cast<Eigen::Index>(l.g), std::sqrt(truth.sigma_a2));
  y += oracle::z_col(l) * oracle::normal_vector(rng, static_cast<Eigen::Index>(l.h), std::sqrt(truth.sigma_b2));
  if (l.m > 1) {
    y += oracle::z_cell(l) * oracle::normal_vector(rng, static_cast<Eigen::Index>(l.cells()), std::sqrt(truth.sigma_g2));
  }
  return {l, d, y};
}

}  // namespace

TEST_CASE("stratum REML and ML criteria match dense likelihoods") {
  std::mt19937_64 rng(99);
  for (std::size_t m : {1u, 2u, 3u}) {
    const BalancedLayout l(4, 3, m);
    const VarianceComponents truth{1.5, 0.7, m > 1 ? 0.9 : 0.0, 1.2};
    const Instance in = make_instance(rng, l, truth);
    const StratumModel model(in.design, in.y);
    const MatrixXd x = in.design.model_matrix();
    for (int rep = 0; rep < 4; ++rep) {
      const VarianceComponents t = oracle::random_theta(rng, m > 1);
      for (Method method : {Method::REML, Method::ML}) {
        const auto ev = model.evaluate(t, method);
        const double want = oracle::criterion(t, l, x, in.y, method == Method::REML);
        CHECK(ev.criterion == doctest::Approx(want).epsilon(1e-10));
        CHECK((ev.xi - oracle::gls(t, l, x, in.y)).cwiseAbs().maxCoeff() < 1e-8);
      }
    }
  }
}

TEST_CASE("analytic gradient agrees with central differences") {
  std::mt19937_64 rng(7);
  for (std::size_t m : {1u, 3u}) {
    const BalancedLayout l(5, 4, m);
    const Instance in = make_instance(rng, l, {2.0, 1.0, 1.0, 1.0});
    const StratumModel model(in.design, in.y);
    const VarianceComponents t = oracle::random_theta(rng, m > 1);
    for (Method method : {Method::REML, Method::ML}) {
      const auto ev = model.evaluate(t, method, true);
      const Eigen::Vector4d base = to_vector(t);
      const int comps = m > 1 ? 4 : 3;
      for (int c = 0; c < comps; ++c) {
        const double step = 1e-5 * base[c];
        Eigen::Vector4d up = base, dn = base;
        up[c] += step;
        dn[c] -= step;
        const double fd =
            (model.evaluate(from_vector(up), method, false).criterion -
             model.evaluate(from_vector(dn), method, false).criterion) / (2.0 * step);
        CHECK(ev.gradient[c] == doctest::Approx(fd).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("fit reaches a stationary point that dense Nelder-Mead cannot improve") {
  std::mt19937_64 rng(31);
  for (std::size_t m : {1u, 3u}) {
    const BalancedLayout l(6, 6, m);
    const Instance in = make_instance(rng, l, {2.0, 3.0, m > 1 ? 1.0 : 0.0, 1.5});
    const ResponseTable table(l, in.y);
    const FitResult r = fit(in.design, table);
    REQUIRE(r.converged);
    const MatrixXd x = in.design.model_matrix();
    const int k = m > 1 ? 4 : 3;
    auto negcrit = [&](const VectorXd& phi) {
      VarianceComponents t{std::exp(phi[1]), std::exp(phi[2]), k == 4 ? std::exp(phi[3]) : 0.0, std::exp(phi[0])};
      return -oracle::criterion(t, l, x, in.y, true);
    };
    const VectorXd phi0 = VectorXd::Zero(k);
    const VectorXd best = oracle::nelder_mead(negcrit, phi0, 0.5, 20000, 1e-14);
    const double nm = -negcrit(best);
    CHECK(r.criterion >= nm - 1e-6);
    CHECK(r.criterion == doctest::Approx(nm).epsilon(1e-8));
    CHECK(r.theta.sigma_e2 == doctest::Approx(std::exp(best[0])).epsilon(1e-4));
    CHECK(r.theta.sigma_a2 == doctest::Approx(std::exp(best[1])).epsilon(1e-4));
  }
}

TEST_CASE("shifting the response changes only the intercept") {
  std::mt19937_64 rng(41);
  const BalancedLayout l(6, 5, 1);
  const Instance in = make_instance(rng, l, {1.0, 1.0, 0.0, 1.0});
  const FitResult a = fit(in.design, ResponseTable(l, in.y));
  const FitResult b = fit(in.design, ResponseTable(l, (in.y.array() + 10.0).matrix()));
  CHECK(b.xi[0] == doctest::Approx(a.xi[0] + 10.0).epsilon(1e-6));
  CHECK((b.xi.tail(b.xi.size() - 1) - a.xi.tail(a.xi.size() - 1)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(b.theta.sigma_a2 == doctest::Approx(a.theta.sigma_a2).epsilon(1e-5));
}

TEST_CASE("a null row component is estimated on the boundary") {
  std::mt19937_64 rng(1234);
  const BalancedLayout l(8, 8, 1);
  const CenteredDesign d(l, RawCovariates{});
  // Column effects only: rows carry no signal, so REML typically truncates sigma_a^2.
  VectorXd y = oracle::z_col(l) * oracle::normal_vector(rng, 8, 2.0) + oracle::normal_vector(rng, 64);
  // Force the row means to be exactly equal so the boundary is certain.
  const Averages avg = averages(l, y);
  for (std::size_t p = 0; p < l.n(); ++p) {
    y[static_cast<Eigen::Index>(p)] -= avg.row[static_cast<Eigen::Index>(unflatten(l, p).i)] - avg.grand;
  }
  const FitResult r = fit(d, ResponseTable(l, y));
  CHECK(r.converged);
  CHECK(r.theta.sigma_a2 == 0.0);
  CHECK(r.boundary[1]);
  CHECK(r.theta.sigma_b2 > 0.0);
}

TEST_CASE("collinear fixed effects raise RankDeficiencyError") {
  const BalancedLayout l(4, 4, 1);
  RawCovariates raw;
  raw.row = MatrixXd(4, 1);
  raw.row << 1, 2, 3, 4;
  raw.within = MatrixXd(16, 1);
  for (std::size_t p = 0; p < 16; ++p) raw.within(static_cast<Eigen::Index>(p), 0) = raw.row(static_cast<Eigen::Index>(p / 4), 0);
  const CenteredDesign d(l, raw);
  std::mt19937_64 rng(3);
  CHECK_THROWS_AS(fit(d, ResponseTable(l, oracle::normal_vector(rng, 16))), RankDeficiencyError);
}

TEST_CASE("method parsing") {
  CHECK(parse_method("REML") == Method::REML);
  CHECK(parse_method("ml") == Method::ML);
  CHECK_THROWS_AS(parse_method("mom"), DomainError);
}
