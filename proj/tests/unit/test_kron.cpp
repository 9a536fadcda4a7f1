#include <doctest.h>

#include <random>

#include "../support/oracles.hpp"
#include "crossblup/errors.hpp"
#include "crossblup/kron.hpp"

using namespace crossblup;

TEST_CASE("layout indexing round-trips") {
  const BalancedLayout l(3, 4, 2);
  CHECK(l.n() == 24);
  for (std::size_t p = 0; p < l.n(); ++p) {
    const CellIndex c = unflatten(l, p);
    CHECK(flat_index(l, c.i, c.j, c.k) == p);
  }
  CHECK(flat_index(l, 1, 2, 1) == (1 * 4 + 2) * 2 + 1);
  CHECK_THROWS_AS(flat_index(l, 3, 0, 0), DomainError);
  CHECK_THROWS_AS(BalancedLayout(1, 3, 1), DomainError);
  CHECK_THROWS_AS(BalancedLayout(3, 3, 0), DomainError);
}

TEST_CASE("response table rejects non-finite values") {
  const BalancedLayout l(2, 2, 1);
  VectorXd y = VectorXd::Ones(4);
  y[2] = std::nan("");
  CHECK_THROWS_AS(ResponseTable(l, y), DomainError);
  CHECK_THROWS_AS(ResponseTable(l, VectorXd::Ones(3)), DomainError);
}

TEST_CASE("stratum projection reconstructs and is orthogonal") {
  std::mt19937_64 rng(11);
  for (std::size_t m : {1u, 3u}) {
    const BalancedLayout l(3, 4, m);
    const VectorXd v = oracle::normal_vector(rng, static_cast<Eigen::Index>(l.n()));
    const StratumDecomposition d = project_strata(v, l);
    CHECK((d.reconstruct() - v).cwiseAbs().maxCoeff() < 1e-12);
    double total = 0.0;
    for (std::size_t s = 0; s < kStrata; ++s) {
      const auto st = static_cast<Stratum>(s);
      if (m == 1 && st == Stratum::Within) continue;
      total += d.squared_norm(st);
      CHECK(d.squared_norm(st) == doctest::Approx(d.broadcast(st).squaredNorm()).epsilon(1e-12));
    }
    CHECK(total == doctest::Approx(v.squaredNorm()).epsilon(1e-12));
  }
}

TEST_CASE("component weights are the eigenvalues of Z Z^T on each stratum") {
  std::mt19937_64 rng(5);
  const BalancedLayout l(3, 2, 2);
  const MatrixXd zs[] = {MatrixXd::Identity(12, 12), oracle::z_row(l), oracle::z_col(l), oracle::z_cell(l)};
  for (std::size_t c = 0; c < 4; ++c) {
    const MatrixXd zzt = zs[c] * zs[c].transpose();
    const VectorXd v = oracle::normal_vector(rng, 12);
    const VectorXd got = apply_zzt(static_cast<Component>(c), l, v);
    CHECK((got - zzt * v).cwiseAbs().maxCoeff() < 1e-12);
    const VectorXd spectral = apply_spectral(l, component_weights(static_cast<Component>(c), l), v);
    CHECK((spectral - zzt * v).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("structured V, V^-1 and V^-2 match dense matrices") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 20; ++rep) {
    std::uniform_int_distribution<std::size_t> gh(2, 4), mm(1, 3);
    const BalancedLayout l(gh(rng), gh(rng), mm(rng));
    const VarianceComponents t = oracle::random_theta(rng, l.m > 1);
    const MatrixXd v = oracle::v_matrix(t, l);
    const VectorXd x = oracle::normal_vector(rng, static_cast<Eigen::Index>(l.n()));
    CHECK((apply_v(t, l, x) - v * x).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((apply_v_inv(t, l, x) - v.inverse() * x).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((apply_v_power(t, l, x, -2) - v.inverse() * v.inverse() * x).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(lambdas(t, l).log_det() == doctest::Approx(std::log(v.determinant())).epsilon(1e-10));
    CHECK((dense_v(t, l) - v).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("multiplicities sum to n") {
  const BalancedLayout l(5, 7, 3);
  const auto mult = stratum_multiplicities(l);
  std::size_t total = 0;
  for (auto k : mult) total += k;
  CHECK(total == l.n());
  CHECK(mult[0] == 5 * 7 * 2);
  CHECK(mult[1] == 4 * 6);
}

TEST_CASE("singular covariance and oversized dense requests are rejected") {
  const BalancedLayout l(3, 3, 1);
  VarianceComponents t{1.0, 1.0, 0.0, 1.0};
  t.sigma_e2 = 0.0;
  CHECK_THROWS_AS(t.validate(), DomainError);
  CHECK_THROWS_AS(dense_z(Component::Row, BalancedLayout(100, 100, 1), 5000), ResourceError);
}
