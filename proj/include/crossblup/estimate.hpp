#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "crossblup/design.hpp"
#include "crossblup/errors.hpp"
#include "crossblup/kron.hpp"

namespace crossblup {

enum class Method { REML, ML };

std::string to_string(Method method);
Method parse_method(const std::string& text);  // "reml" | "ml", case-insensitive

// xi split by role: intercept, row, column, interaction and within slopes.
// With m = 1 the within slopes are the starred cell-level slopes.
struct FixedEffects {
  double xi0 = 0.0;
  VectorXd xi1, xi2, xi3, xi4;

  static FixedEffects split(const Eigen::Ref<const VectorXd>& xi, const CovariateRoles& roles);
  VectorXd stacked() const;
};

// Variance components as a vector in Component order [e, a, b, g].
Eigen::Vector4d to_vector(const VarianceComponents& theta);
VarianceComponents from_vector(const Eigen::Ref<const Eigen::Vector4d>& v);

// Profiled (in xi) likelihood machinery on the five strata. The design and
// response are projected once; each evaluation then costs O(n p + p^3).
class StratumModel {
 public:
  StratumModel(const CenteredDesign& design, const Eigen::Ref<const VectorXd>& y);
  StratumModel(const BalancedLayout& layout, const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& y);

  struct Evaluation {
    double criterion = 0.0;
    VectorXd xi;
    MatrixXd xtvx;  // X^T V^-1 X
    std::array<double, kStrata> dcrit_dlambda{};
    Eigen::Vector4d gradient = Eigen::Vector4d::Zero();  // d criterion / d theta, Component order
  };

  // Throws RankDeficiencyError when X^T V^-1 X is numerically singular.
  Evaluation evaluate(const VarianceComponents& theta, Method method, bool with_gradient = true) const;

  const BalancedLayout& layout() const noexcept { return layout_; }
  Eigen::Index columns() const noexcept { return q_; }
  double response_variance() const noexcept { return y_var_; }
  // Mean squares of OLS residuals per stratum (ANOVA moments); used for starting values.
  std::array<double, kStrata> ols_mean_squares() const;

 private:
  void build(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& y);

  BalancedLayout layout_;
  Eigen::Index q_ = 0;
  double y_var_ = 1.0;
  std::array<MatrixXd, kStrata> compact_;  // [X | y] projected, one row per stratum level
  std::array<double, kStrata> weight_{};   // replication of each compact row
  std::array<MatrixXd, kStrata> gram_;     // weight * compact^T compact
};

VectorXd gls_fixed_effects(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table);
double reml_criterion(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table);
double ml_criterion(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table);

struct FitOptions {
  Method method = Method::REML;
  std::size_t max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double criterion_tolerance = 1e-10;
  // Pin a component at 0 once its variance drops below this fraction of var(y).
  double pin_threshold = 1e-12;
  // After convergence, components below this fraction of var(y) are tested at 0.
  double boundary_probe = 1e-4;
  std::optional<VarianceComponents> start;
};

struct FitResult {
  BalancedLayout layout;
  CovariateRoles roles;
  Method method = Method::REML;
  VectorXd xi;  // stacked [xi0, xi1, xi2, xi3, xi4]
  FixedEffects fixed;
  VarianceComponents theta;
  MatrixXd xi_covariance;  // (X^T V^-1 X)^-1 at theta
  double criterion = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;
  // Component order [e, a, b, g]; true when the estimate was truncated at 0.
  std::array<bool, 4> boundary{};

  bool interaction() const noexcept { return layout.replicated(); }
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, FitResult best) : Error(what), best_(std::move(best)) {}
  const FitResult& best() const noexcept { return best_; }

 private:
  FitResult best_;
};

FitResult fit(const CenteredDesign& design, const ResponseTable& table, const FitOptions& options = {});

// Realized random effects of one simulated data set.
struct RandomEffects {
  VectorXd alpha;  // g
  VectorXd beta;   // h
  VectorXd gamma;  // gh, cell order i * h + j (empty when m = 1)
  VectorXd e;      // n
};

enum class EtaRegime { Finite, Zero, Infinite };

// Predicted estimator errors from the first-order linear representations of
// the ML/REML estimators (identical for both).
struct ParameterErrors {
  double xi0 = 0.0;
  VectorXd xi1, xi2, xi3, xi4;
  double sigma_a2 = 0.0;
  double sigma_b2 = 0.0;
  double sigma_g2 = 0.0;
  double sigma_e2 = 0.0;
};

ParameterErrors linear_approx_parameter_errors(const CenteredDesign& design, const RandomEffects& effects,
                                               const VarianceComponents& truth,
                                               EtaRegime regime = EtaRegime::Finite);

}  // namespace crossblup
