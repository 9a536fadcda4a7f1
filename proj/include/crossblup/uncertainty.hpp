#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crossblup/design.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/kron.hpp"

namespace crossblup {

enum class Effect { Row, Column, Interaction };

struct Target {
  Effect effect = Effect::Row;
  std::size_t i = 0;
  std::size_t j = 0;

  static Target row(std::size_t i) { return {Effect::Row, i, 0}; }
  static Target column(std::size_t j) { return {Effect::Column, 0, j}; }
  static Target cell(std::size_t i, std::size_t j) { return {Effect::Interaction, i, j}; }
  std::string label() const;  // 1-based, e.g. "alpha[1]"
};

enum class MseMethod { LSW, KH, PR };
std::string to_string(MseMethod method);
MseMethod parse_mse_method(const std::string& text);  // lsw | kh | pr

// Asymptotic MSE of a row, column or interaction EBLUP given the diagonal
// leverage of the target (ignored for interaction targets).
double mse_lsw(const VarianceComponents& theta, const BalancedLayout& layout, Effect effect, double leverage_diag);
double mse_lsw(const VarianceComponents& theta, const CenteredDesign& design, const Target& target);
double mse_lsw(const FitResult& fit, const CenteredDesign& design, const Target& target);
// Cell-level effect alpha_i + beta_j (+ gamma_ij).
double mse_lsw_cell(const VarianceComponents& theta, const BalancedLayout& layout, double h_a, double h_b);

// Convention for the inverse information matrix used by KH and PR.
//  InverseOfTwiceTrace: B = [2 tr(V^-1 Z_s Z_s^T V^-1 Z_t Z_t^T)]^-1
//  TwiceInverseTrace:   B = 2 [tr(V^-1 Z_s Z_s^T V^-1 Z_t Z_t^T)]^-1, the
//                       usual asymptotic covariance of the variance estimates.
enum class InfoConvention { InverseOfTwiceTrace, TwiceInverseTrace };
inline constexpr InfoConvention kDefaultInfoConvention = InfoConvention::TwiceInverseTrace;

// Number of variance parameters: 4 ([e, a, b, g]) when m > 1, else 3 ([e, a, b]).
std::size_t parameter_count(const BalancedLayout& layout);

// [tr(V^-1 Z_s Z_s^T V^-1 Z_t Z_t^T)] from the spectrum and from dense matrices.
MatrixXd trace_matrix(const VarianceComponents& theta, const BalancedLayout& layout);
MatrixXd trace_matrix_dense(const VarianceComponents& theta, const BalancedLayout& layout,
                            std::size_t max_n = kDefaultDenseLimit);
// Throws DomainError when the trace matrix is singular.
MatrixXd info_matrix_B(const VarianceComponents& theta, const BalancedLayout& layout,
                       InfoConvention convention = kDefaultInfoConvention);

struct SecondOrderMse {
  double m1 = 0.0;
  double m2_kh = 0.0;  // tr(A B)
  double m2_pr = 0.0;  // tr(Gamma V Gamma^T B)
  double kh() const { return m1 + m2_kh; }
  double pr() const { return m1 + 2.0 * m2_pr; }
};

enum class Backend { Structured, Dense };

// Kackar-Harville and Prasad-Rao ingredients for row (alpha) and, by the
// Z2 symmetry, column (beta) targets. Interaction targets are not supported.
// The structured backend never forms an n x n matrix; the dense backend does
// and is guarded by max_n.
class SecondOrderCalculator {
 public:
  SecondOrderCalculator(const VarianceComponents& theta, const CenteredDesign& design,
                        Backend backend = Backend::Structured, InfoConvention convention = kDefaultInfoConvention,
                        std::size_t max_n = kDefaultDenseLimit);

  SecondOrderMse compute(const Target& target) const;

  // sigma_t^2 a^T P y: the BLUP at theta with xi profiled by GLS.
  double blup(const Target& target, const Eigen::Ref<const VectorXd>& y) const;
  // d blup / d theta_s = l_s^T y; returns [l_0 ... l_{k-1}] as columns (n x k).
  MatrixXd derivative_functionals(const Target& target) const;
  // Prasad-Rao rows Gamma_s (n x k, as columns).
  MatrixXd gamma_rows(const Target& target) const;
  // sigma_t^2 a^T V^-1 y, the function whose theta-gradient Gamma represents.
  double gamma_base(const Target& target, const Eigen::Ref<const VectorXd>& y) const;

  const MatrixXd& info() const noexcept { return b_; }

 private:
  VectorXd indicator(const Target& target) const;
  double target_variance(const Target& target) const;
  std::size_t target_component(const Target& target) const;
  VectorXd apply_p(const VectorXd& v) const;
  VectorXd apply_vinv(const VectorXd& v) const;
  VectorXd apply_vmat(const VectorXd& v) const;
  VectorXd apply_zs(std::size_t s, const VectorXd& v) const;

  VarianceComponents theta_;
  BalancedLayout layout_;
  Backend backend_;
  std::size_t k_;
  MatrixXd x_;
  MatrixXd vinv_x_;
  Eigen::LDLT<MatrixXd> xtvx_;
  MatrixXd b_;
  // dense backend only
  MatrixXd v_, vinv_;
  std::vector<MatrixXd> zzt_;
};

double mse_kh(const FitResult& fit, const CenteredDesign& design, const Target& target,
              Backend backend = Backend::Structured);
double mse_pr(const FitResult& fit, const CenteredDesign& design, const Target& target,
              Backend backend = Backend::Structured);

// Asymptotic joint covariance of EBLUP errors with the practical substitutions
// eta = g/h, eta1 = g/m. `matrix` carries the sqrt(g) normalization; the
// per-effect covariance is matrix / normalization.
struct JointCovariance {
  MatrixXd matrix;
  double normalization = 1.0;
  std::vector<std::string> targets;
  MatrixXd per_effect() const { return matrix / normalization; }
};

// Targets [alpha_i, alpha_i', beta_j, beta_j'] and, when m > 1,
// [gamma_ij, gamma_i'j, gamma_ij', gamma_i'j']. Requires i != i' and j != j'.
JointCovariance joint_covariance(const VarianceComponents& theta, const BalancedLayout& layout,
                                 const Leverage& row_leverage, const Leverage& col_leverage, std::size_t i,
                                 std::size_t i2, std::size_t j, std::size_t j2);
JointCovariance joint_covariance(const VarianceComponents& theta, const CenteredDesign& design, std::size_t i,
                                 std::size_t i2, std::size_t j, std::size_t j2);

// Cell-level effects for cells (i, j) and (i', j'); at least one index must differ.
JointCovariance cell_covariance(const VarianceComponents& theta, const BalancedLayout& layout,
                                const Leverage& row_leverage, const Leverage& col_leverage, std::size_t i,
                                std::size_t j, std::size_t i2, std::size_t j2);

struct PredictionInterval {
  double center = 0.0;
  double half_width = 0.0;
  double level = 0.95;
  MseMethod method = MseMethod::LSW;
  double lower() const { return center - half_width; }
  double upper() const { return center + half_width; }
  bool contains(double x) const { return x >= lower() && x <= upper(); }
};

// Phi^-1(1 - q/2). Throws DomainError unless 0 < q < 1.
double normal_critical_value(double q);
PredictionInterval prediction_interval(double center, double mse, double q, MseMethod method = MseMethod::LSW);

}  // namespace crossblup
