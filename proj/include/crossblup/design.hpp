#pragma once

#include <cstddef>

#include <Eigen/Cholesky>

#include "crossblup/layout.hpp"

namespace crossblup {

// Number of covariates in each role. With m = 1 the cell-level covariates
// live in the within block (the starred parameterization) and p_ab must be 0.
struct CovariateRoles {
  std::size_t p_a = 0;   // row-level
  std::size_t p_b = 0;   // column-level
  std::size_t p_ab = 0;  // cell-level (interaction model only)
  std::size_t p_w = 0;   // observation-level
  std::size_t p() const noexcept { return p_a + p_b + p_ab + p_w; }
  friend bool operator==(const CovariateRoles&, const CovariateRoles&) = default;
};

// Raw covariate blocks. Cell-level rows are ordered i * h + j; observation
// rows follow the flat layout order.
struct RawCovariates {
  MatrixXd row;          // g x p_a
  MatrixXd col;          // h x p_b
  MatrixXd interaction;  // gh x p_ab
  MatrixXd within;       // n x p_w
};

class CenteredDesign {
 public:
  CenteredDesign() = default;
  // Throws DomainError on any block shape mismatch.
  CenteredDesign(const BalancedLayout& layout, RawCovariates raw);

  const BalancedLayout& layout() const noexcept { return layout_; }
  const CovariateRoles& roles() const noexcept { return roles_; }
  const RawCovariates& raw() const noexcept { return raw_; }

  // x_{i(c)}^{(a)} and x_{j(c)}^{(b)}.
  const MatrixXd& row_c() const noexcept { return row_c_; }
  const MatrixXd& col_c() const noexcept { return col_c_; }
  // Interaction block: row means, column means (both centered), double-centered cells.
  const MatrixXd& ab_row_c() const noexcept { return ab_row_c_; }
  const MatrixXd& ab_col_c() const noexcept { return ab_col_c_; }
  const MatrixXd& ab_cell_c() const noexcept { return ab_cell_c_; }
  // Within block: centered row means, column means, double-centered cell means,
  // and k-centered observations (the last is empty when m = 1).
  const MatrixXd& w_row_c() const noexcept { return w_row_c_; }
  const MatrixXd& w_col_c() const noexcept { return w_col_c_; }
  const MatrixXd& w_cell_c() const noexcept { return w_cell_c_; }
  const MatrixXd& w_within_c() const noexcept { return w_within_c_; }

  Eigen::RowVectorXd mean_a() const { return raw_.row.colwise().mean(); }
  Eigen::RowVectorXd mean_b() const { return raw_.col.colwise().mean(); }

  // n x (1 + p) matrix [1, row, col, interaction, within] with every block
  // broadcast to observation level, raw (uncentered) values.
  MatrixXd model_matrix() const;

 private:
  BalancedLayout layout_;
  CovariateRoles roles_;
  RawCovariates raw_;
  MatrixXd row_c_, col_c_;
  MatrixXd ab_row_c_, ab_col_c_, ab_cell_c_;
  MatrixXd w_row_c_, w_col_c_, w_cell_c_, w_within_c_;
};

// Splits an observation-level covariate (length n) into its row, column,
// cell and, when m > 1, within-cell centered parts. The parts sum to x - mean(x).
struct DecomposedCovariate {
  VectorXd row_cent;     // g
  VectorXd column_cent;  // h
  VectorXd cell_cent;    // gh
  VectorXd within_cent;  // n (empty when m = 1)
  double mean = 0.0;
};
DecomposedCovariate decompose_covariate(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& x);

// Raw blocks for the auto-decomposed single covariate used in the simulations:
// one row, one column, one cell-level covariate (interaction block for m > 1,
// within block for m = 1) and, for m > 1, one within covariate.
RawCovariates auto_design(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& x);

struct DhatMatrices {
  MatrixXd d1;  // p_a x p_a
  MatrixXd d2;  // p_b x p_b
  MatrixXd d3;  // p_ab x p_ab, or the starred p_w x p_w when m = 1
  MatrixXd d4;  // p_w x p_w (empty when m = 1)
};

DhatMatrices dhat(const CenteredDesign& design);

enum class Factor { A, B };

// H_{su} = 1 + x_{s(c)}^T D^{-1} x_{u(c)} for one factor.
class Leverage {
 public:
  // Throws RankDeficiencyError when D is numerically singular.
  Leverage(MatrixXd centered, MatrixXd d, const char* block_name);
  Leverage(const CenteredDesign& design, Factor factor);

  double operator()(std::size_t s, std::size_t u) const;
  double diag(std::size_t s) const { return (*this)(s, s); }
  std::size_t levels() const noexcept { return static_cast<std::size_t>(centered_.rows()); }
  MatrixXd matrix() const;

 private:
  MatrixXd centered_;
  MatrixXd solved_;  // rows x_{s(c)}^T D^{-1}
};

double leverage(const CenteredDesign& design, Factor factor, std::size_t s, std::size_t u);

// Reciprocal condition estimate of a symmetric PSD matrix after diagonal
// scaling; 0 for a singular or zero-diagonal matrix, 1 for an empty one.
double scaled_rcond(const Eigen::Ref<const MatrixXd>& sym);

inline constexpr double kRcondThreshold = 1e-10;

}  // namespace crossblup
