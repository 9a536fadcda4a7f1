#include "crossblup/design.hpp"

#include <string>
#include <utility>

#include "crossblup/errors.hpp"

namespace crossblup {

namespace {

std::string shape(Eigen::Index r, Eigen::Index c) { return std::to_string(r) + "x" + std::to_string(c); }

void expect_rows(const MatrixXd& block, std::size_t rows, const char* name) {
  if (block.cols() > 0 && static_cast<std::size_t>(block.rows()) != rows) {
    throw DomainError(std::string("design: ") + name + " block must have " + std::to_string(rows) +
                      " rows, got " + shape(block.rows(), block.cols()));
  }
}

// Column-wise centered row means, column means and double-centered cells of a
// cell-level block stored as gh x p.
void split_cell_block(const MatrixXd& cells, std::size_t g, std::size_t h, MatrixXd& row_c, MatrixXd& col_c,
                      MatrixXd& cell_c) {
  const auto p = cells.cols();
  const auto gi = static_cast<Eigen::Index>(g);
  const auto hi = static_cast<Eigen::Index>(h);
  row_c.resize(gi, p);
  col_c.resize(hi, p);
  cell_c.resize(gi * hi, p);
  for (Eigen::Index c = 0; c < p; ++c) {
    // column c reshaped so that entry (i, j) = cells(i * h + j, c)
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> grid(
        cells.col(c).data(), gi, hi);
    const MatrixXd dense = grid;
    const double grand = dense.mean();
    row_c.col(c) = dense.rowwise().mean().array() - grand;
    col_c.col(c) = dense.colwise().mean().transpose().array() - grand;
    const MatrixXd dc = center_two_way(dense);
    for (Eigen::Index i = 0; i < gi; ++i) {
      for (Eigen::Index j = 0; j < hi; ++j) cell_c(i * hi + j, c) = dc(i, j);
    }
  }
}

// Cell means (gh x p) of an observation-level block.
MatrixXd cell_means(const MatrixXd& obs, std::size_t cells, std::size_t m) {
  MatrixXd out(static_cast<Eigen::Index>(cells), obs.cols());
  const auto mi = static_cast<Eigen::Index>(m);
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(cells); ++c) {
    out.row(c) = obs.middleRows(c * mi, mi).colwise().mean();
  }
  return out;
}

}  // namespace

CenteredDesign::CenteredDesign(const BalancedLayout& layout, RawCovariates raw)
    : layout_(layout), raw_(std::move(raw)) {
  expect_rows(raw_.row, layout_.g, "row");
  expect_rows(raw_.col, layout_.h, "column");
  expect_rows(raw_.interaction, layout_.cells(), "interaction");
  expect_rows(raw_.within, layout_.n(), "within");
  // Normalize empty blocks to the right number of rows so broadcasting works.
  if (raw_.row.cols() == 0) raw_.row.resize(static_cast<Eigen::Index>(layout_.g), 0);
  if (raw_.col.cols() == 0) raw_.col.resize(static_cast<Eigen::Index>(layout_.h), 0);
  if (raw_.interaction.cols() == 0) raw_.interaction.resize(static_cast<Eigen::Index>(layout_.cells()), 0);
  if (raw_.within.cols() == 0) raw_.within.resize(static_cast<Eigen::Index>(layout_.n()), 0);

  roles_.p_a = static_cast<std::size_t>(raw_.row.cols());
  roles_.p_b = static_cast<std::size_t>(raw_.col.cols());
  roles_.p_ab = static_cast<std::size_t>(raw_.interaction.cols());
  roles_.p_w = static_cast<std::size_t>(raw_.within.cols());
  if (!layout_.replicated() && roles_.p_ab > 0) {
    throw DomainError("design: interaction covariates require m > 1; with m = 1 pass cell-level covariates "
                      "in the within block");
  }
  if (!raw_.row.allFinite() || !raw_.col.allFinite() || !raw_.interaction.allFinite() || !raw_.within.allFinite()) {
    throw DomainError("design: covariates must be finite");
  }

  row_c_ = raw_.row.rowwise() - raw_.row.colwise().mean();
  col_c_ = raw_.col.rowwise() - raw_.col.colwise().mean();
  split_cell_block(raw_.interaction, layout_.g, layout_.h, ab_row_c_, ab_col_c_, ab_cell_c_);

  const MatrixXd wcell = cell_means(raw_.within, layout_.cells(), layout_.m);
  split_cell_block(wcell, layout_.g, layout_.h, w_row_c_, w_col_c_, w_cell_c_);
  if (layout_.replicated()) {
    w_within_c_.resize(raw_.within.rows(), raw_.within.cols());
    const auto m = static_cast<Eigen::Index>(layout_.m);
    for (Eigen::Index c = 0; c < wcell.rows(); ++c) {
      w_within_c_.middleRows(c * m, m) = raw_.within.middleRows(c * m, m).rowwise() - wcell.row(c);
    }
  } else {
    w_within_c_.resize(0, raw_.within.cols());
  }
}

MatrixXd CenteredDesign::model_matrix() const {
  const auto n = static_cast<Eigen::Index>(layout_.n());
  const auto h = static_cast<Eigen::Index>(layout_.h);
  const auto m = static_cast<Eigen::Index>(layout_.m);
  MatrixXd x(n, static_cast<Eigen::Index>(1 + roles_.p()));
  x.col(0).setOnes();
  const auto pa = raw_.row.cols(), pb = raw_.col.cols(), pab = raw_.interaction.cols();
  for (Eigen::Index t = 0; t < n; ++t) {
    const Eigen::Index cell = t / m;
    const Eigen::Index i = cell / h;
    const Eigen::Index j = cell % h;
    Eigen::Index c = 1;
    if (pa > 0) x.row(t).segment(c, pa) = raw_.row.row(i);
    c += pa;
    if (pb > 0) x.row(t).segment(c, pb) = raw_.col.row(j);
    c += pb;
    if (pab > 0) x.row(t).segment(c, pab) = raw_.interaction.row(cell);
    c += pab;
    if (raw_.within.cols() > 0) x.row(t).segment(c, raw_.within.cols()) = raw_.within.row(t);
  }
  return x;
}

DecomposedCovariate decompose_covariate(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& x) {
  const Averages avg = averages(layout, x);
  DecomposedCovariate out;
  out.mean = avg.grand;
  out.row_cent = avg.row.array() - avg.grand;
  out.column_cent = avg.col.array() - avg.grand;
  const MatrixXd dc = center_two_way(avg.cell);
  const auto g = static_cast<Eigen::Index>(layout.g);
  const auto h = static_cast<Eigen::Index>(layout.h);
  const auto m = static_cast<Eigen::Index>(layout.m);
  out.cell_cent.resize(g * h);
  for (Eigen::Index i = 0; i < g; ++i) {
    for (Eigen::Index j = 0; j < h; ++j) out.cell_cent[i * h + j] = dc(i, j);
  }
  if (layout.replicated()) {
    out.within_cent.resize(x.size());
    for (Eigen::Index t = 0; t < x.size(); ++t) {
      const Eigen::Index cell = t / m;
      out.within_cent[t] = x[t] - avg.cell(cell / h, cell % h);
    }
  }
  return out;
}

RawCovariates auto_design(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& x) {
  const DecomposedCovariate d = decompose_covariate(layout, x);
  RawCovariates raw;
  raw.row = d.row_cent;
  raw.col = d.column_cent;
  if (layout.replicated()) {
    raw.interaction = d.cell_cent;
    raw.within = d.within_cent;
  } else {
    raw.within = d.cell_cent;
  }
  return raw;
}

DhatMatrices dhat(const CenteredDesign& design) {
  const BalancedLayout& l = design.layout();
  const auto g = static_cast<double>(l.g);
  const auto h = static_cast<double>(l.h);
  const auto gh = static_cast<double>(l.cells());
  const auto n = static_cast<double>(l.n());
  DhatMatrices d;
  d.d1 = design.row_c().transpose() * design.row_c() / g;
  d.d2 = design.col_c().transpose() * design.col_c() / h;
  if (l.replicated()) {
    d.d3 = design.ab_cell_c().transpose() * design.ab_cell_c() / gh;
    d.d4 = design.w_within_c().transpose() * design.w_within_c() / n;
  } else {
    d.d3 = design.w_cell_c().transpose() * design.w_cell_c() / gh;
    d.d4.resize(0, 0);
  }
  return d;
}

double scaled_rcond(const Eigen::Ref<const MatrixXd>& sym) {
  if (sym.size() == 0) return 1.0;
  const VectorXd diag = sym.diagonal();
  if ((diag.array() <= 0.0).any() || !diag.allFinite()) return 0.0;
  const VectorXd s = diag.cwiseSqrt().cwiseInverse();
  const MatrixXd scaled = s.asDiagonal() * sym * s.asDiagonal();
  const Eigen::LDLT<MatrixXd> ldlt(scaled);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return 0.0;
  if ((ldlt.vectorD().array() <= 0.0).any()) return 0.0;
  return ldlt.rcond();
}

Leverage::Leverage(MatrixXd centered, MatrixXd d, const char* block_name) : centered_(std::move(centered)) {
  if (centered_.cols() == 0) {
    solved_.resize(centered_.rows(), 0);
    return;
  }
  if (scaled_rcond(d) < kRcondThreshold) {
    throw RankDeficiencyError(std::string("leverage: D matrix of the ") + block_name +
                              " block is numerically singular (collinear or constant covariates)");
  }
  const Eigen::LDLT<MatrixXd> ldlt(d);
  solved_ = ldlt.solve(centered_.transpose()).transpose();
}

Leverage::Leverage(const CenteredDesign& design, Factor factor)
    : Leverage(factor == Factor::A ? design.row_c() : design.col_c(),
               factor == Factor::A ? dhat(design).d1 : dhat(design).d2, factor == Factor::A ? "row" : "column") {}

double Leverage::operator()(std::size_t s, std::size_t u) const {
  const auto k = static_cast<std::size_t>(centered_.rows());
  if (s >= k || u >= k) {
    throw DomainError("leverage: index out of range [0, " + std::to_string(k) + ")");
  }
  if (centered_.cols() == 0) return 1.0;
  return 1.0 + solved_.row(static_cast<Eigen::Index>(s)).dot(centered_.row(static_cast<Eigen::Index>(u)));
}

MatrixXd Leverage::matrix() const {
  const auto k = centered_.rows();
  MatrixXd out = MatrixXd::Ones(k, k);
  if (centered_.cols() > 0) out.noalias() += solved_ * centered_.transpose();
  return out;
}

double leverage(const CenteredDesign& design, Factor factor, std::size_t s, std::size_t u) {
  return Leverage(design, factor)(s, u);
}

}  // namespace crossblup
