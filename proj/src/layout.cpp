#include "crossblup/layout.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "crossblup/errors.hpp"

namespace crossblup {

BalancedLayout::BalancedLayout(std::size_t rows, std::size_t cols, std::size_t reps)
    : g(rows), h(cols), m(reps) {
  if (g < 2) throw DomainError("layout: need at least 2 rows, got g=" + std::to_string(g));
  if (h < 2) throw DomainError("layout: need at least 2 columns, got h=" + std::to_string(h));
  if (m < 1) throw DomainError("layout: need at least 1 replicate per cell, got m=" + std::to_string(m));
}

std::size_t flat_index(const BalancedLayout& layout, std::size_t i, std::size_t j, std::size_t k) {
  if (i >= layout.g) {
    throw DomainError("flat_index: row index i=" + std::to_string(i) + " out of range [0, " +
                      std::to_string(layout.g) + ")");
  }
  if (j >= layout.h) {
    throw DomainError("flat_index: column index j=" + std::to_string(j) + " out of range [0, " +
                      std::to_string(layout.h) + ")");
  }
  if (k >= layout.m) {
    throw DomainError("flat_index: replicate index k=" + std::to_string(k) + " out of range [0, " +
                      std::to_string(layout.m) + ")");
  }
  return (i * layout.h + j) * layout.m + k;
}

CellIndex unflatten(const BalancedLayout& layout, std::size_t position) {
  if (position >= layout.n()) {
    throw DomainError("unflatten: position " + std::to_string(position) + " out of range [0, " +
                      std::to_string(layout.n()) + ")");
  }
  CellIndex c;
  c.k = position % layout.m;
  const std::size_t cell = position / layout.m;
  c.j = cell % layout.h;
  c.i = cell / layout.h;
  return c;
}

ResponseTable::ResponseTable(BalancedLayout layout, VectorXd values)
    : layout_(layout), values_(std::move(values)) {
  if (static_cast<std::size_t>(values_.size()) != layout_.n()) {
    throw DomainError("response table: expected " + std::to_string(layout_.n()) + " values, got " +
                      std::to_string(values_.size()));
  }
  for (Eigen::Index t = 0; t < values_.size(); ++t) {
    if (!std::isfinite(values_[t])) {
      throw DomainError("response table: non-finite value at position " + std::to_string(t));
    }
  }
}

Averages averages(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& values) {
  if (static_cast<std::size_t>(values.size()) != layout.n()) {
    throw DomainError("averages: expected " + std::to_string(layout.n()) + " values, got " +
                      std::to_string(values.size()));
  }
  const auto g = static_cast<Eigen::Index>(layout.g);
  const auto h = static_cast<Eigen::Index>(layout.h);
  const auto m = static_cast<Eigen::Index>(layout.m);

  Averages out;
  out.cell.resize(g, h);
  std::vector<CompensatedSum> row_sums(layout.g), col_sums(layout.h);
  CompensatedSum grand;
  Eigen::Index pos = 0;
  for (Eigen::Index i = 0; i < g; ++i) {
    for (Eigen::Index j = 0; j < h; ++j) {
      CompensatedSum cell;
      for (Eigen::Index k = 0; k < m; ++k) cell.add(values[pos++]);
      const double c = cell.value() / static_cast<double>(m);
      out.cell(i, j) = c;
      row_sums[i].add(c);
      col_sums[j].add(c);
      grand.add(c);
    }
  }
  out.row.resize(g);
  out.col.resize(h);
  for (Eigen::Index i = 0; i < g; ++i) out.row[i] = row_sums[i].value() / static_cast<double>(h);
  for (Eigen::Index j = 0; j < h; ++j) out.col[j] = col_sums[j].value() / static_cast<double>(g);
  out.grand = grand.value() / static_cast<double>(g * h);
  return out;
}

Averages averages(const ResponseTable& table) { return averages(table.layout(), table.values()); }

MatrixXd center_two_way(const Eigen::Ref<const MatrixXd>& values) {
  const VectorXd row = values.rowwise().mean();
  const Eigen::RowVectorXd col = values.colwise().mean();
  const double grand = values.mean();
  MatrixXd out = values;
  out.colwise() -= row;
  out.rowwise() -= col;
  out.array() += grand;
  return out;
}

}  // namespace crossblup
