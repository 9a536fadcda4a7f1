#pragma once

#include <cmath>
#include <cstddef>

#include <Eigen/Dense>

namespace crossblup {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Balanced two-way layout with g rows, h columns and m replicates per cell.
// m == 1 encodes the design without an interaction effect.
//
// Observations are stored flat with the rightmost index cycling fastest:
// position((i, j, k)) = (i * h + j) * m + k, all indices 0-based.
struct BalancedLayout {
  std::size_t g = 2;
  std::size_t h = 2;
  std::size_t m = 1;

  BalancedLayout() = default;
  // Throws DomainError unless g >= 2, h >= 2, m >= 1.
  BalancedLayout(std::size_t rows, std::size_t cols, std::size_t reps);

  std::size_t n() const noexcept { return g * h * m; }
  std::size_t cells() const noexcept { return g * h; }
  bool replicated() const noexcept { return m > 1; }

  friend bool operator==(const BalancedLayout&, const BalancedLayout&) = default;
};

struct CellIndex {
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t k = 0;
  friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

// Throws DomainError naming the offending axis when an index is out of range.
std::size_t flat_index(const BalancedLayout& layout, std::size_t i, std::size_t j, std::size_t k = 0);
CellIndex unflatten(const BalancedLayout& layout, std::size_t position);

// Response vector bound to its layout. All entries must be finite.
class ResponseTable {
 public:
  ResponseTable(BalancedLayout layout, VectorXd values);

  const BalancedLayout& layout() const noexcept { return layout_; }
  const VectorXd& values() const noexcept { return values_; }
  double operator()(std::size_t i, std::size_t j, std::size_t k = 0) const {
    return values_[static_cast<Eigen::Index>(flat_index(layout_, i, j, k))];
  }

 private:
  BalancedLayout layout_;
  VectorXd values_;
};

// Grand, row, column and cell means of a flat vector.
struct Averages {
  double grand = 0.0;
  VectorXd row;   // length g
  VectorXd col;   // length h
  MatrixXd cell;  // g x h
};

Averages averages(const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& values);
Averages averages(const ResponseTable& table);

// Double-centering x_ij - x_i. - x_.j + x.. of a g x h matrix.
MatrixXd center_two_way(const Eigen::Ref<const MatrixXd>& values);

// Neumaier-compensated accumulator; the coverage studies sum millions of terms.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

}  // namespace crossblup
