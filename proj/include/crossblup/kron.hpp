#pragma once

#include <array>
#include <cstddef>

#include "crossblup/layout.hpp"

namespace crossblup {

// theta = (sigma_a^2, sigma_b^2, sigma_g^2, sigma_e^2). The model without
// interaction is the special case sigma_g^2 = 0 on an m = 1 layout.
struct VarianceComponents {
  double sigma_a2 = 0.0;
  double sigma_b2 = 0.0;
  double sigma_g2 = 0.0;
  double sigma_e2 = 1.0;

  // Throws DomainError if any component is negative/non-finite or sigma_e2 <= 0.
  void validate() const;
  VarianceComponents scaled(double c) const {
    return {sigma_a2 * c, sigma_b2 * c, sigma_g2 * c, sigma_e2 * c};
  }
  friend bool operator==(const VarianceComponents&, const VarianceComponents&) = default;
};

// The five orthogonal strata of R^n under the balanced crossed design, in the
// order of the eigenvalues lambda0..lambda4.
enum class Stratum : std::size_t { Within = 0, Interaction = 1, Row = 2, Column = 3, Grand = 4 };
inline constexpr std::size_t kStrata = 5;

// Variance-component index used by the derivative and information machinery:
// 0 = error (Z0 = I), 1 = row, 2 = column, 3 = interaction.
enum class Component : std::size_t { Error = 0, Row = 1, Column = 2, Interaction = 3 };

struct LambdaSpectrum {
  std::array<double, kStrata> value{};
  std::array<std::size_t, kStrata> mult{};

  double operator[](Stratum s) const { return value[static_cast<std::size_t>(s)]; }
  // log det V = sum_s mult_s log lambda_s
  double log_det() const;
};

LambdaSpectrum lambdas(const VarianceComponents& theta, const BalancedLayout& layout);

// Multiplicities gh(m-1), (g-1)(h-1), g-1, h-1, 1.
std::array<std::size_t, kStrata> stratum_multiplicities(const BalancedLayout& layout);

// Eigenvalue of Z_c Z_c^T on each stratum (Z_0 = I). These are also the
// derivatives d lambda_s / d theta_c.
std::array<double, kStrata> component_weights(Component c, const BalancedLayout& layout);

// Orthogonal decomposition of an n-vector into its five stratum images, each
// stored in compact form (one value per level of the stratum).
struct StratumDecomposition {
  BalancedLayout layout;
  VectorXd within;       // n, zero mean within each cell (empty when m = 1)
  MatrixXd interaction;  // g x h, double-centered cell means
  VectorXd row;          // g, centered row means
  VectorXd col;          // h, centered column means
  double grand = 0.0;

  // Image of the stratum projector as a full n-vector.
  VectorXd broadcast(Stratum s) const;
  VectorXd reconstruct() const;
  // Squared Euclidean norm of the projector image, using level multiplicities.
  double squared_norm(Stratum s) const;
};

StratumDecomposition project_strata(const Eigen::Ref<const VectorXd>& vec, const BalancedLayout& layout);

// sum_s weights[s] * P_s vec, in O(n). Every matrix in the span of the five
// projectors (V, V^-1, V^-2, Z Z^T, ...) is applied through this.
VectorXd apply_spectral(const BalancedLayout& layout, const std::array<double, kStrata>& weights,
                        const Eigen::Ref<const VectorXd>& vec);

VectorXd apply_v(const VarianceComponents& theta, const BalancedLayout& layout,
                 const Eigen::Ref<const VectorXd>& vec);
// Throws SingularCovarianceError if any eigenvalue is <= 0.
VectorXd apply_v_inv(const VarianceComponents& theta, const BalancedLayout& layout,
                     const Eigen::Ref<const VectorXd>& vec);
// Applies V^{power} for integer power (negative powers allowed).
VectorXd apply_v_power(const VarianceComponents& theta, const BalancedLayout& layout,
                       const Eigen::Ref<const VectorXd>& vec, int power);
// Z_c Z_c^T vec.
VectorXd apply_zzt(Component c, const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& vec);

inline constexpr std::size_t kDefaultDenseLimit = 5000;

// Dense random-effect incidence matrices Z1 = I_g x 1_h x 1_m,
// Z2 = 1_g x I_h x 1_m, Z3 = I_g x I_h x 1_m (Kronecker products).
MatrixXd dense_z(Component c, const BalancedLayout& layout, std::size_t max_n = kDefaultDenseLimit);

// V = sigma_e^2 I + sum_c sigma_c^2 Z_c Z_c^T materialized from the Z blocks.
// Throws ResourceError when n exceeds max_n.
MatrixXd dense_v(const VarianceComponents& theta, const BalancedLayout& layout,
                 std::size_t max_n = kDefaultDenseLimit);

}  // namespace crossblup
