#pragma once

#include <cstddef>

#include "crossblup/design.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/kron.hpp"

namespace crossblup {

struct Eblups {
  VectorXd alpha;  // g
  VectorXd beta;   // h
  MatrixXd gamma;  // g x h; 0 x 0 for the model without interaction
  VarianceComponents theta;
  VectorXd xi;

  bool has_interaction() const noexcept { return gamma.size() > 0; }
};

// X xi at observation level.
VectorXd fitted_mean(const CenteredDesign& design, const Eigen::Ref<const VectorXd>& xi);

// BLUPs from the residual r = y - X xi through the stratum closed forms:
//   alpha_i = hm s_a^2 [ (rbar_i. - rbar) / l2 + rbar / l4 ]
//   beta_j  = gm s_b^2 [ (rbar_.j - rbar) / l3 + rbar / l4 ]
//   gamma_ij = m s_g^2 [ int_ij / l1 + (rbar_i. - rbar) / l2 + (rbar_.j - rbar) / l3 + rbar / l4 ]
// gamma is filled only for m > 1.
Eblups blup_from_residual(const VarianceComponents& theta, const BalancedLayout& layout,
                          const Eigen::Ref<const VectorXd>& residual);

// Preconditions: m >= 2 for the interaction model, m == 1 (and sigma_g2 == 0)
// for the model without interaction. Throws DomainError otherwise.
Eblups blup_interaction(const VarianceComponents& theta, const Eigen::Ref<const VectorXd>& xi,
                        const CenteredDesign& design, const ResponseTable& table);
Eblups blup_no_interaction(const VarianceComponents& theta, const Eigen::Ref<const VectorXd>& xi,
                           const CenteredDesign& design, const ResponseTable& table);

// BLUPs evaluated at the estimates of a converged fit.
Eblups eblup(const FitResult& fit, const CenteredDesign& design, const ResponseTable& table);

// alpha_i + beta_j (+ gamma_ij).
double cell_effect(const Eblups& eblups, std::size_t i, std::size_t j);

}  // namespace crossblup
