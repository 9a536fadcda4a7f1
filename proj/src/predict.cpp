#include "crossblup/predict.hpp"

#include <string>

#include "crossblup/errors.hpp"

namespace crossblup {

VectorXd fitted_mean(const CenteredDesign& design, const Eigen::Ref<const VectorXd>& xi) {
  const MatrixXd x = design.model_matrix();
  if (xi.size() != x.cols()) {
    throw DomainError("fitted_mean: expected " + std::to_string(x.cols()) + " coefficients, got " +
                      std::to_string(xi.size()));
  }
  return x * xi;
}

Eblups blup_from_residual(const VarianceComponents& theta, const BalancedLayout& layout,
                          const Eigen::Ref<const VectorXd>& residual) {
  const LambdaSpectrum spec = lambdas(theta, layout);
  const StratumDecomposition d = project_strata(residual, layout);
  const double l1 = spec[Stratum::Interaction];
  const double l2 = spec[Stratum::Row];
  const double l3 = spec[Stratum::Column];
  const double l4 = spec[Stratum::Grand];
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);

  Eblups out;
  out.theta = theta;
  out.alpha = h * m * theta.sigma_a2 * (d.row.array() / l2 + d.grand / l4);
  out.beta = g * m * theta.sigma_b2 * (d.col.array() / l3 + d.grand / l4);
  if (layout.replicated()) {
    out.gamma = d.interaction / l1;
    out.gamma.colwise() += d.row / l2;
    out.gamma.rowwise() += d.col.transpose() / l3;
    out.gamma.array() += d.grand / l4;
    out.gamma *= m * theta.sigma_g2;
  }
  return out;
}

namespace {

Eblups blup_at(const VarianceComponents& theta, const Eigen::Ref<const VectorXd>& xi, const CenteredDesign& design,
               const ResponseTable& table) {
  if (!(design.layout() == table.layout())) throw DomainError("blup: design and response layouts differ");
  const VectorXd resid = table.values() - fitted_mean(design, xi);
  Eblups out = blup_from_residual(theta, design.layout(), resid);
  out.xi = xi;
  return out;
}

}  // namespace

Eblups blup_interaction(const VarianceComponents& theta, const Eigen::Ref<const VectorXd>& xi,
                        const CenteredDesign& design, const ResponseTable& table) {
  if (!design.layout().replicated()) {
    throw DomainError("blup_interaction: requires m >= 2 replicates per cell");
  }
  return blup_at(theta, xi, design, table);
}

Eblups blup_no_interaction(const VarianceComponents& theta, const Eigen::Ref<const VectorXd>& xi,
                           const CenteredDesign& design, const ResponseTable& table) {
  if (design.layout().replicated()) {
    throw DomainError("blup_no_interaction: requires m = 1");
  }
  if (theta.sigma_g2 != 0.0) {
    throw DomainError("blup_no_interaction: sigma_g2 must be 0 in the model without interaction");
  }
  return blup_at(theta, xi, design, table);
}

Eblups eblup(const FitResult& fit, const CenteredDesign& design, const ResponseTable& table) {
  if (!fit.converged) throw DomainError("eblup: fit did not converge");
  return design.layout().replicated() ? blup_interaction(fit.theta, fit.xi, design, table)
                                      : blup_no_interaction(fit.theta, fit.xi, design, table);
}

double cell_effect(const Eblups& eblups, std::size_t i, std::size_t j) {
  if (i >= static_cast<std::size_t>(eblups.alpha.size()) || j >= static_cast<std::size_t>(eblups.beta.size())) {
    throw DomainError("cell_effect: cell (" + std::to_string(i) + ", " + std::to_string(j) + ") out of range");
  }
  const auto ii = static_cast<Eigen::Index>(i);
  const auto jj = static_cast<Eigen::Index>(j);
  double out = eblups.alpha[ii] + eblups.beta[jj];
  if (eblups.has_interaction()) out += eblups.gamma(ii, jj);
  return out;
}

}  // namespace crossblup
