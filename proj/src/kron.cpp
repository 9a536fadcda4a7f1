#include "crossblup/kron.hpp"

#include <cmath>
#include <string>

#include "crossblup/errors.hpp"

namespace crossblup {

namespace {

constexpr std::size_t idx(Stratum s) { return static_cast<std::size_t>(s); }

void check_length(const Eigen::Ref<const VectorXd>& vec, const BalancedLayout& layout, const char* who) {
  if (static_cast<std::size_t>(vec.size()) != layout.n()) {
    throw DomainError(std::string(who) + ": expected vector of length " + std::to_string(layout.n()) +
                      ", got " + std::to_string(vec.size()));
  }
}

}  // namespace

void VarianceComponents::validate() const {
  const auto bad = [](double v) { return !std::isfinite(v) || v < 0.0; };
  if (bad(sigma_a2) || bad(sigma_b2) || bad(sigma_g2) || bad(sigma_e2)) {
    throw DomainError("variance components must be finite and non-negative");
  }
  if (!(sigma_e2 > 0.0)) throw DomainError("error variance sigma_e2 must be positive");
}

double LambdaSpectrum::log_det() const {
  double out = 0.0;
  for (std::size_t s = 0; s < kStrata; ++s) {
    if (mult[s] > 0) out += static_cast<double>(mult[s]) * std::log(value[s]);
  }
  return out;
}

std::array<std::size_t, kStrata> stratum_multiplicities(const BalancedLayout& layout) {
  const std::size_t g = layout.g, h = layout.h, m = layout.m;
  return {g * h * (m - 1), (g - 1) * (h - 1), g - 1, h - 1, 1};
}

std::array<double, kStrata> component_weights(Component c, const BalancedLayout& layout) {
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  switch (c) {
    case Component::Error:
      return {1.0, 1.0, 1.0, 1.0, 1.0};
    case Component::Row:
      return {0.0, 0.0, h * m, 0.0, h * m};
    case Component::Column:
      return {0.0, 0.0, 0.0, g * m, g * m};
    case Component::Interaction:
      return {0.0, m, m, m, m};
  }
  return {};
}

LambdaSpectrum lambdas(const VarianceComponents& theta, const BalancedLayout& layout) {
  theta.validate();
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  LambdaSpectrum out;
  const double l1 = theta.sigma_e2 + m * theta.sigma_g2;
  const double l2 = l1 + h * m * theta.sigma_a2;
  const double l3 = l1 + g * m * theta.sigma_b2;
  out.value = {theta.sigma_e2, l1, l2, l3, l2 + l3 - l1};
  out.mult = stratum_multiplicities(layout);
  return out;
}

VectorXd StratumDecomposition::broadcast(Stratum s) const {
  const std::size_t g = layout.g, h = layout.h, m = layout.m;
  VectorXd out(static_cast<Eigen::Index>(layout.n()));
  if (s == Stratum::Within) {
    if (m == 1) return VectorXd::Zero(out.size());
    return within;
  }
  Eigen::Index pos = 0;
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      double v = 0.0;
      switch (s) {
        case Stratum::Interaction: v = interaction(i, j); break;
        case Stratum::Row: v = row[i]; break;
        case Stratum::Column: v = col[j]; break;
        case Stratum::Grand: v = grand; break;
        case Stratum::Within: break;
      }
      for (std::size_t k = 0; k < m; ++k) out[pos++] = v;
    }
  }
  return out;
}

VectorXd StratumDecomposition::reconstruct() const {
  VectorXd out = broadcast(Stratum::Grand);
  out += broadcast(Stratum::Row);
  out += broadcast(Stratum::Column);
  out += broadcast(Stratum::Interaction);
  if (layout.m > 1) out += within;
  return out;
}

double StratumDecomposition::squared_norm(Stratum s) const {
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  switch (s) {
    case Stratum::Within: return layout.m > 1 ? within.squaredNorm() : 0.0;
    case Stratum::Interaction: return m * interaction.squaredNorm();
    case Stratum::Row: return h * m * row.squaredNorm();
    case Stratum::Column: return g * m * col.squaredNorm();
    case Stratum::Grand: return g * h * m * grand * grand;
  }
  return 0.0;
}

StratumDecomposition project_strata(const Eigen::Ref<const VectorXd>& vec, const BalancedLayout& layout) {
  check_length(vec, layout, "project_strata");
  const Averages avg = averages(layout, vec);
  StratumDecomposition out;
  out.layout = layout;
  out.grand = avg.grand;
  out.row = avg.row.array() - avg.grand;
  out.col = avg.col.array() - avg.grand;
  out.interaction = center_two_way(avg.cell);
  if (layout.m > 1) {
    out.within.resize(vec.size());
    Eigen::Index pos = 0;
    for (std::size_t i = 0; i < layout.g; ++i) {
      for (std::size_t j = 0; j < layout.h; ++j) {
        const double c = avg.cell(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        for (std::size_t k = 0; k < layout.m; ++k, ++pos) out.within[pos] = vec[pos] - c;
      }
    }
  }
  return out;
}

VectorXd apply_spectral(const BalancedLayout& layout, const std::array<double, kStrata>& weights,
                        const Eigen::Ref<const VectorXd>& vec) {
  const StratumDecomposition d = project_strata(vec, layout);
  const std::size_t g = layout.g, h = layout.h, m = layout.m;
  VectorXd out(vec.size());
  Eigen::Index pos = 0;
  for (std::size_t i = 0; i < g; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double between = weights[idx(Stratum::Interaction)] *
                                 d.interaction(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +
                             weights[idx(Stratum::Row)] * d.row[static_cast<Eigen::Index>(i)] +
                             weights[idx(Stratum::Column)] * d.col[static_cast<Eigen::Index>(j)] +
                             weights[idx(Stratum::Grand)] * d.grand;
      for (std::size_t k = 0; k < m; ++k, ++pos) {
        out[pos] = between + (m > 1 ? weights[idx(Stratum::Within)] * d.within[pos] : 0.0);
      }
    }
  }
  return out;
}

VectorXd apply_v(const VarianceComponents& theta, const BalancedLayout& layout,
                 const Eigen::Ref<const VectorXd>& vec) {
  return apply_v_power(theta, layout, vec, 1);
}

VectorXd apply_v_inv(const VarianceComponents& theta, const BalancedLayout& layout,
                     const Eigen::Ref<const VectorXd>& vec) {
  return apply_v_power(theta, layout, vec, -1);
}

VectorXd apply_v_power(const VarianceComponents& theta, const BalancedLayout& layout,
                       const Eigen::Ref<const VectorXd>& vec, int power) {
  check_length(vec, layout, "apply_v");
  const LambdaSpectrum spec = lambdas(theta, layout);
  std::array<double, kStrata> w{};
  for (std::size_t s = 0; s < kStrata; ++s) {
    if (spec.mult[s] == 0) continue;
    if (power < 0 && !(spec.value[s] > 0.0)) {
      throw SingularCovarianceError("V(theta) is singular: lambda" + std::to_string(s) + " = " +
                                    std::to_string(spec.value[s]));
    }
    w[s] = std::pow(spec.value[s], power);
  }
  return apply_spectral(layout, w, vec);
}

VectorXd apply_zzt(Component c, const BalancedLayout& layout, const Eigen::Ref<const VectorXd>& vec) {
  check_length(vec, layout, "apply_zzt");
  return apply_spectral(layout, component_weights(c, layout), vec);
}

MatrixXd dense_z(Component c, const BalancedLayout& layout, std::size_t max_n) {
  if (layout.n() > max_n) {
    throw ResourceError("dense matrix of order n=" + std::to_string(layout.n()) + " exceeds the limit " +
                        std::to_string(max_n));
  }
  const auto g = static_cast<Eigen::Index>(layout.g);
  const auto h = static_cast<Eigen::Index>(layout.h);
  const auto m = static_cast<Eigen::Index>(layout.m);
  const Eigen::Index n = g * h * m;
  // Z as a Kronecker product built column by column: level index of each observation.
  Eigen::Index cols = 0;
  switch (c) {
    case Component::Error: cols = n; break;
    case Component::Row: cols = g; break;
    case Component::Column: cols = h; break;
    case Component::Interaction: cols = g * h; break;
  }
  MatrixXd z = MatrixXd::Zero(n, cols);
  for (Eigen::Index i = 0; i < g; ++i) {
    for (Eigen::Index j = 0; j < h; ++j) {
      for (Eigen::Index k = 0; k < m; ++k) {
        const Eigen::Index r = (i * h + j) * m + k;
        switch (c) {
          case Component::Error: z(r, r) = 1.0; break;
          case Component::Row: z(r, i) = 1.0; break;
          case Component::Column: z(r, j) = 1.0; break;
          case Component::Interaction: z(r, i * h + j) = 1.0; break;
        }
      }
    }
  }
  return z;
}

MatrixXd dense_v(const VarianceComponents& theta, const BalancedLayout& layout, std::size_t max_n) {
  theta.validate();
  const MatrixXd z1 = dense_z(Component::Row, layout, max_n);
  const MatrixXd z2 = dense_z(Component::Column, layout, max_n);
  const MatrixXd z3 = dense_z(Component::Interaction, layout, max_n);
  const auto n = static_cast<Eigen::Index>(layout.n());
  MatrixXd v = theta.sigma_e2 * MatrixXd::Identity(n, n);
  v.noalias() += theta.sigma_a2 * z1 * z1.transpose();
  v.noalias() += theta.sigma_b2 * z2 * z2.transpose();
  v.noalias() += theta.sigma_g2 * z3 * z3.transpose();
  return v;
}

}  // namespace crossblup
