#include "crossblup/uncertainty.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "crossblup/errors.hpp"

namespace crossblup {

namespace {

Component component_of(std::size_t s) { return static_cast<Component>(s); }

// Serializes dense second-order computations to bound peak memory.
std::mutex& dense_budget() {
  static std::mutex mu;
  return mu;
}

void check_target(const Target& t, const BalancedLayout& layout) {
  if (t.effect != Effect::Column && t.i >= layout.g) {
    throw DomainError("target row index " + std::to_string(t.i) + " out of range [0, " + std::to_string(layout.g) +
                      ")");
  }
  if (t.effect != Effect::Row && t.j >= layout.h) {
    throw DomainError("target column index " + std::to_string(t.j) + " out of range [0, " +
                      std::to_string(layout.h) + ")");
  }
  if (t.effect == Effect::Interaction && !layout.replicated()) {
    throw DomainError("interaction targets require m > 1");
  }
}

}  // namespace

std::string Target::label() const {
  switch (effect) {
    case Effect::Row: return "alpha[" + std::to_string(i + 1) + "]";
    case Effect::Column: return "beta[" + std::to_string(j + 1) + "]";
    case Effect::Interaction: return "gamma[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]";
  }
  return {};
}

std::string to_string(MseMethod method) {
  switch (method) {
    case MseMethod::LSW: return "LSW";
    case MseMethod::KH: return "KH";
    case MseMethod::PR: return "PR";
  }
  return {};
}

MseMethod parse_mse_method(const std::string& text) {
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "lsw") return MseMethod::LSW;
  if (lower == "kh") return MseMethod::KH;
  if (lower == "pr") return MseMethod::PR;
  throw DomainError("unknown MSE method '" + text + "' (expected lsw, kh or pr)");
}

double mse_lsw(const VarianceComponents& theta, const BalancedLayout& layout, Effect effect, double leverage_diag) {
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  const bool inter = layout.replicated();
  switch (effect) {
    case Effect::Row:
      return (inter ? theta.sigma_g2 : theta.sigma_e2) / h + theta.sigma_a2 / g * leverage_diag;
    case Effect::Column:
      return (inter ? theta.sigma_g2 : theta.sigma_e2) / g + theta.sigma_b2 / h * leverage_diag;
    case Effect::Interaction:
      if (!inter) throw DomainError("mse_lsw: interaction effects require m > 1");
      return theta.sigma_e2 / m + (1.0 / g + 1.0 / h) * theta.sigma_g2;
  }
  return 0.0;
}

double mse_lsw(const VarianceComponents& theta, const CenteredDesign& design, const Target& target) {
  check_target(target, design.layout());
  double lev = 1.0;
  if (target.effect == Effect::Row) lev = Leverage(design, Factor::A).diag(target.i);
  if (target.effect == Effect::Column) lev = Leverage(design, Factor::B).diag(target.j);
  return mse_lsw(theta, design.layout(), target.effect, lev);
}

double mse_lsw(const FitResult& fit, const CenteredDesign& design, const Target& target) {
  return mse_lsw(fit.theta, design, target);
}

double mse_lsw_cell(const VarianceComponents& theta, const BalancedLayout& layout, double h_a, double h_b) {
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  const double shared = theta.sigma_a2 * h_a / g + theta.sigma_b2 * h_b / h;
  if (layout.replicated()) return theta.sigma_e2 / m + shared;
  return theta.sigma_e2 / h + theta.sigma_e2 / g + shared;
}

std::size_t parameter_count(const BalancedLayout& layout) { return layout.replicated() ? 4 : 3; }

MatrixXd trace_matrix(const VarianceComponents& theta, const BalancedLayout& layout) {
  const LambdaSpectrum spec = lambdas(theta, layout);
  const auto k = static_cast<Eigen::Index>(parameter_count(layout));
  MatrixXd t(k, k);
  for (Eigen::Index s = 0; s < k; ++s) {
    const auto ws = component_weights(component_of(static_cast<std::size_t>(s)), layout);
    for (Eigen::Index u = 0; u < k; ++u) {
      const auto wu = component_weights(component_of(static_cast<std::size_t>(u)), layout);
      double acc = 0.0;
      for (std::size_t q = 0; q < kStrata; ++q) {
        if (spec.mult[q] == 0) continue;
        acc += static_cast<double>(spec.mult[q]) * ws[q] * wu[q] / (spec.value[q] * spec.value[q]);
      }
      t(s, u) = acc;
    }
  }
  return t;
}

MatrixXd trace_matrix_dense(const VarianceComponents& theta, const BalancedLayout& layout, std::size_t max_n) {
  const MatrixXd v = dense_v(theta, layout, max_n);
  const MatrixXd vinv = v.ldlt().solve(MatrixXd::Identity(v.rows(), v.cols()));
  const auto k = static_cast<Eigen::Index>(parameter_count(layout));
  std::vector<MatrixXd> w;
  for (Eigen::Index s = 0; s < k; ++s) {
    const MatrixXd z = dense_z(component_of(static_cast<std::size_t>(s)), layout, max_n);
    w.push_back(vinv * (z * z.transpose()));
  }
  MatrixXd t(k, k);
  for (Eigen::Index s = 0; s < k; ++s) {
    for (Eigen::Index u = 0; u < k; ++u) {
      t(s, u) = (w[static_cast<std::size_t>(s)].array() * w[static_cast<std::size_t>(u)].transpose().array()).sum();
    }
  }
  return t;
}

MatrixXd info_matrix_B(const VarianceComponents& theta, const BalancedLayout& layout, InfoConvention convention) {
  const MatrixXd t = trace_matrix(theta, layout);
  if (scaled_rcond(t) < kRcondThreshold) {
    throw DomainError("info_matrix_B: trace matrix is singular (degenerate design)");
  }
  const MatrixXd inv = t.ldlt().solve(MatrixXd::Identity(t.rows(), t.cols()));
  return convention == InfoConvention::InverseOfTwiceTrace ? MatrixXd(0.5 * inv) : MatrixXd(2.0 * inv);
}

SecondOrderCalculator::SecondOrderCalculator(const VarianceComponents& theta, const CenteredDesign& design,
                                             Backend backend, InfoConvention convention, std::size_t max_n)
    : theta_(theta),
      layout_(design.layout()),
      backend_(backend),
      k_(parameter_count(design.layout())),
      x_(design.model_matrix()) {
  theta_.validate();
  if (!layout_.replicated() && theta_.sigma_g2 != 0.0) {
    throw DomainError("second-order MSE: sigma_g2 must be 0 when m = 1");
  }
  if (backend_ == Backend::Dense) {
    if (layout_.n() > max_n) {
      throw ResourceError("dense KH/PR needs " + std::to_string(layout_.n()) + "x" + std::to_string(layout_.n()) +
                          " matrices, above the limit n <= " + std::to_string(max_n) +
                          "; use the structured backend or --mse lsw");
    }
    v_ = dense_v(theta_, layout_, max_n);
    vinv_ = v_.ldlt().solve(MatrixXd::Identity(v_.rows(), v_.cols()));
    for (std::size_t s = 0; s < k_; ++s) {
      const MatrixXd z = dense_z(component_of(s), layout_, max_n);
      zzt_.push_back(z * z.transpose());
    }
    vinv_x_ = vinv_ * x_;
  } else {
    vinv_x_.resize(x_.rows(), x_.cols());
    for (Eigen::Index c = 0; c < x_.cols(); ++c) vinv_x_.col(c) = apply_v_inv(theta_, layout_, x_.col(c));
  }
  const MatrixXd xtvx = x_.transpose() * vinv_x_;
  if (scaled_rcond(xtvx) < kRcondThreshold) {
    throw RankDeficiencyError("second-order MSE: X^T V^-1 X is numerically singular");
  }
  xtvx_.compute(xtvx);
  b_ = info_matrix_B(theta_, layout_, convention);
}

VectorXd SecondOrderCalculator::indicator(const Target& target) const {
  check_target(target, layout_);
  if (target.effect == Effect::Interaction) {
    throw DomainError("KH/PR are available for row and column targets only");
  }
  VectorXd a = VectorXd::Zero(static_cast<Eigen::Index>(layout_.n()));
  for (std::size_t i = 0; i < layout_.g; ++i) {
    for (std::size_t j = 0; j < layout_.h; ++j) {
      const bool hit = target.effect == Effect::Row ? i == target.i : j == target.j;
      if (!hit) continue;
      for (std::size_t k = 0; k < layout_.m; ++k) a[static_cast<Eigen::Index>(flat_index(layout_, i, j, k))] = 1.0;
    }
  }
  return a;
}

double SecondOrderCalculator::target_variance(const Target& target) const {
  return target.effect == Effect::Row ? theta_.sigma_a2 : theta_.sigma_b2;
}

std::size_t SecondOrderCalculator::target_component(const Target& target) const {
  return target.effect == Effect::Row ? 1 : 2;
}

VectorXd SecondOrderCalculator::apply_vinv(const VectorXd& v) const {
  if (backend_ == Backend::Dense) return vinv_ * v;
  return apply_v_inv(theta_, layout_, v);
}

VectorXd SecondOrderCalculator::apply_vmat(const VectorXd& v) const {
  if (backend_ == Backend::Dense) return v_ * v;
  return apply_v(theta_, layout_, v);
}

VectorXd SecondOrderCalculator::apply_zs(std::size_t s, const VectorXd& v) const {
  if (backend_ == Backend::Dense) return zzt_[s] * v;
  return apply_zzt(component_of(s), layout_, v);
}

VectorXd SecondOrderCalculator::apply_p(const VectorXd& v) const {
  return apply_vinv(v) - vinv_x_ * xtvx_.solve(vinv_x_.transpose() * v);
}

double SecondOrderCalculator::blup(const Target& target, const Eigen::Ref<const VectorXd>& y) const {
  return target_variance(target) * indicator(target).dot(apply_p(y));
}

double SecondOrderCalculator::gamma_base(const Target& target, const Eigen::Ref<const VectorXd>& y) const {
  return target_variance(target) * indicator(target).dot(apply_vinv(y));
}

MatrixXd SecondOrderCalculator::derivative_functionals(const Target& target) const {
  const VectorXd a = indicator(target);
  const double st = target_variance(target);
  const std::size_t tc = target_component(target);
  const VectorXd pa = apply_p(a);
  MatrixXd ell(a.size(), static_cast<Eigen::Index>(k_));
  for (std::size_t s = 0; s < k_; ++s) {
    VectorXd col = -st * apply_p(apply_zs(s, pa));
    if (s == tc) col += pa;
    ell.col(static_cast<Eigen::Index>(s)) = col;
  }
  return ell;
}

MatrixXd SecondOrderCalculator::gamma_rows(const Target& target) const {
  const VectorXd a = indicator(target);
  const double st = target_variance(target);
  const std::size_t tc = target_component(target);
  const VectorXd va = apply_vinv(a);
  MatrixXd out(a.size(), static_cast<Eigen::Index>(k_));
  for (std::size_t s = 0; s < k_; ++s) {
    VectorXd col = -st * apply_vinv(apply_zs(s, va));
    if (s == tc) col += va;
    out.col(static_cast<Eigen::Index>(s)) = col;
  }
  return out;
}

SecondOrderMse SecondOrderCalculator::compute(const Target& target) const {
  std::unique_lock<std::mutex> lock(dense_budget(), std::defer_lock);
  if (backend_ == Backend::Dense) lock.lock();
  const VectorXd a = indicator(target);
  const double st = target_variance(target);
  SecondOrderMse out;
  out.m1 = st - st * st * a.dot(apply_p(a));

  const auto k = static_cast<Eigen::Index>(k_);
  const MatrixXd ell = derivative_functionals(target);
  MatrixXd v_ell(ell.rows(), k);
  for (Eigen::Index s = 0; s < k; ++s) v_ell.col(s) = apply_vmat(ell.col(s));
  const MatrixXd a_mat = ell.transpose() * v_ell;
  out.m2_kh = (a_mat * b_).trace();

  const MatrixXd gam = gamma_rows(target);
  MatrixXd v_gam(gam.rows(), k);
  for (Eigen::Index s = 0; s < k; ++s) v_gam.col(s) = apply_vmat(gam.col(s));
  const MatrixXd g_mat = gam.transpose() * v_gam;
  out.m2_pr = (g_mat * b_).trace();
  return out;
}

double mse_kh(const FitResult& fit, const CenteredDesign& design, const Target& target, Backend backend) {
  return SecondOrderCalculator(fit.theta, design, backend).compute(target).kh();
}

double mse_pr(const FitResult& fit, const CenteredDesign& design, const Target& target, Backend backend) {
  return SecondOrderCalculator(fit.theta, design, backend).compute(target).pr();
}

JointCovariance joint_covariance(const VarianceComponents& theta, const BalancedLayout& layout,
                                 const Leverage& row_leverage, const Leverage& col_leverage, std::size_t i,
                                 std::size_t i2, std::size_t j, std::size_t j2) {
  if (i == i2 || j == j2) throw DomainError("joint_covariance: requires i != i' and j != j'");
  if (std::max(i, i2) >= layout.g || std::max(j, j2) >= layout.h) {
    throw DomainError("joint_covariance: target index out of range");
  }
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  const double eta = g / h;
  const std::size_t rows[2] = {i, i2};
  const std::size_t cols[2] = {j, j2};

  JointCovariance out;
  out.normalization = g;
  out.targets = {Target::row(i).label(), Target::row(i2).label(), Target::column(j).label(),
                 Target::column(j2).label()};
  const bool inter = layout.replicated();
  // Variance of the term that accompanies each main effect: sigma_g^2 with interaction, sigma_e^2 without.
  const double noise = inter ? theta.sigma_g2 : theta.sigma_e2;
  MatrixXd f(2, 2), gm(2, 2);
  for (int s = 0; s < 2; ++s) {
    for (int u = 0; u < 2; ++u) {
      f(s, u) = (s == u ? eta * noise : 0.0) + theta.sigma_a2 * row_leverage(rows[s], rows[u]);
      gm(s, u) = (s == u ? noise : 0.0) + eta * theta.sigma_b2 * col_leverage(cols[s], cols[u]);
    }
  }
  if (!inter) {
    out.matrix = MatrixXd::Zero(4, 4);
    out.matrix.topLeftCorner(2, 2) = f;
    out.matrix.bottomRightCorner(2, 2) = gm;
    return out;
  }
  const double eta1 = g / m;
  const double sg = theta.sigma_g2;
  MatrixXd u(4, 4);
  u << eta, 0, eta, 0,
       0, eta, 0, eta,
       1, 1, 0, 0,
       0, 0, 1, 1;
  u *= -sg;
  MatrixXd q(4, 4);
  q << 1 + eta, 1, eta, 0,
       1, 1 + eta, 0, eta,
       eta, 0, 1 + eta, 1,
       0, eta, 1, 1 + eta;
  q *= sg;
  out.matrix = MatrixXd::Zero(8, 8);
  out.matrix.block(0, 0, 2, 2) = f;
  out.matrix.block(2, 2, 2, 2) = gm;
  out.matrix.block(0, 4, 4, 4) = u;
  out.matrix.block(4, 0, 4, 4) = u.transpose();
  out.matrix.block(4, 4, 4, 4) = eta1 * theta.sigma_e2 * MatrixXd::Identity(4, 4) + q;
  for (const auto& t : {Target::cell(i, j), Target::cell(i2, j), Target::cell(i, j2), Target::cell(i2, j2)}) {
    out.targets.push_back(t.label());
  }
  return out;
}

JointCovariance joint_covariance(const VarianceComponents& theta, const CenteredDesign& design, std::size_t i,
                                 std::size_t i2, std::size_t j, std::size_t j2) {
  return joint_covariance(theta, design.layout(), Leverage(design, Factor::A), Leverage(design, Factor::B), i, i2, j,
                          j2);
}

JointCovariance cell_covariance(const VarianceComponents& theta, const BalancedLayout& layout,
                                const Leverage& row_leverage, const Leverage& col_leverage, std::size_t i,
                                std::size_t j, std::size_t i2, std::size_t j2) {
  if (i == i2 && j == j2) throw DomainError("cell_covariance: the two cells must differ");
  if (std::max(i, i2) >= layout.g || std::max(j, j2) >= layout.h) {
    throw DomainError("cell_covariance: cell index out of range");
  }
  const auto g = static_cast<double>(layout.g);
  const auto h = static_cast<double>(layout.h);
  const auto m = static_cast<double>(layout.m);
  const double eta = g / h;
  const std::size_t rows[2] = {i, i2};
  const std::size_t cols[2] = {j, j2};
  JointCovariance out;
  out.normalization = g;
  out.matrix.resize(2, 2);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      double c = theta.sigma_a2 * row_leverage(rows[a], rows[b]) + eta * theta.sigma_b2 * col_leverage(cols[a], cols[b]);
      if (layout.replicated()) {
        if (a == b) c += g / m * theta.sigma_e2;
      } else {
        c += theta.sigma_e2 * (eta * (rows[a] == rows[b] ? 1.0 : 0.0) + (cols[a] == cols[b] ? 1.0 : 0.0));
      }
      out.matrix(a, b) = c;
    }
  }
  out.targets = {"cell[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]",
                 "cell[" + std::to_string(i2 + 1) + "," + std::to_string(j2 + 1) + "]"};
  return out;
}

double normal_critical_value(double q) {
  if (!(q > 0.0 && q < 1.0)) throw DomainError("q must lie in (0, 1), got " + std::to_string(q));
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - q / 2.0);
}

PredictionInterval prediction_interval(double center, double mse, double q, MseMethod method) {
  if (!(mse >= 0.0) || !std::isfinite(mse)) throw DomainError("prediction_interval: mse must be finite and >= 0");
  PredictionInterval out;
  out.center = center;
  out.half_width = normal_critical_value(q) * std::sqrt(mse);
  out.level = 1.0 - q;
  out.method = method;
  return out;
}

}  // namespace crossblup
