#include "crossblup/estimate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace crossblup {

namespace {

constexpr std::size_t kWithin = 0, kInteraction = 1, kRow = 2, kColumn = 3, kGrand = 4;

std::array<std::array<double, kStrata>, 4> weight_table(const BalancedLayout& layout) {
  return {component_weights(Component::Error, layout), component_weights(Component::Row, layout),
          component_weights(Component::Column, layout), component_weights(Component::Interaction, layout)};
}

std::vector<int> active_components(const BalancedLayout& layout) {
  if (layout.replicated()) return {0, 1, 2, 3};
  return {0, 1, 2};
}

double flat_variance(const Eigen::Ref<const VectorXd>& y) {
  if (y.size() < 2) return 1.0;
  const double mean = y.mean();
  const double v = (y.array() - mean).square().sum() / static_cast<double>(y.size() - 1);
  return v > 0.0 && std::isfinite(v) ? v : 1.0;
}

}  // namespace

std::string to_string(Method method) { return method == Method::REML ? "reml" : "ml"; }

Method parse_method(const std::string& text) {
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "reml") return Method::REML;
  if (lower == "ml") return Method::ML;
  throw DomainError("unknown estimation method '" + text + "' (expected reml or ml)");
}

FixedEffects FixedEffects::split(const Eigen::Ref<const VectorXd>& xi, const CovariateRoles& roles) {
  if (static_cast<std::size_t>(xi.size()) != 1 + roles.p()) {
    throw DomainError("fixed effects: expected " + std::to_string(1 + roles.p()) + " coefficients, got " +
                      std::to_string(xi.size()));
  }
  FixedEffects out;
  out.xi0 = xi[0];
  Eigen::Index c = 1;
  const auto take = [&](std::size_t count) {
    VectorXd v = xi.segment(c, static_cast<Eigen::Index>(count));
    c += static_cast<Eigen::Index>(count);
    return v;
  };
  out.xi1 = take(roles.p_a);
  out.xi2 = take(roles.p_b);
  out.xi3 = take(roles.p_ab);
  out.xi4 = take(roles.p_w);
  return out;
}

VectorXd FixedEffects::stacked() const {
  VectorXd out(1 + xi1.size() + xi2.size() + xi3.size() + xi4.size());
  out << xi0, xi1, xi2, xi3, xi4;
  return out;
}

Eigen::Vector4d to_vector(const VarianceComponents& theta) {
  return {theta.sigma_e2, theta.sigma_a2, theta.sigma_b2, theta.sigma_g2};
}

VarianceComponents from_vector(const Eigen::Ref<const Eigen::Vector4d>& v) { return {v[1], v[2], v[3], v[0]}; }

StratumModel::StratumModel(const CenteredDesign& design, const Eigen::Ref<const VectorXd>& y)
    : layout_(design.layout()) {
  build(design.model_matrix(), y);
}

StratumModel::StratumModel(const BalancedLayout& layout, const Eigen::Ref<const MatrixXd>& x,
                           const Eigen::Ref<const VectorXd>& y)
    : layout_(layout) {
  build(x, y);
}

void StratumModel::build(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& y) {
  const auto n = static_cast<Eigen::Index>(layout_.n());
  if (x.rows() != n || y.size() != n) {
    throw DomainError("stratum model: design has " + std::to_string(x.rows()) + " rows and response " +
                      std::to_string(y.size()) + " entries, expected " + std::to_string(n));
  }
  if (!y.allFinite()) throw DomainError("stratum model: response must be finite");
  q_ = x.cols();
  y_var_ = flat_variance(y);
  const auto g = static_cast<Eigen::Index>(layout_.g);
  const auto h = static_cast<Eigen::Index>(layout_.h);
  const auto m = static_cast<double>(layout_.m);

  compact_[kWithin].resize(layout_.replicated() ? n : 0, q_ + 1);
  compact_[kInteraction].resize(g * h, q_ + 1);
  compact_[kRow].resize(g, q_ + 1);
  compact_[kColumn].resize(h, q_ + 1);
  compact_[kGrand].resize(1, q_ + 1);
  weight_ = {1.0, m, static_cast<double>(h) * m, static_cast<double>(g) * m, static_cast<double>(n)};

  for (Eigen::Index c = 0; c <= q_; ++c) {
    const StratumDecomposition d = project_strata(c < q_ ? VectorXd(x.col(c)) : VectorXd(y), layout_);
    if (layout_.replicated()) compact_[kWithin].col(c) = d.within;
    for (Eigen::Index i = 0; i < g; ++i) {
      for (Eigen::Index j = 0; j < h; ++j) compact_[kInteraction](i * h + j, c) = d.interaction(i, j);
    }
    compact_[kRow].col(c) = d.row;
    compact_[kColumn].col(c) = d.col;
    compact_[kGrand](0, c) = d.grand;
  }
  for (std::size_t k = 0; k < kStrata; ++k) {
    gram_[k] = weight_[k] * compact_[k].transpose() * compact_[k];
  }
}

StratumModel::Evaluation StratumModel::evaluate(const VarianceComponents& theta, Method method,
                                                bool with_gradient) const {
  const LambdaSpectrum spec = lambdas(theta, layout_);
  MatrixXd xtvx = MatrixXd::Zero(q_, q_);
  VectorXd xtvy = VectorXd::Zero(q_);
  for (std::size_t k = 0; k < kStrata; ++k) {
    if (spec.mult[k] == 0) continue;
    xtvx += gram_[k].topLeftCorner(q_, q_) / spec.value[k];
    xtvy += gram_[k].topRightCorner(q_, 1) / spec.value[k];
  }
  if (scaled_rcond(xtvx) < kRcondThreshold) {
    throw RankDeficiencyError("GLS normal equations are numerically singular (collinear design columns)");
  }
  const Eigen::LDLT<MatrixXd> ldlt(xtvx);

  Evaluation out;
  out.xi = ldlt.solve(xtvy);
  out.xtvx = xtvx;

  std::array<double, kStrata> resid{};
  double quad = 0.0;
  for (std::size_t k = 0; k < kStrata; ++k) {
    if (spec.mult[k] == 0) continue;
    const VectorXd r = compact_[k].col(q_) - compact_[k].leftCols(q_) * out.xi;
    resid[k] = weight_[k] * r.squaredNorm();
    quad += resid[k] / spec.value[k];
  }
  double crit = spec.log_det() + quad;
  if (method == Method::REML) crit += ldlt.vectorD().array().log().sum();
  out.criterion = -0.5 * crit;

  if (with_gradient) {
    for (std::size_t k = 0; k < kStrata; ++k) {
      if (spec.mult[k] == 0) continue;
      const double lam = spec.value[k];
      double inner = static_cast<double>(spec.mult[k]) / lam - resid[k] / (lam * lam);
      if (method == Method::REML) {
        inner -= ldlt.solve(gram_[k].topLeftCorner(q_, q_)).trace() / (lam * lam);
      }
      out.dcrit_dlambda[k] = -0.5 * inner;
    }
    const auto w = weight_table(layout_);
    for (int c = 0; c < 4; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < kStrata; ++k) s += w[static_cast<std::size_t>(c)][k] * out.dcrit_dlambda[k];
      out.gradient[c] = s;
    }
    if (!layout_.replicated()) out.gradient[3] = 0.0;
  }
  return out;
}

std::array<double, kStrata> StratumModel::ols_mean_squares() const {
  const Evaluation ols = evaluate(VarianceComponents{0.0, 0.0, 0.0, 1.0}, Method::ML, false);
  const auto mult = stratum_multiplicities(layout_);
  std::array<double, kStrata> ms{};
  for (std::size_t k = 0; k < kStrata; ++k) {
    if (mult[k] == 0) continue;
    const VectorXd r = compact_[k].col(q_) - compact_[k].leftCols(q_) * ols.xi;
    ms[k] = weight_[k] * r.squaredNorm() / static_cast<double>(mult[k]);
  }
  return ms;
}

VectorXd gls_fixed_effects(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table) {
  return StratumModel(design, table.values()).evaluate(theta, Method::ML, false).xi;
}

double reml_criterion(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table) {
  return StratumModel(design, table.values()).evaluate(theta, Method::REML, false).criterion;
}

double ml_criterion(const VarianceComponents& theta, const CenteredDesign& design, const ResponseTable& table) {
  return StratumModel(design, table.values()).evaluate(theta, Method::ML, false).criterion;
}

namespace {

struct InnerResult {
  Eigen::Vector4d theta = Eigen::Vector4d::Zero();
  double criterion = -std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
  double gradient_norm = std::numeric_limits<double>::infinity();
  int pin = -1;  // component that crossed the pin threshold
};

// Expected information in log-variance coordinates, used to seed the
// quasi-Newton inverse Hessian.
MatrixXd fisher_log(const BalancedLayout& layout, const Eigen::Vector4d& theta, const std::vector<int>& free) {
  const auto w = weight_table(layout);
  const LambdaSpectrum spec = lambdas(from_vector(theta), layout);
  const auto k = static_cast<Eigen::Index>(free.size());
  MatrixXd info = MatrixXd::Zero(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      const auto ca = static_cast<std::size_t>(free[static_cast<std::size_t>(a)]);
      const auto cb = static_cast<std::size_t>(free[static_cast<std::size_t>(b)]);
      double s = 0.0;
      for (std::size_t t = 0; t < kStrata; ++t) {
        if (spec.mult[t] == 0) continue;
        s += static_cast<double>(spec.mult[t]) * w[ca][t] * w[cb][t] / (spec.value[t] * spec.value[t]);
      }
      info(a, b) = 0.5 * s * theta[static_cast<Eigen::Index>(ca)] * theta[static_cast<Eigen::Index>(cb)];
    }
  }
  info.diagonal().array() += 1e-10 * (1.0 + info.diagonal().array().abs());
  return info.ldlt().solve(MatrixXd::Identity(k, k));
}

InnerResult optimize(const StratumModel& model, const FitOptions& opt, Eigen::Vector4d theta,
                     const std::vector<int>& free, std::size_t budget) {
  const BalancedLayout& layout = model.layout();
  const auto k = static_cast<Eigen::Index>(free.size());
  const double log_floor = std::log(opt.pin_threshold * model.response_variance());

  const auto unpack = [&](const VectorXd& phi) {
    Eigen::Vector4d t = theta;
    for (Eigen::Index a = 0; a < k; ++a) t[free[static_cast<std::size_t>(a)]] = std::exp(phi[a]);
    return t;
  };
  // Minimizes f = -criterion over phi = log(theta_free).
  const auto objective = [&](const VectorXd& phi, VectorXd& grad) {
    const Eigen::Vector4d t = unpack(phi);
    const auto ev = model.evaluate(from_vector(t), opt.method, true);
    grad.resize(k);
    for (Eigen::Index a = 0; a < k; ++a) {
      const int c = free[static_cast<std::size_t>(a)];
      grad[a] = -ev.gradient[c] * t[c];
    }
    return -ev.criterion;
  };

  InnerResult out;
  VectorXd phi(k);
  for (Eigen::Index a = 0; a < k; ++a) phi[a] = std::log(theta[free[static_cast<std::size_t>(a)]]);
  VectorXd grad;
  double f = objective(phi, grad);
  MatrixXd hinv = fisher_log(layout, theta, free);
  bool fresh = true;
  double last_drop = std::numeric_limits<double>::infinity();

  std::size_t it = 0;
  for (; it < budget; ++it) {
    const double gnorm = grad.cwiseAbs().maxCoeff();
    if (gnorm < opt.gradient_tolerance && (it == 0 || last_drop <= opt.criterion_tolerance * (1.0 + std::abs(f)))) {
      out.converged = true;
      break;
    }
    VectorXd dir = -hinv * grad;
    double slope = grad.dot(dir);
    if (!(slope < 0.0)) {
      hinv = fisher_log(layout, unpack(phi), free);
      fresh = true;
      dir = -hinv * grad;
      slope = grad.dot(dir);
    }
    const double dmax = dir.cwiseAbs().maxCoeff();
    if (dmax > 3.0) {
      dir *= 3.0 / dmax;
      slope *= 3.0 / dmax;
    }
    // The predicted decrease is below the resolution of f: nothing left to gain.
    if (std::abs(slope) < 1e-13 * (1.0 + std::abs(f))) {
      out.converged = gnorm < std::sqrt(opt.gradient_tolerance);
      break;
    }
    double step = 1.0;
    bool accepted = false;
    VectorXd phi_new, grad_new;
    double f_new = f;
    for (int ls = 0; ls < 60; ++ls) {
      phi_new = phi + step * dir;
      f_new = objective(phi_new, grad_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!fresh) {
        hinv = fisher_log(layout, unpack(phi), free);
        fresh = true;
        continue;
      }
      out.converged = gnorm < std::sqrt(opt.gradient_tolerance) && std::abs(slope) < 1e-9 * (1.0 + std::abs(f));
      break;
    }
    const VectorXd s = phi_new - phi;
    const VectorXd yv = grad_new - grad;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const MatrixXd eye = MatrixXd::Identity(k, k);
      hinv = (eye - rho * s * yv.transpose()) * hinv * (eye - rho * yv * s.transpose()) + rho * s * s.transpose();
      fresh = false;
    }
    last_drop = f - f_new;
    phi = phi_new;
    grad = grad_new;
    f = f_new;

    for (Eigen::Index a = 0; a < k; ++a) {
      const int c = free[static_cast<std::size_t>(a)];
      if (c != 0 && phi[a] < log_floor) out.pin = c;
    }
    if (out.pin >= 0) {
      ++it;
      break;
    }
  }
  out.theta = unpack(phi);
  out.criterion = -f;
  out.iterations = it;
  out.gradient_norm = grad.size() > 0 ? grad.cwiseAbs().maxCoeff() : 0.0;
  return out;
}

Eigen::Vector4d starting_values(const StratumModel& model, const FitOptions& opt) {
  const BalancedLayout& l = model.layout();
  if (opt.start) {
    opt.start->validate();
    Eigen::Vector4d t = to_vector(*opt.start);
    const double floor = 1e-3 * model.response_variance();
    for (int c = 1; c < 4; ++c) t[c] = std::max(t[c], floor);
    if (!l.replicated()) t[3] = 0.0;
    return t;
  }
  const auto ms = model.ols_mean_squares();
  const double vy = model.response_variance();
  const auto g = static_cast<double>(l.g), h = static_cast<double>(l.h), m = static_cast<double>(l.m);
  Eigen::Vector4d t = Eigen::Vector4d::Zero();
  if (l.replicated()) {
    t[0] = ms[kWithin];
    t[3] = (ms[kInteraction] - ms[kWithin]) / m;
  } else {
    t[0] = ms[kInteraction];
  }
  t[1] = (ms[kRow] - ms[kInteraction]) / (h * m);
  t[2] = (ms[kColumn] - ms[kInteraction]) / (g * m);
  t[0] = std::max(t[0], 1e-3 * vy);
  for (int c = 1; c < (l.replicated() ? 4 : 3); ++c) t[c] = std::max(t[c], 1e-2 * vy);
  return t;
}

}  // namespace

FitResult fit(const CenteredDesign& design, const ResponseTable& table, const FitOptions& options) {
  if (!(design.layout() == table.layout())) throw DomainError("fit: design and response layouts differ");
  const StratumModel model(design, table.values());
  const BalancedLayout& layout = design.layout();
  const double vy = model.response_variance();

  const std::vector<int> active = active_components(layout);
  std::vector<bool> pinned(4, false);
  Eigen::Vector4d theta = starting_values(model, options);

  const auto free_set = [&] {
    std::vector<int> f;
    for (int c : active) {
      if (!pinned[static_cast<std::size_t>(c)]) f.push_back(c);
    }
    return f;
  };

  std::size_t used = 0;
  InnerResult best;
  bool done = false;
  for (int outer = 0; outer < 12 && !done; ++outer) {
    for (int c : active) {
      if (pinned[static_cast<std::size_t>(c)]) theta[c] = 0.0;
    }
    const std::size_t budget = options.max_iterations > used ? options.max_iterations - used : 0;
    InnerResult r = optimize(model, options, theta, free_set(), budget);
    used += r.iterations;
    theta = r.theta;
    best = r;
    if (r.pin >= 0) {
      pinned[static_cast<std::size_t>(r.pin)] = true;
      continue;
    }
    if (!r.converged) break;

    // Components that are numerically tiny: accept 0 when it costs nothing.
    bool changed = false;
    for (int c : active) {
      if (c == 0 || pinned[static_cast<std::size_t>(c)] || theta[c] >= options.boundary_probe * vy) continue;
      std::vector<bool> trial_pins = pinned;
      trial_pins[static_cast<std::size_t>(c)] = true;
      std::vector<int> trial_free;
      for (int a : active) {
        if (!trial_pins[static_cast<std::size_t>(a)]) trial_free.push_back(a);
      }
      Eigen::Vector4d start = theta;
      start[c] = 0.0;
      const InnerResult t = optimize(model, options, start, trial_free, options.max_iterations);
      used += t.iterations;
      if (t.converged && t.criterion >= r.criterion - 1e-9 * (1.0 + std::abs(r.criterion))) {
        pinned = trial_pins;
        theta = t.theta;
        best = t;
        changed = true;
        break;
      }
    }
    if (changed) continue;

    // KKT: a pinned component whose criterion derivative at 0 is positive is released.
    const auto ev = model.evaluate(from_vector(theta), options.method, true);
    for (int c : active) {
      if (!pinned[static_cast<std::size_t>(c)]) continue;
      if (ev.gradient[c] * vy > 1e-6) {
        pinned[static_cast<std::size_t>(c)] = false;
        theta[c] = 1e-2 * vy;
        changed = true;
      }
    }
    if (changed) continue;
    done = true;
  }

  FitResult res;
  res.layout = layout;
  res.roles = design.roles();
  res.method = options.method;
  res.theta = from_vector(best.theta);
  const auto ev = model.evaluate(res.theta, options.method, true);
  res.xi = ev.xi;
  res.fixed = FixedEffects::split(ev.xi, design.roles());
  res.xi_covariance = ev.xtvx.ldlt().solve(MatrixXd::Identity(ev.xtvx.rows(), ev.xtvx.cols()));
  res.criterion = ev.criterion;
  res.iterations = used;
  res.converged = done && best.converged;
  double gmax = 0.0;
  for (int c : active) {
    if (pinned[static_cast<std::size_t>(c)]) continue;
    gmax = std::max(gmax, std::abs(ev.gradient[c] * best.theta[c]));
  }
  res.gradient_norm = gmax;
  for (int c : active) res.boundary[static_cast<std::size_t>(c)] = pinned[static_cast<std::size_t>(c)];
  if (!res.converged) {
    throw ConvergenceError("fit: optimizer did not converge after " + std::to_string(used) +
                               " iterations (gradient norm " + std::to_string(gmax) + ")",
                           res);
  }
  return res;
}

ParameterErrors linear_approx_parameter_errors(const CenteredDesign& design, const RandomEffects& effects,
                                               const VarianceComponents& truth, EtaRegime regime) {
  const BalancedLayout& l = design.layout();
  const auto g = static_cast<double>(l.g);
  const auto h = static_cast<double>(l.h);
  if (static_cast<std::size_t>(effects.alpha.size()) != l.g || static_cast<std::size_t>(effects.beta.size()) != l.h ||
      static_cast<std::size_t>(effects.e.size()) != l.n() ||
      (l.replicated() && static_cast<std::size_t>(effects.gamma.size()) != l.cells())) {
    throw DomainError("linear_approx_parameter_errors: random-effect vectors do not match the layout");
  }
  const DhatMatrices d = dhat(design);
  const auto solve = [](const MatrixXd& dm, const VectorXd& rhs, const char* name) -> VectorXd {
    if (rhs.size() == 0) return rhs;
    if (scaled_rcond(dm) < kRcondThreshold) {
      throw RankDeficiencyError(std::string("linear approximation: D matrix of the ") + name + " block is singular");
    }
    return dm.ldlt().solve(rhs);
  };

  ParameterErrors out;
  out.xi1 = solve(d.d1, design.row_c().transpose() * effects.alpha / g, "row");
  out.xi2 = solve(d.d2, design.col_c().transpose() * effects.beta / h, "column");
  const auto gh = static_cast<double>(l.cells());
  const auto n = static_cast<double>(l.n());
  if (l.replicated()) {
    out.xi3 = solve(d.d3, design.ab_cell_c().transpose() * effects.gamma / gh, "interaction");
    out.xi4 = solve(d.d4, design.w_within_c().transpose() * effects.e / n, "within");
    out.sigma_g2 = effects.gamma.squaredNorm() / gh - truth.sigma_g2;
  } else {
    out.xi3.resize(0);
    out.xi4 = solve(d.d3, design.w_cell_c().transpose() * effects.e / gh, "within");
  }
  out.sigma_a2 = effects.alpha.squaredNorm() / g - truth.sigma_a2;
  out.sigma_b2 = effects.beta.squaredNorm() / h - truth.sigma_b2;
  out.sigma_e2 = effects.e.squaredNorm() / n - truth.sigma_e2;

  // Intercept: (1/g) sum (1 - xbar_a^T D1^-1 x_i(c)) alpha_i, and the column analogue.
  double row_part = effects.alpha.sum() / g;
  if (design.roles().p_a > 0) {
    const VectorXd wa = solve(d.d1, design.mean_a().transpose(), "row");
    row_part -= (design.row_c() * wa).dot(effects.alpha) / g;
  }
  double col_part = effects.beta.sum() / h;
  if (design.roles().p_b > 0) {
    const VectorXd wb = solve(d.d2, design.mean_b().transpose(), "column");
    col_part -= (design.col_c() * wb).dot(effects.beta) / h;
  }
  switch (regime) {
    case EtaRegime::Finite: out.xi0 = row_part + col_part; break;
    case EtaRegime::Zero: out.xi0 = row_part; break;
    case EtaRegime::Infinite: out.xi0 = col_part; break;
  }
  return out;
}

}  // namespace crossblup
