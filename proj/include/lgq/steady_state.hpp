#pragma once

// Stationary conditioned states and the low/high-efficiency asymptotics.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "lgq/error.hpp"
#include "lgq/estimation.hpp"
#include "lgq/linalg.hpp"
#include "lgq/model.hpp"
#include "lgq/trajectory.hpp"

namespace lgq {

/// A stationary variance together with the entries that have no finite limit.
struct StationaryMatrix {
  Mat value;
  BoolMat divergent;
  bool converged = false;

  bool finite() const { return converged && !divergent.any(); }
};

struct SteadyStateReport {
  StationaryMatrix true_cov;
  StationaryMatrix filtered_cov;
  StationaryMatrix lambda_r;
  StationaryMatrix smoothed_cov;
  StationaryMatrix swv_cov;
  std::optional<Mat> retro_cov;  // V_R = lambda^{-1} - V_T when lambda is well conditioned
  double purity_true = 0.0;
  double purity_filtered = 0.0;
  double purity_smoothed = 0.0;
  double purity_swv = 0.0;
  std::optional<double> rpr;  // undefined when P_F = 1 or nothing is stationary
  bool abar_hurwitz = false;  // A - Gamma_o^T C_o - V_T C_o^T C_o
  bool m_hurwitz = false;     // A - Gamma_o^T C_o - V_F C_o^T C_o (stabilizing V_F)
  bool physical_true = false;
  bool physical_filtered = false;
  bool physical_smoothed = false;
  bool physical_swv = false;
  bool stationary = false;
};

/// Relative purity recovery (P_S - P_F) / (1 - P_F); undefined at P_F = 1.
inline std::optional<double> relative_purity_recovery(double p_smoothed, double p_filtered,
                                                      double tol = 1e-12) {
  const double denom = 1.0 - p_filtered;
  if (!(std::abs(denom) > tol)) return std::nullopt;
  return (p_smoothed - p_filtered) / denom;
}

/// Drift of the haloed retrofilter, A - Gamma_o^T C_o - V C_o^T C_o.
inline Mat haloed_drift(const LGQSystem& sys, const Mat& v) {
  return sys.drift - sys.obs_gamma.transpose() * sys.obs_c -
         v * sys.obs_c.transpose() * sys.obs_c;
}

/// Riccati terms of the stationary information-form retrofilter for fixed V_T.
inline RiccatiTerms haloed_lambda_riccati(const LGQSystem& sys, const Mat& true_cov) {
  const Mat ku = kick(true_cov, sys.unobs_c, sys.unobs_gamma);
  return RiccatiTerms{haloed_drift(sys, true_cov).transpose(),
                      symmetrize(sys.obs_c.transpose() * sys.obs_c),
                      symmetrize(ku * ku.transpose())};
}

namespace detail {

inline StationaryMatrix stationary(const RiccatiTerms& terms, const Mat& x0,
                                   const SteadyStateOptions& opts) {
  const SteadyStateResult r = integrate_to_steady_state(terms, x0, opts);
  StationaryMatrix s;
  s.value = r.value;
  s.converged = r.converged;
  s.divergent = r.divergent;
  if (!r.converged && !r.divergent.any()) s.divergent.setConstant(true);
  return s;
}

inline StationaryMatrix all_divergent(Eigen::Index m) {
  StationaryMatrix s;
  s.value = Mat::Constant(m, m, std::numeric_limits<double>::infinity());
  s.divergent = BoolMat::Constant(m, m, true);
  return s;
}

inline double purity_or_zero(const StationaryMatrix& s, double hbar) {
  if (!s.finite()) return 0.0;
  try {
    return purity(s.value, hbar);
  } catch (const Error&) {
    return 0.0;
  }
}

}  // namespace detail

/// Stationary V_T, V_F, lambda_R, V_S and V_SWV with purities and the RPR.
/// Divergent entries are flagged rather than reported as numbers.
inline SteadyStateReport steady_report(const LGQSystem& sys, const SteadyStateOptions& opts = {}) {
  sys.validate();
  const Eigen::Index m = sys.dim();
  const Mat vacuum = 0.5 * sys.hbar * Mat::Identity(m, m);
  SteadyStateReport rep;
  rep.true_cov = detail::stationary(true_state_riccati(sys), vacuum, opts);
  rep.filtered_cov = detail::stationary(
      filter_riccati(sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma), vacuum, opts);
  if (!rep.true_cov.finite()) {
    rep.lambda_r = rep.smoothed_cov = rep.swv_cov = detail::all_divergent(m);
    rep.purity_filtered = detail::purity_or_zero(rep.filtered_cov, sys.hbar);
    return rep;
  }
  const Mat& vt = rep.true_cov.value;
  rep.abar_hurwitz = is_hurwitz(haloed_drift(sys, vt), opts.eig_tol);
  rep.lambda_r = detail::stationary(haloed_lambda_riccati(sys, vt), Mat::Zero(m, m), opts);
  rep.purity_true = detail::purity_or_zero(rep.true_cov, sys.hbar);
  rep.physical_true = check_physical(vt, sys.hbar);

  if (!rep.filtered_cov.finite() || !rep.lambda_r.finite()) {
    rep.smoothed_cov = rep.swv_cov = detail::all_divergent(m);
    rep.purity_filtered = detail::purity_or_zero(rep.filtered_cov, sys.hbar);
    rep.rpr = std::nullopt;
    return rep;
  }
  const Mat& vf = rep.filtered_cov.value;
  const Mat& lam = rep.lambda_r.value;
  rep.m_hurwitz = is_hurwitz(haloed_drift(sys, vf), opts.eig_tol);

  const Mat eye = Mat::Identity(m, m);
  const Mat halo = symmetrize(vf - vt);
  Eigen::FullPivLU<Mat> smooth_lu(eye + halo * lam);
  if (!smooth_lu.isInvertible()) {
    throw Error(ErrorKind::kSingular, "stationary smoothing combination is singular");
  }
  const Mat vs = symmetrize(smooth_lu.solve(halo) + vt);
  const Mat vswv = swv_combination(vf, Vec::Zero(m), vt, lam, Vec::Zero(m)).first;
  rep.smoothed_cov = StationaryMatrix{vs, BoolMat::Constant(m, m, false), true};
  rep.swv_cov = StationaryMatrix{vswv, BoolMat::Constant(m, m, false), true};
  if (detail::condition_number(lam) < kLambdaConditionLimit) {
    rep.retro_cov = symmetrize(lam.ldlt().solve(eye) - vt);
  }

  rep.purity_filtered = purity(vf, sys.hbar);
  rep.purity_smoothed = purity(vs, sys.hbar);
  // A singular or indefinite SWV "state" has no finite purity.
  try {
    rep.purity_swv = purity(vswv, sys.hbar);
  } catch (const Error&) {
    rep.purity_swv = std::numeric_limits<double>::infinity();
  }
  rep.rpr = relative_purity_recovery(rep.purity_smoothed, rep.purity_filtered);
  rep.physical_filtered = check_physical(vf, sys.hbar);
  rep.physical_smoothed = check_physical(vs, sys.hbar);
  rep.physical_swv = check_physical(vswv, sys.hbar);
  rep.stationary = true;
  return rep;
}

/// Leading-order OPO results for eta_o -> 0 (variances in units including hbar/2).
/// Off-diagonal entries carry the sign of sin(2 theta_o): positive for V_F,
/// negative for V_R.
struct LowEfficiencyPrediction {
  Mat filtered_cov;
  Mat retro_cov;  // p entries are infinite at theta_o = 0
  Mat swv_cov;
  double purity_filtered = 0.0;
  double purity_swv = 0.0;
};

inline LowEfficiencyPrediction low_efficiency_formulas(double theta_o, double eta_o,
                                                       double hbar = 1.0) {
  const double cos_o = std::cos(theta_o);
  const double c = std::abs(cos_o);
  if (c < 1e-6) {
    throw Error(ErrorKind::kDegeneratePhase, "theta_o = +-pi/2 carries no q information");
  }
  if (!(eta_o > 0.0) || !(eta_o < 1.0)) {
    throw Error(ErrorKind::kInvalidEfficiency, "low-efficiency formulas need 0 < eta_o < 1");
  }
  const double sin_o = std::sin(theta_o) * (cos_o < 0.0 ? -1.0 : 1.0);
  const double s = std::abs(sin_o);
  const double inf = std::numeric_limits<double>::infinity();
  const double csc = s > 0.0 ? 1.0 / sin_o : inf;
  const double half_hbar = 0.5 * hbar;
  const double root = std::sqrt(eta_o);

  LowEfficiencyPrediction p;
  p.filtered_cov.resize(2, 2);
  p.filtered_cov << 1.0 / (c * root), 0.5 * sin_o * root, 0.5 * sin_o * root, 0.5;
  p.filtered_cov *= half_hbar;
  p.retro_cov.resize(2, 2);
  const double off = s > 0.0 ? -2.0 * csc / root : inf;
  p.retro_cov << 1.0 / (c * root), off, off, 2.0 * csc * csc / eta_o;
  p.retro_cov *= half_hbar;
  p.swv_cov.resize(2, 2);
  p.swv_cov << 0.5 / (c * root), 0.0, 0.0, 0.5;  // off-diagonal cancels at this order
  p.swv_cov *= half_hbar;
  p.purity_filtered = std::sqrt(2.0 * c) * std::pow(eta_o, 0.25);
  p.purity_swv = 2.0 * std::sqrt(c) * std::pow(eta_o, 0.25);
  return p;
}

/// Linearized high-efficiency correction Q = V_F - V_T, solving
///   -Abar Q - Q Abar^T = K_u[V_T] K_u[V_T]^T
/// at the stationary true variance.
struct HighEfficiencyQ {
  Mat q;
  Mat abar;
  Mat true_cov;
};

inline HighEfficiencyQ high_efficiency_q(const LGQSystem& sys,
                                         const SteadyStateOptions& opts = {}) {
  sys.validate();
  const Mat vacuum = 0.5 * sys.hbar * Mat::Identity(sys.dim(), sys.dim());
  HighEfficiencyQ out;
  out.true_cov = steady_riccati(true_state_riccati(sys), vacuum, opts);
  out.abar = haloed_drift(sys, out.true_cov);
  const Mat ku = kick(out.true_cov, sys.unobs_c, sys.unobs_gamma);
  out.q = solve_lyapunov(out.abar, symmetrize(ku * ku.transpose()), opts.eig_tol);
  return out;
}

struct RPRScalingPoint {
  double eta_u = 0.0;
  std::optional<double> rpr;
};

struct RPRScalingFit {
  std::vector<RPRScalingPoint> points;
  double slope = 0.0;                 // least-squares c in R = c eta_u
  double max_relative_residual = 0.0; // max |R - c eta_u| / (c eta_u) over defined points
  std::size_t used = 0;
};

/// Full stationary RPR at eta_o = 1 - eta_u for each eta_u, fitted to R = c eta_u.
inline RPRScalingFit rpr_high_efficiency_check(const OPOParams& base,
                                               const std::vector<double>& eta_u_values,
                                               const SteadyStateOptions& opts = {}) {
  RPRScalingFit fit;
  double sxy = 0.0;
  double sxx = 0.0;
  for (double eta_u : eta_u_values) {
    if (eta_u < 0.0 || eta_u > 0.1) {
      throw Error(ErrorKind::kInvalidEfficiency, "high-efficiency check needs eta_u in [0, 0.1]");
    }
    OPOParams p = base;
    p.eta_u = eta_u;
    p.eta_o = 1.0 - eta_u;
    const SteadyStateReport rep = steady_report(build_opo(p), opts);
    RPRScalingPoint pt{eta_u, eta_u > 0.0 ? rep.rpr : std::nullopt};
    if (pt.rpr) {
      sxy += eta_u * *pt.rpr;
      sxx += eta_u * eta_u;
      ++fit.used;
    }
    fit.points.push_back(pt);
  }
  if (fit.used == 0) return fit;
  fit.slope = sxy / sxx;
  for (const auto& pt : fit.points) {
    if (!pt.rpr) continue;
    const double pred = fit.slope * pt.eta_u;
    fit.max_relative_residual = std::max(fit.max_relative_residual, std::abs(*pt.rpr - pred) / pred);
  }
  return fit;
}

}  // namespace lgq
