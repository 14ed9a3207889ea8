#pragma once

// Conditioned-state estimation: classical LG filtering, retrofiltering and
// smoothing, and their quantum counterparts (haloed filter, information-form
// haloed retrofilter, LGQ smoother and the smoothed weak-value "state").

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "lgq/error.hpp"
#include "lgq/linalg.hpp"
#include "lgq/model.hpp"
#include "lgq/trajectory.hpp"

namespace lgq {

/// Classical LG model dx = A x dt + E dv_p, y dt = C x dt + dv_m with
/// D = E E^T and Gamma^T dt = E dv_p dv_m^T.
struct LGModel {
  Mat drift;
  Mat diffusion;
  Mat c;
  Mat gamma;

  static LGModel from_noise(const Mat& a, const Mat& e, const Mat& c, const Mat& gamma) {
    return LGModel{a, e * e.transpose(), c, gamma};
  }

  Eigen::Index dim() const { return drift.rows(); }
};

struct FilterOutput {
  TimeGrid grid;
  std::vector<Vec> means;        // n_points
  std::vector<Mat> cov;          // n_points
  std::vector<Vec> innovations;  // n_steps, dw_F = y dt - C <x>_F dt
};

struct QuantumFilterOutput {
  FilterOutput filter;
  std::vector<Mat> true_cov;   // V_T on the same grid
  std::vector<Mat> halo_cov;   // haloed variance from the haloed equations
  double cov_identity_error = 0.0;   // max_t ||V_F - (halo + V_T)||_F
  double mean_identity_error = 0.0;  // max_t ||<x>_F - <x_halo>_F||_inf
};

/// Information-form retrofilter. `lambda` is the inverse (haloed) retrofiltered
/// variance and `info_mean` = lambda <x>_R; both vanish at t = T.
struct RetrofilterOutput {
  TimeGrid grid;
  std::vector<Mat> lambda;
  std::vector<Vec> info_mean;
  std::vector<std::optional<Vec>> means;  // <x>_R where lambda is well conditioned
  std::vector<std::optional<Mat>> cov;    // V_R = lambda^{-1} - V_T there
  double min_lambda_eigenvalue = 0.0;
  double identity_error = 0.0;            // max relative ||V_R(direct) - (lambda^{-1} - V_T)||
  std::size_t identity_points = 0;        // grid points entering identity_error
};

struct SmootherOutput {
  TimeGrid grid;
  std::vector<Vec> means;
  std::vector<Mat> cov;
  std::vector<Vec> swv_means;
  std::vector<Mat> swv_cov;
  std::vector<bool> low_confidence;  // burn-in region near t0
};

struct SWVOutput {
  std::vector<Vec> means;
  std::vector<Mat> cov;
};

/// Condition number above which lambda is not inverted.
inline constexpr double kLambdaConditionLimit = 1e8;

namespace detail {

inline void check_record(const TimeGrid& grid, const std::vector<Vec>& obs, Eigen::Index channels) {
  if (obs.size() != grid.n_steps()) {
    throw Error(ErrorKind::kShapeMismatch, "record length differs from the grid's step count");
  }
  for (const Vec& y : obs) {
    if (y.size() != channels) throw Error(ErrorKind::kShapeMismatch, "record channel count");
  }
}

/// Forward mean update <x>_{k+1} = <x>_k + A <x>_k dt + K_k (y_k - C <x>_k dt).
inline FilterOutput run_filter_means(const Mat& a, const Mat& c, const std::vector<Mat>& gains,
                                     std::vector<Mat> cov, const std::vector<Vec>& obs,
                                     const TimeGrid& grid, const Vec& x0) {
  FilterOutput out;
  out.grid = grid;
  out.cov = std::move(cov);
  out.means.reserve(grid.n_points());
  out.innovations.reserve(grid.n_steps());
  const double dt = grid.dt();
  Vec x = x0;
  out.means.push_back(x);
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    Vec innov = obs[k] - c * x * dt;
    x = x + a * x * dt + gains[k] * innov;
    if (!x.allFinite()) throw Error(ErrorKind::kNonFiniteValue, "filtered mean became non-finite");
    out.means.push_back(x);
    out.innovations.push_back(std::move(innov));
  }
  return out;
}

inline std::vector<Mat> kicks_along(const std::vector<Mat>& cov, const Mat& c, const Mat& gamma,
                                    std::size_t count) {
  std::vector<Mat> gains;
  gains.reserve(count);
  for (std::size_t k = 0; k < count; ++k) gains.push_back(kick(cov[k], c, gamma));
  return gains;
}

}  // namespace detail

/// Cubic Hermite interpolation of a matrix trajectory from its grid values
/// and derivatives; O(dt^4) accurate between grid points.
class CovInterpolant {
 public:
  CovInterpolant(const TimeGrid& grid, const std::vector<Mat>& values, std::vector<Mat> slopes)
      : grid_(grid), values_(&values), slopes_(std::move(slopes)) {}

  Mat operator()(double t) const {
    const double s = (t - grid_.t0()) / grid_.dt();
    auto k = static_cast<std::ptrdiff_t>(std::floor(s));
    k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(grid_.n_steps()) - 1);
    const double u = s - static_cast<double>(k);
    const auto i = static_cast<std::size_t>(k);
    if (u == 0.0) return (*values_)[i];
    if (u == 1.0) return (*values_)[i + 1];
    const double h00 = (1 + 2 * u) * (1 - u) * (1 - u);
    const double h10 = u * (1 - u) * (1 - u);
    const double h01 = u * u * (3 - 2 * u);
    const double h11 = u * u * (u - 1);
    const double dt = grid_.dt();
    return h00 * (*values_)[i] + h10 * dt * slopes_[i] + h01 * (*values_)[i + 1] +
           h11 * dt * slopes_[i + 1];
  }

 private:
  TimeGrid grid_;
  const std::vector<Mat>* values_;
  std::vector<Mat> slopes_;
};

/// Classical LG filter: RK4 for the variance Riccati equation, Euler updates
/// of the mean with the stored record increments.
inline FilterOutput classical_filter(const LGModel& model, const std::vector<Vec>& obs,
                                     const TimeGrid& grid, const Vec& x0, const Mat& v0) {
  detail::check_record(grid, obs, model.c.rows());
  if (x0.size() != model.dim()) throw Error(ErrorKind::kShapeMismatch, "initial mean shape");
  if (!is_psd(v0, 1e-12 * (1.0 + v0.norm()))) {
    throw Error(ErrorKind::kInvalidArgument, "initial variance must be PSD");
  }
  const RiccatiTerms terms = filter_riccati(model.drift, model.diffusion, model.c, model.gamma);
  std::vector<Mat> cov = integrate_riccati(terms, v0, grid);
  const std::vector<Mat> gains = detail::kicks_along(cov, model.c, model.gamma, grid.n_steps());
  return detail::run_filter_means(model.drift, model.c, gains, std::move(cov), obs, grid, x0);
}

/// Quantum filter on Alice's record. The authoritative result integrates the
/// usual filter equation with the observed channel only; the haloed form
/// (halo variance with diffusion sum_r K_r[V_T] K_r[V_T]^T, jointly with V_T)
/// is integrated alongside and must reproduce V_F = halo + V_T and the mean.
inline QuantumFilterOutput quantum_filter(const LGQSystem& sys, const MeasurementRecord& record,
                                          const Vec& x0, const Mat& v0,
                                          double identity_tol = 1e-8) {
  sys.validate();
  require_physical_start(sys, v0);
  const TimeGrid& grid = record.grid;
  detail::check_record(grid, record.obs_dt, sys.obs_channels());
  if (x0.size() != sys.dim()) throw Error(ErrorKind::kShapeMismatch, "initial mean shape");

  QuantumFilterOutput out;
  const LGModel direct{sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma};
  out.filter = classical_filter(direct, record.obs_dt, grid, x0, v0);

  // Joint (V_T, halo) flow, stacked vertically.
  const Eigen::Index m = sys.dim();
  const RiccatiTerms true_terms = true_state_riccati(sys);
  const Mat& a = sys.drift;
  const auto joint = [&](double, const Mat& x) {
    const Mat vt = x.topRows(m);
    const Mat halo = x.bottomRows(m);
    const Mat ko = kick(vt, sys.obs_c, sys.obs_gamma);
    const Mat ku = kick(vt, sys.unobs_c, sys.unobs_gamma);
    const Mat halo_diffusion = ko * ko.transpose() + ku * ku.transpose();
    const Mat kf = kick(Mat(halo + vt), sys.obs_c, sys.obs_gamma);
    Mat d(2 * m, m);
    d.topRows(m) = true_terms.rhs(vt);
    d.bottomRows(m) =
        symmetrize(a * halo + halo * a.transpose() + halo_diffusion - kf * kf.transpose());
    return d;
  };
  Mat state(2 * m, m);
  state << symmetrize(v0), Mat::Zero(m, m);
  out.true_cov.reserve(grid.n_points());
  out.halo_cov.reserve(grid.n_points());
  out.true_cov.push_back(state.topRows(m));
  out.halo_cov.push_back(state.bottomRows(m));
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    state = rk4_step(joint, grid.time(k), state, grid.dt());
    state.topRows(m) = symmetrize(state.topRows(m));
    state.bottomRows(m) = symmetrize(state.bottomRows(m));
    if (!state.allFinite()) throw Error(ErrorKind::kNonFiniteValue, "haloed filter blew up");
    out.true_cov.push_back(state.topRows(m));
    out.halo_cov.push_back(state.bottomRows(m));
  }

  // Haloed mean, driven by K_o[halo + V_T].
  std::vector<Mat> halo_gains;
  halo_gains.reserve(grid.n_steps());
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    halo_gains.push_back(kick(Mat(out.halo_cov[k] + out.true_cov[k]), sys.obs_c, sys.obs_gamma));
  }
  const FilterOutput halo_means = detail::run_filter_means(sys.drift, sys.obs_c, halo_gains, {},
                                                           record.obs_dt, grid, x0);

  for (std::size_t k = 0; k < grid.n_points(); ++k) {
    const Mat& vf = out.filter.cov[k];
    const double cov_err = (vf - (out.halo_cov[k] + out.true_cov[k])).norm() / std::max(1.0, vf.norm());
    const double mean_err = (out.filter.means[k] - halo_means.means[k]).cwiseAbs().maxCoeff() /
                            std::max(1.0, out.filter.means[k].cwiseAbs().maxCoeff());
    out.cov_identity_error = std::max(out.cov_identity_error, cov_err);
    out.mean_identity_error = std::max(out.mean_identity_error, mean_err);
  }
  if (out.cov_identity_error > identity_tol || out.mean_identity_error > identity_tol) {
    std::ostringstream os;
    os << "direct and haloed filters disagree (cov " << out.cov_identity_error << ", mean "
       << out.mean_identity_error << ")";
    throw Error(ErrorKind::kIdentityViolation, os.str());
  }
  return out;
}

/// Coefficients of the information-form retrofilter at one time:
///   -dL/dt = Abar^T L + L Abar - L Dbar L + C^T C,
///   z(t) = z(t+dt) + (Abar^T - L Dbar) z dt + (C^T - L G^T) y dt,
/// with Abar = A - G^T C.
struct RetroCoefficients {
  Mat abar;
  Mat dbar;
  Mat g;
};

namespace detail {

template <typename Coeffs>
RetrofilterOutput run_information_retrofilter(const Mat& c, const std::vector<Vec>& obs,
                                              const TimeGrid& grid, const Coeffs& coeffs) {
  const Eigen::Index m = c.cols();
  const std::size_t n = grid.n_steps();
  const double t_final = grid.t_final();
  const Mat ctc = c.transpose() * c;
  const auto rhs = [&](double tau, const Mat& lam) {
    const RetroCoefficients k = coeffs(t_final - tau);
    return symmetrize(k.abar.transpose() * lam + lam * k.abar - lam * k.dbar * lam + ctc);
  };

  RetrofilterOutput out;
  out.grid = grid;
  out.lambda.assign(grid.n_points(), Mat::Zero(m, m));
  out.info_mean.assign(grid.n_points(), Vec::Zero(m));
  const double dt = grid.dt();
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t k1 = n - step;  // integrate from t_{k1} to t_{k1 - 1}
    const double tau = t_final - grid.time(k1);
    const Mat& lam = out.lambda[k1];
    Mat next = symmetrize(rk4_step(rhs, tau, lam, dt));
    const RetroCoefficients k = coeffs(grid.time(k1));
    const Vec& z = out.info_mean[k1];
    Vec z_next = z + (k.abar.transpose() - lam * k.dbar) * z * dt +
                 (c.transpose() - lam * k.g.transpose()) * obs[k1 - 1];
    if (!next.allFinite() || !z_next.allFinite()) {
      throw Error(ErrorKind::kNonFiniteValue, "retrofilter blew up");
    }
    out.lambda[k1 - 1] = std::move(next);
    out.info_mean[k1 - 1] = std::move(z_next);
  }
  out.min_lambda_eigenvalue = 0.0;
  for (const Mat& lam : out.lambda) {
    out.min_lambda_eigenvalue = std::min(out.min_lambda_eigenvalue, min_eigenvalue(lam));
  }
  return out;
}

inline double condition_number(const Mat& s) {
  Eigen::JacobiSVD<Mat> svd(s);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  return smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
}

/// Fills means/cov where lambda is well conditioned and cross-checks
/// V_R = lambda^{-1} - V_T against direct backward integration of the
/// retrofilter Riccati equation (`direct` in reversed time).
inline void recover_moments(RetrofilterOutput& out, const std::vector<Mat>* true_cov,
                            const RiccatiTerms& direct) {
  const std::size_t np = out.grid.n_points();
  const Eigen::Index m = out.lambda.front().rows();
  out.means.assign(np, std::nullopt);
  out.cov.assign(np, std::nullopt);
  std::optional<std::size_t> start;
  for (std::size_t k = np; k-- > 0;) {
    if (condition_number(out.lambda[k]) >= kLambdaConditionLimit) continue;
    Eigen::LDLT<Mat> ldlt(out.lambda[k]);
    const Mat inv = symmetrize(ldlt.solve(Mat::Identity(m, m)));
    const Mat vt = true_cov ? (*true_cov)[k] : Mat::Zero(m, m);
    out.means[k] = ldlt.solve(out.info_mean[k]);
    out.cov[k] = symmetrize(inv - vt);
    // The direct equation starts from an infinite variance and is stiff
    // near T; begin the cross-check once RK4 is stable on this grid.
    if (!start && out.grid.dt() * direct.closed_loop(*out.cov[k]).norm() < 0.5) start = k;
  }
  out.identity_error = 0.0;
  out.identity_points = 0;
  if (!start) return;
  const auto f = [&direct](double, const Mat& x) { return direct.rhs(x); };
  Mat vr = *out.cov[*start];
  for (std::size_t k = *start; k-- > 0;) {
    vr = symmetrize(rk4_step(f, 0.0, vr, out.grid.dt()));
    if (!vr.allFinite()) break;
    if (!out.cov[k]) continue;
    const double err = (vr - *out.cov[k]).norm() / std::max(vr.norm(), 1e-300);
    out.identity_error = std::max(out.identity_error, err);
    ++out.identity_points;
  }
}

}  // namespace detail

/// Classical LG retrofilter in information form (final condition lambda = 0).
inline RetrofilterOutput classical_retrofilter(const LGModel& model, const std::vector<Vec>& obs,
                                               const TimeGrid& grid) {
  detail::check_record(grid, obs, model.c.rows());
  const RetroCoefficients fixed{model.drift - model.gamma.transpose() * model.c,
                                symmetrize(model.diffusion - model.gamma.transpose() * model.gamma),
                                model.gamma};
  RetrofilterOutput out = detail::run_information_retrofilter(
      model.c, obs, grid, [&fixed](double) -> const RetroCoefficients& { return fixed; });
  detail::recover_moments(
      out, nullptr,
      filter_riccati(model.drift, model.diffusion, model.c, model.gamma, KickSign::kMinus));
  return out;
}

/// Retrofilter coefficients for a given V_T.
inline RetroCoefficients haloed_retro_coefficients(const LGQSystem& sys, const Mat& vt) {
  const Mat g = sys.obs_gamma + sys.obs_c * vt;
  const Mat ku = kick(vt, sys.unobs_c, sys.unobs_gamma);
  return RetroCoefficients{sys.drift - g.transpose() * sys.obs_c, ku * ku.transpose(), g};
}

/// Haloed quantum retrofilter on Alice's record given the true-state variance
/// trajectory. Here G = Gamma_o + C_o V_T and Dbar = K_u[V_T] K_u[V_T]^T.
inline RetrofilterOutput haloed_retrofilter(const LGQSystem& sys, const MeasurementRecord& record,
                                            const std::vector<Mat>& true_cov) {
  sys.validate();
  const TimeGrid& grid = record.grid;
  detail::check_record(grid, record.obs_dt, sys.obs_channels());
  if (true_cov.size() != grid.n_points()) {
    throw Error(ErrorKind::kShapeMismatch, "V_T trajectory length differs from the grid");
  }
  const RiccatiTerms true_terms = true_state_riccati(sys);
  std::vector<Mat> slopes;
  slopes.reserve(true_cov.size());
  for (const Mat& v : true_cov) slopes.push_back(true_terms.rhs(v));
  const CovInterpolant vt_at(grid, true_cov, std::move(slopes));

  const auto coeffs = [&](double t) { return haloed_retro_coefficients(sys, vt_at(t)); };
  RetrofilterOutput out = detail::run_information_retrofilter(sys.obs_c, record.obs_dt, grid, coeffs);
  detail::recover_moments(
      out, &true_cov,
      filter_riccati(sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma, KickSign::kMinus));
  return out;
}

namespace detail {

inline void check_aligned(const FilterOutput& f, const RetrofilterOutput& r) {
  if (f.cov.size() != r.lambda.size() || f.means.size() != r.info_mean.size() ||
      f.cov.size() != f.means.size()) {
    throw Error(ErrorKind::kShapeMismatch, "filter and retrofilter grids are not aligned");
  }
}

/// (I + V L)^{-1} [V, x + V z]: the combination (V^{-1} + L)^{-1} without
/// inverting V.
inline std::pair<Mat, Vec> combine_information(const Mat& v, const Vec& x, const Mat& lam,
                                               const Vec& z, ErrorKind on_fail) {
  const Eigen::Index m = v.rows();
  Eigen::FullPivLU<Mat> lu(Mat::Identity(m, m) + v * lam);
  if (!lu.isInvertible()) throw Error(on_fail, "I + V Lambda is singular");
  return {symmetrize(lu.solve(v)), lu.solve(x + v * z)};
}

}  // namespace detail

/// Smoothed-weak-value combination of the quantum filtered state and the
/// retrofiltered effect, i.e. classical smoothing applied to (V_F, V_R):
///   V_SWV = V_F - V_F (V_F + V_R)^{-1} V_F,
///   <x>_SWV = <x>_F + V_F (V_F + V_R)^{-1} (<x>_R - <x>_F),
/// where (V_F + V_R)^{-1} = (I + L (V_F - V_T))^{-1} L. This stays finite when
/// L or V_R is singular.
inline std::pair<Mat, Vec> swv_combination(const Mat& vf, const Vec& xf, const Mat& vt,
                                           const Mat& lam, const Vec& z) {
  const Eigen::Index m = vf.rows();
  Eigen::FullPivLU<Mat> lu(Mat::Identity(m, m) + lam * (vf - vt));
  if (!lu.isInvertible()) throw Error(ErrorKind::kSingular, "I + Lambda (V_F - V_T) is singular");
  const Mat w = symmetrize(lu.solve(lam));
  return {symmetrize(vf - vf * w * vf), xf + vf * lu.solve(z - lam * xf)};
}

inline SWVOutput swv_state(const FilterOutput& filter, const RetrofilterOutput& retro,
                           const std::vector<Mat>& true_cov) {
  detail::check_aligned(filter, retro);
  if (true_cov.size() != filter.cov.size()) {
    throw Error(ErrorKind::kShapeMismatch, "V_T trajectory is not aligned");
  }
  SWVOutput out;
  out.means.reserve(filter.means.size());
  out.cov.reserve(filter.cov.size());
  for (std::size_t k = 0; k < filter.cov.size(); ++k) {
    auto [cov, mean] = swv_combination(filter.cov[k], filter.means[k], true_cov[k],
                                       retro.lambda[k], retro.info_mean[k]);
    out.cov.push_back(std::move(cov));
    out.means.push_back(std::move(mean));
  }
  return out;
}

/// LGQ smoother:
///   V_S = [(V_F - V_T)^{-1} + L]^{-1} + V_T,
///   <x>_S = (V_S - V_T)[(V_F - V_T)^{-1} <x>_F + L <x>_R],
/// evaluated in the equivalent inversion-free form so that V_F = V_T (t = t0)
/// is handled exactly.
inline SmootherOutput lgq_smoother(const FilterOutput& filter, const RetrofilterOutput& retro,
                                   const std::vector<Mat>& true_cov, bool with_swv = true) {
  detail::check_aligned(filter, retro);
  if (true_cov.size() != filter.cov.size()) {
    throw Error(ErrorKind::kShapeMismatch, "V_T trajectory is not aligned");
  }
  SmootherOutput out;
  out.grid = filter.grid;
  const std::size_t np = filter.cov.size();
  out.means.reserve(np);
  out.cov.reserve(np);
  out.low_confidence.assign(np, false);
  const std::size_t burn_in = std::max<std::size_t>(1, np / 100);
  for (std::size_t k = 0; k < np; ++k) {
    const Mat halo = symmetrize(filter.cov[k] - true_cov[k]);
    auto [halo_s, mean] = detail::combine_information(halo, filter.means[k], retro.lambda[k],
                                                      retro.info_mean[k], ErrorKind::kSingular);
    out.cov.push_back(symmetrize(halo_s + true_cov[k]));
    out.means.push_back(std::move(mean));
    out.low_confidence[k] = k < burn_in;
  }
  if (with_swv) {
    SWVOutput swv = swv_state(filter, retro, true_cov);
    out.swv_means = std::move(swv.means);
    out.swv_cov = std::move(swv.cov);
  }
  return out;
}

/// Textbook two-filter combination V_S = (V_F^{-1} + V_R^{-1})^{-1},
/// <x>_S = V_S (V_F^{-1} <x>_F + V_R^{-1} <x>_R), with V_R^{-1} = lambda
/// taken from a classical retrofilter.
inline SWVOutput classical_smoother(const FilterOutput& filter, const RetrofilterOutput& retro) {
  detail::check_aligned(filter, retro);
  SWVOutput out;
  out.means.reserve(filter.means.size());
  out.cov.reserve(filter.cov.size());
  for (std::size_t k = 0; k < filter.cov.size(); ++k) {
    Eigen::LDLT<Mat> vf(filter.cov[k]);
    if (vf.info() != Eigen::Success || !vf.isPositive() ||
        vf.vectorD().cwiseAbs().minCoeff() == 0.0) {
      throw Error(ErrorKind::kSingular, "filtered variance is singular");
    }
    const Eigen::Index m = filter.cov[k].rows();
    const Mat vf_inv = symmetrize(vf.solve(Mat::Identity(m, m)));
    const Mat info = symmetrize(vf_inv + retro.lambda[k]);
    Eigen::LDLT<Mat> info_ldlt(info);
    if (info_ldlt.info() != Eigen::Success) throw Error(ErrorKind::kSingular, "smoothed information");
    const Mat vs = symmetrize(info_ldlt.solve(Mat::Identity(m, m)));
    out.cov.push_back(vs);
    out.means.push_back(vs * (vf_inv * filter.means[k] + retro.info_mean[k]));
  }
  return out;
}

}  // namespace lgq
