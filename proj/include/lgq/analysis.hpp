#pragma once

// Parameter studies: RPR sweeps over the homodyne phases, efficiency
// scans, state snapshots and the Monte-Carlo check of the conditioned
// variances.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lgq/error.hpp"
#include "lgq/estimation.hpp"
#include "lgq/linalg.hpp"
#include "lgq/model.hpp"
#include "lgq/steady_state.hpp"
#include "lgq/trajectory.hpp"

namespace lgq {

/// Runs f(i) for i in [0, n) on at most `threads` workers (0 = hardware).
/// Work items must write only to slot i, so results do not depend on the
/// schedule. The first exception is rethrown after all workers stop.
template <typename F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
  unsigned workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, std::max<std::size_t>(n, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct SweepPoint {
  double theta_o = 0.0;
  double theta_u = 0.0;
  double eta_o = 0.0;
  double eta_u = 0.0;
  bool stationary = false;
  double purity_true = 0.0;
  double purity_filtered = 0.0;
  double purity_smoothed = 0.0;
  double purity_swv = 0.0;
  std::optional<double> rpr;
  bool physical_true = false;
  bool physical_filtered = false;
  bool physical_smoothed = false;
  bool physical_swv = false;
  double pf_asym = std::numeric_limits<double>::quiet_NaN();  // efficiency scans only
  double rpr_fit = std::numeric_limits<double>::quiet_NaN();  // efficiency scans only
};

struct SweepResult {
  std::vector<double> theta_o;  // axes; a single value when held fixed
  std::vector<double> theta_u;
  std::vector<double> eta_o;
  std::vector<SweepPoint> points;  // theta_o-major for phase sweeps, eta order for scans
  std::vector<std::optional<double>> optimal_theta_u;  // per theta_o, phase sweeps only
  std::vector<std::optional<double>> optimal_rpr;
  double rpr_slope = std::numeric_limits<double>::quiet_NaN();

  const SweepPoint& at(std::size_t i_o, std::size_t i_u) const {
    return points[i_o * theta_u.size() + i_u];
  }
};

/// Steady-state purities and RPR of the OPO at one parameter point. Points
/// without stationary conditioned variances come back with stationary = false.
inline SweepPoint opo_point(const OPOParams& p, const SteadyStateOptions& opts = {}) {
  SweepPoint pt;
  pt.theta_o = p.theta_o;
  pt.theta_u = p.theta_u;
  pt.eta_o = p.eta_o;
  pt.eta_u = p.eta_u;
  SteadyStateReport rep;
  try {
    rep = steady_report(build_opo(p), opts);
  } catch (const Error& e) {
    if (e.is_validation()) throw;
    return pt;
  }
  pt.stationary = rep.stationary;
  pt.purity_true = rep.purity_true;
  pt.purity_filtered = rep.purity_filtered;
  pt.purity_smoothed = rep.purity_smoothed;
  pt.purity_swv = rep.purity_swv;
  pt.rpr = rep.rpr;
  pt.physical_true = rep.physical_true;
  pt.physical_filtered = rep.physical_filtered;
  pt.physical_smoothed = rep.physical_smoothed;
  pt.physical_swv = rep.physical_swv;
  return pt;
}

/// Cell-centred grid on (-pi/2, pi/2); the endpoints are half a cell away.
inline std::vector<double> phase_grid(std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = -std::numbers::pi / 2 + std::numbers::pi * (static_cast<double>(i) + 0.5) /
                                       static_cast<double>(n);
  }
  return g;
}

namespace detail {

inline double rpr_or_minus_inf(const OPOParams& p, const SteadyStateOptions& opts) {
  const SweepPoint pt = opo_point(p, opts);
  return pt.rpr ? *pt.rpr : -std::numeric_limits<double>::infinity();
}

/// Golden-section maximization of f on [a, b] down to a bracket of width tol.
template <typename F>
std::pair<double, double> golden_max(F&& f, double a, double b, double tol) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - r * (b - a);
  double x2 = a + r * (b - a);
  double f1 = f(x1);
  double f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + r * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - r * (b - a);
      f1 = f(x1);
    }
  }
  return f1 > f2 ? std::pair{x1, f1} : std::pair{x2, f2};
}

}  // namespace detail

/// RPR over a grid_n x grid_n (theta_o, theta_u) grid with eta_u = 1 - eta_o,
/// plus the RPR-maximizing theta_u for each theta_o (grid argmax, then golden
/// section to 1e-3 rad between the neighbouring grid values).
inline SweepResult sweep_rpr(double eta_o, std::size_t grid_n, unsigned threads = 0,
                             double hbar = 1.0, const SteadyStateOptions& opts = {}) {
  if (grid_n < 8) throw Error(ErrorKind::kInvalidArgument, "sweep grid needs at least 8 points");
  if (!(eta_o > 0.0) || !(eta_o <= 1.0)) {
    throw Error(ErrorKind::kInvalidEfficiency, "sweep needs 0 < eta_o <= 1");
  }
  SweepResult res;
  res.theta_o = phase_grid(grid_n);
  res.theta_u = res.theta_o;
  res.eta_o = {eta_o};
  res.points.resize(grid_n * grid_n);
  const auto params = [&](double to, double tu) {
    OPOParams p;
    p.theta_o = to;
    p.theta_u = tu;
    p.eta_o = eta_o;
    p.eta_u = 1.0 - eta_o;
    p.hbar = hbar;
    return p;
  };
  parallel_for(res.points.size(), threads, [&](std::size_t i) {
    res.points[i] = opo_point(params(res.theta_o[i / grid_n], res.theta_u[i % grid_n]), opts);
  });

  res.optimal_theta_u.assign(grid_n, std::nullopt);
  res.optimal_rpr.assign(grid_n, std::nullopt);
  parallel_for(grid_n, threads, [&](std::size_t io) {
    std::optional<std::size_t> best;
    for (std::size_t iu = 0; iu < grid_n; ++iu) {
      const auto& r = res.at(io, iu).rpr;
      if (r && (!best || *r > *res.at(io, *best).rpr)) best = iu;
    }
    if (!best) return;
    const double lo = *best == 0 ? -std::numbers::pi / 2 : res.theta_u[*best - 1];
    const double hi = *best + 1 == grid_n ? std::numbers::pi / 2 : res.theta_u[*best + 1];
    const double to = res.theta_o[io];
    auto [tu, r] = detail::golden_max(
        [&](double x) { return detail::rpr_or_minus_inf(params(to, x), opts); }, lo, hi, 1e-3);
    if (r < *res.at(io, *best).rpr) {
      tu = res.theta_u[*best];
      r = *res.at(io, *best).rpr;
    }
    res.optimal_theta_u[io] = tu;
    res.optimal_rpr[io] = r;
  });
  return res;
}

/// Log-spaced efficiencies from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  if (n < 2 || !(lo > 0.0) || !(hi > lo)) {
    throw Error(ErrorKind::kInvalidArgument, "log grid needs n >= 2 and 0 < lo < hi");
  }
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return g;
}

inline const std::vector<double>& high_efficiency_eta_u() {
  static const std::vector<double> v{0.0025, 0.005, 0.01, 0.02};
  return v;
}

/// Purities and RPR against eta_o at fixed phases (eta_u = 1 - eta_o), with
/// the low-efficiency P_F law and the linear high-efficiency RPR fit alongside.
inline SweepResult efficiency_scan(double theta_o, double theta_u, const std::vector<double>& eta_grid,
                                   unsigned threads = 0, double hbar = 1.0,
                                   const SteadyStateOptions& opts = {}) {
  for (double e : eta_grid) {
    if (!(e > 0.0) || !(e < 1.0)) {
      throw Error(ErrorKind::kInvalidEfficiency, "efficiency scan needs eta_o in (0, 1)");
    }
  }
  SweepResult res;
  res.theta_o = {theta_o};
  res.theta_u = {theta_u};
  res.eta_o = eta_grid;
  res.points.resize(eta_grid.size());
  OPOParams base;
  base.theta_o = theta_o;
  base.theta_u = theta_u;
  base.hbar = hbar;
  res.rpr_slope = rpr_high_efficiency_check(base, high_efficiency_eta_u(), opts).slope;
  const double c = std::abs(std::cos(theta_o));
  parallel_for(eta_grid.size(), threads, [&](std::size_t i) {
    OPOParams p = base;
    p.eta_o = eta_grid[i];
    p.eta_u = 1.0 - eta_grid[i];
    SweepPoint pt = opo_point(p, opts);
    pt.pf_asym = std::sqrt(2.0 * c) * std::pow(p.eta_o, 0.25);
    pt.rpr_fit = res.rpr_slope * p.eta_u;
    res.points[i] = pt;
  });
  return res;
}

struct SnapshotEntry {
  StateLabel label = StateLabel::kFiltered;
  GaussianState state;
  BoolMat divergent;         // entries of the variance with no finite value
  std::vector<Vec> contour;  // 1-SD ellipse; p extent only if q is divergent
  double area = 0.0;         // pi sqrt(det V), infinite when anything diverges
};

/// Unconditioned, filtered, smoothed, true and SWV states at time t of a
/// simulated run, estimated from the observed record only.
inline std::vector<SnapshotEntry> snapshot_states(const LGQSystem& sys, const Simulation& sim,
                                                  double t, const Vec& x0, const Mat& v0,
                                                  int contour_points = 128) {
  if (sys.dim() != 2) throw Error(ErrorKind::kShapeMismatch, "snapshots need a single mode");
  const TimeGrid& grid = sim.record.grid;
  if (t < grid.t0() || t > grid.t_final()) {
    throw Error(ErrorKind::kInvalidArgument, "snapshot time lies outside the grid");
  }
  const std::size_t k = grid.index_of(t);
  const QuantumFilterOutput qf = quantum_filter(sys, sim.record, x0, v0);
  const RetrofilterOutput retro = haloed_retrofilter(sys, sim.record, qf.true_cov);
  const SmootherOutput sm = lgq_smoother(qf.filter, retro, qf.true_cov);
  const UnconditionedVariance unc = unconditioned_variance(sys, v0, grid);

  Vec unc_mean = x0;
  for (std::size_t j = 0; j < k; ++j) unc_mean += sys.drift * unc_mean * grid.dt();

  const auto finite_entry = [&](StateLabel label, const Vec& mean, const Mat& cov) {
    SnapshotEntry e;
    e.label = label;
    e.state = GaussianState{mean, cov, sys.hbar, label};
    e.divergent = BoolMat::Constant(2, 2, false);
    e.contour = wigner_contour(e.state, contour_points);
    e.area = std::numbers::pi * std::sqrt(cov.determinant());
    return e;
  };

  std::vector<SnapshotEntry> out;
  SnapshotEntry u;
  u.label = StateLabel::kUnconditioned;
  u.state = GaussianState{unc_mean, unc.cov[k], sys.hbar, StateLabel::kUnconditioned};
  u.divergent = unc.divergent;
  if (unc.divergent.any()) {
    u.area = std::numeric_limits<double>::infinity();
    if (!unc.divergent(1, 1)) {
      const double sp = std::sqrt(unc.cov[k](1, 1));
      Vec lo = unc_mean;
      Vec hi = unc_mean;
      lo(1) -= sp;
      hi(1) += sp;
      u.contour = {lo, hi};
    }
  } else {
    u.contour = wigner_contour(u.state, contour_points);
    u.area = std::numbers::pi * std::sqrt(unc.cov[k].determinant());
  }
  out.push_back(std::move(u));
  out.push_back(finite_entry(StateLabel::kFiltered, qf.filter.means[k], qf.filter.cov[k]));
  out.push_back(finite_entry(StateLabel::kSmoothed, sm.means[k], sm.cov[k]));
  out.push_back(finite_entry(StateLabel::kTrue, sim.trajectory.means[k], qf.true_cov[k]));
  out.push_back(finite_entry(StateLabel::kSWV, sm.swv_means[k], sm.swv_cov[k]));
  return out;
}

struct MCProbe {
  double t = 0.0;
  std::size_t index = 0;
  Mat empirical_filtered;  // sample covariance of <x>_T - <x>_F
  Mat halo_filtered;       // V_F - V_T
  Mat empirical_smoothed;
  Mat halo_smoothed;       // V_S - V_T
  double error_filtered = 0.0;  // max |emp - theory| / max |theory|
  double error_smoothed = 0.0;
  bool pass_filtered = false;
  bool pass_smoothed = false;
};

struct MCReport {
  std::size_t n_traj = 0;
  std::uint64_t seed = 0;
  double tolerance = 0.05;
  std::vector<MCProbe> probes;
  bool passed = false;
};

/// Per-trajectory seeds; trajectory i always gets the same noise.
inline NoiseSeeds trajectory_seeds(std::uint64_t seed, std::size_t i) {
  return NoiseSeeds::from(seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(i) + 1));
}

/// Record-independent parts of the estimators on one grid: every mean
/// recursion becomes x_{k+1} = Phi_k x_k + B_k u_k.
class EstimatorPlan {
 public:
  EstimatorPlan(const LGQSystem& sys, const TimeGrid& grid, const Mat& v0)
      : sys_(sys), grid_(grid) {
    sys.validate();
    const Eigen::Index m = sys.dim();
    const Eigen::Index lo = sys.obs_channels();
    MeasurementRecord blank{grid, std::vector<Vec>(grid.n_steps(), Vec::Zero(lo)), std::nullopt};
    const QuantumFilterOutput qf = quantum_filter(sys, blank, Vec::Zero(m), v0);
    const RetrofilterOutput retro = haloed_retrofilter(sys, blank, qf.true_cov);
    const SmootherOutput sm = lgq_smoother(qf.filter, retro, qf.true_cov, false);
    true_cov_ = qf.true_cov;
    filtered_cov_ = qf.filter.cov;
    smoothed_cov_ = sm.cov;
    lambda_ = retro.lambda;

    const double dt = grid.dt();
    const Mat eye = Mat::Identity(m, m);
    const std::size_t n = grid.n_steps();
    true_obs_gain_.reserve(n);
    true_unobs_gain_.reserve(n);
    filter_phi_.reserve(n);
    filter_gain_.reserve(n);
    retro_phi_.assign(n + 1, Mat());
    retro_gain_.assign(n + 1, Mat());
    for (std::size_t k = 0; k < n; ++k) {
      true_obs_gain_.push_back(kick(true_cov_[k], sys.obs_c, sys.obs_gamma));
      true_unobs_gain_.push_back(kick(true_cov_[k], sys.unobs_c, sys.unobs_gamma));
      const Mat kf = kick(filtered_cov_[k], sys.obs_c, sys.obs_gamma);
      filter_phi_.push_back(eye + sys.drift * dt - kf * sys.obs_c * dt);
      filter_gain_.push_back(kf);
    }
    for (std::size_t k1 = 1; k1 <= n; ++k1) {
      const RetroCoefficients c = haloed_retro_coefficients(sys, true_cov_[k1]);
      const Mat& lam = lambda_[k1];
      retro_phi_[k1] = eye + (c.abar.transpose() - lam * c.dbar) * dt;
      retro_gain_[k1] = sys.obs_c.transpose() - lam * c.g.transpose();
    }
  }

  const TimeGrid& grid() const { return grid_; }
  const std::vector<Mat>& true_cov() const { return true_cov_; }
  const std::vector<Mat>& filtered_cov() const { return filtered_cov_; }
  const std::vector<Mat>& smoothed_cov() const { return smoothed_cov_; }

  /// <x>_S at grid index k from <x>_F and z_R there.
  Vec smoothed_mean(std::size_t k, const Vec& xf, const Vec& z) const {
    const Mat halo = filtered_cov_[k] - true_cov_[k];
    const Eigen::Index m = halo.rows();
    return Eigen::FullPivLU<Mat>(Mat::Identity(m, m) + halo * lambda_[k]).solve(xf + halo * z);
  }

  struct Errors {
    std::vector<Vec> filtered;  // <x>_T - <x>_F at each probe
    std::vector<Vec> smoothed;  // <x>_T - <x>_S at each probe
  };

  /// Simulates one true trajectory from x0 and returns the estimation errors
  /// at the probe indices (ascending).
  Errors run(const Vec& x0, const NoiseSeeds& seeds, const std::vector<std::size_t>& probes) const {
    const std::size_t n = grid_.n_steps();
    const double dt = grid_.dt();
    WienerStream obs_noise(seeds.observed, dt);
    WienerStream unobs_noise(seeds.unobserved, dt);
    const Eigen::Index lo = sys_.obs_channels();
    const Eigen::Index lu = sys_.unobs_channels();
    const Eigen::Index m = sys_.dim();
    Mat record(lo, static_cast<Eigen::Index>(n));
    std::vector<Vec> xt_at;
    std::vector<Vec> xf_at;
    Vec xt = x0;
    Vec xf = x0;
    Vec tmp(m);
    std::size_t p = 0;
    for (std::size_t k = 0; k <= n; ++k) {
      if (p < probes.size() && probes[p] == k) {
        xt_at.push_back(xt);
        xf_at.push_back(xf);
        ++p;
      }
      if (k == n) break;
      const Vec dw_o = obs_noise.next(lo);
      const Vec dw_u = unobs_noise.next(lu);
      auto y = record.col(static_cast<Eigen::Index>(k));
      y.noalias() = sys_.obs_c * xt * dt;
      y += dw_o;
      tmp.noalias() = filter_phi_[k] * xf;
      tmp.noalias() += filter_gain_[k] * y;
      xf.swap(tmp);
      tmp = xt;
      tmp.noalias() += sys_.drift * xt * dt;
      tmp.noalias() += true_obs_gain_[k] * dw_o;
      tmp.noalias() += true_unobs_gain_[k] * dw_u;
      xt.swap(tmp);
    }
    Errors e;
    e.filtered.resize(probes.size());
    e.smoothed.resize(probes.size());
    Vec z = Vec::Zero(m);
    std::size_t q = probes.size();
    for (std::size_t k = n + 1; k-- > 0;) {
      if (q > 0 && probes[q - 1] == k) {
        --q;
        e.filtered[q] = xt_at[q] - xf_at[q];
        e.smoothed[q] = xt_at[q] - smoothed_mean(k, xf_at[q], z);
      }
      if (k == 0) break;
      tmp.noalias() = retro_phi_[k] * z;
      tmp.noalias() += retro_gain_[k] * record.col(static_cast<Eigen::Index>(k - 1));
      z.swap(tmp);
    }
    return e;
  }

 private:
  LGQSystem sys_;
  TimeGrid grid_;
  std::vector<Mat> true_cov_, filtered_cov_, smoothed_cov_, lambda_;
  std::vector<Mat> true_obs_gain_, true_unobs_gain_, filter_phi_, filter_gain_;
  std::vector<Mat> retro_phi_, retro_gain_;  // indexed by the later grid point
};

/// Probe indices at 25%, 50% and 75% of the horizon.
inline std::vector<std::size_t> mc_probe_indices(const TimeGrid& grid) {
  const std::size_t n = grid.n_steps();
  return {n / 4, n / 2, (3 * n) / 4};
}

/// Empirical error covariances of the filtered and smoothed means over
/// n_traj simulated trajectories, against V_F - V_T and V_S - V_T.
inline MCReport mc_consistency(const LGQSystem& sys, std::size_t n_traj, std::uint64_t seed,
                               const TimeGrid& grid, unsigned threads = 0, double tolerance = 0.05,
                               std::optional<Mat> v0 = std::nullopt) {
  if (n_traj < 2) throw Error(ErrorKind::kInvalidArgument, "need at least two trajectories");
  const Eigen::Index m = sys.dim();
  const Mat start = v0.value_or(Mat(0.5 * sys.hbar * Mat::Identity(m, m)));
  const EstimatorPlan plan(sys, grid, start);
  const std::vector<std::size_t> probes = mc_probe_indices(grid);
  std::vector<EstimatorPlan::Errors> errors(n_traj);
  parallel_for(n_traj, threads, [&](std::size_t i) {
    errors[i] = plan.run(Vec::Zero(m), trajectory_seeds(seed, i), probes);
  });

  MCReport rep;
  rep.n_traj = n_traj;
  rep.seed = seed;
  rep.tolerance = tolerance;
  rep.passed = true;
  const double denom = static_cast<double>(n_traj);
  for (std::size_t j = 0; j < probes.size(); ++j) {
    MCProbe pr;
    pr.index = probes[j];
    pr.t = grid.time(probes[j]);
    pr.empirical_filtered = Mat::Zero(m, m);
    pr.empirical_smoothed = Mat::Zero(m, m);
    // Errors have zero mean by construction (x0 known exactly).
    for (const auto& e : errors) {
      pr.empirical_filtered.noalias() += e.filtered[j] * e.filtered[j].transpose();
      pr.empirical_smoothed.noalias() += e.smoothed[j] * e.smoothed[j].transpose();
    }
    pr.empirical_filtered /= denom;
    pr.empirical_smoothed /= denom;
    pr.halo_filtered = plan.filtered_cov()[probes[j]] - plan.true_cov()[probes[j]];
    pr.halo_smoothed = plan.smoothed_cov()[probes[j]] - plan.true_cov()[probes[j]];
    const auto rel = [](const Mat& emp, const Mat& th) {
      const double scale = th.cwiseAbs().maxCoeff();
      const double diff = (emp - th).cwiseAbs().maxCoeff();
      return scale > 0.0 ? diff / scale : diff;
    };
    pr.error_filtered = rel(pr.empirical_filtered, pr.halo_filtered);
    pr.error_smoothed = rel(pr.empirical_smoothed, pr.halo_smoothed);
    pr.pass_filtered = pr.error_filtered <= tolerance;
    pr.pass_smoothed = pr.error_smoothed <= tolerance;
    rep.passed = rep.passed && pr.pass_filtered && pr.pass_smoothed;
    rep.probes.push_back(std::move(pr));
  }
  return rep;
}

}  // namespace lgq
