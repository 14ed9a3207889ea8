#pragma once

// True-state simulation and measurement-record generation on a uniform grid.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include "lgq/error.hpp"
#include "lgq/linalg.hpp"
#include "lgq/model.hpp"

namespace lgq {

class TimeGrid {
 public:
  TimeGrid() = default;

  TimeGrid(double t0, double t_final, double dt) : t0_(t0), dt_(dt) {
    if (!(dt > 0.0) || !std::isfinite(dt) || !(t_final > t0)) {
      throw Error(ErrorKind::kInvalidArgument, "time grid needs dt > 0 and T > t0");
    }
    const double steps = (t_final - t0) / dt;
    n_steps_ = static_cast<std::size_t>(std::llround(steps));
    if (n_steps_ < 1 || std::abs(steps - static_cast<double>(n_steps_)) > 1e-6 * steps) {
      std::ostringstream os;
      os << "(T - t0) / dt = " << steps << " is not a positive integer";
      throw Error(ErrorKind::kInvalidArgument, os.str());
    }
  }

  static TimeGrid from_steps(double t0, double dt, std::size_t n_steps) {
    return TimeGrid(t0, t0 + dt * static_cast<double>(n_steps), dt);
  }

  double t0() const { return t0_; }
  double dt() const { return dt_; }
  std::size_t n_steps() const { return n_steps_; }
  std::size_t n_points() const { return n_steps_ + 1; }
  double t_final() const { return time(n_steps_); }
  double time(std::size_t k) const { return t0_ + dt_ * static_cast<double>(k); }

  /// Grid index closest to time t (clamped to the grid).
  std::size_t index_of(double t) const {
    const double k = std::round((t - t0_) / dt_);
    if (k <= 0.0) return 0;
    return std::min(n_steps_, static_cast<std::size_t>(k));
  }

 private:
  double t0_ = 0.0;
  double dt_ = 1e-3;
  std::size_t n_steps_ = 0;
};

/// Record increments y dt per step; entry k covers [t_k, t_{k+1}).
struct MeasurementRecord {
  TimeGrid grid;
  std::vector<Vec> obs_dt;
  std::optional<std::vector<Vec>> unobs_dt;
};

struct TrueTrajectory {
  TimeGrid grid;
  std::vector<Vec> means;  // n_points
  std::vector<Mat> cov;    // n_points
  std::uint64_t seed = 0;
  std::vector<Vec> dw_o;   // n_steps Wiener increments of the observed channel
  std::vector<Vec> dw_u;   // n_steps Wiener increments of the unobserved channel
};

/// RK4 integration of a (possibly time-dependent) Riccati right-hand side on
/// the grid. Output has one matrix per grid point.
template <typename Rhs>
std::vector<Mat> integrate_on_grid(const Rhs& f, const Mat& x0, const TimeGrid& grid) {
  std::vector<Mat> out;
  out.reserve(grid.n_points());
  out.push_back(symmetrize(x0));
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    Mat next = symmetrize(rk4_step(f, grid.time(k), out.back(), grid.dt()));
    if (!next.allFinite()) {
      std::ostringstream os;
      os << "covariance integration blew up at t = " << grid.time(k + 1) << " (dt too large?)";
      throw Error(ErrorKind::kNonFiniteValue, os.str());
    }
    out.push_back(std::move(next));
  }
  return out;
}

inline std::vector<Mat> integrate_riccati(const RiccatiTerms& terms, const Mat& x0,
                                          const TimeGrid& grid) {
  return integrate_on_grid([&terms](double, const Mat& x) { return terms.rhs(x); }, x0, grid);
}

/// Riccati terms of the true-state covariance: both channels condition.
inline RiccatiTerms true_state_riccati(const LGQSystem& sys) {
  return filter_riccati(sys.drift, sys.diffusion, sys.all_c(), sys.all_gamma());
}

inline void require_physical_start(const LGQSystem& sys, const Mat& v0) {
  if (v0.rows() != sys.dim() || v0.cols() != sys.dim()) {
    throw Error(ErrorKind::kShapeMismatch, "initial covariance shape");
  }
  if (!check_physical(v0, sys.hbar)) {
    throw Error(ErrorKind::kInvalidArgument, "initial covariance violates the uncertainty relation");
  }
}

/// Deterministic evolution of V_T; independent of any record.
inline std::vector<Mat> integrate_true_cov(const LGQSystem& sys, const Mat& v0,
                                           const TimeGrid& grid) {
  sys.validate();
  require_physical_start(sys, v0);
  return integrate_riccati(true_state_riccati(sys), v0, grid);
}

/// Seeds for the two independent noise substreams.
struct NoiseSeeds {
  std::uint64_t observed = 0;
  std::uint64_t unobserved = 0;

  static NoiseSeeds from(std::uint64_t seed) {
    // splitmix64 finalizer, distinct salts per channel
    auto mix = [](std::uint64_t z) {
      z += 0x9e3779b97f4a7c15ULL;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      return z ^ (z >> 31);
    };
    return NoiseSeeds{mix(seed ^ 0x6f62736572766564ULL), mix(seed ^ 0x756e6f6273657276ULL)};
  }
};

class WienerStream {
 public:
  WienerStream(std::uint64_t seed, double dt) : rng_(seed), normal_(0.0, std::sqrt(dt)) {}

  Vec next(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal_(rng_);
    return v;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

struct Simulation {
  TrueTrajectory trajectory;
  MeasurementRecord record;
};

/// Euler-Maruyama simulation of the true mean with both channels' kicks,
/// and the records y_r dt = C_r <x>_T dt + dw_r.
inline Simulation simulate_true(const LGQSystem& sys, const Mat& v0, const Vec& x0,
                                const TimeGrid& grid, std::uint64_t seed,
                                std::optional<NoiseSeeds> substreams = std::nullopt) {
  if (x0.size() != sys.dim()) throw Error(ErrorKind::kShapeMismatch, "initial mean shape");
  const NoiseSeeds seeds = substreams.value_or(NoiseSeeds::from(seed));
  Simulation sim;
  TrueTrajectory& tr = sim.trajectory;
  tr.grid = grid;
  tr.seed = seed;
  tr.cov = integrate_true_cov(sys, v0, grid);

  WienerStream obs_noise(seeds.observed, grid.dt());
  WienerStream unobs_noise(seeds.unobserved, grid.dt());
  const double dt = grid.dt();
  tr.means.reserve(grid.n_points());
  tr.dw_o.reserve(grid.n_steps());
  tr.dw_u.reserve(grid.n_steps());
  sim.record.grid = grid;
  sim.record.obs_dt.reserve(grid.n_steps());
  std::vector<Vec> unobs_record;
  unobs_record.reserve(grid.n_steps());

  Vec x = x0;
  tr.means.push_back(x);
  for (std::size_t k = 0; k < grid.n_steps(); ++k) {
    const Mat& v = tr.cov[k];
    Vec dw_o = obs_noise.next(sys.obs_channels());
    Vec dw_u = unobs_noise.next(sys.unobs_channels());
    sim.record.obs_dt.push_back(sys.obs_c * x * dt + dw_o);
    unobs_record.push_back(sys.unobs_c * x * dt + dw_u);
    x = x + sys.drift * x * dt + kick(v, sys.obs_c, sys.obs_gamma) * dw_o +
        kick(v, sys.unobs_c, sys.unobs_gamma) * dw_u;
    if (!x.allFinite()) {
      throw Error(ErrorKind::kNonFiniteValue, "true mean became non-finite");
    }
    tr.means.push_back(x);
    tr.dw_o.push_back(std::move(dw_o));
    tr.dw_u.push_back(std::move(dw_u));
  }
  sim.record.unobs_dt = std::move(unobs_record);
  return sim;
}

struct UnconditionedVariance {
  std::vector<Mat> cov;
  BoolMat divergent;  // entries with no stationary limit
};

/// dV/dt = A V + V A^T + D on the grid, with per-entry flags for entries that
/// have no long-time limit.
inline UnconditionedVariance unconditioned_variance(const LGQSystem& sys, const Mat& v0,
                                                    const TimeGrid& grid) {
  sys.validate();
  const Eigen::Index m = sys.dim();
  const RiccatiTerms terms{sys.drift, sys.diffusion, Mat::Zero(m, m)};
  UnconditionedVariance out;
  out.cov = integrate_riccati(terms, v0, grid);
  const SteadyStateResult limit = integrate_to_steady_state(terms, v0);
  out.divergent = limit.converged ? BoolMat::Constant(m, m, false) : limit.divergent;
  return out;
}

}  // namespace lgq
