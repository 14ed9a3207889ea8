#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "lgq/estimation.hpp"
#include "lgq/steady_state.hpp"
#include "support.hpp"

using namespace lgq;
using lgq::testing::max_rel;

namespace {

Mat vacuum() { return 0.5 * Mat::Identity(2, 2); }

OPOParams params(double eta_o, double eta_u, double theta_o = std::numbers::pi / 3,
                 double theta_u = 0.2) {
  OPOParams p;
  p.eta_o = eta_o;
  p.eta_u = eta_u;
  p.theta_o = theta_o;
  p.theta_u = theta_u;
  return p;
}

struct Pipeline {
  LGQSystem sys;
  Simulation sim;
  QuantumFilterOutput qf;
  RetrofilterOutput retro;
  SmootherOutput sm;
};

Pipeline run(const OPOParams& p, const TimeGrid& g, std::uint64_t seed) {
  Pipeline r;
  r.sys = build_opo(p);
  r.sim = simulate_true(r.sys, vacuum(), Vec::Zero(2), g, seed);
  r.qf = quantum_filter(r.sys, r.sim.record, Vec::Zero(2), vacuum());
  r.retro = haloed_retrofilter(r.sys, r.sim.record, r.qf.true_cov);
  r.sm = lgq_smoother(r.qf.filter, r.retro, r.qf.true_cov);
  return r;
}

Mat scalar(double x) { return Mat::Constant(1, 1, x); }

}  // namespace

TEST(ClassicalFilter, NoMeasurementIsLyapunovFlow) {
  const LGModel m{-Mat::Identity(2, 2), 2.0 * Mat::Identity(2, 2), Mat::Zero(1, 2), Mat::Zero(1, 2)};
  const TimeGrid g(0.0, 1.0, 1e-3);
  std::mt19937_64 rng(1);
  Vec x0(2);
  x0 << 1.0, -2.0;
  const FilterOutput f = classical_filter(m, lgq::testing::random_record(1, g.n_steps(), g.dt(), rng),
                                          g, x0, Mat::Zero(2, 2));
  const double e = 1.0 - std::exp(-2.0);
  EXPECT_NEAR(f.cov.back()(0, 0), e, 1e-10);
  EXPECT_NEAR(f.means.back()(0), std::pow(1.0 - 1e-3, 1000), 1e-14);
}

TEST(ClassicalFilter, StaticParameterKalman) {
  const LGModel m{scalar(0), scalar(0), scalar(1), scalar(0)};
  const TimeGrid g(0.0, 3.0, 1e-3);
  std::mt19937_64 rng(2);
  const double v = 2.0;
  const FilterOutput f =
      classical_filter(m, lgq::testing::random_record(1, g.n_steps(), g.dt(), rng), g, Vec::Zero(1),
                       scalar(v));
  for (std::size_t k = 0; k < g.n_points(); k += 100) {
    ASSERT_NEAR(f.cov[k](0, 0), v / (1 + v * g.time(k)), 1e-10);
  }
}

TEST(ClassicalFilter, ConvergesToSteadyRiccati) {
  std::mt19937_64 rng(3);
  const LGModel m = lgq::testing::random_lg_model(3, 2, rng);
  const Mat vs = steady_riccati(m.drift, m.diffusion, m.c, m.gamma);
  const RiccatiTerms t = filter_riccati(m.drift, m.diffusion, m.c, m.gamma);
  const double relax = 1.0 / -spectral_abscissa(t.closed_loop(vs));
  const TimeGrid g = TimeGrid::from_steps(0.0, 1e-2, static_cast<std::size_t>(std::ceil(20 * relax / 1e-2)) + 1);
  const FilterOutput f = classical_filter(
      m, lgq::testing::random_record(2, g.n_steps(), g.dt(), rng), g, Vec::Zero(3), Mat::Identity(3, 3));
  EXPECT_LT(max_rel(f.cov.back(), vs), 1e-8);
}

TEST(ClassicalRetrofilter, StaticScalarMirrorsFilter) {
  // A = 0, E = 0: the retrofilter on the reversed record is the filter.
  const LGModel m{scalar(0), scalar(0), scalar(1), scalar(0)};
  const TimeGrid g(0.0, 2.0, 1e-3);
  std::mt19937_64 rng(4);
  const auto rec = lgq::testing::random_record(1, g.n_steps(), g.dt(), rng);
  const RetrofilterOutput r = classical_retrofilter(m, rec, g);
  std::vector<Vec> reversed(rec.rbegin(), rec.rend());
  // Information-form filter: lambda(t) = t, z(t) = sum of y dt.
  const std::size_t n = g.n_steps();
  double z = 0.0;
  for (std::size_t j = 0; j <= n; ++j) {
    const std::size_t k = n - j;
    ASSERT_NEAR(r.lambda[k](0, 0), g.time(j), 1e-10);
    ASSERT_NEAR(r.info_mean[k](0), z, 1e-12);
    if (j < n) z += reversed[j](0);
  }
  EXPECT_EQ(r.lambda.back()(0, 0), 0.0);
}

TEST(ClassicalSmoother, TwoEqualEstimates) {
  FilterOutput f;
  f.grid = TimeGrid(0.0, 1.0, 1.0);
  Vec a(2), b(2);
  a << 1.0, 2.0;
  b << 3.0, -2.0;
  f.means = {a, a};
  f.cov = {Mat::Identity(2, 2), Mat::Identity(2, 2)};
  RetrofilterOutput r;
  r.grid = f.grid;
  r.lambda = {Mat::Identity(2, 2), Mat::Zero(2, 2)};
  r.info_mean = {b, Vec::Zero(2)};
  const SWVOutput s = classical_smoother(f, r);
  EXPECT_LT(max_rel(s.cov[0], 0.5 * Mat::Identity(2, 2)), 1e-15);
  EXPECT_LT((s.means[0] - 0.5 * (a + b)).norm(), 1e-15);
  EXPECT_LT(max_rel(s.cov[1], f.cov[1]), 1e-15);
  EXPECT_LT((s.means[1] - a).norm(), 1e-15);
}

TEST(ClassicalSmoother, StaticScalarUsesAllData) {
  // Smoothed estimate of a constant equals the final filtered one. Covariances
  // agree to integrator accuracy; Euler means converge at first order.
  const LGModel m{scalar(0), scalar(0), scalar(1), scalar(0)};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  const double fine = 2.5e-4;
  std::vector<double> path(8000);
  for (double& w : path) w = 0.3 * fine + std::sqrt(fine) * n01(rng);
  std::vector<double> gaps;
  for (int r : {8, 4, 2}) {
    const TimeGrid g(0.0, 2.0, r * fine);
    std::vector<Vec> rec(g.n_steps(), Vec::Zero(1));
    for (std::size_t k = 0; k < rec.size(); ++k) {
      for (int j = 0; j < r; ++j) rec[k](0) += path[k * r + j];
    }
    const FilterOutput f = classical_filter(m, rec, g, Vec::Zero(1), scalar(1.0));
    const SWVOutput s = classical_smoother(f, classical_retrofilter(m, rec, g));
    double gap = 0.0;
    for (std::size_t k = 0; k < g.n_points(); ++k) {
      ASSERT_NEAR(s.cov[k](0, 0), f.cov.back()(0, 0), 1e-9);
      gap = std::max(gap, std::abs(s.means[k](0) - f.means.back()(0)));
    }
    gaps.push_back(gap);
  }
  EXPECT_LT(gaps[0], 1e-3);
  EXPECT_NEAR(gaps[0] / gaps[1], 2.0, 0.2);
  EXPECT_NEAR(gaps[1] / gaps[2], 2.0, 0.2);
}

TEST(LgqSmoother, ClassicalLimitRandomSystems) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    const Eigen::Index n = i % 2 == 0 ? 2 : 4;
    const LGModel m = lgq::testing::random_lg_model(n, n / 2, rng);
    const TimeGrid g(0.0, 1.0, 1e-2);
    const auto rec = lgq::testing::random_record(n / 2, g.n_steps(), g.dt(), rng);
    const FilterOutput f = classical_filter(m, rec, g, lgq::testing::random_matrix(n, 1, rng),
                                            Mat::Identity(n, n));
    const RetrofilterOutput r = classical_retrofilter(m, rec, g);
    const SWVOutput c = classical_smoother(f, r);
    const SmootherOutput q = lgq_smoother(f, r, std::vector<Mat>(g.n_points(), Mat::Zero(n, n)));
    for (std::size_t k = 0; k < g.n_points(); ++k) {
      ASSERT_LT(max_rel(q.cov[k], c.cov[k]), 1e-12);
      ASSERT_LT(max_rel(q.means[k], c.means[k]), 1e-12);
      ASSERT_LT(max_rel(q.swv_cov[k], c.cov[k]), 1e-12);
    }
  }
}

TEST(QuantumFilter, IdentitiesHold) {
  const Pipeline r = run(params(0.5, 0.5), TimeGrid(0.0, 3.0, 1e-3), 1);
  EXPECT_LT(r.qf.cov_identity_error, 1e-8);
  EXPECT_LT(r.qf.mean_identity_error, 1e-8);
  for (std::size_t k = 0; k < r.qf.filter.cov.size(); k += 10) {
    ASSERT_TRUE(is_psd(r.qf.filter.cov[k] - r.qf.true_cov[k], 1e-9));
    ASSERT_TRUE(check_physical(r.qf.filter.cov[k], 1.0));
  }
}

TEST(QuantumFilter, FullEfficiencyTracksTrueState) {
  const Pipeline r = run(params(1.0, 0.0, 0.0), TimeGrid(0.0, 10.0, 1e-3), 2);
  Mat expect = Mat::Zero(2, 2);
  expect(0, 0) = 1.0;
  expect(1, 1) = 0.25;
  EXPECT_LT(max_rel(r.qf.filter.cov.back(), expect), 1e-8);
  for (std::size_t k = 0; k < r.qf.filter.cov.size(); k += 100) {
    ASSERT_LT((r.qf.filter.cov[k] - r.qf.true_cov[k]).norm(), 1e-12);
    ASSERT_LT((r.qf.filter.means[k] - r.sim.trajectory.means[k]).norm(), 1e-10);
  }
}

TEST(QuantumFilter, NoObservationIsUnconditioned) {
  const LGQSystem sys = build_opo(params(0.0, 0.5));
  const TimeGrid g(0.0, 3.0, 1e-3);
  const Simulation sim = simulate_true(sys, vacuum(), Vec::Zero(2), g, 3);
  const QuantumFilterOutput qf = quantum_filter(sys, sim.record, Vec::Zero(2), vacuum());
  const UnconditionedVariance u = unconditioned_variance(sys, vacuum(), g);
  for (std::size_t k = 0; k < g.n_points(); k += 100) {
    ASSERT_LT(max_rel(qf.filter.cov[k], u.cov[k]), 1e-12);
    ASSERT_LT(qf.filter.means[k].norm(), 1e-15);
  }
}

TEST(HaloedRetrofilter, FinalConditionAndIdentity) {
  const Pipeline r = run(params(0.5, 0.5), TimeGrid(0.0, 3.0, 1e-3), 4);
  EXPECT_EQ(r.retro.lambda.back(), Mat(Mat::Zero(2, 2)));
  EXPECT_EQ(r.retro.info_mean.back(), Vec(Vec::Zero(2)));
  EXPECT_GT(r.retro.identity_points, 100u);
  EXPECT_LT(r.retro.identity_error, 1e-6);
  EXPECT_GE(r.retro.min_lambda_eigenvalue, -1e-12);
}

TEST(HaloedRetrofilter, SteadyLowEfficiencyRetroVariance) {
  const LGQSystem sys = build_opo(params(1e-4, 1 - 1e-4, std::numbers::pi / 4, 0.0));
  const SteadyStateReport rep = steady_report(sys);
  ASSERT_TRUE(rep.retro_cov.has_value());
  const Mat pred = low_efficiency_formulas(std::numbers::pi / 4, 1e-4).retro_cov;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR((*rep.retro_cov)(i, j) / pred(i, j), 1.0, 0.02) << i << j;
    }
  }
}

TEST(LgqSmoother, InvariantsAlongTrajectory) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 4; ++i) {
    const Pipeline r = run(lgq::testing::random_opo(rng, i % 2 == 0), TimeGrid(0.0, 2.0, 1e-3), 10 + i);
    for (std::size_t k = 0; k < r.sm.cov.size(); k += 5) {
      const Mat& vs = r.sm.cov[k];
      ASSERT_TRUE(is_symmetric(vs));
      ASSERT_TRUE(is_psd(vs - r.qf.true_cov[k], 1e-9));
      ASSERT_TRUE(is_psd(r.qf.filter.cov[k] - vs, 1e-9));
      ASSERT_TRUE(check_physical(vs, 1.0));
      ASSERT_GE(purity(vs, 1.0), purity(r.qf.filter.cov[k], 1.0) - 1e-9);
    }
  }
}

TEST(LgqSmoother, NoFutureInformationAtFinalTime) {
  const Pipeline r = run(params(0.5, 0.5), TimeGrid(0.0, 1.0, 1e-3), 5);
  EXPECT_LT(max_rel(r.sm.cov.back(), r.qf.filter.cov.back()), 1e-15);
  EXPECT_LT((r.sm.means.back() - r.qf.filter.means.back()).norm(), 1e-15);
  EXPECT_LT(max_rel(r.sm.swv_cov.back(), r.qf.filter.cov.back()), 1e-15);
}

TEST(LgqSmoother, InitialPointEqualsFilter) {
  const Pipeline r = run(params(0.5, 0.5), TimeGrid(0.0, 1.0, 1e-3), 6);
  EXPECT_LT(max_rel(r.sm.cov.front(), r.qf.filter.cov.front()), 1e-15);
  EXPECT_TRUE(r.sm.low_confidence.front());
  EXPECT_FALSE(r.sm.low_confidence.back());
}

TEST(LgqSmoother, HighEfficiencyExpansion) {
  const LGQSystem sys = build_opo(params(0.99, 0.01));
  const SteadyStateReport rep = steady_report(sys);
  const Mat q = rep.filtered_cov.value - rep.true_cov.value;
  const Mat qlq = q * rep.lambda_r.value * q;
  const Mat approx = rep.filtered_cov.value - qlq;
  EXPECT_LE((rep.smoothed_cov.value - approx).norm(), 0.01 * qlq.norm());
}

TEST(Swv, LowEfficiencyHalvesQVariance) {
  const LGQSystem sys = build_opo(params(1e-4, 1 - 1e-4, std::numbers::pi / 4, 0.0));
  const SteadyStateReport rep = steady_report(sys);
  EXPECT_NEAR(rep.swv_cov.value(0, 0) / rep.filtered_cov.value(0, 0), 0.5, 0.01);
  const auto pred = low_efficiency_formulas(std::numbers::pi / 4, 1e-4);
  EXPECT_NEAR(rep.swv_cov.value(0, 0) / pred.swv_cov(0, 0), 1.0, 0.02);
}

TEST(Swv, PurityAboveOneAtScanOperatingPoint) {
  const SteadyStateReport rep = steady_report(build_opo(params(0.1, 0.9, 0.0, 0.2)));
  EXPECT_GT(rep.purity_swv, 1.0);
  EXPECT_FALSE(rep.physical_swv);
  EXPECT_TRUE(rep.physical_smoothed);
}

TEST(Estimation, RecordShapeChecked) {
  const LGQSystem sys = build_opo(params(0.5, 0.5));
  MeasurementRecord rec{TimeGrid(0.0, 1.0, 0.1), std::vector<Vec>(5, Vec::Zero(1)), std::nullopt};
  try {
    quantum_filter(sys, rec, Vec::Zero(2), vacuum());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
  }
}

TEST(Estimation, InnovationsAreWhite) {
  const LGQSystem sys = build_opo(params(0.5, 0.5));
  const TimeGrid g(0.0, 0.5, 1e-3);
  const std::size_t n = 4000;
  const std::size_t probe = 300;
  double sum = 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Simulation sim = simulate_true(sys, vacuum(), Vec::Zero(2), g, 7000 + i);
    const FilterOutput f =
        classical_filter(LGModel{sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma}, sim.record.obs_dt,
                         g, Vec::Zero(2), vacuum());
    const double w = f.innovations[probe](0);
    sum += w;
    sq += w * w;
  }
  const double sigma = std::sqrt(g.dt());
  EXPECT_LT(std::abs(sum / n), 3.0 * sigma / std::sqrt(double(n)));
  EXPECT_NEAR(sq / n / g.dt(), 1.0, 0.07);
}
