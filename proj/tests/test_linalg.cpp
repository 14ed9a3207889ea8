#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lgq/linalg.hpp"
#include "lgq/model.hpp"
#include "support.hpp"

using namespace lgq;
using lgq::testing::max_rel;

namespace {

Mat diag2(double a, double b) {
  Mat m = Mat::Zero(2, 2);
  m(0, 0) = a;
  m(1, 1) = b;
  return m;
}

}  // namespace

TEST(Lyapunov, NegativeIdentity) {
  const Mat q = solve_lyapunov(-Mat::Identity(2, 2), Mat::Identity(2, 2));
  EXPECT_LT(max_rel(q, 0.5 * Mat::Identity(2, 2)), 1e-14);
}

TEST(Lyapunov, DecoupledDiagonal) {
  const Mat q = solve_lyapunov(diag2(-1, -2), diag2(2, 4));
  EXPECT_LT(max_rel(q, Mat::Identity(2, 2)), 1e-14);
}

TEST(Lyapunov, RejectsNonHurwitz) {
  try {
    solve_lyapunov(diag2(0, -2), Mat::Identity(2, 2));
    FAIL() << "expected NotHurwitz";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNotHurwitz);
  }
}

TEST(Lyapunov, ClosedFormSingularTrace) {
  // tr(A) = 0: closed form undefined.
  Mat a(2, 2);
  a << 0, 1, -1, 0;
  EXPECT_THROW(solve_lyapunov_2x2(a, Mat::Identity(2, 2)), Error);
}

TEST(Lyapunov, ClosedFormMatchesGeneralOnRandomHurwitz) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Mat a = lgq::testing::random_hurwitz(2, rng);
    const Mat r = lgq::testing::random_psd(2, rng);
    const Mat closed = solve_lyapunov_2x2(a, r);
    const Mat general = solve_lyapunov_vectorized(a, r);
    ASSERT_LT(max_rel(closed, general), 1e-10) << "instance " << i;
  }
}

TEST(Lyapunov, ResidualSmallUpToDimEight) {
  std::mt19937_64 rng(12);
  for (Eigen::Index n = 1; n <= 8; ++n) {
    for (int i = 0; i < 20; ++i) {
      const Mat a = lgq::testing::random_hurwitz(n, rng);
      const Mat r = lgq::testing::random_psd(n, rng);
      const Mat q = solve_lyapunov(a, r);
      EXPECT_LE(lyapunov_residual(a, q, r).norm(), 1e-10 * (1.0 + r.norm()) * (1.0 + a.norm()));
      EXPECT_TRUE(is_psd(q, 1e-9 * (1.0 + q.norm())));
    }
  }
}

TEST(Hurwitz, Examples) {
  EXPECT_TRUE(is_hurwitz(diag2(-1, -2)));
  EXPECT_FALSE(is_hurwitz(diag2(0, -2)));
  Mat a(2, 2);
  a << 0, 1, -1, -1;
  EXPECT_TRUE(is_hurwitz(a));
}

TEST(Psd, Examples) {
  EXPECT_TRUE(is_psd(Mat::Identity(3, 3)));
  EXPECT_FALSE(is_psd(diag2(1, -1)));
  EXPECT_TRUE(is_psd(diag2(1, -1e-13)));
}

TEST(RegularizedInverse, Examples) {
  EXPECT_LT(max_rel(regularized_inverse(Mat::Identity(2, 2)), Mat::Identity(2, 2)), 1e-15);
  EXPECT_LT(max_rel(regularized_inverse(diag2(2, 4)), diag2(0.5, 0.25)), 1e-15);
  const Mat r = regularized_inverse(diag2(1e-18, 1), 1e-12);
  EXPECT_NEAR(r(0, 0) / 1e12, 1.0, 1e-5);
  EXPECT_NEAR(r(1, 1), 1.0, 1e-11);
}

TEST(RegularizedInverse, SingularWithoutJitter) {
  try {
    regularized_inverse(diag2(1e-18, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSingular);
  }
}

TEST(RegularizedInverse, RoundTripBelowCondition1e8) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> logc(0.0, 8.0);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Index n = 2 + i % 5;
    const Mat q = Eigen::HouseholderQR<Mat>(lgq::testing::random_matrix(n, n, rng)).householderQ();
    Vec ev = Vec::LinSpaced(n, 0.0, -logc(rng));
    ev = ev.unaryExpr([](double x) { return std::pow(10.0, x); });
    const Mat s = symmetrize(q * ev.asDiagonal() * q.transpose());
    const Mat inv = regularized_inverse(s);
    // float64 floor for this product is about cond * eps, so cond above ~1e6 misses 1e-10
    EXPECT_LT((inv * s - Mat::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(SteadyRiccati, ScalarStableSystem) {
  Mat one = Mat::Constant(1, 1, 1.0);
  const Mat v = steady_riccati(-one, one, one, Mat::Zero(1, 1));
  EXPECT_NEAR(v(0, 0), std::sqrt(2.0) - 1.0, 1e-10);
}

TEST(SteadyRiccati, OpoFullEfficiency) {
  OPOParams p;
  p.theta_o = 0.0;
  p.eta_o = 1.0;
  p.eta_u = 0.0;
  const LGQSystem sys = build_opo(p);
  const RiccatiTerms terms = filter_riccati(sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma);
  const Mat v = steady_riccati(terms, 0.5 * Mat::Identity(2, 2));
  EXPECT_LT(max_rel(v, diag2(1.0, 0.25)), 1e-9);
  EXPECT_LE(terms.rhs(v).norm(), 1e-9);
  EXPECT_TRUE(is_hurwitz(terms.closed_loop(v)));
}

TEST(SteadyRiccati, UnmeasuredOpoDivergesInQOnly) {
  OPOParams p;
  p.eta_o = 0.0;
  p.eta_u = 0.0;
  const LGQSystem sys = build_opo(p);
  const RiccatiTerms terms = filter_riccati(sys.drift, sys.diffusion, sys.obs_c, sys.obs_gamma);
  SteadyStateOptions opts;
  opts.max_time = 200.0;
  const SteadyStateResult r = integrate_to_steady_state(terms, 0.5 * Mat::Identity(2, 2), opts);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(r.divergent(0, 0));
  EXPECT_FALSE(r.divergent(1, 1));
  EXPECT_NEAR(r.value(1, 1), 0.25, 1e-9);
  EXPECT_THROW(steady_riccati(terms, 0.5 * Mat::Identity(2, 2), opts), Error);
}

TEST(SteadyRiccati, RandomSystemsAreStabilizing) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 30; ++i) {
    const Eigen::Index n = 1 + i % 4;
    const LGModel m = lgq::testing::random_lg_model(n, n, rng);
    const RiccatiTerms terms = filter_riccati(m.drift, m.diffusion, m.c, m.gamma);
    const Mat v = steady_riccati(terms, Mat::Identity(n, n));
    EXPECT_TRUE(is_symmetric(v));
    EXPECT_TRUE(is_psd(v, 1e-9));
    EXPECT_TRUE(is_hurwitz(terms.closed_loop(v)));
    EXPECT_LE(terms.rhs(v).norm(), 1e-9 * std::max(1.0, v.norm()));
  }
}

TEST(Symmetrize, RemovesAntisymmetricPart) {
  Mat a(2, 2);
  a << 1, 2, 4, 3;
  const Mat s = symmetrize(a);
  EXPECT_TRUE(is_symmetric(s));
  EXPECT_DOUBLE_EQ(s(0, 1), 3.0);
}
