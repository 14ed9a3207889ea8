#pragma once

// Small dense kernels shared by every module: Hurwitz/PSD tests, Lyapunov
// solvers, regularized inversion and Riccati time-marching.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "lgq/error.hpp"

namespace lgq {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using BoolMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Absolute eigenvalue tolerance used by the Hurwitz and PSD tests.
inline constexpr double kEigenTolerance = 1e-12;

inline void require_square(const Mat& m, const char* name) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    std::ostringstream os;
    os << name << " must be square and non-empty, got " << m.rows() << "x" << m.cols();
    throw Error(ErrorKind::kShapeMismatch, os.str());
  }
}

inline Mat symmetrize(const Mat& s) { return 0.5 * (s + s.transpose()); }

inline bool is_symmetric(const Mat& s) {
  if (s.rows() != s.cols()) return false;
  const double scale = 1.0 + s.cwiseAbs().maxCoeff();
  return (s - s.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * scale;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double min_eigenvalue(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(symmetrize(s), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

/// Largest real part over the spectrum of a square matrix.
inline double spectral_abscissa(const Mat& a) {
  require_square(a, "A");
  Eigen::EigenSolver<Mat> eig(a, false);
  return eig.eigenvalues().real().maxCoeff();
}

/// True iff every eigenvalue of `a` has real part below -tol.
inline bool is_hurwitz(const Mat& a, double tol = kEigenTolerance) {
  if (!a.allFinite()) return false;
  return spectral_abscissa(a) < -tol;
}

/// True iff the smallest eigenvalue of the symmetric part of `s` is >= -tol.
inline bool is_psd(const Mat& s, double tol = kEigenTolerance) {
  require_square(s, "S");
  if (!s.allFinite()) return false;
  return min_eigenvalue(s) >= -tol;
}

/// (S + jitter I)^{-1}. With zero jitter the matrix must have condition
/// number below 1e12.
inline Mat regularized_inverse(const Mat& s, double jitter = 0.0) {
  require_square(s, "S");
  const Mat shifted = s + jitter * Mat::Identity(s.rows(), s.cols());
  Eigen::JacobiSVD<Mat> svd(shifted);
  const auto& sv = svd.singularValues();
  const double smax = sv(0);
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || !std::isfinite(smax)) {
    throw Error(ErrorKind::kSingular, "matrix is singular");
  }
  if (jitter == 0.0 && smax / smin >= 1e12) {
    std::ostringstream os;
    os << "condition number " << smax / smin << " exceeds 1e12";
    throw Error(ErrorKind::kSingular, os.str());
  }
  Eigen::LDLT<Mat> ldlt(symmetrize(shifted));
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    return symmetrize(ldlt.solve(Mat::Identity(s.rows(), s.cols())));
  }
  return symmetrize(shifted.fullPivLu().inverse());
}

/// Residual -A Q - Q A^T - R of the Lyapunov equation solved below.
inline Mat lyapunov_residual(const Mat& a, const Mat& q, const Mat& rhs) {
  return -a * q - q * a.transpose() - rhs;
}

/// Closed-form solution of -A Q - Q A^T = R for 2x2 A.
///
/// For 2x2 matrices Cayley-Hamilton gives
///   Q = -[det(A) R + (A - tr(A) I) R (A - tr(A) I)^T] / (2 tr(A) det(A)).
inline Mat solve_lyapunov_2x2(const Mat& a, const Mat& rhs) {
  if (a.rows() != 2 || a.cols() != 2 || rhs.rows() != 2 || rhs.cols() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "2x2 Lyapunov closed form needs 2x2 inputs");
  }
  const double tr = a.trace();
  const double det = a.determinant();
  const double denom = 2.0 * tr * det;
  if (denom == 0.0 || !std::isfinite(denom)) {
    throw Error(ErrorKind::kSingular, "tr(A) det(A) = 0 in 2x2 Lyapunov closed form");
  }
  const Mat shifted = a - tr * Mat::Identity(2, 2);
  return symmetrize(-(det * rhs + shifted * rhs * shifted.transpose()) / denom);
}

/// Solves -A Q - Q A^T = R through the Kronecker-vectorized linear system.
/// Does not require A to be Hurwitz, only that the operator is invertible.
inline Mat solve_lyapunov_vectorized(const Mat& a, const Mat& rhs) {
  require_square(a, "A");
  const Eigen::Index n = a.rows();
  if (rhs.rows() != n || rhs.cols() != n) {
    throw Error(ErrorKind::kShapeMismatch, "Lyapunov right-hand side shape");
  }
  const Mat eye = Mat::Identity(n, n);
  // vec(A Q) = (I (x) A) vec(Q), vec(Q A^T) = (A (x) I) vec(Q).
  Mat op = Mat::Zero(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      op.block(i * n, j * n, n, n) += eye(i, j) * a;
      op.block(i * n, j * n, n, n) += a(i, j) * eye;
    }
  }
  Eigen::FullPivLU<Mat> lu(op);
  if (!lu.isInvertible()) {
    throw Error(ErrorKind::kSingular, "Lyapunov operator is singular");
  }
  const Vec rhs_vec = Eigen::Map<const Vec>(Mat(rhs).data(), n * n);
  const Vec q_vec = lu.solve(-rhs_vec);
  return symmetrize(Eigen::Map<const Mat>(q_vec.data(), n, n));
}

/// Solves -A Q - Q A^T = R for Hurwitz A. Uses the closed form for 2x2 and
/// the vectorized solve otherwise; the residual is checked either way.
inline Mat solve_lyapunov(const Mat& a, const Mat& rhs, double eig_tol = kEigenTolerance) {
  require_square(a, "A");
  if (rhs.rows() != a.rows() || rhs.cols() != a.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "Lyapunov right-hand side shape");
  }
  if (!is_hurwitz(a, eig_tol)) {
    std::ostringstream os;
    os << "drift has spectral abscissa " << spectral_abscissa(a);
    throw Error(ErrorKind::kNotHurwitz, os.str());
  }
  const Mat q = a.rows() == 2 ? solve_lyapunov_2x2(a, rhs) : solve_lyapunov_vectorized(a, rhs);
  const double res = lyapunov_residual(a, q, rhs).norm();
  const double scale = std::max(1.0 + rhs.norm(), a.norm() * q.norm());
  if (!(res <= 1e-10 * scale)) {
    std::ostringstream os;
    os << "Lyapunov residual " << res << " too large";
    throw Error(ErrorKind::kSingular, os.str());
  }
  return q;
}

/// Symmetric Riccati flow in canonical form
///   dX/dt = F X + X F^T + G - X H X,
/// with G, H symmetric PSD. All the filter, retrofilter and true-state
/// covariance equations reduce to this.
struct RiccatiTerms {
  Mat drift;      // F
  Mat source;     // G
  Mat quadratic;  // H

  Mat rhs(const Mat& x) const {
    return symmetrize(drift * x + x * drift.transpose() + source - x * quadratic * x);
  }

  /// Drift of the linearized flow around x; Hurwitz at a stabilizing solution.
  Mat closed_loop(const Mat& x) const { return drift - x * quadratic; }

  Eigen::Index dim() const { return drift.rows(); }
};

enum class KickSign { kPlus, kMinus };

/// Canonical terms of dV/dt = A V + V A^T + D - K K^T with K = V C^T + Gamma^T.
///
/// With kMinus the returned flow runs in reversed time tau = T - t for the
/// retrofilter equation -dV/dt = -A V - V A^T + D - K^- K^-^T,
/// K^- = V C^T - Gamma^T.
inline RiccatiTerms filter_riccati(const Mat& a, const Mat& d, const Mat& c, const Mat& gamma,
                                   KickSign sign = KickSign::kPlus) {
  require_square(a, "A");
  const Eigen::Index n = a.rows();
  if (d.rows() != n || d.cols() != n || c.cols() != n || gamma.cols() != n ||
      gamma.rows() != c.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "Riccati term shapes are inconsistent");
  }
  const Mat a_eff = sign == KickSign::kPlus ? a : Mat(-a);
  const Mat g_eff = sign == KickSign::kPlus ? gamma : Mat(-gamma);
  return RiccatiTerms{a_eff - g_eff.transpose() * c, symmetrize(d - g_eff.transpose() * g_eff),
                      symmetrize(c.transpose() * c)};
}

/// One classical fourth-order Runge-Kutta step of dX/dt = f(t, X).
template <typename Rhs>
Mat rk4_step(const Rhs& f, double t, const Mat& x, double dt) {
  const Mat k1 = f(t, x);
  const Mat k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
  const Mat k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
  const Mat k4 = f(t + dt, x + dt * k3);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct SteadyStateOptions {
  double rate_tol = 1e-10;      // on ||dX/dt||, scaled by max(1, ||X||)
  int consecutive_steps = 100;  // steps below rate_tol before declaring convergence
  double max_time = 1e4;
  double max_dt = 0.5;
  double residual_tol = 1e-9;
  double blowup = 1e12;
  double eig_tol = kEigenTolerance;
};

struct SteadyStateResult {
  bool converged = false;
  Mat value;
  double residual = std::numeric_limits<double>::infinity();
  double elapsed = 0.0;
  bool stabilizing = false;
  BoolMat divergent;  // per-entry flag, meaningful only when !converged
};

/// Time-marches a Riccati flow from `x0` until dX/dt vanishes. Never throws on
/// non-convergence; the result carries the per-entry divergence flags.
inline SteadyStateResult integrate_to_steady_state(const RiccatiTerms& terms, const Mat& x0,
                                                   const SteadyStateOptions& opts = {}) {
  const Eigen::Index n = terms.dim();
  if (x0.rows() != n || x0.cols() != n) {
    throw Error(ErrorKind::kShapeMismatch, "initial condition shape");
  }
  const auto f = [&terms](double, const Mat& x) { return terms.rhs(x); };
  SteadyStateResult out;
  Mat x = symmetrize(x0);
  double t = 0.0;
  int quiet = 0;
  Mat rate = terms.rhs(x);
  while (t < opts.max_time) {
    const double stiffness = terms.closed_loop(x).norm();
    const double dt = std::min({opts.max_dt, 0.5 / std::max(stiffness, 1e-300), opts.max_time - t});
    x = symmetrize(rk4_step(f, t, x, dt));
    t += dt;
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > opts.blowup) break;
    rate = terms.rhs(x);
    const double scale = std::max(1.0, x.norm());
    quiet = rate.norm() <= opts.rate_tol * scale ? quiet + 1 : 0;
    if (quiet >= opts.consecutive_steps) {
      out.converged = true;
      break;
    }
  }
  out.value = x;
  out.elapsed = t;
  if (x.allFinite()) {
    out.residual = rate.norm();
    if (out.converged) {
      out.converged = out.residual <= opts.residual_tol * std::max(1.0, x.norm());
      out.stabilizing = is_hurwitz(terms.closed_loop(x), opts.eig_tol);
    }
  }
  out.divergent = BoolMat::Constant(n, n, false);
  if (!out.converged) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double xij = x(i, j);
        out.divergent(i, j) = !std::isfinite(xij) || std::abs(xij) > opts.blowup ||
                              !std::isfinite(rate(i, j)) ||
                              std::abs(rate(i, j)) > 1e-6 * std::max(1.0, std::abs(xij));
      }
    }
  }
  return out;
}

/// Stationary stabilizing solution of a Riccati flow. Throws NoConvergence if
/// the flow does not settle within the configured horizon or the limit is not
/// stabilizing.
inline Mat steady_riccati(const RiccatiTerms& terms, const Mat& x0,
                          const SteadyStateOptions& opts = {}) {
  const SteadyStateResult r = integrate_to_steady_state(terms, x0, opts);
  if (!r.converged) {
    std::ostringstream os;
    os << "Riccati flow did not converge within t = " << r.elapsed << " (residual " << r.residual
       << ")";
    throw Error(ErrorKind::kNoConvergence, os.str());
  }
  if (!r.stabilizing) {
    throw Error(ErrorKind::kNoConvergence, "Riccati limit is not a stabilizing solution");
  }
  return r.value;
}

/// Stationary filter (kPlus) or retrofilter (kMinus) variance for drift A,
/// diffusion D, observation C and cross-correlation Gamma.
inline Mat steady_riccati(const Mat& a, const Mat& d, const Mat& c, const Mat& gamma,
                          KickSign sign, const Mat& x0, const SteadyStateOptions& opts = {}) {
  return steady_riccati(filter_riccati(a, d, c, gamma, sign), x0, opts);
}

inline Mat steady_riccati(const Mat& a, const Mat& d, const Mat& c, const Mat& gamma,
                          KickSign sign = KickSign::kPlus) {
  return steady_riccati(a, d, c, gamma, sign, Mat::Identity(a.rows(), a.cols()));
}

}  // namespace lgq
