#pragma once

// Linear Gaussian quantum systems, Gaussian states and the on-threshold OPO.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lgq/error.hpp"
#include "lgq/linalg.hpp"

namespace lgq {

/// Block-diagonal symplectic form for quadrature order (q1, p1, ..., qN, pN),
/// Sigma_kl = -i [x_k, x_l] / hbar.
inline Mat symplectic_form(Eigen::Index modes) {
  Mat sigma = Mat::Zero(2 * modes, 2 * modes);
  for (Eigen::Index k = 0; k < modes; ++k) {
    sigma(2 * k, 2 * k + 1) = 1.0;
    sigma(2 * k + 1, 2 * k) = -1.0;
  }
  return sigma;
}

/// One estimation problem: drift, diffusion, the observed (o) and
/// unobserved (u) homodyne channels and their back-action correlations.
struct LGQSystem {
  Mat drift;          // A, M x M
  Mat diffusion;      // D, M x M
  Mat obs_c;          // C_o, L_o x M
  Mat unobs_c;        // C_u, L_u x M
  Mat obs_gamma;      // Gamma_o, L_o x M
  Mat unobs_gamma;    // Gamma_u, L_u x M
  double hbar = 1.0;

  Eigen::Index dim() const { return drift.rows(); }
  Eigen::Index modes() const { return dim() / 2; }
  Eigen::Index obs_channels() const { return obs_c.rows(); }
  Eigen::Index unobs_channels() const { return unobs_c.rows(); }
  Mat symplectic() const { return symplectic_form(modes()); }

  /// Both channels stacked, for the true-state equations.
  Mat all_c() const {
    Mat c(obs_c.rows() + unobs_c.rows(), dim());
    c << obs_c, unobs_c;
    return c;
  }
  Mat all_gamma() const {
    Mat g(obs_gamma.rows() + unobs_gamma.rows(), dim());
    g << obs_gamma, unobs_gamma;
    return g;
  }

  void validate() const {
    const Eigen::Index m = drift.rows();
    auto fail = [](const std::string& what) { throw Error(ErrorKind::kShapeMismatch, what); };
    if (m == 0 || drift.cols() != m) fail("A must be square and non-empty");
    if (m % 2 != 0) fail("system dimension must be even (q, p pairs)");
    if (diffusion.rows() != m || diffusion.cols() != m) fail("D must be M x M");
    if (obs_c.cols() != m || unobs_c.cols() != m) fail("C_o and C_u need M columns");
    if (obs_gamma.rows() != obs_c.rows() || obs_gamma.cols() != m) fail("Gamma_o must match C_o");
    if (unobs_gamma.rows() != unobs_c.rows() || unobs_gamma.cols() != m) {
      fail("Gamma_u must match C_u");
    }
    if (!(hbar > 0.0) || !std::isfinite(hbar)) {
      throw Error(ErrorKind::kInvalidArgument, "hbar must be positive");
    }
    if (!is_symmetric(diffusion) || !is_psd(diffusion, 1e-12 * (1.0 + diffusion.norm()))) {
      throw Error(ErrorKind::kInvalidArgument, "D must be symmetric positive semidefinite");
    }
  }
};

struct OPOParams {
  double theta_o = std::numbers::pi / 3.0;
  double theta_u = 0.2;
  double eta_o = 0.5;
  double eta_u = 0.5;
  double hbar = 1.0;

  void validate() const {
    if (!(eta_o >= 0.0) || !(eta_u >= 0.0) || !(eta_o + eta_u <= 1.0 + 1e-15)) {
      std::ostringstream os;
      os << "need 0 <= eta_o, 0 <= eta_u, eta_o + eta_u <= 1 (got " << eta_o << ", " << eta_u
         << ")";
      throw Error(ErrorKind::kInvalidEfficiency, os.str());
    }
    if (!(hbar > 0.0) || !std::isfinite(theta_o) || !std::isfinite(theta_u)) {
      throw Error(ErrorKind::kInvalidArgument, "hbar must be positive and phases finite");
    }
  }
};

/// Homodyne observation row 2 sqrt(eta / hbar) (cos theta, sin theta).
inline Mat homodyne_row(double eta, double theta, double hbar) {
  Mat c(1, 2);
  const double g = 2.0 * std::sqrt(eta / hbar);
  c << g * std::cos(theta), g * std::sin(theta);
  return c;
}

/// On-threshold OPO: A = diag(0, -2), D = hbar I, Gamma_r = -hbar C_r / 2.
inline LGQSystem build_opo(const OPOParams& p) {
  p.validate();
  LGQSystem sys;
  sys.hbar = p.hbar;
  sys.drift = Mat::Zero(2, 2);
  sys.drift(1, 1) = -2.0;
  sys.diffusion = p.hbar * Mat::Identity(2, 2);
  sys.obs_c = homodyne_row(p.eta_o, p.theta_o, p.hbar);
  sys.unobs_c = homodyne_row(p.eta_u, p.theta_u, p.hbar);
  sys.obs_gamma = -0.5 * p.hbar * sys.obs_c;
  sys.unobs_gamma = -0.5 * p.hbar * sys.unobs_c;
  return sys;
}

/// Kick matrix K^+[V] = V C^T + Gamma^T, or K^-[V] = V C^T - Gamma^T.
inline Mat kick(const Mat& v, const Mat& c, const Mat& gamma, KickSign sign = KickSign::kPlus) {
  if (v.rows() != v.cols() || c.cols() != v.rows() || gamma.rows() != c.rows() ||
      gamma.cols() != c.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "kick: V, C and Gamma shapes are inconsistent");
  }
  const Mat vc = v * c.transpose();
  return sign == KickSign::kPlus ? Mat(vc + gamma.transpose()) : Mat(vc - gamma.transpose());
}

enum class StateLabel { kTrue, kFiltered, kRetrofilteredEffect, kSmoothed, kSWV, kUnconditioned };

inline const char* to_string(StateLabel label) {
  switch (label) {
    case StateLabel::kTrue: return "true";
    case StateLabel::kFiltered: return "filtered";
    case StateLabel::kRetrofilteredEffect: return "retrofiltered-effect";
    case StateLabel::kSmoothed: return "smoothed";
    case StateLabel::kSWV: return "SWV";
    case StateLabel::kUnconditioned: return "unconditioned";
  }
  return "unknown";
}

struct GaussianState {
  Vec mean;
  Mat cov;
  double hbar = 1.0;
  StateLabel label = StateLabel::kFiltered;

  Eigen::Index dim() const { return cov.rows(); }
  Eigen::Index modes() const { return cov.rows() / 2; }
  /// Retrofiltered effects and SWV "states" may violate the uncertainty relation.
  bool must_be_physical() const {
    return label != StateLabel::kRetrofilteredEffect && label != StateLabel::kSWV;
  }
};

/// Smallest eigenvalue of the Hermitian matrix V + i (hbar/2) Sigma.
inline double uncertainty_margin(const Mat& cov, double hbar) {
  require_square(cov, "cov");
  if (cov.rows() % 2 != 0) throw Error(ErrorKind::kShapeMismatch, "covariance dimension is odd");
  const Eigen::MatrixXcd h = symmetrize(cov).cast<std::complex<double>>() +
                             std::complex<double>(0.0, 0.5 * hbar) *
                                 symplectic_form(cov.rows() / 2).cast<std::complex<double>>();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> eig(h, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff();
}

inline bool check_physical(const Mat& cov, double hbar, double tol = 1e-9) {
  if (!cov.allFinite()) return false;
  return uncertainty_margin(cov, hbar) >= -tol;
}

/// Schrodinger-Heisenberg test V + i (hbar/2) Sigma >= 0 (min eigenvalue >= -tol).
inline bool check_physical(const GaussianState& s, double tol = 1e-9) {
  return check_physical(s.cov, s.hbar, tol);
}

/// (hbar/2)^N |V|^{-1/2}.
inline double purity(const Mat& cov, double hbar) {
  require_square(cov, "cov");
  const double det = cov.determinant();
  if (!(det > 0.0) || !std::isfinite(det)) {
    throw Error(ErrorKind::kSingularCovariance, "purity needs a positive-definite covariance");
  }
  const double modes = static_cast<double>(cov.rows()) / 2.0;
  return std::pow(0.5 * hbar, modes) / std::sqrt(det);
}

inline double purity(const GaussianState& s) { return purity(s.cov, s.hbar); }

/// Points on the 1-SD ellipse (x - mean)^T V^{-1} (x - mean) = 1 of a
/// single-mode state, uniformly spaced in the parametrizing angle.
inline std::vector<Vec> wigner_contour(const GaussianState& s, int n_points) {
  if (s.cov.rows() != 2 || s.mean.size() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "contours are defined for single-mode states");
  }
  if (n_points < 1) throw Error(ErrorKind::kInvalidArgument, "n_points must be positive");
  Eigen::LLT<Mat> llt(symmetrize(s.cov));
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorKind::kSingularCovariance, "contour needs a positive-definite covariance");
  }
  const Mat l = llt.matrixL();
  std::vector<Vec> pts;
  pts.reserve(static_cast<std::size_t>(n_points));
  for (int k = 0; k < n_points; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / n_points;
    Vec u(2);
    u << std::cos(phi), std::sin(phi);
    pts.push_back(s.mean + l * u);
  }
  return pts;
}

}  // namespace lgq
