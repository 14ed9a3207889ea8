#pragma once

// Shared generators for the test suites.

#include <Eigen/Dense>

#include <random>

#include "lgq/estimation.hpp"
#include "lgq/linalg.hpp"
#include "lgq/model.hpp"

namespace lgq::testing {

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

/// Random matrix shifted so that its spectral abscissa lies in [-1, -0.1].
inline Mat random_hurwitz(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> margin(0.1, 1.0);
  Mat a = random_matrix(n, n, rng);
  return a - (spectral_abscissa(a) + margin(rng)) * Mat::Identity(n, n);
}

inline Mat random_psd(Eigen::Index n, std::mt19937_64& rng, Eigen::Index rank = -1) {
  const Mat b = random_matrix(n, rank < 0 ? n : rank, rng);
  return symmetrize(b * b.transpose());
}

/// Classical LG model with correlated process and measurement noise,
/// Gamma^T = E S with ||S|| < 1 so that D - Gamma^T Gamma stays PSD.
inline LGModel random_lg_model(Eigen::Index n, Eigen::Index l, std::mt19937_64& rng) {
  const Mat a = random_hurwitz(n, rng) + 0.5 * Mat::Identity(n, n);  // not always stable
  const Mat e = random_matrix(n, n, rng);
  const Mat c = random_matrix(l, n, rng);
  Mat s = random_matrix(n, l, rng);
  s *= 0.7 / std::max(1e-9, s.norm());
  return LGModel::from_noise(a, e, c, (e * s).transpose());
}

inline std::vector<Vec> random_record(Eigen::Index l, std::size_t steps, double dt,
                                      std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(dt));
  std::vector<Vec> rec(steps, Vec(l));
  for (Vec& y : rec) {
    for (Eigen::Index i = 0; i < l; ++i) y(i) = n(rng);
  }
  return rec;
}

inline OPOParams random_opo(std::mt19937_64& rng, bool pure = true) {
  std::uniform_real_distribution<double> phase(-1.5, 1.5);
  std::uniform_real_distribution<double> eff(0.1, 0.9);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  OPOParams p;
  p.theta_o = phase(rng);
  p.theta_u = phase(rng);
  p.eta_o = eff(rng);
  p.eta_u = pure ? 1.0 - p.eta_o : (1.0 - p.eta_o) * unit(rng);
  return p;
}

inline double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

inline double max_rel(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

}  // namespace lgq::testing
