// Helpers shared by the unit tests.
#pragma once

#include <Eigen/Dense>

#include <random>

#include "obsfit/obsfit.hpp"

namespace obsfit::test {

inline TrajectoryEnsemble ensemble_from(const Eigen::MatrixXd& paths, double dt = 0.01) {
  TrajectoryEnsemble e;
  e.grid = TimeGrid(dt, static_cast<int>(paths.cols()) - 1);
  e.paths = paths;
  return e;
}

inline TrajectoryEnsemble constant_ensemble(Eigen::Index M, int L, double value) {
  return ensemble_from(Eigen::MatrixXd::Constant(M, L + 1, value));
}

inline InitialDistribution double_well_mixture() {
  return GaussianMixture{{{0.5, -0.5, 0.2}, {0.5, 1.0, 0.5}}};
}

/// Random but valid moment system with observation moments.
inline MomentSystem random_system(std::mt19937_64& rng, int n, int L, bool noisy = false) {
  std::normal_distribution<double> N01(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.5, 2.0);
  auto rand_mat = [&](int r, int c) {
    Eigen::MatrixXd m(r, c);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i) m(i, j) = N01(rng);
    return m;
  };
  MomentSystem s;
  s.n = n;
  s.L = L;
  s.basis_means = rand_mat(n, L + 1);
  const auto Ub = s.basis_means.rightCols(L);
  s.A1bar = Ub * Ub.transpose() / L;
  s.A2.resize(static_cast<Eigen::Index>(n) * n, L);
  s.A3.resize(static_cast<Eigen::Index>(n) * n, L);
  for (int l = 0; l < L; ++l) {
    const Eigen::MatrixXd G = rand_mat(n, n + 1);
    const Eigen::MatrixXd A2 = G * G.transpose() / (n + 1);
    const Eigen::MatrixXd R = rand_mat(n, n);
    const Eigen::MatrixXd A3 = 0.5 * (R + R.transpose());
    s.A2.col(l) = Eigen::Map<const Eigen::VectorXd>(A2.data(), n * n);
    s.A3.col(l) = Eigen::Map<const Eigen::VectorXd>(A3.data(), n * n);
  }
  s.has_observations = true;
  s.y_means = rand_mat(L + 1, 1);
  s.b1bar = rand_mat(n, 1);
  s.b1tilde = U(rng);
  s.b2 = rand_mat(L, 1).cwiseAbs();
  s.b3 = rand_mat(L, 1);
  s.noise_diag = Eigen::VectorXd::Constant(L, noisy ? 0.25 : 0.0);
  s.noise_off = Eigen::VectorXd::Zero(L);
  s.weights = {U(rng), U(rng), U(rng), 0.0};
  return s;
}

}  // namespace obsfit::test
