#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace obsfit;

TEST(Density, IntegratesToOne) {
  const auto X = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.01, 40), 3000, 2);
  for (int G : {10, 200, 517}) {
    const auto d = estimate_density(X, G);
    EXPECT_NEAR(d.h * d.rho.sum(), 1.0, 1e-8);
    EXPECT_GE(d.rho.minCoeff(), 0.0);
    EXPECT_EQ(d.size(), G);
    EXPECT_EQ(d.r_min, X.paths.minCoeff());
    EXPECT_EQ(d.r_max, X.paths.maxCoeff());
    for (int l = 0; l < d.per_time.rows(); ++l) EXPECT_NEAR(d.h * d.per_time.row(l).sum(), 1.0, 1e-8);
  }
}

TEST(Density, PointMass) {
  const StateModelSpec still{"still", [](double) { return 0.0; }, [](double) { return 0.0; }};
  const auto X = simulate_ensemble(still, PointMass{1.7}, TimeGrid(0.1, 10), 50, 1);
  const auto d = estimate_density(X, 20);
  EXPECT_NEAR(d.h * d.rho.sum(), 1.0, 1e-12);
  EXPECT_EQ((d.rho.array() > 0.0).count(), 1);
  const Eigen::Index g = d.cell(1.7);
  EXPECT_NEAR(d.rho(g) * d.h, 1.0, 1e-12);
}

TEST(Density, BrownianSupportCoversStartInterval) {
  int covered = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto X = simulate_ensemble(models::brownian(), UniformInitial{0.0, 1.0}, TimeGrid(0.01, 100), 10000, seed);
    const auto d = estimate_density(X);
    if (d.r_min < 0.0 && d.r_max > 1.0) ++covered;
  }
  EXPECT_GE(covered, 99);
}

TEST(Density, RhoIsMeanOfPerTime) {
  const auto X = simulate_ensemble(models::ornstein_uhlenbeck(1.0), PointMass{0.5}, TimeGrid(0.05, 20), 1000, 6);
  const auto d = estimate_density(X, 50);
  EXPECT_EQ(d.per_time.rows(), 20);
  const Eigen::VectorXd mean = d.per_time.colwise().mean().transpose();
  EXPECT_LE((mean - d.rho).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Density, Validation) {
  TrajectoryEnsemble empty;
  EXPECT_THROW(estimate_density(empty), ValidationError);
  const auto X = test::constant_ensemble(2, 3, 0.0);
  EXPECT_THROW(estimate_density(X, 200), ValidationError);
}

TEST(L2Rho, DistanceExamples) {
  const auto X = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.01, 20), 1000, 3);
  const auto d = estimate_density(X, 10);
  const Eigen::VectorXd f = on_grid(d, [](double x) { return std::sin(3 * x); });
  EXPECT_EQ(l2rho_distance(f, f, d), 0.0);
  EXPECT_NEAR(l2rho_distance(f, (f.array() + 0.37).matrix(), d), 0.37, 1e-12);
  const Eigen::VectorXd g = on_grid(d, [](double x) { return x * x; });
  double s = 0.0;
  for (int k = 0; k < 10; ++k) s += (f(k) - g(k)) * (f(k) - g(k)) * d.rho(k) * d.h;
  EXPECT_NEAR(l2rho_distance(f, g, d), std::sqrt(s), 1e-14);
  EXPECT_THROW(l2rho_distance(Eigen::VectorXd::Zero(9), f, d), ValidationError);
}

TEST(L2Rho, TriangleInequality) {
  const auto X = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.01, 20), 1000, 3);
  const auto d = estimate_density(X, 60);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N01;
  for (int k = 0; k < 200; ++k) {
    Eigen::VectorXd a(60), b(60), c(60);
    for (int g = 0; g < 60; ++g) {
      a(g) = N01(rng);
      b(g) = N01(rng);
      c(g) = N01(rng);
    }
    EXPECT_LE(l2rho_distance(a, c, d), l2rho_distance(a, b, d) + l2rho_distance(b, c, d) + 1e-10);
  }
}

TEST(Gram, Properties) {
  const auto X = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.01, 30), 2000, 8);
  const auto d = estimate_density(X);
  for (int p = 0; p <= 3; ++p) {
    const BSplineSpace s(p, 9, d.r_min, d.r_max);
    const auto B = gram_matrix(s, d);
    EXPECT_LE((B - B.transpose()).cwiseAbs().maxCoeff(), 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(B);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    // Row sums collapse to h * sum phi_i rho.
    for (int i = 0; i < 9; ++i) {
      double oracle = 0.0;
      for (Eigen::Index g = 0; g < d.size(); ++g) oracle += d.h * s.eval_basis(d.points(g))(i) * d.rho(g);
      EXPECT_NEAR(B.row(i).sum(), oracle, 1e-12);
    }
    EXPECT_NEAR(B.sum(), 1.0, 1e-10);
    if (p == 0) {
      EXPECT_TRUE(Eigen::MatrixXd(B.diagonal().asDiagonal()).isApprox(B));
    }
  }
}
