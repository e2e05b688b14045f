#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace obsfit;

namespace {

// Direct transcription of the loss formulas, one scalar at a time.
double brute_loss(const MomentSystem& s, const Eigen::VectorXd& c) {
  const int n = s.n, L = s.L;
  double e1 = s.b1tilde;
  for (int i = 0; i < n; ++i) {
    e1 -= 2.0 * c(i) * s.b1bar(i);
    for (int j = 0; j < n; ++j) e1 += c(i) * s.A1bar(i, j) * c(j);
  }
  double e2 = 0.0, e3 = 0.0;
  for (int l = 1; l <= L; ++l) {
    double q2 = 0.0, q3 = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        q2 += c(i) * s.A2(j * n + i, l - 1) * c(j);
        q3 += c(i) * s.A3(j * n + i, l - 1) * c(j);
      }
    const double r2 = q2 - s.b2(l - 1) + s.noise_diag(l - 1);
    const double r3 = q3 - s.b3(l - 1) + s.noise_off(l - 1);
    e2 += r2 * r2 / L;
    e3 += r3 * r3 / L;
  }
  return s.weights.w1 * e1 + s.weights.w2 * e2 + s.weights.w3 * e3;
}

Eigen::VectorXd random_vector(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> N01;
  Eigen::VectorXd c(n);
  for (int i = 0; i < n; ++i) c(i) = N01(rng);
  return c;
}

}  // namespace

TEST(Loss, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 7, L = 1 + trial % 5;
    const auto sys = test::random_system(rng, n, L, trial % 2 == 1);
    const auto c = random_vector(rng, n);
    const auto ev = loss_value(sys, c);
    const double ref = brute_loss(sys, c);
    EXPECT_NEAR(ev.total, ref, 1e-12 * std::max(1.0, std::abs(ref)));
    EXPECT_NEAR(ev.total, sys.weights.w1 * ev.e1 + sys.weights.w2 * ev.e2 + sys.weights.w3 * ev.e3, 1e-12 * std::abs(ref));
    EXPECT_GE(ev.e2, 0.0);
    EXPECT_GE(ev.e3, 0.0);
  }
}

TEST(Loss, HandPickedTwoByOne) {
  MomentSystem s;
  s.n = 2;
  s.L = 1;
  s.A1bar = (Eigen::Matrix2d() << 2.0, 0.5, 0.5, 1.0).finished();
  s.A2 = (Eigen::Vector4d() << 1.0, 0.2, 0.2, 3.0).finished();
  s.A3 = (Eigen::Vector4d() << 0.5, -0.1, -0.1, 0.7).finished();
  s.has_observations = true;
  s.b1bar = Eigen::Vector2d(1.0, -1.0);
  s.b1tilde = 0.8;
  s.b2 = Eigen::VectorXd::Constant(1, 2.0);
  s.b3 = Eigen::VectorXd::Constant(1, 0.3);
  s.noise_diag = Eigen::VectorXd::Constant(1, 0.1);
  s.noise_off = Eigen::VectorXd::Zero(1);
  s.weights = {1.5, 2.0, 0.5, 0.0};
  const Eigen::Vector2d c(0.3, -0.7);
  // c'A1c = 2(.09) + 2(.5)(.3)(-.7) + .49 = 0.46; c'b = 1.0
  const double e1 = 0.46 - 2.0 * 1.0 + 0.8;
  // c'A2c = .09 + 2(.2)(-.21) + 3(.49) = 1.476
  const double r2 = 1.476 - 2.0 + 0.1;
  // c'A3c = .5(.09) - 2(.1)(-.21) + .7(.49) = 0.43
  const double r3 = 0.43 - 0.3;
  const double expect = 1.5 * e1 + 2.0 * r2 * r2 + 0.5 * r3 * r3;
  EXPECT_NEAR(loss_value(s, c).total, expect, 1e-14);
}

TEST(Loss, ZeroCoefficients) {
  std::mt19937_64 rng(2);
  const auto sys = test::random_system(rng, 5, 4, true);
  const auto ev = loss_value(sys, Eigen::VectorXd::Zero(5));
  const double e2 = (sys.noise_diag - sys.b2).squaredNorm() / 4;
  const double e3 = (sys.noise_off - sys.b3).squaredNorm() / 4;
  EXPECT_NEAR(ev.total, sys.weights.w1 * sys.b1tilde + sys.weights.w2 * e2 + sys.weights.w3 * e3, 1e-13);
}

TEST(Loss, VanishesAtTruthWithConsistentMoments) {
  // Y = f(X') with f in the span, so every data moment is the model moment.
  const auto X = simulate_ensemble(models::ornstein_uhlenbeck(1.0), PointMass{0.5}, TimeGrid(0.02, 15), 500, 3);
  const BSplineSpace s(2, 6, X.paths.minCoeff(), X.paths.maxCoeff());
  const Eigen::VectorXd c_star = (Eigen::VectorXd(6) << 0.3, -1.0, 0.4, 2.0, -0.5, 1.1).finished();
  TrajectoryEnsemble Y = X;
  for (Eigen::Index m = 0; m < X.size(); ++m)
    for (int l = 0; l <= 15; ++l) Y.paths(m, l) = s.evaluate(c_star, X.paths(m, l));
  const auto sys = assemble_obs_moments(Y, assemble_state_moments(X, s), NoNoise{});
  const auto ev = loss_value(sys, c_star);
  EXPECT_NEAR(ev.e1, 0.0, 1e-12);
  EXPECT_NEAR(ev.e2, 0.0, 1e-24);
  EXPECT_NEAR(ev.e3, 0.0, 1e-24);
  EXPECT_NEAR(ev.total, 0.0, 1e-9);
}

TEST(Loss, QuadraticOnlyGradient) {
  std::mt19937_64 rng(4);
  auto sys = test::random_system(rng, 6, 3);
  sys.weights.w2 = sys.weights.w3 = 0.0;
  const auto c = random_vector(rng, 6);
  const Eigen::VectorXd expect = 2.0 * sys.weights.w1 * (sys.A1bar * c - sys.b1bar);
  EXPECT_LE((loss_gradient(sys, c) - expect).cwiseAbs().maxCoeff(), 1e-14 * (1 + expect.norm()));
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 9, L = 1 + trial % 6;
    const auto sys = test::random_system(rng, n, L, trial % 3 == 0);
    const auto c = random_vector(rng, n);
    const auto g = loss_gradient(sys, c);
    Eigen::VectorXd fd(n);
    for (int i = 0; i < n; ++i) {
      const double h = 1e-6 * (1.0 + std::abs(c(i)));
      Eigen::VectorXd cp = c, cm = c;
      cp(i) += h;
      cm(i) -= h;
      fd(i) = (loss_value(sys, cp).total - loss_value(sys, cm).total) / (2 * h);
    }
    EXPECT_LE((g - fd).norm() / std::max(1.0, g.norm()), 1e-6) << "trial " << trial;
  }
}

TEST(Loss, HessianMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + trial % 6, L = 1 + trial % 4;
    const auto sys = test::random_system(rng, n, L, trial % 2 == 0);
    const auto c = random_vector(rng, n);
    const auto H = loss_hessian(sys, c);
    Eigen::MatrixXd fd(n, n);
    for (int i = 0; i < n; ++i) {
      const double h = 1e-5 * (1.0 + std::abs(c(i)));
      Eigen::VectorXd cp = c, cm = c;
      cp(i) += h;
      cm(i) -= h;
      fd.col(i) = (loss_gradient(sys, cp) - loss_gradient(sys, cm)) / (2 * h);
    }
    EXPECT_LE((H - fd).norm() / std::max(1.0, H.norm()), 1e-6) << "trial " << trial;
    EXPECT_LE((H - H.transpose()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Loss, SymmetrizationInvariance) {
  std::mt19937_64 rng(7);
  auto sys = test::random_system(rng, 4, 3);
  const auto c = random_vector(rng, 4);
  const double before = loss_value(sys, c).total;
  std::normal_distribution<double> N01;
  for (int l = 0; l < 3; ++l) {
    Eigen::MatrixXd K(4, 4);
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) K(i, j) = N01(rng);
    const Eigen::MatrixXd skew = K - K.transpose();
    sys.A3.col(l) += Eigen::Map<const Eigen::VectorXd>(skew.data(), 16);
  }
  EXPECT_NEAR(loss_value(sys, c).total, before, 1e-12 * std::abs(before));
}

TEST(Loss, E4Term) {
  std::mt19937_64 rng(8);
  auto sys = test::random_system(rng, 5, 4);
  E4Terms e4;
  e4.generator_means = Eigen::MatrixXd::Random(5, 4);
  e4.increment_means = Eigen::VectorXd::Random(4);
  sys.e4 = e4;
  sys.weights.w4 = 0.7;
  const auto c = random_vector(rng, 5);
  const auto ev = loss_value(sys, c, true);
  ASSERT_TRUE(ev.e4.has_value());
  const double r = (e4.generator_means.transpose() * c - e4.increment_means).squaredNorm() / 4;
  EXPECT_NEAR(*ev.e4, r, 1e-14);
  EXPECT_NEAR(ev.total, brute_loss(sys, c) + 0.7 * r, 1e-12 * std::abs(ev.total));
  Eigen::VectorXd fd(5);
  for (int i = 0; i < 5; ++i) {
    Eigen::VectorXd cp = c, cm = c;
    cp(i) += 1e-6;
    cm(i) -= 1e-6;
    fd(i) = (loss_value(sys, cp).total - loss_value(sys, cm).total) / 2e-6;
  }
  EXPECT_LE((*ev.gradient - fd).norm() / std::max(1.0, fd.norm()), 1e-6);
}

TEST(Loss, Validation) {
  std::mt19937_64 rng(9);
  auto sys = test::random_system(rng, 3, 2);
  EXPECT_THROW(loss_value(sys, Eigen::VectorXd::Zero(4)), ValidationError);
  sys.has_observations = false;
  EXPECT_THROW(loss_value(sys, Eigen::VectorXd::Zero(3)), ValidationError);
}

TEST(Loss, FunctionalLossAgreesOnSpanFunctions) {
  const auto X = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.02, 10), 400, 10);
  const auto Xd = simulate_ensemble(models::double_well(), test::double_well_mixture(), TimeGrid(0.02, 10), 300, 11);
  const auto Y = observe_ensemble(Xd, BuiltinObservation::kSine, NoNoise{}, 1);
  const BSplineSpace s(1, 7, X.paths.minCoeff(), X.paths.maxCoeff());
  const auto sys = assemble_obs_moments(Y, assemble_state_moments(X, s), NoNoise{});
  const Eigen::VectorXd c = (Eigen::VectorXd(7) << -0.9, -0.5, 0.1, 0.6, 0.8, 0.2, -0.3).finished();
  const auto a = loss_value(sys, c);
  const auto b = functional_loss(sys, X, [&](double x) { return s.evaluate(c, x); });
  EXPECT_NEAR(a.e1, b.e1, 1e-12);
  EXPECT_NEAR(a.e2, b.e2, 1e-12);
  EXPECT_NEAR(a.e3, b.e3, 1e-12);
}
