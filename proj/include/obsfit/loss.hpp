// Weighted quartic moment-matching loss, its gradient and Hessian.
#pragma once

#include <Eigen/Dense>

#include <optional>

#include "obsfit/error.hpp"
#include "obsfit/moments.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

struct LossEvaluation {
  double total = 0.0;
  double e1 = 0.0;
  double e2 = 0.0;
  double e3 = 0.0;
  std::optional<double> e4;
  std::optional<Eigen::VectorXd> gradient;
};

namespace detail {

inline void check_system(const MomentSystem& sys, const Eigen::VectorXd& c) {
  if (!sys.has_observations) throw ValidationError("moment system has no observation moments");
  if (c.size() != sys.n)
    throw ValidationError("coefficient length " + std::to_string(c.size()) + " does not match n = " +
                          std::to_string(sys.n));
}

// Column l-1 of the result is A_l c (each A_l symmetric).
inline Eigen::MatrixXd stacked_products(const Eigen::MatrixXd& stack, int n, int L, const Eigen::VectorXd& c) {
  Eigen::Map<const Eigen::MatrixXd> W(stack.data(), n, static_cast<Eigen::Index>(n) * L);
  Eigen::VectorXd g = W.transpose() * c;
  return Eigen::Map<Eigen::MatrixXd>(g.data(), n, L);
}

struct QuarticPart {
  Eigen::MatrixXd G;   // n x L, A_l c
  Eigen::VectorXd r;   // L residuals c'A_l c - b_l + C_l
  double value = 0.0;  // mean of r^2
};

inline QuarticPart quartic_part(const Eigen::MatrixXd& stack, const Eigen::VectorXd& b,
                                const Eigen::VectorXd& C, int n, int L, const Eigen::VectorXd& c) {
  QuarticPart q;
  q.G = stacked_products(stack, n, L, c);
  q.r = q.G.transpose() * c - b + C;
  q.value = q.r.squaredNorm() / L;
  return q;
}

}  // namespace detail

/// E = w1 E1 + w2 E2 + w3 E3 (+ w4 E4), with
///   E1 = c'A1bar c - 2 c'b1bar + b1tilde,
///   Ek = (1/L) sum_l (c'A_{k,l} c - b_{k,l} + C_{k,l})^2.
inline LossEvaluation loss_value(const MomentSystem& sys, const Eigen::VectorXd& c,
                                 bool with_gradient = false) {
  detail::check_system(sys, c);
  const int n = sys.n, L = sys.L;
  const auto& w = sys.weights;
  LossEvaluation out;
  const Eigen::VectorXd a1c = sys.A1bar * c;
  out.e1 = c.dot(a1c) - 2.0 * c.dot(sys.b1bar) + sys.b1tilde;
  const auto q2 = detail::quartic_part(sys.A2, sys.b2, sys.noise_diag, n, L, c);
  const auto q3 = detail::quartic_part(sys.A3, sys.b3, sys.noise_off, n, L, c);
  out.e2 = q2.value;
  out.e3 = q3.value;
  out.total = w.w1 * out.e1 + w.w2 * out.e2 + w.w3 * out.e3;
  Eigen::VectorXd r4;
  if (sys.e4) {
    r4 = sys.e4->generator_means.transpose() * c - sys.e4->increment_means;
    out.e4 = r4.squaredNorm() / L;
    out.total += w.w4 * *out.e4;
  }
  if (with_gradient) {
    Eigen::VectorXd g = 2.0 * w.w1 * (a1c - sys.b1bar);
    g.noalias() += (4.0 * w.w2 / L) * (q2.G * q2.r);
    g.noalias() += (4.0 * w.w3 / L) * (q3.G * q3.r);
    if (sys.e4) g.noalias() += (2.0 * w.w4 / L) * (sys.e4->generator_means * r4);
    out.gradient = std::move(g);
  }
  return out;
}

inline Eigen::VectorXd loss_gradient(const MomentSystem& sys, const Eigen::VectorXd& c) {
  return *loss_value(sys, c, true).gradient;
}

/// Exact Hessian of the total loss.
inline Eigen::MatrixXd loss_hessian(const MomentSystem& sys, const Eigen::VectorXd& c) {
  detail::check_system(sys, c);
  const int n = sys.n, L = sys.L;
  const auto& w = sys.weights;
  Eigen::MatrixXd H = 2.0 * w.w1 * sys.A1bar;
  auto add_quartic = [&](const Eigen::MatrixXd& stack, const Eigen::VectorXd& b, const Eigen::VectorXd& C,
                         double wk) {
    if (wk == 0.0) return;
    const auto q = detail::quartic_part(stack, b, C, n, L, c);
    const Eigen::VectorXd weighted = stack * q.r;
    H += (4.0 * wk / L) * Eigen::Map<const Eigen::MatrixXd>(weighted.data(), n, n);
    H.noalias() += (8.0 * wk / L) * (q.G * q.G.transpose());
  };
  add_quartic(sys.A2, sys.b2, sys.noise_diag, w.w2);
  add_quartic(sys.A3, sys.b3, sys.noise_off, w.w3);
  if (sys.e4 && w.w4 != 0.0)
    H.noalias() += (2.0 * w.w4 / L) * (sys.e4->generator_means * sys.e4->generator_means.transpose());
  return 0.5 * (H + H.transpose());
}

/// The same loss for an arbitrary function f, with model-side moments taken as
/// Monte Carlo means of f over X'. Only the observation part of `sys` (data
/// moments, noise corrections, weights) is used.
inline LossEvaluation functional_loss(const MomentSystem& sys, const TrajectoryEnsemble& Xprime,
                                      const RealFunction& f) {
  if (!sys.has_observations) throw ValidationError("moment system has no observation moments");
  if (Xprime.steps() != sys.L) throw ValidationError("time grid of the state ensemble does not match the data");
  const int L = sys.L;
  const Eigen::Index M = Xprime.size();
  Eigen::MatrixXd F(M, L + 1);
  for (Eigen::Index l = 0; l <= L; ++l)
    for (Eigen::Index m = 0; m < M; ++m) F(m, l) = f(Xprime.paths(m, l));
  const auto Md = static_cast<double>(M);
  double e1 = 0.0, e2 = 0.0, e3 = 0.0;
  for (int l = 1; l <= L; ++l) {
    const double r1 = F.col(l).mean() - sys.y_means(l);
    const double r2 = F.col(l).squaredNorm() / Md - sys.b2(l - 1) + sys.noise_diag(l - 1);
    const double r3 = F.col(l - 1).dot(F.col(l)) / Md - sys.b3(l - 1) + sys.noise_off(l - 1);
    e1 += r1 * r1;
    e2 += r2 * r2;
    e3 += r3 * r3;
  }
  LossEvaluation out;
  out.e1 = e1 / L;
  out.e2 = e2 / L;
  out.e3 = e3 / L;
  out.total = sys.weights.w1 * out.e1 + sys.weights.w2 * out.e2 + sys.weights.w3 * out.e3;
  return out;
}

}  // namespace obsfit
