// Multi-start log-barrier Newton minimization of the moment loss over the
// bound polytope y_min <= Phi c <= y_max.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "obsfit/bspline.hpp"
#include "obsfit/loss.hpp"
#include "obsfit/moments.hpp"
#include "obsfit/parallel.hpp"

namespace obsfit {

struct OptimizerConfig {
  int max_iterations = 100;          // Newton iterations per barrier stage
  double gradient_tolerance = 1e-10; // on the squared Newton decrement
  double barrier_initial = 1e-1;
  double barrier_final = 1e-8;
  double barrier_factor = 0.1;
  int random_starts = 8;
  std::uint64_t seed = 0;
  int workers = 1;
  double pinv_cutoff = 1e-10;
};

struct MinimizeResult {
  Eigen::VectorXd c_hat;
  LossEvaluation loss;
  std::string start_label;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> start_labels;
  std::vector<double> start_losses;  // loss at each feasible start
  std::vector<double> final_losses;  // loss after optimizing from each start
};

inline void validate(const OptimizerConfig& cfg) {
  if (cfg.max_iterations < 1) throw ValidationError("max_iterations must be positive");
  if (!(cfg.gradient_tolerance > 0.0)) throw ValidationError("gradient_tolerance must be positive");
  if (!(cfg.barrier_initial > 0.0) || !(cfg.barrier_final > 0.0) || cfg.barrier_final > cfg.barrier_initial)
    throw ValidationError("barrier parameters must satisfy 0 < final <= initial");
  if (!(cfg.barrier_factor > 0.0 && cfg.barrier_factor < 1.0))
    throw ValidationError("barrier_factor must lie in (0, 1)");
  if (cfg.random_starts < 0) throw ValidationError("random_starts must be nonnegative");
}

/// Minimum-norm solution of A x = b via eigenvalues above cutoff * max.
inline Eigen::VectorXd pseudo_inverse_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                                            double cutoff = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double top = ev.cwiseAbs().maxCoeff();
  Eigen::VectorXd proj = es.eigenvectors().transpose() * b;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    proj(i) = (top > 0.0 && std::abs(ev(i)) > cutoff * top) ? proj(i) / ev(i) : 0.0;
  return es.eigenvectors() * proj;
}

namespace detail {

inline bool bounds_collapsed(const BSplineSpace& space) {
  return space.bounded() &&
         space.y_max() - space.y_min() <= 1e-14 * (1.0 + std::abs(space.y_max()) + std::abs(space.y_min()));
}

/// Log-barrier Newton solver for one start. Objective E(c)/s - mu sum log(slacks).
class BarrierNewton {
 public:
  BarrierNewton(const MomentSystem& sys, const BSplineSpace& space, const OptimizerConfig& cfg)
      : sys_(sys), cfg_(cfg), bounded_(space.bounded()), lo_(space.y_min()), hi_(space.y_max()) {
    if (bounded_) phi_ = space.constraint_matrix();
  }

  struct Outcome {
    Eigen::VectorXd c;
    bool converged = false;
    int iterations = 0;
  };

  Outcome run(Eigen::VectorXd c) const {
    Outcome out;
    const double scale = std::max(loss_value(sys_, c).total, 1e-12);
    if (!bounded_) {
      out.converged = stage(c, 0.0, scale, out.iterations);
      out.c = std::move(c);
      return out;
    }
    bool ok = false;
    for (double mu = cfg_.barrier_initial;; mu *= cfg_.barrier_factor) {
      const double m = std::max(mu, cfg_.barrier_final);
      ok = stage(c, m, scale, out.iterations);
      if (m <= cfg_.barrier_final) break;
    }
    out.converged = ok;
    out.c = std::move(c);
    return out;
  }

 private:
  double objective(const Eigen::VectorXd& c, double mu, double scale) const {
    double f = loss_value(sys_, c).total / scale;
    if (bounded_ && mu > 0.0) {
      const Eigen::VectorXd v = phi_ * c;
      double barrier = 0.0;
      for (Eigen::Index j = 0; j < v.size(); ++j) {
        const double a = v(j) - lo_, b = hi_ - v(j);
        if (!(a > 0.0) || !(b > 0.0)) return std::numeric_limits<double>::infinity();
        barrier += std::log(a) + std::log(b);
      }
      f -= mu * barrier;
    }
    return f;
  }

  // Largest step in [0, 1] keeping a 1% slack margin toward the boundary.
  double max_step(const Eigen::VectorXd& c, const Eigen::VectorXd& d) const {
    if (!bounded_) return 1.0;
    const Eigen::VectorXd v = phi_ * c;
    const Eigen::VectorXd dv = phi_ * d;
    double alpha = 1.0;
    for (Eigen::Index j = 0; j < v.size(); ++j) {
      if (dv(j) < 0.0) alpha = std::min(alpha, 0.99 * (v(j) - lo_) / -dv(j));
      else if (dv(j) > 0.0) alpha = std::min(alpha, 0.99 * (hi_ - v(j)) / dv(j));
    }
    return alpha;
  }

  bool stage(Eigen::VectorXd& c, double mu, double scale, int& iterations) const {
    for (int it = 0; it < cfg_.max_iterations; ++it) {
      ++iterations;
      Eigen::VectorXd g = loss_gradient(sys_, c) / scale;
      Eigen::MatrixXd H = loss_hessian(sys_, c) / scale;
      if (bounded_ && mu > 0.0) {
        const Eigen::VectorXd v = phi_ * c;
        const Eigen::ArrayXd ia = 1.0 / (v.array() - lo_);
        const Eigen::ArrayXd ib = 1.0 / (hi_ - v.array());
        g.noalias() -= mu * (phi_.transpose() * (ia - ib).matrix());
        const Eigen::VectorXd curv = mu * (ia.square() + ib.square()).matrix();
        H.noalias() += phi_.transpose() * curv.asDiagonal() * phi_;
      }
      Eigen::VectorXd d = newton_direction(H, g);
      const double decrement = -g.dot(d);
      if (!(decrement > cfg_.gradient_tolerance)) return true;
      const double f0 = objective(c, mu, scale);
      double alpha = max_step(c, d);
      bool accepted = false;
      for (int k = 0; k < 60; ++k) {
        const Eigen::VectorXd trial = c + alpha * d;
        const double f1 = objective(trial, mu, scale);
        if (f1 <= f0 - 1e-4 * alpha * decrement) {
          c = trial;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) return decrement < 1e3 * cfg_.gradient_tolerance;
    }
    return false;
  }

  static Eigen::VectorXd newton_direction(Eigen::MatrixXd H, const Eigen::VectorXd& g) {
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() == Eigen::Success) return -llt.solve(g);
    // Levenberg shift until positive definite.
    double shift = std::max(1e-10, 1e-8 * H.diagonal().cwiseAbs().maxCoeff());
    for (int k = 0; k < 60; ++k, shift *= 10.0) {
      Eigen::MatrixXd Hs = H;
      Hs.diagonal().array() += shift;
      llt.compute(Hs);
      if (llt.info() == Eigen::Success) return -llt.solve(g);
    }
    return -g;
  }

  const MomentSystem& sys_;
  const OptimizerConfig& cfg_;
  bool bounded_;
  double lo_, hi_;
  Eigen::MatrixXd phi_;
};

inline MomentSystem only_term(const MomentSystem& sys, int term) {
  MomentSystem s = sys;
  s.weights = {term == 1 ? sys.weights.w1 : 0.0, term == 2 ? sys.weights.w2 : 0.0,
               term == 3 ? sys.weights.w3 : 0.0, 0.0};
  s.e4.reset();
  return s;
}

}  // namespace detail

/// Moves c toward the constant mid-level so every constraint value keeps a
/// margin of 1e-3 of the half width. Identity for unbounded spaces.
inline Eigen::VectorXd pull_inside(const BSplineSpace& space, const Eigen::VectorXd& c) {
  if (!space.bounded()) return c;
  const double mid = 0.5 * (space.y_min() + space.y_max());
  const double half = 0.5 * (space.y_max() - space.y_min());
  const double room = half * (1.0 - 1e-3);
  const Eigen::VectorXd v = space.constraint_matrix() * c;
  const double spread = (v.array() - mid).abs().maxCoeff();
  if (spread <= room) return c;
  const double theta = room / spread;
  return Eigen::VectorXd::Constant(c.size(), mid) + theta * (c - Eigen::VectorXd::Constant(c.size(), mid));
}

/// The deterministic starts (pseudo-inverse, constrained quadratic, E2-only,
/// E3-only) followed by cfg.random_starts uniform points of the coefficient box.
inline std::vector<Eigen::VectorXd> initial_points(const MomentSystem& sys, const BSplineSpace& space,
                                                   const OptimizerConfig& cfg = {},
                                                   std::vector<std::string>* labels = nullptr) {
  validate(cfg);
  if (space.dimension() != sys.n) throw ValidationError("space does not match the moment system");
  std::vector<Eigen::VectorXd> pts;
  std::vector<std::string> names;
  const Eigen::VectorXd c1 = pseudo_inverse_solve(sys.A1bar, sys.b1bar, cfg.pinv_cutoff);
  pts.push_back(c1);
  names.emplace_back("pinv");

  const bool collapsed = detail::bounds_collapsed(space);
  auto solve_term = [&](int term, const Eigen::VectorXd& from) -> Eigen::VectorXd {
    if (collapsed) return Eigen::VectorXd::Constant(sys.n, space.y_min());
    const MomentSystem only = detail::only_term(sys, term);
    return detail::BarrierNewton(only, space, cfg).run(pull_inside(space, from)).c;
  };
  const Eigen::VectorXd c2 = solve_term(1, c1);
  pts.push_back(c2);
  names.emplace_back("quadratic");
  pts.push_back(solve_term(2, c2));
  names.emplace_back("e2");
  pts.push_back(solve_term(3, c2));
  names.emplace_back("e3");

  const double lo = space.bounded() ? space.y_min() : -(1.0 + c1.cwiseAbs().maxCoeff());
  const double hi = space.bounded() ? space.y_max() : (1.0 + c1.cwiseAbs().maxCoeff());
  for (int k = 0; k < cfg.random_starts; ++k) {
    auto rng = stream_engine(cfg.seed, Stream::kStarts, static_cast<std::uint64_t>(k));
    std::uniform_real_distribution<double> u(lo, hi);
    Eigen::VectorXd c(sys.n);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = u(rng);
    pts.push_back(std::move(c));
    names.push_back("random-" + std::to_string(k));
  }
  if (labels) *labels = std::move(names);
  return pts;
}

inline MinimizeResult minimize(const MomentSystem& sys, const BSplineSpace& space,
                               const OptimizerConfig& cfg = {}) {
  validate(cfg);
  if (space.dimension() != sys.n) throw ValidationError("space does not match the moment system");
  MinimizeResult res;
  if (detail::bounds_collapsed(space)) {
    res.c_hat = Eigen::VectorXd::Constant(sys.n, space.y_min());
    res.loss = loss_value(sys, res.c_hat);
    res.start_label = "collapsed";
    res.converged = true;
    return res;
  }

  std::vector<std::string> labels;
  const auto starts = initial_points(sys, space, cfg, &labels);
  const std::size_t k = starts.size();
  std::vector<Eigen::VectorXd> feasible_starts(k);
  std::vector<detail::BarrierNewton::Outcome> outcomes(k);
  const detail::BarrierNewton solver(sys, space, cfg);
  parallel_for(k, cfg.workers, [&](std::size_t i) {
    feasible_starts[i] = pull_inside(space, starts[i]);
    outcomes[i] = solver.run(feasible_starts[i]);
  });

  res.start_labels = labels;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    const double at_start = loss_value(sys, feasible_starts[i]).total;
    const double at_end = loss_value(sys, outcomes[i].c).total;
    res.start_losses.push_back(at_start);
    res.final_losses.push_back(at_end);
    res.iterations += outcomes[i].iterations;
    // Ties keep the earlier start; an optimized point beats its own start on ties.
    if (at_end < best) {
      best = at_end;
      res.c_hat = outcomes[i].c;
      res.start_label = labels[i];
      res.converged = outcomes[i].converged;
    }
    if (at_start < best) {
      best = at_start;
      res.c_hat = feasible_starts[i];
      res.start_label = labels[i] + " (unoptimized)";
      res.converged = false;
    }
  }
  res.loss = loss_value(sys, res.c_hat, true);
  return res;
}

}  // namespace obsfit
