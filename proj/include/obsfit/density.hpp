// Occupation density of the state process and the L2(rho) geometry it induces.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "obsfit/bspline.hpp"
#include "obsfit/error.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

/// Histogram estimate of the time-averaged density on G uniform cells.
///
/// `rho` is the mean over l = 1..L of the per-time histograms in `per_time`;
/// `points` are cell midpoints, which double as the quadrature nodes for every
/// L2(rho) integral.
struct DensityGrid {
  double r_min = 0.0;
  double r_max = 1.0;
  double h = 1.0;
  Eigen::VectorXd points;
  Eigen::VectorXd rho;
  Eigen::MatrixXd per_time;  // L x G

  Eigen::Index size() const noexcept { return points.size(); }

  Eigen::Index cell(double x) const noexcept {
    const auto g = static_cast<Eigen::Index>(std::floor((x - r_min) / h));
    return std::clamp<Eigen::Index>(g, 0, points.size() - 1);
  }

  /// Quadrature weights h * rho.
  Eigen::VectorXd weights() const { return h * rho; }
};

inline DensityGrid estimate_density(const TrajectoryEnsemble& X, int cells = 200) {
  if (X.paths.size() == 0) throw ValidationError("cannot estimate a density from an empty ensemble");
  if (cells < 1) throw ValidationError("density grid needs at least one cell");
  validate(X);
  const Eigen::Index M = X.size();
  const int L = X.steps();
  if (M * (L + 1) < cells) throw ValidationError("fewer samples than density cells");

  DensityGrid d;
  // Support includes the initial slice; the density itself averages l = 1..L.
  d.r_min = X.paths.minCoeff();
  d.r_max = X.paths.maxCoeff();
  if (d.r_max - d.r_min <= 1e-12 * std::max(1.0, std::abs(d.r_min))) {
    // Degenerate data: centre a unit-width window on the single location.
    const double c = 0.5 * (d.r_min + d.r_max);
    d.r_min = c - 0.5;
    d.r_max = c + 0.5;
  }
  const Eigen::Index G = cells;
  d.h = (d.r_max - d.r_min) / static_cast<double>(G);
  d.points.resize(G);
  for (Eigen::Index g = 0; g < G; ++g) d.points(g) = d.r_min + (static_cast<double>(g) + 0.5) * d.h;

  d.per_time = Eigen::MatrixXd::Zero(L, G);
  const double scale = 1.0 / (static_cast<double>(M) * d.h);
  for (int l = 1; l <= L; ++l) {
    auto col = X.slice(l);
    for (Eigen::Index m = 0; m < M; ++m) d.per_time(l - 1, d.cell(col(m))) += 1.0;
  }
  d.per_time *= scale;
  d.rho = d.per_time.colwise().mean().transpose();
  return d;
}

/// sqrt( h * sum_g (f - g)^2 rho ) on the density grid.
inline double l2rho_distance(const Eigen::Ref<const Eigen::VectorXd>& f_vals,
                             const Eigen::Ref<const Eigen::VectorXd>& g_vals, const DensityGrid& d) {
  if (f_vals.size() != d.size() || g_vals.size() != d.size())
    throw ValidationError("value arrays must align with the density grid");
  return std::sqrt(d.h * ((f_vals - g_vals).array().square() * d.rho.array()).sum());
}

inline double l2rho_norm(const Eigen::Ref<const Eigen::VectorXd>& f_vals, const DensityGrid& d) {
  return l2rho_distance(f_vals, Eigen::VectorXd::Zero(d.size()), d);
}

/// f evaluated at the grid nodes.
template <typename Fn>
Eigen::VectorXd on_grid(const DensityGrid& d, Fn&& f) {
  Eigen::VectorXd v(d.size());
  for (Eigen::Index g = 0; g < d.size(); ++g) v(g) = f(d.points(g));
  return v;
}

/// B(i,j) = h * sum_g phi_i phi_j rho at the grid nodes.
inline Eigen::MatrixXd gram_matrix(const BSplineSpace& space, const DensityGrid& d) {
  const int n = space.dimension();
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, n);
  LocalBasis lb;
  for (Eigen::Index g = 0; g < d.size(); ++g) {
    const double w = d.h * d.rho(g);
    if (w == 0.0 || !space.eval_local(d.points(g), lb)) continue;
    for (int a = 0; a <= space.degree(); ++a)
      for (int b = 0; b <= space.degree(); ++b)
        B(lb.first + a, lb.first + b) += w * lb.values[static_cast<std::size_t>(a)] * lb.values[static_cast<std::size_t>(b)];
  }
  return 0.5 * (B + B.transpose());
}

}  // namespace obsfit
