// Identifiability kernels K1, K4, K and the spectrum of the integral operator L_K1.
#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/expint.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "obsfit/density.hpp"
#include "obsfit/error.hpp"
#include "obsfit/parallel.hpp"

namespace obsfit {

/// Gamma(s, x) = int_x^inf t^{s-1} e^{-t} dt for any real s and x > 0
/// (x = 0 allowed when s > 0).
inline double upper_incomplete_gamma(double s, double x) {
  if (!std::isfinite(s) || !std::isfinite(x)) throw DomainError("incomplete gamma needs finite arguments");
  if (x < 0.0) throw DomainError("incomplete gamma needs x >= 0");
  if (x == 0.0) {
    if (s <= 0.0) throw DomainError("Gamma(s, 0) diverges for s <= 0");
    return boost::math::tgamma(s);
  }
  if (s > 0.0) return boost::math::tgamma(s, x);
  if (s == 0.0) return boost::math::expint(1, x);
  // Gamma(s, x) = (Gamma(s+1, x) - x^s e^{-x}) / s
  return (upper_incomplete_gamma(s + 1.0, x) - std::pow(x, s) * std::exp(-x)) / s;
}

/// Gaussian transition family shared by Brownian motion and OU started from a
/// point mass or a Gaussian: X_t ~ N(mu_t, var_t).
class GaussianDensityFamily {
 public:
  enum class Kind { kBrownian, kOU };

  static GaussianDensityFamily brownian(double x0, double var0 = 0.0) { return {Kind::kBrownian, 0.0, x0, var0}; }
  /// dX = -theta X dt + dB.
  static GaussianDensityFamily ou(double theta, double x0, double var0 = 0.0) {
    if (!(theta > 0.0)) throw ValidationError("OU rate theta must be positive");
    return {Kind::kOU, theta, x0, var0};
  }
  static GaussianDensityFamily ou_stationary(double theta) { return ou(theta, 0.0, 0.5 / theta); }

  Kind kind() const noexcept { return kind_; }
  double theta() const noexcept { return theta_; }

  double mean(double t) const noexcept { return kind_ == Kind::kOU ? std::exp(-theta_ * t) * x0_ : x0_; }

  double variance(double t) const noexcept {
    if (kind_ == Kind::kBrownian) return var0_ + t;
    const double e = std::exp(-2.0 * theta_ * t);
    return e * var0_ + (1.0 - e) / (2.0 * theta_);
  }

  double density(double t, double x) const {
    const double v = variance(t);
    if (!(v > 0.0)) throw DomainError("density of a point mass at t = 0");
    const double z = x - mean(t);
    return std::exp(-0.5 * z * z / v) / std::sqrt(2.0 * std::numbers::pi * v);
  }

  /// phi2 with L* p_t = phi2 p_t, L* p = -(a p)' + p''/2.
  double phi2(double t, double x) const {
    const double v = variance(t);
    const double z = x - mean(t);
    const double diffusion = 0.5 * (z * z / (v * v) - 1.0 / v);
    if (kind_ == Kind::kBrownian) return diffusion;
    return diffusion + theta_ - theta_ * x * z / v;
  }

  double adjoint(double t, double x) const { return phi2(t, x) * density(t, x); }

  double drift(double x) const noexcept { return kind_ == Kind::kOU ? -theta_ * x : 0.0; }

 private:
  GaussianDensityFamily(Kind k, double theta, double x0, double var0) : kind_(k), theta_(theta), x0_(x0), var0_(var0) {
    if (var0 < 0.0) throw ValidationError("initial variance must be nonnegative");
  }
  Kind kind_;
  double theta_;
  double x0_;
  double var0_;
};

/// Closed-form continuous-time rho_bar_T for Brownian motion from x0:
/// d / (2 T sqrt(pi)) Gamma(-1/2, d^2 / 2T), d = |x - x0|.
inline double bm_rho_bar_closed(double x, double x0, double T) {
  const double d = std::abs(x - x0);
  if (d == 0.0) return std::sqrt(2.0 / (std::numbers::pi * T));
  return d / (2.0 * T * std::sqrt(std::numbers::pi)) * upper_incomplete_gamma(-0.5, d * d / (2.0 * T));
}

/// Closed-form continuous-time K1 for Brownian motion from x0:
/// 2T Gamma(0, (d1^2 + d2^2)/2T) / (d1 d2 Gamma(-1/2, d1^2/2T) Gamma(-1/2, d2^2/2T)).
inline double bm_k1_closed(double x, double xp, double x0, double T) {
  const double d1 = std::abs(x - x0), d2 = std::abs(xp - x0);
  if (d1 == 0.0 && d2 == 0.0) throw DomainError("BM kernel diverges at (x0, x0)");
  const double num = upper_incomplete_gamma(0.0, (d1 * d1 + d2 * d2) / (2.0 * T)) / (2.0 * std::numbers::pi * T);
  return num / (bm_rho_bar_closed(x, x0, T) * bm_rho_bar_closed(xp, x0, T));
}

/// Uniform nodes t_j = eps + j (T - eps)/count, j = 1..count, for the
/// continuous-time average.
inline std::vector<double> continuous_time_nodes(double T, int count = 200, double eps = 1e-3) {
  if (!(T > eps) || count < 1) throw ValidationError("time nodes need T > eps and count >= 1");
  std::vector<double> t(static_cast<std::size_t>(count));
  for (int j = 1; j <= count; ++j) t[static_cast<std::size_t>(j - 1)] = eps + j * (T - eps) / count;
  return t;
}

struct KernelGrid {
  Eigen::VectorXd points;
  Eigen::VectorXd rho;  // time-averaged density at the points
  Eigen::MatrixXd K1;
  Eigen::MatrixXd K4;
  Eigen::MatrixXd K;
};

namespace detail {

// P: J x G densities, Q: J x G adjoint terms at the time nodes.
inline KernelGrid assemble_kernels(const Eigen::VectorXd& points, const Eigen::MatrixXd& P, const Eigen::MatrixXd& Q) {
  const auto J = static_cast<double>(P.rows());
  KernelGrid kg;
  kg.points = points;
  kg.rho = P.colwise().mean().transpose();
  const Eigen::Index G = points.size();
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(G);
  for (Eigen::Index g = 0; g < G; ++g)
    if (kg.rho(g) > 0.0) inv(g) = 1.0 / kg.rho(g);
  kg.K1 = inv.asDiagonal() * ((P.transpose() * P) / J) * inv.asDiagonal();
  kg.K4 = inv.asDiagonal() * ((Q.transpose() * Q) / J) * inv.asDiagonal();
  kg.K1 = 0.5 * (kg.K1 + kg.K1.transpose()).eval();
  kg.K4 = 0.5 * (kg.K4 + kg.K4.transpose()).eval();
  kg.K = kg.K1 + kg.K4;
  return kg;
}

}  // namespace detail

/// Kernels from an analytic family, averaged over the given time nodes
/// (t_1..t_L for discrete data, continuous_time_nodes for continuous data).
inline KernelGrid kernel_grids(const GaussianDensityFamily& fam, const std::vector<double>& times,
                               const Eigen::VectorXd& points, int workers = 1) {
  if (times.empty()) throw ValidationError("kernel needs at least one time node");
  const auto J = static_cast<Eigen::Index>(times.size());
  const Eigen::Index G = points.size();
  Eigen::MatrixXd P(J, G), Q(J, G);
  parallel_for(static_cast<std::size_t>(J), workers, [&](std::size_t j) {
    const double t = times[j];
    for (Eigen::Index g = 0; g < G; ++g) {
      const double p = fam.density(t, points(g));
      P(static_cast<Eigen::Index>(j), g) = p;
      Q(static_cast<Eigen::Index>(j), g) = fam.phi2(t, points(g)) * p;
    }
  });
  return detail::assemble_kernels(points, P, Q);
}

/// Kernels from per-time histograms; L* p_{t_l} is replaced by the finite
/// time difference of the histograms (central inside, one-sided at the ends).
inline KernelGrid empirical_kernel_grids(const DensityGrid& d, double dt) {
  if (!(dt > 0.0)) throw ValidationError("time step must be positive");
  const Eigen::MatrixXd& P = d.per_time;
  const Eigen::Index L = P.rows();
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(L, P.cols());
  if (L >= 2) {
    Q.row(0) = (P.row(1) - P.row(0)) / dt;
    Q.row(L - 1) = (P.row(L - 1) - P.row(L - 2)) / dt;
    for (Eigen::Index l = 1; l + 1 < L; ++l) Q.row(l) = (P.row(l + 1) - P.row(l - 1)) / (2.0 * dt);
  }
  return detail::assemble_kernels(d.points, P, Q);
}

/// A DensityGrid whose rho is the time-averaged analytic density on G cells of [lo, hi].
inline DensityGrid analytic_density_grid(const GaussianDensityFamily& fam, const std::vector<double>& times,
                                         double lo, double hi, int cells) {
  if (!(lo < hi) || cells < 1) throw ValidationError("density grid needs lo < hi and cells >= 1");
  DensityGrid d;
  d.r_min = lo;
  d.r_max = hi;
  d.h = (hi - lo) / cells;
  d.points.resize(cells);
  for (int g = 0; g < cells; ++g) d.points(g) = lo + (g + 0.5) * d.h;
  d.per_time.resize(static_cast<Eigen::Index>(times.size()), cells);
  for (std::size_t j = 0; j < times.size(); ++j)
    for (int g = 0; g < cells; ++g) d.per_time(static_cast<Eigen::Index>(j), g) = fam.density(times[j], d.points(g));
  d.rho = d.per_time.colwise().mean().transpose();
  return d;
}

struct KernelSpectrum {
  Eigen::VectorXd lambda;        // nonincreasing
  Eigen::MatrixXd psi;           // G x k, orthonormal in the discrete L2(rho)
  std::vector<std::string> warnings;
};

/// Top eigenpairs of L_K h(x') = int h(x) K(x, x') rho(x) dx, discretized with
/// weights h rho on the grid. Zero-density cells are excluded.
inline KernelSpectrum kernel_eigen(const Eigen::MatrixXd& kernel, const DensityGrid& d, int count) {
  const Eigen::Index G = d.size();
  if (kernel.rows() != G || kernel.cols() != G) throw ValidationError("kernel and density grid differ in size");
  KernelSpectrum out;
  std::vector<Eigen::Index> live;
  for (Eigen::Index g = 0; g < G; ++g)
    if (d.rho(g) > 0.0) live.push_back(g);
  const auto m = static_cast<Eigen::Index>(live.size());
  if (count > m) {
    out.warnings.push_back("requested " + std::to_string(count) + " eigenpairs, grid supports " + std::to_string(m));
    count = static_cast<int>(m);
  }
  Eigen::VectorXd sw(m);
  Eigen::MatrixXd S(m, m);
  for (Eigen::Index i = 0; i < m; ++i) sw(i) = std::sqrt(d.h * d.rho(live[static_cast<std::size_t>(i)]));
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < m; ++i)
      S(i, j) = sw(i) * kernel(live[static_cast<std::size_t>(i)], live[static_cast<std::size_t>(j)]) * sw(j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (S + S.transpose()));
  out.lambda.resize(count);
  out.psi = Eigen::MatrixXd::Zero(G, count);
  for (int k = 0; k < count; ++k) {
    const Eigen::Index src = m - 1 - k;
    out.lambda(k) = es.eigenvalues()(src);
    for (Eigen::Index i = 0; i < m; ++i)
      out.psi(live[static_cast<std::size_t>(i)], k) = es.eigenvectors()(i, src) / sw(i);
  }
  return out;
}

}  // namespace obsfit
