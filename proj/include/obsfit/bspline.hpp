// Clamped uniform B-spline bases and the bound-constrained hypothesis space.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "obsfit/error.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

inline constexpr int kMaxDegree = 3;

/// Clamped knot sequence on [lo, hi]: each end repeated degree+1 times, with
/// dimension-degree uniform cells in between.
class KnotVector {
 public:
  KnotVector() = default;
  KnotVector(int degree, int dimension, double lo, double hi)
      : degree_(degree), dimension_(dimension), lo_(lo), hi_(hi) {
    if (degree < 0 || degree > kMaxDegree) throw ValidationError("spline degree must be in 0..3");
    if (dimension < degree + 1)
      throw ValidationError("clamped basis of degree " + std::to_string(degree) +
                            " needs dimension >= " + std::to_string(degree + 1));
    if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi))
      throw ValidationError("knot interval must satisfy lo < hi");
    cells_ = dimension - degree;
    width_ = (hi - lo) / cells_;
    knots_.reserve(static_cast<std::size_t>(dimension + degree + 1));
    for (int i = 0; i < degree; ++i) knots_.push_back(lo);
    for (int k = 0; k <= cells_; ++k) knots_.push_back(k == cells_ ? hi : lo + k * width_);
    for (int i = 0; i < degree; ++i) knots_.push_back(hi);
  }

  int degree() const noexcept { return degree_; }
  int cells() const noexcept { return cells_; }
  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  double width() const noexcept { return width_; }
  const std::vector<double>& knots() const noexcept { return knots_; }
  double operator[](std::size_t i) const noexcept { return knots_[i]; }
  std::size_t size() const noexcept { return knots_.size(); }

  /// Index i with knots[i] <= x < knots[i+1] (last cell closed), in [p, n-1].
  int span(double x) const noexcept {
    int k = static_cast<int>(std::floor((x - lo_) / width_));
    k = std::clamp(k, 0, cells_ - 1);
    // Correct floor() rounding so the half-open convention holds exactly at knots.
    while (k + 1 < cells_ && x >= knots_[static_cast<std::size_t>(k + degree_ + 1)]) ++k;
    while (k > 0 && x < knots_[static_cast<std::size_t>(k + degree_)]) --k;
    return k + degree_;
  }

 private:
  int degree_ = 0;
  int dimension_ = 1;
  int cells_ = 1;
  double lo_ = 0.0;
  double hi_ = 1.0;
  double width_ = 1.0;
  std::vector<double> knots_;
};

/// The nonzero basis values at a point: N_{first..first+p, p}(x).
struct LocalBasis {
  int first = 0;
  std::array<double, kMaxDegree + 1> values{};
};

/// B-spline span with pointwise bounds y_min <= f <= y_max at constraint points.
class BSplineSpace {
 public:
  BSplineSpace() = default;
  BSplineSpace(int degree, int dimension, double r_min, double r_max,
               double y_min = -std::numeric_limits<double>::infinity(),
               double y_max = std::numeric_limits<double>::infinity())
      : knots_(degree, dimension, r_min, r_max), dimension_(dimension), y_min_(y_min),
        y_max_(y_max) {
    if (y_min > y_max) throw ValidationError("hypothesis space needs y_min <= y_max");
    const int cells = knots_.cells();
    constraint_points_.reserve(static_cast<std::size_t>(2 * cells + 1));
    for (int k = 0; k < cells; ++k) {
      const double a = knots_[static_cast<std::size_t>(k + degree)];
      const double b = knots_[static_cast<std::size_t>(k + degree + 1)];
      constraint_points_.push_back(a);
      constraint_points_.push_back(0.5 * (a + b));
    }
    constraint_points_.push_back(r_max);
  }

  int degree() const noexcept { return knots_.degree(); }
  int dimension() const noexcept { return dimension_; }
  double r_min() const noexcept { return knots_.lo(); }
  double r_max() const noexcept { return knots_.hi(); }
  double y_min() const noexcept { return y_min_; }
  double y_max() const noexcept { return y_max_; }
  const KnotVector& knots() const noexcept { return knots_; }
  const std::vector<double>& constraint_points() const noexcept { return constraint_points_; }
  bool bounded() const noexcept { return std::isfinite(y_min_) && std::isfinite(y_max_); }

  bool contains(double x) const noexcept { return x >= r_min() && x <= r_max(); }

  /// Nonzero basis values at x by the triangular Cox-de Boor scheme. Returns
  /// false (and leaves `out` zeroed) outside [r_min, r_max].
  bool eval_local(double x, LocalBasis& out) const noexcept {
    out.values.fill(0.0);
    if (!contains(x)) {
      out.first = 0;
      return false;
    }
    const int p = degree();
    const int i = knots_.span(x);
    local_values(i, p, x, out.values.data());
    out.first = i - p;
    return true;
  }

  /// All n basis values at x; zero vector outside the support.
  Eigen::VectorXd eval_basis(double x, bool* out_of_support = nullptr) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dimension_);
    LocalBasis lb;
    const bool inside = eval_local(x, lb);
    if (out_of_support) *out_of_support = !inside;
    if (inside)
      for (int k = 0; k <= degree(); ++k) v(lb.first + k) = lb.values[static_cast<std::size_t>(k)];
    return v;
  }

  /// Exact derivative (order 1 or 2) of every basis function at x.
  Eigen::VectorXd eval_basis_derivatives(double x, int order) const {
    if (order < 1 || order > 2) throw UnsupportedError("derivative order must be 1 or 2");
    if (order > degree())
      throw UnsupportedError("derivative order " + std::to_string(order) +
                             " exceeds spline degree " + std::to_string(degree()));
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dimension_);
    if (!contains(x)) return v;
    const int p = degree();
    const int i = knots_.span(x);
    std::array<double, kMaxDegree + 1> d{};
    local_derivatives(i, p, order, x, d.data());
    for (int k = 0; k <= p; ++k) v(i - p + k) = d[static_cast<std::size_t>(k)];
    return v;
  }

  /// Nonzero derivatives at x (zero outside the support).
  bool eval_local_derivatives(double x, int order, LocalBasis& out) const {
    if (order > degree()) throw UnsupportedError("derivative order exceeds spline degree");
    out.values.fill(0.0);
    if (!contains(x)) return false;
    const int p = degree();
    const int i = knots_.span(x);
    if (order == 0)
      local_values(i, p, x, out.values.data());
    else
      local_derivatives(i, p, order, x, out.values.data());
    out.first = i - p;
    return true;
  }

  /// sum_i c_i phi_i(x); zero outside the support.
  double evaluate(const Eigen::VectorXd& c, double x) const noexcept {
    LocalBasis lb;
    if (!eval_local(x, lb)) return 0.0;
    double s = 0.0;
    for (int k = 0; k <= degree(); ++k) s += c(lb.first + k) * lb.values[static_cast<std::size_t>(k)];
    return s;
  }

  /// Rows are basis values at the constraint points.
  Eigen::MatrixXd constraint_matrix() const {
    Eigen::MatrixXd phi(static_cast<Eigen::Index>(constraint_points_.size()), dimension_);
    for (std::size_t j = 0; j < constraint_points_.size(); ++j)
      phi.row(static_cast<Eigen::Index>(j)) = eval_basis(constraint_points_[j]).transpose();
    return phi;
  }

  /// True when y_min <= f(x_j) <= y_max at every constraint point, up to tol.
  bool feasible(const Eigen::VectorXd& c, double tol = 0.0) const {
    for (double x : constraint_points_) {
      const double f = evaluate(c, x);
      if (f < y_min_ - tol || f > y_max_ + tol) return false;
    }
    return true;
  }

 private:
  // N_{i-q..i, q}(x) on this knot vector (Piegl-Tiller ordering of Cox-de Boor).
  void local_values(int i, int q, double x, double* N) const noexcept {
    std::array<double, kMaxDegree + 1> left{}, right{};
    N[0] = 1.0;
    for (int j = 1; j <= q; ++j) {
      left[static_cast<std::size_t>(j)] = x - knots_[static_cast<std::size_t>(i + 1 - j)];
      right[static_cast<std::size_t>(j)] = knots_[static_cast<std::size_t>(i + j)] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double denom = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
        const double temp = N[r] / denom;
        N[r] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
        saved = left[static_cast<std::size_t>(j - r)] * temp;
      }
      N[j] = saved;
    }
  }

  double inv_gap(int j, int q) const noexcept {
    const double gap = knots_[static_cast<std::size_t>(j + q)] - knots_[static_cast<std::size_t>(j)];
    return gap > 0.0 ? 1.0 / gap : 0.0;
  }

  // k-th derivative of N_{i-q..i, q} via N' = q (N_{j,q-1}/gap_j - N_{j+1,q-1}/gap_{j+1}).
  void local_derivatives(int i, int q, int k, double x, double* out) const noexcept {
    if (k == 0) {
      local_values(i, q, x, out);
      return;
    }
    // lower[t] = d^{k-1} N_{i-q+1+t, q-1}, t = 0..q-1
    std::array<double, kMaxDegree + 1> lower{};
    local_derivatives(i, q - 1, k - 1, x, lower.data());
    for (int t = 0; t <= q; ++t) {
      const int j = i - q + t;
      const double a = t >= 1 ? lower[static_cast<std::size_t>(t - 1)] : 0.0;  // N_{j,q-1}
      const double b = t <= q - 1 ? lower[static_cast<std::size_t>(t)] : 0.0;  // N_{j+1,q-1}
      out[t] = q * (a * inv_gap(j, q) - b * inv_gap(j + 1, q));
    }
  }

  KnotVector knots_;
  int dimension_ = 1;
  double y_min_ = -std::numeric_limits<double>::infinity();
  double y_max_ = std::numeric_limits<double>::infinity();
  std::vector<double> constraint_points_;
};

/// Hypothesis space whose bounds are the global extremes of the observed data.
inline BSplineSpace build_hypothesis_space(int degree, int dimension, double r_min, double r_max,
                                           const TrajectoryEnsemble& Y) {
  if (dimension < 1) throw ValidationError("dimension must be at least 1");
  validate(Y);
  return BSplineSpace(degree, dimension, r_min, r_max, Y.paths.minCoeff(), Y.paths.maxCoeff());
}

}  // namespace obsfit
