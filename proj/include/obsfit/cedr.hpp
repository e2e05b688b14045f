// Cross-validating estimation of the dimension range of the hypothesis space.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "obsfit/bspline.hpp"
#include "obsfit/error.hpp"
#include "obsfit/parallel.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

struct GeneralizedEigen {
  Eigen::VectorXd sigma;  // nonincreasing, near-zero values dropped
  Eigen::MatrixXd U;      // columns u_i with U' B U = I
  bool regularized = false;
};

/// A u = sigma B u for symmetric PSD A, B. Eigenvalues below 1e-12 sigma_1 are
/// dropped; a numerically singular B gets 1e-12 trace(B)/n added to its diagonal.
inline GeneralizedEigen generalized_eigen(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  if (A.rows() != A.cols() || B.rows() != B.cols() || A.rows() != B.rows())
    throw ValidationError("generalized eigenproblem needs square matrices of equal size");
  const Eigen::Index n = A.rows();
  GeneralizedEigen out;
  Eigen::MatrixXd Bs = 0.5 * (B + B.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> bes(Bs, Eigen::EigenvaluesOnly);
  const double bmax = bes.eigenvalues().cwiseAbs().maxCoeff();
  if (!(bes.eigenvalues().minCoeff() > 1e-14 * bmax)) {
    const double shift = bmax > 0.0 ? 1e-12 * Bs.trace() / static_cast<double>(n) : 1e-12;
    Bs.diagonal().array() += shift > 0.0 ? shift : 1e-12;
    out.regularized = true;
  }
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(0.5 * (A + A.transpose()), Bs);
  if (ges.info() != Eigen::Success) throw NumericalError("generalized eigen-solve failed");
  const Eigen::VectorXd& ev = ges.eigenvalues();  // ascending
  const double top = ev(n - 1);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (top > 0.0 && ev(i) >= 1e-12 * top) keep.push_back(i);
  out.sigma.resize(static_cast<Eigen::Index>(keep.size()));
  out.U.resize(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.sigma(static_cast<Eigen::Index>(k)) = ev(keep[k]);
    out.U.col(static_cast<Eigen::Index>(k)) = ges.eigenvectors().col(keep[k]);
  }
  return out;
}

/// Basis means of X' over each half of the paths and the sample Gram matrix
/// B(i,j) = (1/L) sum_{l>=1} E[phi_i phi_j (X_{t_l})], i.e. L2 of the empirical
/// occupation measure.
struct SplitBasisMoments {
  Eigen::MatrixXd U;        // n x (L+1), all paths
  Eigen::MatrixXd U_first;  // paths [0, M/2)
  Eigen::MatrixXd U_second; // paths [M/2, M)
  Eigen::MatrixXd B;        // n x n

  Eigen::MatrixXd normal_matrix() const {
    const auto Ut = U.rightCols(U.cols() - 1);
    return Ut * Ut.transpose() / static_cast<double>(Ut.cols());
  }
};

inline SplitBasisMoments split_basis_moments(const TrajectoryEnsemble& Xprime, const BSplineSpace& space,
                                             int workers = 1) {
  validate(Xprime);
  const int n = space.dimension();
  const int L = Xprime.steps();
  const int w = space.degree() + 1;
  const Eigen::Index M = Xprime.size();
  const Eigen::Index half = M / 2;
  SplitBasisMoments out;
  out.U_first = Eigen::MatrixXd::Zero(n, L + 1);
  out.U_second = Eigen::MatrixXd::Zero(n, L + 1);
  std::vector<Eigen::MatrixXd> grams(static_cast<std::size_t>(L + 1));
  parallel_for(static_cast<std::size_t>(L + 1), workers, [&](std::size_t li) {
    const auto l = static_cast<Eigen::Index>(li);
    LocalBasis lb;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(n), s2 = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd G = l > 0 ? Eigen::MatrixXd::Zero(n, n) : Eigen::MatrixXd();
    for (Eigen::Index m = 0; m < M; ++m) {
      if (!space.eval_local(Xprime.paths(m, l), lb)) continue;
      auto& s = m < half ? s1 : s2;
      for (int a = 0; a < w; ++a) s(lb.first + a) += lb.values[static_cast<std::size_t>(a)];
      if (l == 0) continue;
      for (int b = 0; b < w; ++b)
        for (int a = 0; a < w; ++a)
          G(lb.first + a, lb.first + b) += lb.values[static_cast<std::size_t>(a)] * lb.values[static_cast<std::size_t>(b)];
    }
    out.U_first.col(l) = s1;
    out.U_second.col(l) = s2;
    grams[li] = std::move(G);
  });
  out.U = (out.U_first + out.U_second) / static_cast<double>(M);
  if (half > 0) out.U_first /= static_cast<double>(half);
  out.U_second /= static_cast<double>(M - half);
  out.B = Eigen::MatrixXd::Zero(n, n);
  for (int l = 1; l <= L; ++l) out.B += grams[static_cast<std::size_t>(l)];
  out.B /= static_cast<double>(L) * static_cast<double>(M);
  return out;
}

/// b and b' from the first floor(M/2) trajectories and the rest, each with the
/// factor 2/M, against basis means U (n x (L+1)).
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> split_moment_vectors(const TrajectoryEnsemble& Y,
                                                                        const Eigen::MatrixXd& U) {
  validate(Y);
  const Eigen::Index M = Y.size();
  if (M < 2) throw ValidationError("splitting the data needs at least two trajectories");
  const int L = Y.steps();
  if (U.cols() != L + 1) throw ValidationError("basis means do not match the data time grid");
  const Eigen::Index half = M / 2;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(U.rows()), bp = Eigen::VectorXd::Zero(U.rows());
  const double scale = 2.0 / static_cast<double>(M);
  for (int l = 1; l <= L; ++l) {
    const auto y = Y.slice(l);
    b += U.col(l) * (scale * y.head(half).sum());
    bp += U.col(l) * (scale * y.tail(M - half).sum());
  }
  return {b / L, bp / L};
}

/// tau = (1/(L M)) sum_{l>=1, m} Y^2.
inline double cedr_threshold(const TrajectoryEnsemble& Y) {
  validate(Y);
  const int L = Y.steps();
  return Y.paths.rightCols(L).squaredNorm() / (static_cast<double>(L) * static_cast<double>(Y.size()));
}

struct CedrConfig {
  int n_max = 100;
  bool scan_to_cap = false;  // keep going after the first exceedance
  int workers = 1;
  double significance = 1.0; // multiple of the split-sample noise floor
};

struct CedrRecord {
  int n = 0;
  Eigen::VectorXd sigma;
  Eigen::VectorXd ratios;
  double g = 0.0;
  bool regularized = false;
  int rank = 0;               // retained eigenvalues
  int significant_rank = 0;   // eigenvalues above the Monte Carlo noise floor
  double noise_floor = 0.0;
};

struct CedrReport {
  int degree = 0;
  double tau = 0.0;
  std::vector<CedrRecord> records;
  int N = 1;                        // last n before the first exceedance
  std::optional<int> N_max_crossing;// largest scanned n with g(n) <= tau
  std::vector<std::string> warnings;
};

/// One CEDR step for a fixed space.
inline CedrRecord cedr_record(const TrajectoryEnsemble& Xprime, const TrajectoryEnsemble& Y,
                              const BSplineSpace& space, double significance = 1.0, int workers = 1) {
  const auto mom = split_basis_moments(Xprime, space, workers);
  const Eigen::MatrixXd A1 = mom.normal_matrix();
  const auto [b, bp] = split_moment_vectors(Y, mom.U);
  const auto ge = generalized_eigen(A1, mom.B);
  CedrRecord rec;
  rec.n = space.dimension();
  rec.sigma = ge.sigma;
  rec.regularized = ge.regularized;
  rec.rank = static_cast<int>(ge.sigma.size());
  const Eigen::VectorXd proj = ge.U.transpose() * (b - bp);
  rec.ratios = proj.cwiseAbs().cwiseQuotient(ge.sigma);
  rec.g = rec.ratios.squaredNorm();

  // Noise floor: spread of the normal matrix between the two halves of X',
  // measured in the same B-orthonormal coordinates.
  const int L = Xprime.steps();
  const auto Ua = mom.U_first.rightCols(L), Ub = mom.U_second.rightCols(L);
  const Eigen::MatrixXd D = (Ua * Ua.transpose() - Ub * Ub.transpose()) / static_cast<double>(L);
  if (ge.U.cols() > 0) {
    const Eigen::MatrixXd Dp = ge.U.transpose() * D * ge.U;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> des(0.5 * (Dp + Dp.transpose()), Eigen::EigenvaluesOnly);
    rec.noise_floor = 0.5 * des.eigenvalues().cwiseAbs().maxCoeff();
  }
  rec.significant_rank = static_cast<int>((ge.sigma.array() > significance * rec.noise_floor).count());
  return rec;
}

/// Increases n from degree+1 while g(n) <= tau. The support [r_min, r_max]
/// comes from the density estimate.
inline CedrReport dimension_range(const TrajectoryEnsemble& Xprime, const TrajectoryEnsemble& Y, int degree,
                                  double r_min, double r_max, const CedrConfig& cfg = {}) {
  if (Xprime.grid.steps() != Y.grid.steps())
    throw ValidationError("time grid of the data does not match the state ensemble");
  if (cfg.n_max < degree + 1) throw ValidationError("n_max is below the smallest admissible dimension");
  CedrReport rep;
  rep.degree = degree;
  rep.tau = cedr_threshold(Y);
  if (!(rep.tau > 0.0)) rep.warnings.push_back("zero data energy: tau = 0");
  bool exceeded = false;
  for (int n = degree + 1; n <= cfg.n_max; ++n) {
    const BSplineSpace space(degree, n, r_min, r_max);
    auto rec = cedr_record(Xprime, Y, space, cfg.significance, cfg.workers);
    const bool ok = rec.g <= rep.tau;
    rep.records.push_back(std::move(rec));
    if (ok) rep.N_max_crossing = n;
    if (!ok && !exceeded) {
      exceeded = true;
      rep.N = std::max(degree + 1, n - 1);
      if (n == degree + 1)
        rep.warnings.push_back("g exceeds tau at the smallest dimension; N set to " + std::to_string(degree + 1));
      if (!cfg.scan_to_cap) break;
    }
  }
  if (!exceeded) rep.N = cfg.n_max;
  return rep;
}

}  // namespace obsfit
