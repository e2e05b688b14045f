// Monte Carlo moment matrices and data moment vectors that define the loss.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "obsfit/bspline.hpp"
#include "obsfit/error.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/parallel.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

struct LossWeights {
  double w1 = 1.0;
  double w2 = 1.0;
  double w3 = 1.0;
  double w4 = 0.0;
};

/// Terms of the optional Ito increment loss.
struct E4Terms {
  Eigen::MatrixXd generator_means;  // n x L: E[L phi_i(X_{t_{l-1}})] dt
  Eigen::VectorXd increment_means;  // L: E[Y_{t_l} - Y_{t_{l-1}}]
};

/// Everything the loss needs, assembled once.
///
/// Per-time matrices are stored as n*n x L stacks (column l-1 holds the
/// column-major A_{k,l}); the stack reinterpreted as n x (n L) lets one GEMV
/// produce every A_{k,l} c at once.
struct MomentSystem {
  int n = 0;
  int L = 0;
  Eigen::Index state_samples = 0;  // M'
  Eigen::MatrixXd basis_means;     // n x (L+1): E[phi_i(X_{t_l})], l = 0..L
  Eigen::MatrixXd A1bar;           // n x n
  Eigen::MatrixXd A2;              // n*n x L
  Eigen::MatrixXd A3;              // n*n x L, symmetrized

  bool has_observations = false;
  Eigen::Index data_samples = 0;   // M
  Eigen::VectorXd y_means;         // L+1: (1/M) sum_m Y_{t_l}
  Eigen::VectorXd b1bar;           // n
  double b1tilde = 0.0;
  Eigen::VectorXd b2;              // L
  Eigen::VectorXd b3;              // L
  Eigen::VectorXd noise_diag;      // L: C(t_l, t_l)
  Eigen::VectorXd noise_off;       // L: C(t_{l-1}, t_l)
  LossWeights weights;
  std::optional<E4Terms> e4;

  std::vector<std::string> warnings;

  Eigen::Map<const Eigen::MatrixXd> a2(int l) const { return {A2.col(l - 1).data(), n, n}; }
  Eigen::Map<const Eigen::MatrixXd> a3(int l) const { return {A3.col(l - 1).data(), n, n}; }
};

namespace detail {

// Basis evaluations of one time slice: first index and p+1 values per path.
struct SliceBasis {
  std::vector<int> first;
  std::vector<double> values;  // M x (p+1), row-major
  int width = 1;

  void evaluate(const BSplineSpace& space, const Eigen::Ref<const Eigen::VectorXd>& x) {
    width = space.degree() + 1;
    const auto M = static_cast<std::size_t>(x.size());
    first.assign(M, -1);
    values.assign(M * static_cast<std::size_t>(width), 0.0);
    LocalBasis lb;
    for (std::size_t m = 0; m < M; ++m) {
      if (!space.eval_local(x(static_cast<Eigen::Index>(m)), lb)) continue;
      first[m] = lb.first;
      for (int k = 0; k < width; ++k) values[m * static_cast<std::size_t>(width) + static_cast<std::size_t>(k)] = lb.values[static_cast<std::size_t>(k)];
    }
  }
};

}  // namespace detail

/// State-side moments from an ensemble independent of the data.
inline MomentSystem assemble_state_moments(const TrajectoryEnsemble& Xprime, const BSplineSpace& space,
                                           int workers = 1) {
  validate(Xprime);
  const int n = space.dimension();
  const int L = Xprime.steps();
  const Eigen::Index M = Xprime.size();
  const int w = space.degree() + 1;

  MomentSystem sys;
  sys.n = n;
  sys.L = L;
  sys.state_samples = M;
  sys.basis_means = Eigen::MatrixXd::Zero(n, L + 1);
  sys.A2 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * n, L);
  sys.A3 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * n, L);
  if (M < 10 * static_cast<Eigen::Index>(n))
    sys.warnings.push_back("under-sampled state moments: M' = " + std::to_string(M) + " < 10 n = " +
                           std::to_string(10 * n));

  const double inv_m = 1.0 / static_cast<double>(M);
  // Contiguous blocks of time slices; each slice is summed over paths in
  // path order, so results do not depend on the block layout.
  const int chunks = std::max(1, std::min(workers, L + 1));
  const int per_chunk = (L + 1 + chunks - 1) / chunks;
  parallel_for(static_cast<std::size_t>(chunks), chunks, [&](std::size_t c) {
    const int begin = static_cast<int>(c) * per_chunk;
    const int end = std::min(L + 1, begin + per_chunk);
    if (begin >= end) return;
    detail::SliceBasis prev, cur;
    if (begin > 0) prev.evaluate(space, Xprime.slice(begin - 1));
    for (int l = begin; l < end; ++l) {
      cur.evaluate(space, Xprime.slice(l));
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
      double* a2 = l >= 1 ? sys.A2.col(l - 1).data() : nullptr;
      double* a3 = l >= 1 ? sys.A3.col(l - 1).data() : nullptr;
      for (Eigen::Index m = 0; m < M; ++m) {
        const auto mu = static_cast<std::size_t>(m);
        const int fc = cur.first[mu];
        if (fc < 0) continue;
        const double* vc = &cur.values[mu * static_cast<std::size_t>(w)];
        for (int a = 0; a < w; ++a) mean(fc + a) += vc[a];
        if (l == 0) continue;
        for (int b = 0; b < w; ++b) {
          double* colp = a2 + static_cast<std::ptrdiff_t>(fc + b) * n + fc;
          for (int a = 0; a < w; ++a) colp[a] += vc[a] * vc[b];
        }
        const int fp = prev.first[mu];
        if (fp < 0) continue;
        const double* vp = &prev.values[mu * static_cast<std::size_t>(w)];
        for (int b = 0; b < w; ++b) {
          double* colp = a3 + static_cast<std::ptrdiff_t>(fc + b) * n + fp;
          for (int a = 0; a < w; ++a) colp[a] += vp[a] * vc[b];
        }
      }
      sys.basis_means.col(l) = mean * inv_m;
      if (l >= 1) {
        Eigen::Map<Eigen::MatrixXd> A2l(a2, n, n);
        Eigen::Map<Eigen::MatrixXd> A3l(a3, n, n);
        A2l *= inv_m;
        const Eigen::MatrixXd raw = A3l * inv_m;
        A3l = 0.5 * (raw + raw.transpose());
      }
      std::swap(prev, cur);
    }
  });

  const auto U = sys.basis_means.rightCols(L);
  sys.A1bar = (U * U.transpose()) / static_cast<double>(L);
  return sys;
}

/// Only the per-time basis means (what the dimension-range search needs).
inline Eigen::MatrixXd basis_means(const TrajectoryEnsemble& Xprime, const BSplineSpace& space,
                                   int workers = 1) {
  validate(Xprime);
  const int n = space.dimension();
  const int L = Xprime.steps();
  const Eigen::Index M = Xprime.size();
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(n, L + 1);
  parallel_for(static_cast<std::size_t>(L + 1), workers, [&](std::size_t li) {
    const auto l = static_cast<Eigen::Index>(li);
    LocalBasis lb;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
    for (Eigen::Index m = 0; m < M; ++m) {
      if (!space.eval_local(Xprime.paths(m, l), lb)) continue;
      for (int a = 0; a <= space.degree(); ++a) mean(lb.first + a) += lb.values[static_cast<std::size_t>(a)];
    }
    U.col(l) = mean / static_cast<double>(M);
  });
  return U;
}

inline Eigen::MatrixXd normal_matrix(const Eigen::MatrixXd& basis_means_all) {
  const Eigen::Index L = basis_means_all.cols() - 1;
  const auto U = basis_means_all.rightCols(L);
  return (U * U.transpose()) / static_cast<double>(L);
}

namespace detail {

inline void require_same_grid(const TrajectoryEnsemble& Y, int L) {
  if (Y.steps() != L) throw ValidationError("time grid of the data does not match the state ensemble");
}

inline double weight_from_norm(double L, double M, double norm, const char* which,
                               std::vector<std::string>& warnings) {
  if (norm > 0.0 && std::isfinite(norm)) return L * std::sqrt(M) / norm;
  warnings.push_back(std::string("degenerate moment ") + which + ": weight set to L sqrt(M)");
  return L * std::sqrt(M);
}

}  // namespace detail

/// w_k = L sqrt(M) / ||m_k||, with m_k over l = 0..L-1.
inline LossWeights compute_weights(const TrajectoryEnsemble& Y,
                                   std::vector<std::string>* warnings = nullptr) {
  validate(Y);
  const int L = Y.steps();
  const auto M = static_cast<double>(Y.size());
  Eigen::VectorXd m1(L), m2(L), m3(L);
  for (int l = 0; l < L; ++l) {
    const auto y = Y.slice(l);
    const auto y_next = Y.slice(l + 1);
    m1(l) = y.mean();
    m2(l) = y.squaredNorm() / M;
    m3(l) = y.dot(y_next) / M;
  }
  std::vector<std::string> local;
  auto& sink = warnings ? *warnings : local;
  LossWeights w;
  w.w1 = detail::weight_from_norm(L, M, m1.norm(), "m1", sink);
  w.w2 = detail::weight_from_norm(L, M, m2.norm(), "m2", sink);
  w.w3 = detail::weight_from_norm(L, M, m3.norm(), "m3", sink);
  w.w4 = 0.0;
  return w;
}

/// Completes a state-moment system with data moments, weights and noise
/// corrections C(t_l, t_l), C(t_{l-1}, t_l).
inline MomentSystem assemble_obs_moments(const TrajectoryEnsemble& Y, const MomentSystem& state,
                                         const NoiseModel& noise) {
  validate(Y);
  validate(noise);
  detail::require_same_grid(Y, state.L);
  MomentSystem sys = state;
  const int L = state.L;
  const Eigen::Index M = Y.size();
  const auto Md = static_cast<double>(M);

  sys.has_observations = true;
  sys.data_samples = M;
  sys.y_means.resize(L + 1);
  for (int l = 0; l <= L; ++l) sys.y_means(l) = Y.slice(l).mean();

  sys.b1bar = Eigen::VectorXd::Zero(sys.n);
  sys.b1tilde = 0.0;
  sys.b2.resize(L);
  sys.b3.resize(L);
  sys.noise_diag.resize(L);
  sys.noise_off.resize(L);
  for (int l = 1; l <= L; ++l) {
    sys.b1bar += sys.basis_means.col(l) * sys.y_means(l);
    sys.b1tilde += sys.y_means(l) * sys.y_means(l);
    sys.b2(l - 1) = Y.slice(l).squaredNorm() / Md;
    sys.b3(l - 1) = Y.slice(l - 1).dot(Y.slice(l)) / Md;
    const double t = Y.grid.time(l);
    const double s = Y.grid.time(l - 1);
    sys.noise_diag(l - 1) = noise_covariance(noise, t, t);
    sys.noise_off(l - 1) = noise_covariance(noise, s, t);
  }
  sys.b1bar /= L;
  sys.b1tilde /= L;
  sys.weights = compute_weights(Y, &sys.warnings);
  return sys;
}

/// Adds the Ito increment terms: E[L phi_i(X_{t_{l-1}})] dt with
/// L phi = a phi' + b^2 phi'' / 2, and E[Y_{t_l} - Y_{t_{l-1}}].
inline void assemble_e4_terms(MomentSystem& sys, const TrajectoryEnsemble& Xprime,
                              const TrajectoryEnsemble& Y, const BSplineSpace& space,
                              const StateModelSpec& model) {
  if (space.degree() < 2) throw UnsupportedError("the Ito increment term needs spline degree >= 2");
  if (space.dimension() != sys.n) throw ValidationError("space does not match the moment system");
  detail::require_same_grid(Xprime, sys.L);
  detail::require_same_grid(Y, sys.L);
  const int L = sys.L;
  const int n = sys.n;
  const double dt = Xprime.grid.dt();
  const Eigen::Index M = Xprime.size();

  E4Terms e4;
  e4.generator_means = Eigen::MatrixXd::Zero(n, L);
  e4.increment_means.resize(L);
  LocalBasis d1, d2;
  for (int l = 1; l <= L; ++l) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
    for (Eigen::Index m = 0; m < M; ++m) {
      const double x = Xprime.paths(m, l - 1);
      if (!space.eval_local_derivatives(x, 1, d1)) continue;
      space.eval_local_derivatives(x, 2, d2);
      const double a = model.drift(x);
      const double b = model.diffusion(x);
      for (int k = 0; k <= space.degree(); ++k)
        acc(d1.first + k) += a * d1.values[static_cast<std::size_t>(k)] + 0.5 * b * b * d2.values[static_cast<std::size_t>(k)];
    }
    e4.generator_means.col(l - 1) = acc * (dt / static_cast<double>(M));
    e4.increment_means(l - 1) = (Y.slice(l) - Y.slice(l - 1)).mean();
  }
  sys.weights.w4 = detail::weight_from_norm(L, static_cast<double>(Y.size()),
                                            e4.increment_means.norm(), "increment", sys.warnings);
  sys.e4 = std::move(e4);
}

// ---------------------------------------------------------------------------
// Binary cache for state moments, keyed by (model, space, M', seed).

inline std::string state_cache_key(const std::string& model, const BSplineSpace& space,
                                   Eigen::Index m_prime, std::uint64_t seed, const TimeGrid& grid) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s|deg=%d|n=%d|r=[%.17g,%.17g]|M'=%lld|seed=%llu|dt=%.17g|L=%d",
                model.c_str(), space.degree(), space.dimension(), space.r_min(), space.r_max(),
                static_cast<long long>(m_prime), static_cast<unsigned long long>(seed), grid.dt(),
                grid.steps());
  return buf;
}

namespace detail {

inline constexpr char kCacheMagic[8] = {'O', 'B', 'S', 'F', 'I', 'T', 'M', '1'};

inline void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  const std::int64_t r = m.rows(), c = m.cols();
  out.write(reinterpret_cast<const char*>(&r), sizeof r);
  out.write(reinterpret_cast<const char*>(&c), sizeof c);
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline bool read_matrix(std::ifstream& in, Eigen::MatrixXd& m) {
  std::int64_t r = 0, c = 0;
  in.read(reinterpret_cast<char*>(&r), sizeof r);
  in.read(reinterpret_cast<char*>(&c), sizeof c);
  if (!in || r < 0 || c < 0 || r * c > (std::int64_t{1} << 34)) return false;
  m.resize(r, c);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  return static_cast<bool>(in);
}

}  // namespace detail

inline void save_state_moments(const std::string& path, const std::string& key, const MomentSystem& sys) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open moment cache for writing: " + path);
  out.write(detail::kCacheMagic, sizeof detail::kCacheMagic);
  const std::uint64_t len = key.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(key.data(), static_cast<std::streamsize>(len));
  const std::int64_t header[3] = {sys.n, sys.L, static_cast<std::int64_t>(sys.state_samples)};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  detail::write_matrix(out, sys.basis_means);
  detail::write_matrix(out, sys.A1bar);
  detail::write_matrix(out, sys.A2);
  detail::write_matrix(out, sys.A3);
}

/// Loads cached state moments; nullopt when the file is missing, corrupt or
/// was written under a different key.
inline std::optional<MomentSystem> load_state_moments(const std::string& path, const std::string& key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[sizeof detail::kCacheMagic];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + sizeof magic, detail::kCacheMagic)) return std::nullopt;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > 4096) return std::nullopt;
  std::string stored(len, '\0');
  in.read(stored.data(), static_cast<std::streamsize>(len));
  if (!in || stored != key) return std::nullopt;
  std::int64_t header[3];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (!in) return std::nullopt;
  MomentSystem sys;
  sys.n = static_cast<int>(header[0]);
  sys.L = static_cast<int>(header[1]);
  sys.state_samples = header[2];
  if (!detail::read_matrix(in, sys.basis_means) || !detail::read_matrix(in, sys.A1bar) ||
      !detail::read_matrix(in, sys.A2) || !detail::read_matrix(in, sys.A3))
    return std::nullopt;
  return sys;
}

}  // namespace obsfit
