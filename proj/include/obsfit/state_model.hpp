// Scalar SDE state models and Euler-Maruyama ensemble simulation.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "obsfit/error.hpp"
#include "obsfit/parallel.hpp"

namespace obsfit {

using RealFunction = std::function<double(double)>;

/// dX = drift(X) dt + diffusion(X) dB
struct StateModelSpec {
  std::string name;
  RealFunction drift;
  RealFunction diffusion;
};

namespace models {

inline StateModelSpec brownian() {
  return {"brownian", [](double) { return 0.0; }, [](double) { return 1.0; }};
}

/// dX = -theta X dt + dB
inline StateModelSpec ornstein_uhlenbeck(double theta = 1.0) {
  if (!(theta > 0.0)) throw ValidationError("OU rate theta must be positive");
  return {"ou", [theta](double x) { return -theta * x; }, [](double) { return 1.0; }};
}

/// dX = (X - X^3) dt + dB
inline StateModelSpec double_well() {
  return {"double-well", [](double x) { return x - x * x * x; },
          [](double) { return 1.0; }};
}

}  // namespace models

struct PointMass {
  double x0 = 0.0;
};

struct UniformInitial {
  double lo = 0.0;
  double hi = 1.0;
};

struct MixtureComponent {
  double weight;
  double mean;
  double variance;
};

struct GaussianMixture {
  std::vector<MixtureComponent> components;
};

using InitialDistribution = std::variant<PointMass, UniformInitial, GaussianMixture>;

inline void validate(const InitialDistribution& init) {
  if (const auto* u = std::get_if<UniformInitial>(&init)) {
    if (!(u->lo < u->hi)) throw ValidationError("uniform initial law needs lo < hi");
  } else if (const auto* g = std::get_if<GaussianMixture>(&init)) {
    if (g->components.empty()) throw ValidationError("gaussian mixture has no components");
    double total = 0.0;
    for (const auto& c : g->components) {
      if (!(c.weight > 0.0)) throw ValidationError("mixture weights must be positive");
      if (!(c.variance > 0.0)) throw ValidationError("mixture variances must be positive");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("mixture weights must sum to 1");
  } else if (const auto* p = std::get_if<PointMass>(&init)) {
    if (!std::isfinite(p->x0)) throw ValidationError("point mass location must be finite");
  }
}

/// Mean and variance of the initial law.
inline std::pair<double, double> initial_moments(const InitialDistribution& init) {
  return std::visit(
      [](const auto& d) -> std::pair<double, double> {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, PointMass>) {
          return {d.x0, 0.0};
        } else if constexpr (std::is_same_v<T, UniformInitial>) {
          return {0.5 * (d.lo + d.hi), (d.hi - d.lo) * (d.hi - d.lo) / 12.0};
        } else {
          double mean = 0.0, second = 0.0;
          for (const auto& c : d.components) {
            mean += c.weight * c.mean;
            second += c.weight * (c.variance + c.mean * c.mean);
          }
          return {mean, second - mean * mean};
        }
      },
      init);
}

/// Independent random streams. Each (seed, stream, index) triple owns its own
/// engine, so path m of an ensemble never depends on M or on the thread count.
enum class Stream : std::uint32_t {
  kState = 1,
  kNoise = 2,
  kStarts = 3,
  kPredictionNoise = 4,
};

inline std::mt19937_64 stream_engine(std::uint64_t seed, Stream stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

/// Derives a child seed for a named role from a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint32_t role) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    0x9e3779b9u, role};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

template <typename Engine>
double sample_initial(const InitialDistribution& init, Engine& rng) {
  return std::visit(
      [&rng](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, PointMass>) {
          return d.x0;
        } else if constexpr (std::is_same_v<T, UniformInitial>) {
          return std::uniform_real_distribution<double>(d.lo, d.hi)(rng);
        } else {
          double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
          std::size_t k = 0;
          while (k + 1 < d.components.size() && u >= d.components[k].weight) {
            u -= d.components[k].weight;
            ++k;
          }
          const auto& c = d.components[k];
          return std::normal_distribution<double>(c.mean, std::sqrt(c.variance))(rng);
        }
      },
      init);
}

/// Uniform observation grid t_l = l * dt, l = 0..steps.
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double dt, int steps) : dt_(dt), steps_(steps) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("time step must be positive");
    if (steps < 1) throw ValidationError("time grid needs at least one step");
  }

  double dt() const noexcept { return dt_; }
  int steps() const noexcept { return steps_; }
  double time(int l) const noexcept { return l * dt_; }
  double horizon() const noexcept { return steps_ * dt_; }

  std::vector<double> times() const {
    std::vector<double> t(static_cast<std::size_t>(steps_) + 1);
    for (int l = 0; l <= steps_; ++l) t[static_cast<std::size_t>(l)] = time(l);
    return t;
  }

  bool operator==(const TimeGrid& o) const noexcept { return dt_ == o.dt_ && steps_ == o.steps_; }

 private:
  double dt_ = 0.01;
  int steps_ = 100;
};

/// M sample paths on a shared grid. Storage is column-major M x (L+1), so the
/// slice at a fixed time is contiguous.
struct TrajectoryEnsemble {
  TimeGrid grid;
  Eigen::MatrixXd paths;
  std::uint64_t seed = 0;

  Eigen::Index size() const noexcept { return paths.rows(); }
  int steps() const noexcept { return grid.steps(); }
  auto slice(int l) const { return paths.col(l); }
};

inline void validate(const TrajectoryEnsemble& e) {
  if (e.paths.rows() < 1) throw ValidationError("ensemble has no paths");
  if (e.paths.cols() != e.grid.steps() + 1)
    throw ValidationError("ensemble width does not match the time grid");
  if (!e.paths.allFinite()) throw ValidationError("ensemble contains non-finite entries");
}

inline constexpr double kDivergenceBound = 1e8;

/// Euler-Maruyama: x <- x + a(x) dt + b(x) sqrt(dt) xi, one engine per path.
inline TrajectoryEnsemble simulate_ensemble(const StateModelSpec& spec,
                                            const InitialDistribution& init, const TimeGrid& grid,
                                            Eigen::Index M, std::uint64_t seed, int workers = 1) {
  if (M < 1) throw ValidationError("ensemble size must be at least 1");
  if (!spec.drift || !spec.diffusion) throw ValidationError("state model is missing coefficients");
  validate(init);

  TrajectoryEnsemble out;
  out.grid = grid;
  out.seed = seed;
  out.paths.resize(M, grid.steps() + 1);
  const double dt = grid.dt();
  const double sqdt = std::sqrt(dt);
  const int L = grid.steps();

  parallel_for(static_cast<std::size_t>(M), workers, [&](std::size_t m) {
    auto rng = stream_engine(seed, Stream::kState, m);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto row = static_cast<Eigen::Index>(m);
    double x = sample_initial(init, rng);
    out.paths(row, 0) = x;
    for (int l = 0; l < L; ++l) {
      x += spec.drift(x) * dt + spec.diffusion(x) * sqdt * normal(rng);
      if (!std::isfinite(x) || std::abs(x) > kDivergenceBound) {
        throw SimulationDiverged("simulation diverged on path " + std::to_string(m) +
                                     " at step " + std::to_string(l + 1),
                                 m, static_cast<std::size_t>(l + 1));
      }
      out.paths(row, l + 1) = x;
    }
  });
  return out;
}

}  // namespace obsfit
