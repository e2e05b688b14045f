// Observation functions and additive observation noise.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <variant>

#include "obsfit/bspline.hpp"
#include "obsfit/error.hpp"
#include "obsfit/parallel.hpp"
#include "obsfit/state_model.hpp"

namespace obsfit {

enum class BuiltinObservation { kSine, kSineCosine, kArch };

inline std::string to_string(BuiltinObservation b) {
  switch (b) {
    case BuiltinObservation::kSine: return "sine";
    case BuiltinObservation::kSineCosine: return "sine-cosine";
    case BuiltinObservation::kArch: return "arch";
  }
  return "unknown";
}

inline double evaluate_builtin(BuiltinObservation b, double x) noexcept {
  switch (b) {
    case BuiltinObservation::kSine:
      return std::sin(x);
    case BuiltinObservation::kSineCosine:
      return 2.0 * std::sin(x) + std::cos(6.0 * x);
    case BuiltinObservation::kArch: {
      if (x < 0.0 || x > 1.0) return 0.0;
      const double u = 1.0 - x;
      return -2.0 * u * u * u + 1.5 * u + 0.5;
    }
  }
  return 0.0;
}

struct SplineObservation {
  std::shared_ptr<const BSplineSpace> space;
  Eigen::VectorXd coefficients;
};

struct CustomObservation {
  std::string source;
  RealFunction fn;
};

using ObservationFunction = std::variant<BuiltinObservation, SplineObservation, CustomObservation>;

inline ObservationFunction make_spline_observation(const BSplineSpace& space, Eigen::VectorXd c) {
  if (c.size() != space.dimension())
    throw ValidationError("spline coefficients must match the basis dimension");
  return SplineObservation{std::make_shared<const BSplineSpace>(space), std::move(c)};
}

/// f(x). Splines return 0 outside [r_min, r_max] and raise *out_of_support.
inline double evaluate_observation(const ObservationFunction& f, double x,
                                   bool* out_of_support = nullptr) {
  if (out_of_support) *out_of_support = false;
  return std::visit(
      [&](const auto& g) -> double {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, BuiltinObservation>) {
          return evaluate_builtin(g, x);
        } else if constexpr (std::is_same_v<T, SplineObservation>) {
          if (!g.space->contains(x)) {
            if (out_of_support) *out_of_support = true;
            return 0.0;
          }
          return g.space->evaluate(g.coefficients, x);
        } else {
          return g.fn(x);
        }
      },
      f);
}

inline RealFunction as_function(const ObservationFunction& f) {
  return [f](double x) { return evaluate_observation(f, x); };
}

struct NoNoise {};

struct IidGaussianNoise {
  double variance = 0.0;
};

/// Covariance C(s, t) of a stationary noise process; used only by the loss.
struct StationaryCovarianceNoise {
  std::function<double(double, double)> covariance;
};

using NoiseModel = std::variant<NoNoise, IidGaussianNoise, StationaryCovarianceNoise>;

inline double noise_covariance(const NoiseModel& noise, double s, double t) {
  return std::visit(
      [&](const auto& n) -> double {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, NoNoise>) {
          return 0.0;
        } else if constexpr (std::is_same_v<T, IidGaussianNoise>) {
          return s == t ? n.variance : 0.0;
        } else {
          return n.covariance(s, t);
        }
      },
      noise);
}

inline bool has_noise(const NoiseModel& noise) { return !std::holds_alternative<NoNoise>(noise); }

inline void validate(const NoiseModel& noise) {
  if (const auto* g = std::get_if<IidGaussianNoise>(&noise)) {
    if (!(g->variance >= 0.0)) throw ValidationError("noise variance must be nonnegative");
  } else if (const auto* c = std::get_if<StationaryCovarianceNoise>(&noise)) {
    if (!c->covariance) throw ValidationError("stationary noise needs a covariance function");
  }
}

/// Y = f(X) + eta, with eta drawn from its own per-path stream.
inline TrajectoryEnsemble observe_ensemble(const TrajectoryEnsemble& X,
                                           const ObservationFunction& f, const NoiseModel& noise,
                                           std::uint64_t seed, int workers = 1,
                                           Stream stream = Stream::kNoise) {
  validate(X);
  validate(noise);
  if (std::holds_alternative<StationaryCovarianceNoise>(noise))
    throw ValidationError("only iid Gaussian observation noise can be sampled");
  const double sd =
      std::holds_alternative<IidGaussianNoise>(noise) ? std::sqrt(std::get<IidGaussianNoise>(noise).variance) : 0.0;

  TrajectoryEnsemble Y;
  Y.grid = X.grid;
  Y.seed = seed;
  Y.paths.resize(X.paths.rows(), X.paths.cols());
  const Eigen::Index cols = X.paths.cols();
  parallel_for(static_cast<std::size_t>(X.size()), workers, [&](std::size_t m) {
    const auto row = static_cast<Eigen::Index>(m);
    for (Eigen::Index l = 0; l < cols; ++l) Y.paths(row, l) = evaluate_observation(f, X.paths(row, l));
    if (sd > 0.0) {
      auto rng = stream_engine(seed, stream, m);
      std::normal_distribution<double> normal(0.0, sd);
      for (Eigen::Index l = 0; l < cols; ++l) Y.paths(row, l) += normal(rng);
    }
  });
  return Y;
}

}  // namespace obsfit
