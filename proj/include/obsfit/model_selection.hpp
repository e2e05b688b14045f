// Quantile Wasserstein-2 scoring and the degree/dimension sweep.
#pragma once

#include <Eigen/Dense>
#include <boost/sort/spreadsort/spreadsort.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "obsfit/bspline.hpp"
#include "obsfit/cedr.hpp"
#include "obsfit/density.hpp"
#include "obsfit/error.hpp"
#include "obsfit/loss.hpp"
#include "obsfit/moments.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/optimizer.hpp"
#include "obsfit/parallel.hpp"
#include "obsfit/state_model.hpp"
#include "obsfit/util.hpp"

namespace obsfit {

inline constexpr int kDefaultQuantiles = 1000;

/// Empirical quantiles F^{-1}((j - 1/2)/Q), j = 1..Q, with
/// F^{-1}(q) = sorted[ceil(q N) - 1]. Sorts `v` in place.
inline Eigen::VectorXd midpoint_quantiles(std::vector<double>& v, int Q = kDefaultQuantiles) {
  if (v.empty()) throw ValidationError("quantiles of an empty sample");
  if (Q < 1) throw ValidationError("quantile grid needs Q >= 1");
  boost::sort::spreadsort::spreadsort(v.begin(), v.end());
  const auto N = static_cast<double>(v.size());
  Eigen::VectorXd q(Q);
  for (int j = 1; j <= Q; ++j) {
    const double level = (j - 0.5) / Q;
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(level * N)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(v.size()) - 1);
    q(j - 1) = v[static_cast<std::size_t>(idx)];
  }
  return q;
}

/// Root mean squared difference of the two quantile functions on Q midpoints.
inline double wasserstein2(std::vector<double> a, std::vector<double> b, int Q = kDefaultQuantiles) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein2 needs nonempty samples");
  const Eigen::VectorXd qa = midpoint_quantiles(a, Q);
  const Eigen::VectorXd qb = midpoint_quantiles(b, Q);
  return std::sqrt((qa - qb).squaredNorm() / Q);
}

struct W2Score {
  Eigen::VectorXd per_time;  // W2 at t_1..t_L
  double score = 0.0;        // sqrt of the time mean of squared W2
};

/// Caches the data quantiles at t_1..t_L so many predictors can be scored.
class W2Scorer {
 public:
  explicit W2Scorer(const TrajectoryEnsemble& Y, int Q = kDefaultQuantiles) : Q_(Q), L_(Y.steps()) {
    validate(Y);
    data_q_.resize(Q, L_);
    std::vector<double> buf;
    for (int l = 1; l <= L_; ++l) {
      const auto y = Y.slice(l);
      buf.assign(y.data(), y.data() + y.size());
      data_q_.col(l - 1) = midpoint_quantiles(buf, Q);
    }
  }

  int steps() const noexcept { return L_; }

  /// Scores predictions pred(m, l) = f_hat(X_{t_l}^{(m)}) (+ noise).
  W2Score score(const Eigen::MatrixXd& predictions) const {
    if (predictions.cols() != L_ + 1) throw ValidationError("prediction grid does not match the data");
    W2Score s;
    s.per_time.resize(L_);
    std::vector<double> buf;
    for (int l = 1; l <= L_; ++l) {
      const auto p = predictions.col(l);
      buf.assign(p.data(), p.data() + p.size());
      const Eigen::VectorXd q = midpoint_quantiles(buf, Q_);
      s.per_time(l - 1) = std::sqrt((q - data_q_.col(l - 1)).squaredNorm() / Q_);
    }
    s.score = std::sqrt(s.per_time.squaredNorm() / L_);
    return s;
  }

  /// Scores f_hat on a state ensemble, adding iid prediction noise when present.
  W2Score score(const ObservationFunction& f_hat, const TrajectoryEnsemble& X, const NoiseModel& noise,
                std::uint64_t noise_seed) const {
    if (X.steps() != L_) throw ValidationError("time grid of the state ensemble does not match the data");
    return score(observe_ensemble(X, f_hat, noise, noise_seed, 1, Stream::kPredictionNoise).paths);
  }

 private:
  int Q_;
  int L_;
  Eigen::MatrixXd data_q_;  // Q x L
};

inline W2Score w2_time_average(const TrajectoryEnsemble& Y, const ObservationFunction& f_hat,
                               const TrajectoryEnsemble& X, const NoiseModel& noise = NoNoise{},
                               std::uint64_t noise_seed = 0, int Q = kDefaultQuantiles) {
  return W2Scorer(Y, Q).score(f_hat, X, noise, noise_seed);
}

/// ||f_hat - f||_{L2(rho)} / ||f||_{L2(rho)} on the density grid.
inline double relative_l2_error(const ObservationFunction& f_hat, const ObservationFunction& f_true,
                                const DensityGrid& d) {
  const auto a = on_grid(d, [&](double x) { return evaluate_observation(f_hat, x); });
  const auto b = on_grid(d, [&](double x) { return evaluate_observation(f_true, x); });
  const double denom = l2rho_norm(b, d);
  if (!(denom > 0.0)) throw DomainError("relative error against a zero function");
  return l2rho_distance(a, b, d) / denom;
}

struct EstimatorResult {
  Eigen::VectorXd c_hat;
  int degree = 0;
  int n = 0;
  std::shared_ptr<const BSplineSpace> space;
  LossEvaluation loss;
  W2Score w2_train;
  W2Score w2_test;
  std::string start_label;
  bool converged = false;
  int iterations = 0;
  std::vector<std::string> warnings;

  ObservationFunction function() const { return SplineObservation{space, c_hat}; }
};

struct SweepRow {
  int degree = 0;
  int n = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double w2_train = std::numeric_limits<double>::quiet_NaN();
  double w2_test = std::numeric_limits<double>::quiet_NaN();
  double runtime = 0.0;  // seconds
  std::string error;     // nonempty when the cell failed
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<CedrReport> cedr;
  std::size_t selected = 0;
  EstimatorResult estimator;
  std::vector<std::optional<EstimatorResult>> fits;  // per row, empty when the cell failed
  DensityGrid density;
  std::vector<std::string> warnings;
};

struct EstimatorConfig {
  Eigen::Index state_samples = 100000;  // M'
  std::uint64_t state_seed = 1;
  std::uint64_t fresh_seed = 2;
  std::uint64_t prediction_noise_seed = 3;
  int density_cells = 200;
  int quantiles = kDefaultQuantiles;
  CedrConfig cedr;
  OptimizerConfig optimizer;
  int workers = 1;
  bool noise_correction = true;
  bool use_e4 = false;
  /// Fixed dimension per degree (skips CEDR for that degree when set).
  std::vector<std::pair<int, int>> fixed_dimensions;
  /// Smallest dimension tried per degree is max(degree + 1, min_dimension).
  int min_dimension = 1;
  std::optional<LossWeights> weights;  // replaces the data-driven weights
  std::string cache_dir;
};

/// Everything shared by the cells of a sweep.
struct SweepContext {
  StateModelSpec model;
  TrajectoryEnsemble Xprime;
  TrajectoryEnsemble Xfresh;
  DensityGrid density;
  std::unique_ptr<W2Scorer> scorer;
};

inline SweepContext make_sweep_context(const StateModelSpec& model, const InitialDistribution& init,
                                       const TrajectoryEnsemble& Y, const EstimatorConfig& cfg) {
  SweepContext ctx;
  ctx.model = model;
  ctx.Xprime = simulate_ensemble(model, init, Y.grid, cfg.state_samples, cfg.state_seed, cfg.workers);
  ctx.Xfresh = simulate_ensemble(model, init, Y.grid, Y.size(), cfg.fresh_seed, cfg.workers);
  ctx.density = estimate_density(ctx.Xprime, cfg.density_cells);
  ctx.scorer = std::make_unique<W2Scorer>(Y, cfg.quantiles);
  return ctx;
}

namespace detail {

inline MomentSystem cached_state_moments(const SweepContext& ctx, const BSplineSpace& space,
                                         const EstimatorConfig& cfg, int workers) {
  if (cfg.cache_dir.empty()) return assemble_state_moments(ctx.Xprime, space, workers);
  const std::string key =
      state_cache_key(ctx.model.name, space, ctx.Xprime.size(), ctx.Xprime.seed, ctx.Xprime.grid);
  const auto path = std::filesystem::path(cfg.cache_dir) / ("moments-" + hex64(fnv1a64(key)) + ".bin");
  if (auto hit = load_state_moments(path.string(), key)) return std::move(*hit);
  auto sys = assemble_state_moments(ctx.Xprime, space, workers);
  std::filesystem::create_directories(cfg.cache_dir);
  save_state_moments(path.string(), key, sys);
  return sys;
}

}  // namespace detail

/// Fits one hypothesis space and scores it on training and fresh state ensembles.
inline EstimatorResult fit_space(const SweepContext& ctx, const TrajectoryEnsemble& Y, const NoiseModel& noise,
                                 int degree, int n, const EstimatorConfig& cfg, int workers = 1) {
  EstimatorResult est;
  est.degree = degree;
  est.n = n;
  est.space = std::make_shared<const BSplineSpace>(
      build_hypothesis_space(degree, n, ctx.density.r_min, ctx.density.r_max, Y));
  const MomentSystem state = detail::cached_state_moments(ctx, *est.space, cfg, workers);
  MomentSystem sys = assemble_obs_moments(Y, state, cfg.noise_correction ? noise : NoiseModel{NoNoise{}});
  if (cfg.use_e4) {
    if (degree >= 2)
      assemble_e4_terms(sys, ctx.Xprime, Y, *est.space, ctx.model);
    else
      sys.warnings.push_back("Ito increment term skipped for degree " + std::to_string(degree));
  }
  if (cfg.weights) sys.weights = *cfg.weights;
  OptimizerConfig ocfg = cfg.optimizer;
  ocfg.workers = workers;
  const auto res = minimize(sys, *est.space, ocfg);
  est.c_hat = res.c_hat;
  est.loss = res.loss;
  est.start_label = res.start_label;
  est.converged = res.converged;
  est.iterations = res.iterations;
  est.warnings = sys.warnings;
  const auto f = est.function();
  est.w2_train = ctx.scorer->score(f, ctx.Xprime, noise, cfg.prediction_noise_seed);
  est.w2_test = ctx.scorer->score(f, ctx.Xfresh, noise, cfg.prediction_noise_seed);
  return est;
}

/// Density and support, CEDR per degree, then every (degree, n) cell is fit
/// and the one with the smallest fresh-ensemble W2 score is returned.
inline SweepResult run_estimator(const StateModelSpec& model, const InitialDistribution& init,
                                  const TrajectoryEnsemble& Y, const std::vector<int>& degrees,
                                  const NoiseModel& noise, const EstimatorConfig& cfg,
                                  bool record_runtime = false) {
  validate(Y);
  validate(noise);
  if (degrees.empty()) throw ValidationError("no spline degrees to sweep");
  SweepContext ctx = make_sweep_context(model, init, Y, cfg);
  SweepResult out;

  std::vector<std::pair<int, int>> cells;
  for (int p : degrees) {
    int N = -1;
    for (const auto& [deg, dim] : cfg.fixed_dimensions)
      if (deg == p) N = dim;
    int lo = std::max(p + 1, cfg.min_dimension);
    if (N < 0) {
      auto rep = dimension_range(ctx.Xprime, Y, p, ctx.density.r_min, ctx.density.r_max, cfg.cedr);
      N = rep.N;
      for (const auto& w : rep.warnings) out.warnings.push_back("degree " + std::to_string(p) + ": " + w);
      out.cedr.push_back(std::move(rep));
    } else {
      lo = N;
    }
    for (int n = lo; n <= N; ++n) cells.emplace_back(p, n);
  }
  if (cells.empty()) throw ValidationError("sweep has no admissible (degree, n) cells");

  // Cells run as independent jobs; with several cells each job is single-threaded.
  const int inner = cells.size() >= static_cast<std::size_t>(cfg.workers) ? 1 : cfg.workers;
  std::vector<std::optional<EstimatorResult>> fits(cells.size());
  out.rows.resize(cells.size());
  parallel_for(cells.size(), cfg.workers, [&](std::size_t i) {
    auto& row = out.rows[i];
    row.degree = cells[i].first;
    row.n = cells[i].second;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fits[i] = fit_space(ctx, Y, noise, row.degree, row.n, cfg, inner);
      row.loss = fits[i]->loss.total;
      row.w2_train = fits[i]->w2_train.score;
      row.w2_test = fits[i]->w2_test.score;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (record_runtime)
      row.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!fits[i]) {
      out.warnings.push_back("cell (" + std::to_string(cells[i].first) + ", " + std::to_string(cells[i].second) +
                             ") failed: " + out.rows[i].error);
      continue;
    }
    if (out.rows[i].w2_test < best) {
      best = out.rows[i].w2_test;
      out.selected = i;
      any = true;
    }
  }
  if (!any) throw NumericalError("every sweep cell failed");
  out.estimator = *fits[out.selected];
  out.fits = std::move(fits);
  out.density = std::move(ctx.density);
  return out;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r, bool with_runtime) {
  os << "degree,n,loss,w2_train,w2_test,runtime\n";
  for (const auto& row : r.rows) {
    os << row.degree << ',' << row.n << ',' << fmt_double(row.loss) << ',' << fmt_double(row.w2_train) << ','
       << fmt_double(row.w2_test) << ',' << (with_runtime ? fmt_double(row.runtime) : std::string("NA")) << '\n';
  }
}

inline void write_cedr_csv(std::ostream& os, const CedrReport& rep) {
  os << "degree,n,g,tau,rank,significant_rank,regularized\n";
  for (const auto& rec : rep.records)
    os << rep.degree << ',' << rec.n << ',' << fmt_double(rec.g) << ',' << fmt_double(rep.tau) << ',' << rec.rank
       << ',' << rec.significant_rank << ',' << (rec.regularized ? 1 : 0) << '\n';
}

}  // namespace obsfit
