// Config-driven experiments and their on-disk artifacts.
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "obsfit/cedr.hpp"
#include "obsfit/config.hpp"
#include "obsfit/density.hpp"
#include "obsfit/loss.hpp"
#include "obsfit/model_selection.hpp"
#include "obsfit/moments.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/optimizer.hpp"
#include "obsfit/parallel.hpp"
#include "obsfit/rkhs.hpp"
#include "obsfit/state_model.hpp"
#include "obsfit/util.hpp"

namespace obsfit {

using Json = nlohmann::ordered_json;

/// A named result table. Cells are JSON scalars so the same rows serialize to
/// CSV or JSON.
struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Json>> rows;

  void add(std::vector<Json> row) {
    if (row.size() != columns.size()) throw ValidationError("row width does not match table " + name);
    rows.push_back(std::move(row));
  }
};

namespace detail {

inline std::string csv_cell(const Json& v) {
  if (v.is_null()) return "NA";
  if (v.is_number_float()) return fmt_double(v.get<double>());
  if (v.is_number() || v.is_boolean()) return v.dump();
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

inline Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace detail

inline Json seeds_json(const SeedConfig& s) {
  return Json{{"master", s.master},          {"data", s.data_seed()},     {"noise", s.noise_seed()},
              {"state", s.state_seed()},     {"fresh", s.fresh_seed()},   {"prediction", s.prediction_seed()},
              {"starts", s.starts_seed()}};
}

/// Writes tables and the run manifest into the output directory. Every
/// artifact carries the config hash and the seeds.
class Artifacts {
 public:
  Artifacts(const ExperimentConfig& cfg, std::string command, bool timing = false)
      : dir_(cfg.out_dir), format_(cfg.format), hash_(cfg.hash()), seeds_(seeds_json(cfg.seeds)), timing_(timing) {
    std::filesystem::create_directories(dir_);
    manifest_["command"] = std::move(command);
    manifest_["config"] = cfg.source_name;
    manifest_["config_hash"] = hash_;
    manifest_["seeds"] = seeds_;
    manifest_["status"] = "running";
  }

  Json& manifest() noexcept { return manifest_; }
  bool timing() const noexcept { return timing_; }
  const std::vector<std::string>& files() const noexcept { return files_; }

  void write(const Table& t) {
    const auto path = std::filesystem::path(dir_) / (t.name + (format_ == "json" ? ".json" : ".csv"));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    if (format_ == "json") {
      Json j;
      j["config_hash"] = hash_;
      j["seeds"] = seeds_;
      j["columns"] = t.columns;
      j["rows"] = Json::array();
      for (const auto& r : t.rows) j["rows"].push_back(r);
      out << j.dump(1) << '\n';
    } else {
      out << "# config_hash=" << hash_;
      for (const auto& [k, v] : seeds_.items()) out << ' ' << k << '=' << v.dump();
      out << '\n';
      for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "," : "") << t.columns[c];
      out << '\n';
      for (const auto& r : t.rows) {
        for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << detail::csv_cell(r[c]);
        out << '\n';
      }
    }
    files_.push_back(path.filename().string());
  }

  /// Writes manifest.json; `error` marks a failed run.
  void finish(const std::string& error = {}) {
    manifest_["status"] = error.empty() ? "ok" : "error";
    if (!error.empty()) manifest_["error"] = error;
    manifest_["files"] = files_;
    std::ofstream out(std::filesystem::path(dir_) / "manifest.json", std::ios::binary);
    out << manifest_.dump(2) << '\n';
  }

 private:
  std::string dir_;
  std::string format_;
  std::string hash_;
  Json seeds_;
  bool timing_;
  Json manifest_;
  std::vector<std::string> files_;
};

// --- Shared setup -------------------------------------------------------------

struct Problem {
  StateModelSpec model;
  InitialDistribution init;
  TimeGrid grid;
  ObservationFunction truth;
  NoiseModel noise;
};

inline Problem make_problem(const ExperimentConfig& cfg) {
  return {make_model(cfg.model), make_initial(cfg.initial, cfg.model), TimeGrid(cfg.dt, cfg.steps),
          make_observation(cfg.observation), make_noise(cfg.noise)};
}

inline EstimatorConfig make_estimator_config(const ExperimentConfig& cfg) {
  EstimatorConfig a;
  a.state_samples = cfg.state_samples;
  a.state_seed = cfg.seeds.state_seed();
  a.fresh_seed = cfg.seeds.fresh_seed();
  a.prediction_noise_seed = cfg.seeds.prediction_seed();
  a.density_cells = cfg.estimation.density_cells;
  a.quantiles = cfg.estimation.quantiles;
  a.cedr.n_max = cfg.estimation.n_max;
  a.cedr.scan_to_cap = cfg.estimation.cedr_scan;
  a.cedr.workers = cfg.workers;
  a.optimizer.random_starts = cfg.estimation.random_starts;
  a.optimizer.max_iterations = cfg.estimation.max_iterations;
  a.optimizer.seed = cfg.seeds.starts_seed();
  a.workers = cfg.workers;
  a.noise_correction = cfg.estimation.noise_correction;
  a.use_e4 = cfg.estimation.use_e4;
  a.fixed_dimensions = cfg.estimation.fixed;
  a.min_dimension = cfg.estimation.min_dimension;
  a.weights = cfg.estimation.weights;
  a.cache_dir = cfg.cache_dir;
  return a;
}

struct SyntheticData {
  TrajectoryEnsemble Y;
  double signal_power = 0.0;  // mean of f*(X)^2 over t_1..t_L
};

inline SyntheticData generate_data(const Problem& pb, Eigen::Index M, std::uint64_t data_seed,
                                   std::uint64_t noise_seed, int workers) {
  const auto X = simulate_ensemble(pb.model, pb.init, pb.grid, M, data_seed, workers);
  SyntheticData out;
  out.Y = observe_ensemble(X, pb.truth, pb.noise, noise_seed, workers);
  if (has_noise(pb.noise)) {
    const auto clean = observe_ensemble(X, pb.truth, NoNoise{}, 0, workers);
    out.signal_power = clean.paths.rightCols(pb.grid.steps()).array().square().mean();
  }
  return out;
}

/// Mean signal power over noise variance.
inline std::optional<double> signal_to_noise(const SyntheticData& d, const NoiseModel& noise) {
  const auto* g = std::get_if<IidGaussianNoise>(&noise);
  if (!g || !(g->variance > 0.0)) return std::nullopt;
  return d.signal_power / g->variance;
}

inline Table density_table(const DensityGrid& d) {
  Table t{"density", {"x", "rho"}, {}};
  for (Eigen::Index g = 0; g < d.size(); ++g) t.add({d.points(g), d.rho(g)});
  return t;
}

inline Json loss_json(const LossEvaluation& l) {
  Json j{{"total", detail::number(l.total)}, {"e1", detail::number(l.e1)}, {"e2", detail::number(l.e2)},
         {"e3", detail::number(l.e3)}};
  if (l.e4) j["e4"] = detail::number(*l.e4);
  return j;
}

/// Coefficients, per-time W2, and f_hat vs the truth on the density grid.
inline void write_estimator(Artifacts& art, const EstimatorResult& est, const DensityGrid& d,
                            const ObservationFunction& truth, const TimeGrid& grid) {
  Table coef{"coefficients", {"index", "c"}, {}};
  for (Eigen::Index i = 0; i < est.c_hat.size(); ++i) coef.add({static_cast<long long>(i), est.c_hat(i)});
  art.write(coef);

  Table w2{"w2_per_time", {"l", "t", "w2_train", "w2_test"}, {}};
  for (Eigen::Index l = 0; l < est.w2_test.per_time.size(); ++l)
    w2.add({static_cast<long long>(l + 1), grid.time(static_cast<int>(l + 1)),
            detail::number(est.w2_train.per_time(l)), detail::number(est.w2_test.per_time(l))});
  art.write(w2);

  const auto f_hat = est.function();
  Table fx{"estimate", {"x", "rho", "f_hat", "f_true"}, {}};
  for (Eigen::Index g = 0; g < d.size(); ++g) {
    const double x = d.points(g);
    fx.add({x, d.rho(g), evaluate_observation(f_hat, x), evaluate_observation(truth, x)});
  }
  art.write(fx);

  auto& m = art.manifest();
  m["estimator"] = Json{{"degree", est.degree},
                        {"n", est.n},
                        {"support", {est.space->r_min(), est.space->r_max()}},
                        {"bounds", {est.space->y_min(), est.space->y_max()}},
                        {"loss", loss_json(est.loss)},
                        {"w2_train", detail::number(est.w2_train.score)},
                        {"w2_test", detail::number(est.w2_test.score)},
                        {"start", est.start_label},
                        {"converged", est.converged},
                        {"iterations", est.iterations},
                        {"relative_l2_error", detail::number(relative_l2_error(f_hat, truth, d))}};
  if (!est.warnings.empty()) m["estimator"]["warnings"] = est.warnings;
}

inline Table cedr_table(const std::vector<CedrReport>& reports) {
  Table t{"cedr", {"degree", "n", "g", "tau", "rank", "significant_rank", "noise_floor", "sigma_min", "regularized"}, {}};
  for (const auto& rep : reports)
    for (const auto& r : rep.records)
      t.add({rep.degree, r.n, detail::number(r.g), rep.tau, r.rank, r.significant_rank, detail::number(r.noise_floor),
             r.sigma.size() ? Json(r.sigma.minCoeff()) : Json(nullptr), r.regularized});
  return t;
}

inline Json cedr_summary(const std::vector<CedrReport>& reports) {
  Json j = Json::array();
  for (const auto& rep : reports) {
    Json e{{"degree", rep.degree}, {"tau", rep.tau}, {"N", rep.N}};
    e["N_max_crossing"] = rep.N_max_crossing ? Json(*rep.N_max_crossing) : Json(nullptr);
    if (!rep.warnings.empty()) e["warnings"] = rep.warnings;
    j.push_back(std::move(e));
  }
  return j;
}

// --- simulate -----------------------------------------------------------------

inline void run_simulate(const ExperimentConfig& cfg, Artifacts& art) {
  const auto pb = make_problem(cfg);
  const auto X = simulate_ensemble(pb.model, pb.init, pb.grid, cfg.samples, cfg.seeds.data_seed(), cfg.workers);
  const auto Y = observe_ensemble(X, pb.truth, pb.noise, cfg.seeds.noise_seed(), cfg.workers);
  Table summary{"summary", {"l", "t", "x_mean", "x_var", "y_mean", "y_var"}, {}};
  for (int l = 0; l <= pb.grid.steps(); ++l) {
    const auto x = X.slice(l), y = Y.slice(l);
    const double xm = x.mean(), ym = y.mean();
    summary.add({l, pb.grid.time(l), xm, (x.array() - xm).square().mean(), ym, (y.array() - ym).square().mean()});
  }
  art.write(summary);
  Table paths{"paths", {"path", "l", "t", "x", "y"}, {}};
  const Eigen::Index shown = std::min<Eigen::Index>(X.size(), std::max(0, cfg.max_paths));
  for (Eigen::Index m = 0; m < shown; ++m)
    for (int l = 0; l <= pb.grid.steps(); ++l)
      paths.add({static_cast<long long>(m), l, pb.grid.time(l), X.paths(m, l), Y.paths(m, l)});
  art.write(paths);
  art.manifest()["model"] = pb.model.name;
  art.manifest()["samples"] = cfg.samples;
  art.manifest()["steps"] = cfg.steps;
  art.manifest()["dt"] = cfg.dt;
}

// --- estimate / sweep ---------------------------------------------------------

/// The full estimator end to end. With `per_cell` every sweep cell's coefficients and
/// error are written as well.
inline SweepResult run_estimate(const ExperimentConfig& cfg, Artifacts& art, bool per_cell = false) {
  const auto pb = make_problem(cfg);
  const auto data = generate_data(pb, cfg.samples, cfg.seeds.data_seed(), cfg.seeds.noise_seed(), cfg.workers);
  if (const auto snr = signal_to_noise(data, pb.noise)) art.manifest()["signal_to_noise"] = *snr;
  const auto acfg = make_estimator_config(cfg);
  auto res = run_estimator(pb.model, pb.init, data.Y, cfg.estimation.degrees, pb.noise, acfg, art.timing());

  Table sweep{"sweep", {"degree", "n", "loss", "w2_train", "w2_test", "runtime"}, {}};
  if (per_cell) sweep.columns.push_back("relative_l2_error");
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    const auto& r = res.rows[i];
    std::vector<Json> row{r.degree, r.n, detail::number(r.loss), detail::number(r.w2_train),
                          detail::number(r.w2_test), art.timing() ? Json(r.runtime) : Json(nullptr)};
    if (per_cell)
      row.push_back(res.fits[i] ? detail::number(relative_l2_error(res.fits[i]->function(), pb.truth, res.density))
                                : Json(nullptr));
    sweep.add(std::move(row));
  }
  art.write(sweep);
  if (per_cell) {
    Table coef{"sweep_coefficients", {"degree", "n", "index", "c"}, {}};
    for (const auto& f : res.fits)
      if (f)
        for (Eigen::Index i = 0; i < f->c_hat.size(); ++i) coef.add({f->degree, f->n, static_cast<long long>(i), f->c_hat(i)});
    art.write(coef);
  }
  if (!res.cedr.empty()) art.write(cedr_table(res.cedr));
  art.write(density_table(res.density));
  write_estimator(art, res.estimator, res.density, pb.truth, pb.grid);

  auto& m = art.manifest();
  m["model"] = pb.model.name;
  m["samples"] = cfg.samples;
  m["state_samples"] = cfg.state_samples;
  m["cedr"] = cedr_summary(res.cedr);
  m["selected"] = {{"degree", res.estimator.degree}, {"n", res.estimator.n}};
  if (!res.warnings.empty()) m["warnings"] = res.warnings;
  return res;
}

// --- cedr ---------------------------------------------------------------------

inline std::vector<CedrReport> run_cedr(const ExperimentConfig& cfg, Artifacts& art) {
  const auto pb = make_problem(cfg);
  const auto data = generate_data(pb, cfg.samples, cfg.seeds.data_seed(), cfg.seeds.noise_seed(), cfg.workers);
  const auto Xp = simulate_ensemble(pb.model, pb.init, pb.grid, cfg.state_samples, cfg.seeds.state_seed(), cfg.workers);
  const auto d = estimate_density(Xp, cfg.estimation.density_cells);
  CedrConfig cc;
  cc.n_max = cfg.estimation.n_max;
  cc.scan_to_cap = cfg.estimation.cedr_scan;
  cc.workers = cfg.workers;
  std::vector<CedrReport> reports;
  for (int p : cfg.estimation.degrees) reports.push_back(dimension_range(Xp, data.Y, p, d.r_min, d.r_max, cc));
  art.write(cedr_table(reports));
  art.manifest()["support"] = {d.r_min, d.r_max};
  art.manifest()["cedr"] = cedr_summary(reports);
  return reports;
}

// --- convergence --------------------------------------------------------------

struct ConvergenceStudy {
  std::vector<long long> sizes;
  int repeats = 0;
  Eigen::MatrixXd errors;  // sizes x repeats
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  double rate = 0.0;       // minus the least-squares slope of log mean error on log M
};

inline std::vector<long long> convergence_sizes(const ConvergenceConfig& c) {
  if (!c.sizes.empty()) return c.sizes;
  std::vector<long long> out;
  for (int j = 0; j < c.points; ++j) out.push_back(static_cast<long long>(std::floor(std::pow(10.0, c.base + j * c.delta))));
  return out;
}

/// Least-squares slope of y on x.
inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) throw ValidationError("a slope needs at least two points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (!(sxx > 0.0)) throw ValidationError("a slope needs distinct abscissae");
  return sxy / sxx;
}

/// Fits one fixed space against precomputed state moments. W2 scores are left empty.
inline EstimatorResult fit_fixed_space(const MomentSystem& state, const DensityGrid& d, const TrajectoryEnsemble& Y,
                                       const NoiseModel& noise, int degree, int n, const OptimizerConfig& ocfg,
                                       const std::optional<LossWeights>& weights = std::nullopt) {
  EstimatorResult est;
  est.degree = degree;
  est.n = n;
  est.space = std::make_shared<const BSplineSpace>(build_hypothesis_space(degree, n, d.r_min, d.r_max, Y));
  MomentSystem sys = assemble_obs_moments(Y, state, noise);
  if (weights) sys.weights = *weights;
  const auto res = minimize(sys, *est.space, ocfg);
  est.c_hat = res.c_hat;
  est.loss = res.loss;
  est.start_label = res.start_label;
  est.converged = res.converged;
  est.iterations = res.iterations;
  est.warnings = sys.warnings;
  return est;
}

/// Independent data sets at each size share one state ensemble X' and one
/// fixed hypothesis space.
inline ConvergenceStudy run_convergence(const ExperimentConfig& cfg, Artifacts* art = nullptr) {
  const auto pb = make_problem(cfg);
  const auto& cc = cfg.convergence;
  ConvergenceStudy st;
  st.sizes = convergence_sizes(cc);
  st.repeats = cc.repeats;
  if (st.sizes.size() < 2) throw ValidationError("a convergence study needs at least two sample sizes");

  const auto Xp = simulate_ensemble(pb.model, pb.init, pb.grid, cfg.state_samples, cfg.seeds.state_seed(), cfg.workers);
  const auto d = estimate_density(Xp, cfg.estimation.density_cells);
  const BSplineSpace knots(cc.degree, cc.dimension, d.r_min, d.r_max);
  const auto state = assemble_state_moments(Xp, knots, cfg.workers);
  auto ocfg = make_estimator_config(cfg).optimizer;
  ocfg.workers = 1;
  const NoiseModel loss_noise = cfg.estimation.noise_correction ? pb.noise : NoiseModel{NoNoise{}};

  const std::size_t J = st.sizes.size();
  const auto R = static_cast<std::size_t>(cc.repeats);
  st.errors.resize(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(R));
  parallel_for(J * R, cfg.workers, [&](std::size_t k) {
    const std::size_t j = k / R, r = k % R;
    const auto role = static_cast<std::uint32_t>(1000 * j + r + 1);
    const auto data = generate_data(pb, st.sizes[j], derive_seed(cfg.seeds.data_seed(), role),
                                    derive_seed(cfg.seeds.noise_seed(), role), 1);
    const auto est = fit_fixed_space(state, d, data.Y, loss_noise, cc.degree, cc.dimension, ocfg, cfg.estimation.weights);
    st.errors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r)) =
        relative_l2_error(est.function(), pb.truth, d);
  });

  st.mean = st.errors.rowwise().mean();
  st.stddev.resize(static_cast<Eigen::Index>(J));
  std::vector<double> lx, ly;
  for (std::size_t j = 0; j < J; ++j) {
    const auto row = st.errors.row(static_cast<Eigen::Index>(j));
    const double mu = st.mean(static_cast<Eigen::Index>(j));
    st.stddev(static_cast<Eigen::Index>(j)) =
        R > 1 ? std::sqrt((row.array() - mu).square().sum() / static_cast<double>(R - 1)) : 0.0;
    lx.push_back(std::log(static_cast<double>(st.sizes[j])));
    ly.push_back(std::log(mu));
  }
  st.rate = -ls_slope(lx, ly);

  if (art) {
    Table all{"convergence", {"M", "repeat", "relative_l2_error"}, {}};
    Table summary{"convergence_summary", {"M", "mean", "std"}, {}};
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t r = 0; r < R; ++r)
        all.add({st.sizes[j], static_cast<long long>(r),
                 st.errors(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(r))});
      summary.add({st.sizes[j], st.mean(static_cast<Eigen::Index>(j)), st.stddev(static_cast<Eigen::Index>(j))});
    }
    art->write(all);
    art->write(summary);
    art->manifest()["space"] = {{"degree", cc.degree}, {"n", cc.dimension}};
    art->manifest()["repeats"] = cc.repeats;
    art->manifest()["rate"] = st.rate;
  }
  return st;
}

// --- kernel -------------------------------------------------------------------

struct KernelAnalysis {
  KernelGrid grid;
  DensityGrid density;
  KernelSpectrum k1;
  KernelSpectrum k;
};

inline KernelAnalysis run_kernel(const ExperimentConfig& cfg, Artifacts* art = nullptr) {
  const auto& kc = cfg.kernel;
  const TimeGrid tg(cfg.dt, cfg.steps);
  KernelAnalysis out;
  if (kc.family == "empirical") {
    const auto pb = make_problem(cfg);
    const auto Xp = simulate_ensemble(pb.model, pb.init, tg, cfg.state_samples, cfg.seeds.state_seed(), cfg.workers);
    out.density = estimate_density(Xp, kc.cells);
    out.grid = empirical_kernel_grids(out.density, tg.dt());
  } else {
    const auto fam = kc.family == "brownian" ? GaussianDensityFamily::brownian(kc.x0)
                     : kc.family == "ou"     ? GaussianDensityFamily::ou(kc.theta, kc.x0)
                                             : GaussianDensityFamily::ou_stationary(kc.theta);
    std::vector<double> times;
    if (kc.time == "continuous") {
      times = continuous_time_nodes(tg.horizon(), kc.time_nodes, kc.eps);
    } else {
      for (int l = 1; l <= tg.steps(); ++l) times.push_back(tg.time(l));
    }
    out.density = analytic_density_grid(fam, times, kc.lo, kc.hi, kc.cells);
    out.grid = kernel_grids(fam, times, out.density.points, cfg.workers);
  }
  out.k1 = kernel_eigen(out.grid.K1, out.density, kc.eigen_count);
  out.k = kernel_eigen(out.grid.K, out.density, kc.eigen_count);

  if (art) {
    const Eigen::Index G = out.grid.points.size();
    Table kt{"kernel", {"i", "j", "x", "x_prime", "K1", "K4", "K"}, {}};
    for (Eigen::Index i = 0; i < G; ++i)
      for (Eigen::Index j = 0; j < G; ++j)
        kt.add({static_cast<long long>(i), static_cast<long long>(j), out.grid.points(i), out.grid.points(j),
                out.grid.K1(i, j), out.grid.K4(i, j), out.grid.K(i, j)});
    art->write(kt);
    Table sp{"spectrum", {"k", "lambda_K1", "lambda_K"}, {}};
    for (Eigen::Index k = 0; k < out.k1.lambda.size(); ++k) sp.add({static_cast<long long>(k + 1), out.k1.lambda(k), out.k.lambda(k)});
    art->write(sp);
    Table ef{"eigenfunctions", {"x", "rho"}, {}};
    for (Eigen::Index k = 0; k < out.k1.lambda.size(); ++k) ef.columns.push_back("psi" + std::to_string(k + 1));
    for (Eigen::Index g = 0; g < G; ++g) {
      std::vector<Json> row{out.density.points(g), out.density.rho(g)};
      for (Eigen::Index k = 0; k < out.k1.lambda.size(); ++k) row.push_back(out.k1.psi(g, k));
      ef.add(std::move(row));
    }
    art->write(ef);
    art->manifest()["family"] = kc.family;
    art->manifest()["time"] = kc.family == "empirical" ? std::string("discrete") : kc.time;
    std::vector<std::string> warnings = out.k1.warnings;
    if (!warnings.empty()) art->manifest()["warnings"] = warnings;
  }
  return out;
}

// --- non-identifiability demos ------------------------------------------------

struct NonidentReport {
  double bm_error = 0.0;            // f_hat against f*
  double bm_error_reflected = 0.0;  // f_hat o R against f*
  double bm_min_error = 0.0;
  double loss_truth = 0.0;          // loss of f*
  double loss_reflected = 0.0;      // loss of f* o R
  double loss_noise = 0.0;          // Monte Carlo standard error of the loss
  double ou_error = 0.0;
  int ou_rank = 0;                  // significant rank of the normal matrix
  int ou_numeric_rank = 0;          // eigenvalues of A1bar above 1e-12 of the largest
};

namespace detail {

// Standard error of the Monte Carlo loss of f: spread over four disjoint
// quarters of X', divided by sqrt(4).
inline double loss_standard_error(const MomentSystem& sys, const TrajectoryEnsemble& Xp, const RealFunction& f) {
  const Eigen::Index q = Xp.size() / 4;
  if (q < 1) throw ValidationError("loss noise needs at least four state paths");
  std::vector<double> v;
  for (int k = 0; k < 4; ++k) {
    TrajectoryEnsemble part;
    part.grid = Xp.grid;
    part.paths = Xp.paths.middleRows(k * q, q);
    v.push_back(functional_loss(sys, part, f).total);
  }
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / 4.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / 3.0) / 2.0;
}

}  // namespace detail

/// Brownian motion from Unif(0,1) with f* = sin (reflection x -> 1 - x keeps the
/// law), then stationary OU with f* = sin.
inline NonidentReport run_nonident_demo(const ExperimentConfig& cfg, Artifacts* art = nullptr) {
  const auto& dc = cfg.demo;
  const TimeGrid grid(dc.dt, dc.steps);
  const ObservationFunction truth = BuiltinObservation::kSine;
  auto ocfg = make_estimator_config(cfg).optimizer;
  ocfg.workers = cfg.workers;
  NonidentReport rep;

  // Brownian motion with a reflection-invariant law.
  {
    const auto model = models::brownian();
    const InitialDistribution init = UniformInitial{0.0, 1.0};
    const auto X = simulate_ensemble(model, init, grid, dc.samples, cfg.seeds.data_seed(), cfg.workers);
    const auto Y = observe_ensemble(X, truth, NoNoise{}, cfg.seeds.noise_seed(), cfg.workers);
    const auto Xp = simulate_ensemble(model, init, grid, dc.state_samples, cfg.seeds.state_seed(), cfg.workers);
    const auto d = estimate_density(Xp, cfg.estimation.density_cells);
    const BSplineSpace knots(dc.degree, dc.dimension, d.r_min, d.r_max);
    const auto state = assemble_state_moments(Xp, knots, cfg.workers);
    const auto est = fit_fixed_space(state, d, Y, NoNoise{}, dc.degree, dc.dimension, ocfg, cfg.estimation.weights);
    const auto f_hat = est.function();
    const CustomObservation reflected{"f_hat(1 - x)", [f_hat](double x) { return evaluate_observation(f_hat, 1.0 - x); }};
    rep.bm_error = relative_l2_error(f_hat, truth, d);
    rep.bm_error_reflected = relative_l2_error(reflected, truth, d);
    rep.bm_min_error = std::min(rep.bm_error, rep.bm_error_reflected);

    const MomentSystem sys = assemble_obs_moments(Y, state, NoNoise{});
    const RealFunction f_true = [](double x) { return std::sin(x); };
    const RealFunction f_refl = [](double x) { return std::sin(1.0 - x); };
    rep.loss_truth = functional_loss(sys, Xp, f_true).total;
    rep.loss_reflected = functional_loss(sys, Xp, f_refl).total;
    rep.loss_noise = std::max(detail::loss_standard_error(sys, Xp, f_true), detail::loss_standard_error(sys, Xp, f_refl));

    if (art) {
      Table t{"demo_brownian", {"x", "rho", "f_hat", "f_hat_reflected", "f_true"}, {}};
      for (Eigen::Index g = 0; g < d.size(); ++g) {
        const double x = d.points(g);
        t.add({x, d.rho(g), evaluate_observation(f_hat, x), evaluate_observation(reflected, x), std::sin(x)});
      }
      art->write(t);
    }
  }

  // Stationary OU: every moment is constant in time.
  {
    const double theta = cfg.model.name == "ou" ? cfg.model.theta : 1.0;
    const auto model = models::ornstein_uhlenbeck(theta);
    const InitialDistribution init = GaussianMixture{{{1.0, 0.0, 0.5 / theta}}};
    const auto X = simulate_ensemble(model, init, grid, dc.samples, cfg.seeds.data_seed(), cfg.workers);
    const auto Y = observe_ensemble(X, truth, NoNoise{}, cfg.seeds.noise_seed(), cfg.workers);
    const auto Xp = simulate_ensemble(model, init, grid, dc.state_samples, cfg.seeds.state_seed(), cfg.workers);
    const auto d = estimate_density(Xp, cfg.estimation.density_cells);
    const BSplineSpace knots(dc.degree, dc.dimension, d.r_min, d.r_max);
    const auto state = assemble_state_moments(Xp, knots, cfg.workers);
    const auto est = fit_fixed_space(state, d, Y, NoNoise{}, dc.degree, dc.dimension, ocfg, cfg.estimation.weights);
    rep.ou_error = relative_l2_error(est.function(), truth, d);
    const auto rec = cedr_record(Xp, Y, knots, 1.0, cfg.workers);
    rep.ou_rank = rec.significant_rank;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(state.A1bar, Eigen::EigenvaluesOnly);
    const double top = es.eigenvalues().cwiseAbs().maxCoeff();
    rep.ou_numeric_rank = static_cast<int>((es.eigenvalues().array() > 1e-12 * top).count());

    if (art) {
      const auto f_hat = est.function();
      Table t{"demo_ou", {"x", "rho", "f_hat", "f_true"}, {}};
      for (Eigen::Index g = 0; g < d.size(); ++g) {
        const double x = d.points(g);
        t.add({x, d.rho(g), evaluate_observation(f_hat, x), std::sin(x)});
      }
      art->write(t);
    }
  }

  if (art) {
    art->manifest()["brownian"] = {{"relative_l2_error", rep.bm_error},
                                   {"relative_l2_error_reflected", rep.bm_error_reflected},
                                   {"min_relative_l2_error", rep.bm_min_error},
                                   {"loss_truth", rep.loss_truth},
                                   {"loss_reflected", rep.loss_reflected},
                                   {"loss_standard_error", rep.loss_noise}};
    art->manifest()["ou"] = {{"relative_l2_error", rep.ou_error},
                             {"significant_rank", rep.ou_rank},
                             {"numeric_rank", rep.ou_numeric_rank}};
  }
  return rep;
}

}  // namespace obsfit
