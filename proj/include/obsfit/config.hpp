// YAML experiment configuration with line-precise validation errors.
#pragma once

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "obsfit/error.hpp"
#include "obsfit/expression.hpp"
#include "obsfit/loss.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/state_model.hpp"
#include "obsfit/util.hpp"

namespace obsfit {

class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& file, int line, const std::string& msg)
      : ValidationError(file + ":" + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

struct ModelConfig {
  std::string name = "double-well";  // brownian | ou | double-well | custom
  double theta = 1.0;
  std::string drift;
  std::string diffusion;
};

struct InitialConfig {
  std::string kind = "mixture";  // point | uniform | mixture | ou-stationary
  double x0 = 0.0;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<MixtureComponent> components{{0.5, -0.5, 0.2}, {0.5, 1.0, 0.5}};
};

struct ObservationConfig {
  std::string builtin = "sine";  // sine | sine-cosine | arch, empty when an expression is given
  std::string expression;
};

struct NoiseConfig {
  std::string kind = "none";  // none | iid-gaussian
  double variance = 0.0;
};

struct EstimationConfig {
  std::vector<int> degrees{0, 1, 2, 3};
  std::vector<std::pair<int, int>> fixed;  // (degree, n)
  int min_dimension = 1;
  bool use_e4 = false;
  bool noise_correction = true;
  int random_starts = 8;
  int max_iterations = 100;
  int n_max = 100;
  bool cedr_scan = false;
  int density_cells = 200;
  int quantiles = 1000;
  std::optional<LossWeights> weights;
};

struct ConvergenceConfig {
  double base = 3.5;
  double delta = 0.0625;
  int points = 5;
  int repeats = 20;
  std::vector<long long> sizes;  // explicit M list overrides base/delta/points
  int degree = 1;
  int dimension = 9;
};

struct KernelConfig {
  std::string family = "brownian";  // brownian | ou | ou-stationary | empirical
  double x0 = 0.0;
  double theta = 1.0;
  std::string time = "continuous";  // continuous | discrete
  int time_nodes = 200;
  double eps = 1e-3;
  double lo = -3.0;
  double hi = 3.0;
  int cells = 200;
  int eigen_count = 10;
};

struct DemoConfig {
  long long samples = 20000;
  long long state_samples = 20000;
  int degree = 1;
  int dimension = 12;
  double dt = 0.01;
  int steps = 100;
};

struct SeedConfig {
  std::uint64_t master = 1;
  std::optional<std::uint64_t> data, noise, state, fresh, prediction, starts;

  std::uint64_t data_seed() const { return data.value_or(derive_seed(master, 1)); }
  std::uint64_t noise_seed() const { return noise.value_or(derive_seed(master, 2)); }
  std::uint64_t state_seed() const { return state.value_or(derive_seed(master, 3)); }
  std::uint64_t fresh_seed() const { return fresh.value_or(derive_seed(master, 4)); }
  std::uint64_t prediction_seed() const { return prediction.value_or(derive_seed(master, 5)); }
  std::uint64_t starts_seed() const { return starts.value_or(derive_seed(master, 6)); }
};

struct ExperimentConfig {
  std::string source_name = "<config>";
  std::string text;  // raw file contents, hashed into every artifact
  ModelConfig model;
  InitialConfig initial;
  double dt = 0.01;
  int steps = 100;
  long long samples = 100000;        // M
  long long state_samples = 100000;  // M'
  ObservationConfig observation;
  NoiseConfig noise;
  EstimationConfig estimation;
  ConvergenceConfig convergence;
  KernelConfig kernel;
  DemoConfig demo;
  SeedConfig seeds;
  int workers = 1;
  std::string out_dir = "out";
  std::string format = "csv";
  int max_paths = 100;
  std::string cache_dir;

  std::string hash() const {
    return hex64(fnv1a64(text + "|seed=" + std::to_string(seeds.master)));
  }
};

// ---------------------------------------------------------------------------

namespace detail {

class YamlReader {
 public:
  YamlReader(std::string file) : file_(std::move(file)) {}

  [[noreturn]] void fail(const YAML::Node& n, const std::string& msg) const {
    const auto m = n.Mark();
    throw ConfigError(file_, m.is_null() ? 0 : m.line + 1, msg);
  }

  void require_map(const YAML::Node& n, const std::string& where) const {
    if (!n.IsMap()) fail(n, "'" + where + "' must be a mapping");
  }

  void allow_keys(const YAML::Node& n, const std::set<std::string>& keys, const std::string& where) const {
    require_map(n, where);
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (!keys.count(key)) fail(kv.first, "unknown key '" + key + "' in " + where);
    }
  }

  template <typename T>
  void read(const YAML::Node& parent, const char* key, T& out) const {
    const YAML::Node n = parent[key];
    if (!n) return;
    try {
      out = n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, std::string("cannot read '") + key + "' as " + type_name<T>());
    }
  }

  template <typename T>
  void read_optional(const YAML::Node& parent, const char* key, std::optional<T>& out) const {
    if (!parent[key]) return;
    T v{};
    read(parent, key, v);
    out = v;
  }

  template <typename T>
  void positive(const YAML::Node& parent, const char* key, T v) const {
    if (!(v > T{})) fail(parent[key] ? parent[key] : parent, std::string("'") + key + "' must be positive");
  }

 private:
  template <typename T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "the expected type";
  }
  std::string file_;
};

}  // namespace detail

/// Parses a YAML document. Unknown keys and bad values raise ConfigError
/// carrying the offending line.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source_name = "<config>") {
  ExperimentConfig cfg;
  cfg.source_name = source_name;
  cfg.text = text;
  detail::YamlReader r(source_name);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(source_name, e.mark.line + 1, e.msg);
  }
  if (!root || root.IsNull()) return cfg;
  r.allow_keys(root,
               {"seed", "seeds", "workers", "model", "initial", "grid", "data", "state", "observation", "noise",
                "estimation", "convergence", "kernel", "demo", "output", "cache_dir"},
               "the top level");

  std::uint64_t master = cfg.seeds.master;
  r.read(root, "seed", master);
  cfg.seeds.master = master;
  if (const auto s = root["seeds"]) {
    r.allow_keys(s, {"data", "noise", "state", "fresh", "prediction", "starts"}, "seeds");
    r.read_optional(s, "data", cfg.seeds.data);
    r.read_optional(s, "noise", cfg.seeds.noise);
    r.read_optional(s, "state", cfg.seeds.state);
    r.read_optional(s, "fresh", cfg.seeds.fresh);
    r.read_optional(s, "prediction", cfg.seeds.prediction);
    r.read_optional(s, "starts", cfg.seeds.starts);
  }
  r.read(root, "workers", cfg.workers);
  if (cfg.workers < 1) r.fail(root["workers"], "'workers' must be at least 1");
  r.read(root, "cache_dir", cfg.cache_dir);

  if (const auto m = root["model"]) {
    if (m.IsScalar()) {
      cfg.model.name = m.as<std::string>();
    } else {
      r.allow_keys(m, {"name", "theta", "drift", "diffusion"}, "model");
      r.read(m, "name", cfg.model.name);
      r.read(m, "theta", cfg.model.theta);
      r.read(m, "drift", cfg.model.drift);
      r.read(m, "diffusion", cfg.model.diffusion);
    }
    static const std::set<std::string> names{"brownian", "ou", "double-well", "custom"};
    if (!names.count(cfg.model.name)) r.fail(m, "unknown model '" + cfg.model.name + "'");
    if (cfg.model.name == "ou" && !(cfg.model.theta > 0.0)) r.fail(m, "OU rate 'theta' must be positive");
    if (cfg.model.name == "custom") {
      if (cfg.model.drift.empty() || cfg.model.diffusion.empty())
        r.fail(m, "custom model needs 'drift' and 'diffusion' expressions");
      try {
        Expression::parse(cfg.model.drift);
        Expression::parse(cfg.model.diffusion);
      } catch (const ValidationError& e) {
        r.fail(m, e.what());
      }
    }
  }

  if (const auto in = root["initial"]) {
    r.allow_keys(in, {"kind", "x0", "lo", "hi", "components"}, "initial");
    r.read(in, "kind", cfg.initial.kind);
    r.read(in, "x0", cfg.initial.x0);
    r.read(in, "lo", cfg.initial.lo);
    r.read(in, "hi", cfg.initial.hi);
    if (const auto comps = in["components"]) {
      if (!comps.IsSequence()) r.fail(comps, "'components' must be a list");
      cfg.initial.components.clear();
      for (const auto& c : comps) {
        r.allow_keys(c, {"weight", "mean", "variance"}, "a mixture component");
        MixtureComponent mc{0.0, 0.0, 0.0};
        r.read(c, "weight", mc.weight);
        r.read(c, "mean", mc.mean);
        r.read(c, "variance", mc.variance);
        if (!(mc.weight > 0.0) || !(mc.variance > 0.0)) r.fail(c, "mixture weight and variance must be positive");
        cfg.initial.components.push_back(mc);
      }
    }
    static const std::set<std::string> kinds{"point", "uniform", "mixture", "ou-stationary"};
    if (!kinds.count(cfg.initial.kind)) r.fail(in, "unknown initial kind '" + cfg.initial.kind + "'");
    if (cfg.initial.kind == "uniform" && !(cfg.initial.lo < cfg.initial.hi)) r.fail(in, "uniform law needs lo < hi");
    if (cfg.initial.kind == "mixture") {
      double total = 0.0;
      for (const auto& c : cfg.initial.components) total += c.weight;
      if (std::abs(total - 1.0) > 1e-9) r.fail(in["components"] ? in["components"] : in, "mixture weights must sum to 1");
    }
  }

  if (const auto g = root["grid"]) {
    r.allow_keys(g, {"dt", "steps"}, "grid");
    r.read(g, "dt", cfg.dt);
    r.read(g, "steps", cfg.steps);
    r.positive(g, "dt", cfg.dt);
    r.positive(g, "steps", cfg.steps);
  }
  if (const auto d = root["data"]) {
    r.allow_keys(d, {"samples"}, "data");
    r.read(d, "samples", cfg.samples);
    r.positive(d, "samples", cfg.samples);
  }
  if (const auto s = root["state"]) {
    r.allow_keys(s, {"samples"}, "state");
    r.read(s, "samples", cfg.state_samples);
    r.positive(s, "samples", cfg.state_samples);
  }

  if (const auto o = root["observation"]) {
    if (o.IsScalar()) {
      cfg.observation.builtin = o.as<std::string>();
    } else {
      r.allow_keys(o, {"builtin", "expression"}, "observation");
      cfg.observation.builtin.clear();
      r.read(o, "builtin", cfg.observation.builtin);
      r.read(o, "expression", cfg.observation.expression);
      if (cfg.observation.builtin.empty() == cfg.observation.expression.empty())
        r.fail(o, "observation needs exactly one of 'builtin' or 'expression'");
      if (!cfg.observation.expression.empty()) {
        try {
          Expression::parse(cfg.observation.expression);
        } catch (const ValidationError& e) {
          r.fail(o, e.what());
        }
      }
    }
    static const std::set<std::string> builtins{"sine", "sine-cosine", "arch"};
    if (!cfg.observation.builtin.empty() && !builtins.count(cfg.observation.builtin))
      r.fail(o, "unknown observation '" + cfg.observation.builtin + "'");
  }

  if (const auto nz = root["noise"]) {
    r.allow_keys(nz, {"kind", "variance"}, "noise");
    r.read(nz, "kind", cfg.noise.kind);
    r.read(nz, "variance", cfg.noise.variance);
    if (cfg.noise.kind != "none" && cfg.noise.kind != "iid-gaussian") r.fail(nz, "unknown noise kind '" + cfg.noise.kind + "'");
    if (cfg.noise.variance < 0.0) r.fail(nz, "noise variance must be nonnegative");
  }

  if (const auto e = root["estimation"]) {
    r.allow_keys(e,
                 {"degrees", "fixed", "min_dimension", "use_e4", "noise_correction", "random_starts",
                  "max_iterations", "n_max", "cedr_scan", "density_cells", "quantiles", "weights"},
                 "estimation");
    auto& est = cfg.estimation;
    r.read(e, "degrees", est.degrees);
    for (int p : est.degrees)
      if (p < 0 || p > 3) r.fail(e["degrees"], "spline degrees must lie in 0..3");
    if (est.degrees.empty()) r.fail(e, "'degrees' must not be empty");
    if (const auto f = e["fixed"]) {
      if (!f.IsSequence()) r.fail(f, "'fixed' must be a list of {degree, n}");
      for (const auto& item : f) {
        r.allow_keys(item, {"degree", "n"}, "a fixed dimension");
        int p = -1, n = -1;
        r.read(item, "degree", p);
        r.read(item, "n", n);
        if (p < 0 || p > 3 || n < p + 1) r.fail(item, "fixed dimension needs 0 <= degree <= 3 and n >= degree + 1");
        est.fixed.emplace_back(p, n);
      }
    }
    r.read(e, "min_dimension", est.min_dimension);
    r.read(e, "use_e4", est.use_e4);
    r.read(e, "noise_correction", est.noise_correction);
    r.read(e, "random_starts", est.random_starts);
    r.read(e, "max_iterations", est.max_iterations);
    r.read(e, "n_max", est.n_max);
    r.read(e, "cedr_scan", est.cedr_scan);
    r.read(e, "density_cells", est.density_cells);
    r.read(e, "quantiles", est.quantiles);
    if (est.random_starts < 0) r.fail(e["random_starts"], "'random_starts' must be nonnegative");
    r.positive(e, "max_iterations", est.max_iterations);
    r.positive(e, "n_max", est.n_max);
    r.positive(e, "density_cells", est.density_cells);
    r.positive(e, "quantiles", est.quantiles);
    if (const auto w = e["weights"]) {
      r.allow_keys(w, {"w1", "w2", "w3", "w4"}, "weights");
      LossWeights lw;
      r.read(w, "w1", lw.w1);
      r.read(w, "w2", lw.w2);
      r.read(w, "w3", lw.w3);
      r.read(w, "w4", lw.w4);
      if (lw.w1 < 0 || lw.w2 < 0 || lw.w3 < 0 || lw.w4 < 0) r.fail(w, "weights must be nonnegative");
      est.weights = lw;
    }
  }

  if (const auto c = root["convergence"]) {
    r.allow_keys(c, {"base", "delta", "points", "repeats", "sizes", "degree", "n"}, "convergence");
    auto& cv = cfg.convergence;
    r.read(c, "base", cv.base);
    r.read(c, "delta", cv.delta);
    r.read(c, "points", cv.points);
    r.read(c, "repeats", cv.repeats);
    r.read(c, "sizes", cv.sizes);
    r.read(c, "degree", cv.degree);
    r.read(c, "n", cv.dimension);
    r.positive(c, "points", cv.points);
    r.positive(c, "repeats", cv.repeats);
    for (auto s : cv.sizes)
      if (s < 2) r.fail(c["sizes"], "convergence sizes must be at least 2");
    if (cv.degree < 0 || cv.degree > 3 || cv.dimension < cv.degree + 1)
      r.fail(c, "convergence space needs 0 <= degree <= 3 and n >= degree + 1");
  }

  if (const auto k = root["kernel"]) {
    r.allow_keys(k, {"family", "x0", "theta", "time", "time_nodes", "eps", "lo", "hi", "cells", "eigen_count"}, "kernel");
    auto& kc = cfg.kernel;
    r.read(k, "family", kc.family);
    r.read(k, "x0", kc.x0);
    r.read(k, "theta", kc.theta);
    r.read(k, "time", kc.time);
    r.read(k, "time_nodes", kc.time_nodes);
    r.read(k, "eps", kc.eps);
    r.read(k, "lo", kc.lo);
    r.read(k, "hi", kc.hi);
    r.read(k, "cells", kc.cells);
    r.read(k, "eigen_count", kc.eigen_count);
    static const std::set<std::string> fams{"brownian", "ou", "ou-stationary", "empirical"};
    if (!fams.count(kc.family)) r.fail(k, "unknown kernel family '" + kc.family + "'");
    if (kc.time != "continuous" && kc.time != "discrete") r.fail(k, "kernel time must be 'continuous' or 'discrete'");
    if (!(kc.lo < kc.hi)) r.fail(k, "kernel grid needs lo < hi");
    r.positive(k, "cells", kc.cells);
    r.positive(k, "time_nodes", kc.time_nodes);
    r.positive(k, "eigen_count", kc.eigen_count);
  }

  if (const auto d = root["demo"]) {
    r.allow_keys(d, {"samples", "state_samples", "degree", "n", "dt", "steps"}, "demo");
    auto& dc = cfg.demo;
    r.read(d, "samples", dc.samples);
    r.read(d, "state_samples", dc.state_samples);
    r.read(d, "degree", dc.degree);
    r.read(d, "n", dc.dimension);
    r.read(d, "dt", dc.dt);
    r.read(d, "steps", dc.steps);
    r.positive(d, "samples", dc.samples);
    r.positive(d, "state_samples", dc.state_samples);
    if (dc.degree < 0 || dc.degree > 3 || dc.dimension < dc.degree + 1)
      r.fail(d, "demo space needs 0 <= degree <= 3 and n >= degree + 1");
  }

  if (const auto o = root["output"]) {
    r.allow_keys(o, {"dir", "format", "max_paths"}, "output");
    r.read(o, "dir", cfg.out_dir);
    r.read(o, "format", cfg.format);
    r.read(o, "max_paths", cfg.max_paths);
    if (cfg.format != "csv" && cfg.format != "json") r.fail(o, "output format must be 'csv' or 'json'");
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, 0, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// --- Conversions to library types -------------------------------------------

inline StateModelSpec make_model(const ModelConfig& m) {
  if (m.name == "brownian") return models::brownian();
  if (m.name == "ou") return models::ornstein_uhlenbeck(m.theta);
  if (m.name == "double-well") return models::double_well();
  const auto drift = Expression::parse(m.drift);
  const auto diffusion = Expression::parse(m.diffusion);
  return {"custom:" + m.drift + ";" + m.diffusion, [drift](double x) { return drift(x); },
          [diffusion](double x) { return diffusion(x); }};
}

inline InitialDistribution make_initial(const InitialConfig& c, const ModelConfig& m) {
  if (c.kind == "point") return PointMass{c.x0};
  if (c.kind == "uniform") return UniformInitial{c.lo, c.hi};
  if (c.kind == "ou-stationary") return GaussianMixture{{{1.0, 0.0, 0.5 / m.theta}}};
  return GaussianMixture{c.components};
}

inline ObservationFunction make_observation(const ObservationConfig& o) {
  if (o.builtin == "sine") return BuiltinObservation::kSine;
  if (o.builtin == "sine-cosine") return BuiltinObservation::kSineCosine;
  if (o.builtin == "arch") return BuiltinObservation::kArch;
  const auto e = Expression::parse(o.expression);
  return CustomObservation{o.expression, [e](double x) { return e(x); }};
}

inline NoiseModel make_noise(const NoiseConfig& n) {
  if (n.kind == "iid-gaussian") return IidGaussianNoise{n.variance};
  return NoNoise{};
}

}  // namespace obsfit
