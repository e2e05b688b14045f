// obsfit: command-line front end for the experiment harness.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "obsfit/config.hpp"
#include "obsfit/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  std::optional<std::string> format;
  bool timing = false;
};

obsfit::ExperimentConfig load(const Overrides& o) {
  auto cfg = obsfit::load_config(o.config);
  if (o.seed) cfg.seeds.master = *o.seed;
  if (o.workers) {
    if (*o.workers < 1) throw obsfit::ConfigError("--workers", 0, "worker count must be at least 1");
    cfg.workers = *o.workers;
  }
  if (o.out) cfg.out_dir = *o.out;
  if (o.format) cfg.format = *o.format;
  return cfg;
}

void report(const std::string& command, const obsfit::Json& m) {
  std::cout << command << ": status=" << m.value("status", "?");
  if (m.contains("estimator")) {
    const auto& e = m["estimator"];
    std::cout << " degree=" << e["degree"] << " n=" << e["n"] << " relative_l2_error=" << e["relative_l2_error"]
              << " w2_test=" << e["w2_test"];
  }
  if (m.contains("rate")) std::cout << " rate=" << m["rate"];
  if (m.contains("cedr") && !m.contains("estimator"))
    for (const auto& c : m["cedr"]) std::cout << " N[p=" << c["degree"] << "]=" << c["N"];
  if (m.contains("brownian"))
    std::cout << " bm_min_error=" << m["brownian"]["min_relative_l2_error"]
              << " ou_error=" << m["ou"]["relative_l2_error"] << " ou_rank=" << m["ou"]["significant_rank"];
  std::cout << '\n';
}

int run(const std::string& command, const Overrides& o) {
  obsfit::ExperimentConfig cfg;
  try {
    cfg = load(o);
  } catch (const obsfit::ValidationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  obsfit::Artifacts art(cfg, command, o.timing);
  try {
    if (command == "simulate") obsfit::run_simulate(cfg, art);
    else if (command == "estimate") obsfit::run_estimate(cfg, art, false);
    else if (command == "sweep") obsfit::run_estimate(cfg, art, true);
    else if (command == "cedr") obsfit::run_cedr(cfg, art);
    else if (command == "converge") obsfit::run_convergence(cfg, &art);
    else if (command == "kernel") obsfit::run_kernel(cfg, &art);
    else if (command == "demo-nonident") obsfit::run_nonident_demo(cfg, &art);
  } catch (const obsfit::ValidationError& e) {
    art.finish(e.what());
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const obsfit::UnsupportedError& e) {
    art.finish(e.what());
    std::cerr << "unsupported: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    art.finish(e.what());
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  art.finish();
  report(command, art.manifest());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Observation-function estimation by generalized moment matching"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "YAML experiment configuration")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed override");
  app.add_option("--workers", o.workers, "Worker threads");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--format", o.format, "Table format")->check(CLI::IsMember({"csv", "json"}));
  app.add_flag("--timing", o.timing, "Record wall-clock runtimes in the sweep table");
  app.fallthrough();

  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "Simulate states and observations"},
      {"estimate", "Run the full estimator and write the selected fit"},
      {"cedr", "Dimension-range diagnostics per degree"},
      {"sweep", "Estimator plus per-cell fits and errors"},
      {"converge", "Error against sample size over repeated data sets"},
      {"kernel", "Identifiability kernels and their spectrum"},
      {"demo-nonident", "Reflection and stationarity non-identifiability cases"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  return run(app.get_subcommands().front()->get_name(), o);
}
