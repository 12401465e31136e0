#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pipesim/pipesim.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pipesim: pipeline-parallel LLM serving simulator and capacity planner"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool verbose = false;
  app.add_option("--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--verbose-events", verbose, "write events.log with one line per simulator event");
  app.fallthrough();

  auto* plan = app.add_subcommand("plan", "enumerate and rank deployment plans");
  auto* simulate = app.add_subcommand("simulate", "run the configured plan on the trace");
  auto* sweep = app.add_subcommand("sweep", "grid over request rates, microbatch sizes and machine counts");
  auto* ft = app.add_subcommand("ft-demo", "inject the configured faults with and without replication");
  auto* swap = app.add_subcommand("analyze-swap", "swap benefit over a batch and token-count grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? pipesim::kExitOk : pipesim::kExitUsage;
  }

  try {
    auto cfg = pipesim::load_config(config_path);
    if (seed) cfg.seed = *seed;
    std::string dir = cfg.output_dir;
    if (const char* env = std::getenv("PIPESIM_OUT_DIR"); env && *env) dir = env;
    if (!out_dir.empty()) dir = out_dir;
    const pipesim::OutputDir out(dir);

    int rc = pipesim::kExitUsage;
    if (*plan) rc = pipesim::run_plan(cfg, out);
    if (*simulate) rc = pipesim::run_simulate(cfg, out, verbose);
    if (*sweep) rc = pipesim::run_sweep(cfg, out);
    if (*ft) rc = pipesim::run_ft_demo(cfg, out, verbose);
    if (*swap) rc = pipesim::run_analyze_swap(cfg, out);
    if (rc == pipesim::kExitOk) std::cout << "results written to " << dir << '\n';
    return rc;
  } catch (const pipesim::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return pipesim::kExitInfeasible;
  } catch (const pipesim::SimulationError& e) {
    std::cerr << "simulation error: " << e.what() << '\n';
    return pipesim::kExitSimulation;
  } catch (const pipesim::ProtocolError& e) {
    std::cerr << "simulation error: " << e.what() << '\n';
    return pipesim::kExitSimulation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return pipesim::kExitUsage;
  }
  return pipesim::kExitUsage;
}
