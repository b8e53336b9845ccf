// Command-line front end: miccd --config exp.json --stage all --out out/

#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "miccd/config.hpp"
#include "miccd/error.hpp"
#include "miccd/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitRuntime = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Minimum-cost causal decision pipeline"};
  std::string config_path, stage = "all", out_dir;
  std::vector<std::string> overrides;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  bool quiet = false;

  app.add_option("--config", config_path, "Experiment config (JSON)")->required();
  app.add_option("--stage", stage, "gen | cluster | train | decide | eval | report | all");
  app.add_option("--set", overrides, "Override a config field, e.g. train.epochs=5 (repeatable)");
  app.add_option("--workers", workers, "Parallel (dataset, seed) cells")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory (overrides config output)");
  app.add_flag("-q,--quiet", quiet, "No progress lines on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    const miccd::ExperimentConfig cfg = miccd::load_config(config_path, overrides);
    const miccd::Stage st = miccd::parse_stage(stage);
    miccd::RunOptions opts;
    opts.workers = workers;
    opts.log = quiet ? nullptr : &std::cerr;
    miccd::run_pipeline(cfg, st, out_dir.empty() ? cfg.output : out_dir, opts);
  } catch (const miccd::ConfigInvalid& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const miccd::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
