#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "runstop/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDependency = 3, kConvergence = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Timeout effects on scoring runs: ingest, detect, match, estimate, report."};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::string> profile;
  app.add_option("--config", config_path, "Flat key = value config file");
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--jobs", jobs, "Worker thread cap");
  app.add_option("--profile", profile, "Matching profile")->check(CLI::IsMember({"desk", "paper"}));

  std::vector<std::pair<CLI::App*, std::optional<runstop::Stage>>> subs;
  for (const auto& [name, stage] : runstop::stage_names())
    subs.emplace_back(app.add_subcommand(name, "Run the " + name + " stage"), stage);
  subs.emplace_back(app.add_subcommand("all", "Run every stage in order"), std::nullopt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    auto cfg = runstop::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = std::max(1u, *jobs);
    if (profile) runstop::apply_profile(cfg, *profile);
    for (const auto& [sub, stage] : subs) {
      if (!sub->parsed()) continue;
      if (stage) runstop::run_stage(*stage, cfg);
      else runstop::run_all(cfg);
    }
    std::cout << "outputs in " << cfg.output_dir << "\n";
    return kOk;
  } catch (const runstop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const runstop::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kDependency;
  } catch (const runstop::ConvergenceError& e) {
    std::cerr << "convergence failure: " << e.what() << "\n";
    return kConvergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
