// nhmc validate|conditions|rate|clt|mdp|martingale --config <file> [--workers K] [--svg]

#include <CLI11.hpp>

#include <cstdlib>
#include <exception>
#include <iostream>

#include "nhmc/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Diagnostics for nonhomogeneous Markov chains"};
  app.require_subcommand(1);
  std::string config_path;
  nhmc::RunOptions options;
  for (const char* name : {"validate", "conditions", "rate", "clt", "mdp", "martingale"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--workers", options.workers, "worker threads, 0 = all cores")->default_val(1);
    sub->add_flag("--svg", options.svg, "also write SVG plots where available");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    nhmc::ExperimentConfig config = nhmc::load_config(config_path);
    if (const char* dir = std::getenv("NHMC_OUTPUT_DIR"); dir != nullptr && *dir != '\0') config.output_dir = dir;
    const nhmc::RunResult result = nhmc::run_command(command, config, options, std::cout);
    if (result.exit_code != 0) std::cerr << "nhmc " << command << ": FAIL\n";
    return result.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "nhmc " << command << ": " << e.what() << '\n';
    return nhmc::exit_code_for(e);
  }
}
