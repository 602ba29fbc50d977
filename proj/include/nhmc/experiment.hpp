#pragma once
// Declarative experiment configs and the runners behind the nhmc CLI.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "nhmc/chain_core.hpp"
#include "nhmc/simulate.hpp"

namespace nhmc {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kLibraryVersion = "0.1.0";

struct ExperimentConfig {
  nlohmann::ordered_json source;  // config as read, echoed into the manifest

  KernelFamily family = KernelFamily::constant(TruncatedKernel::identity(2));
  InitialDistribution initial = InitialDistribution::point_mass(2, 0);
  std::vector<Observable> observables;
  std::vector<std::string> observable_names;

  double speed_beta = 0.6;
  std::vector<std::size_t> n_grid;
  std::vector<double> x_grid;
  std::size_t trials = 1000;
  std::uint64_t base_seed = 1;
  std::filesystem::path output_dir = "nhmc_out";

  std::vector<std::size_t> validate_k{1, 2, 10, 100, 1000, 100000};

  std::size_t m_sup_range = 200;
  // Cesaro products cost O(M * n * N^2), so that condition runs on its own
  // smaller grid.
  std::vector<std::size_t> cesaro_n_grid;
  std::size_t cesaro_m_sup_range = 10;

  MdpMethod mdp_method = MdpMethod::Auto;
  std::size_t mdp_trials = 0;
  double dp_budget = 2e9;

  std::vector<double> z;  // martingale weights, one per observable
};

// Throws InvalidModel on any schema or model problem.
ExperimentConfig parse_config(const nlohmann::ordered_json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

KernelFamily family_from_json(const nlohmann::ordered_json& spec);
InitialDistribution initial_from_json(const nlohmann::ordered_json& spec, std::size_t n_states);
Observable observable_from_json(const nlohmann::ordered_json& spec, std::size_t n_states, std::string* name);

struct RunOptions {
  unsigned workers = 1;
  bool svg = false;
};

struct RunResult {
  int exit_code = 0;
  std::vector<std::filesystem::path> files;  // relative to the output dir
  nlohmann::ordered_json summary;
};

// Runs one of validate|conditions|rate|clt|mdp|martingale, writes its files
// and updates manifest.json in the output directory. Library exceptions
// propagate; see exit_code_for.
RunResult run_command(const std::string& command, const ExperimentConfig& config, const RunOptions& options,
                      std::ostream& log);

// 0 ok, 2 invalid config or kernel, 3 hypothesis violated, 4 budget, 1 other.
int exit_code_for(const std::exception& error);

std::string sha256_hex(const std::filesystem::path& file);
// %.17g, the column format of every CSV.
std::string format_double(double v);

}  // namespace nhmc
