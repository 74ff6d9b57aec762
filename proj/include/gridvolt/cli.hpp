#pragma once

// Command-line entry point: gen-scenarios, train, evaluate, benchmark-k and
// gridcheck. The binary in tools/ only forwards to `run`.

#include "gridvolt/agents.hpp"
#include "gridvolt/env.hpp"
#include "gridvolt/scenario.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridvolt::cli {

enum ExitCode : int { ok = 0, check_failed = 1, input_error = 2, numerical_failure = 3 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One run: grid, scenario generation, environment, agent and trainer settings.
struct RunConfig {
  std::string grid = "ieee13.grid";  ///< resolved against the config file's directory
  std::string agent = "pi-td3";      ///< pi-td3, td3, cafap or none
  scenario::ScenarioConfig scenario;
  env::EnvConfig env;
  agents::TrainerConfig trainer;
  int train_scenarios = 20;
  int eval_scenarios = 20;
  std::uint64_t train_seed0 = 1000;
  std::uint64_t eval_seed0 = 5000;
  std::string eval_dir;  ///< when set, evaluation scenarios are read from here instead of generated

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a config file; relative paths inside it are resolved against its directory.
RunConfig load_config(const std::string& path);

/// Hash of the run-defining fields (output locations and worker counts excluded).
std::string run_hash(const RunConfig& c);

std::shared_ptr<const pf::GridModel> load_run_grid(const RunConfig& c);

using Scenarios = std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>>;
Scenarios generate_set(const RunConfig& c, const pf::GridModel& grid, std::uint64_t seed0, int n);
/// Evaluation set: files from `eval_dir` in name order, or generated from `eval_seed0`.
Scenarios eval_set(const RunConfig& c, const pf::GridModel& grid);

/// Output root: the flag when given, else $GRIDVOLT_OUT/<command>, else out/<command>.
std::string output_dir(const std::string& flag, const std::string& command);

/// Parses `args` (without the program name) and runs the command.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace gridvolt::cli
