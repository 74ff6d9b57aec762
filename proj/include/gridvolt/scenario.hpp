#pragma once

// Exogenous trajectories (loads, PV, prices, EV sessions): synthetic
// generation, the versioned text format, and the replay store that serves
// length-K segments for differentiable rollouts.

#include "gridvolt/fleet.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridvolt::scenario {

using fleet::EVSession;

struct ScenarioParseError : std::runtime_error {
  ScenarioParseError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line = 0;
};
struct UnsupportedVersion : ScenarioParseError {
  using ScenarioParseError::ScenarioParseError;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExogenousFrame {
  int t = 0;
  double hour = 0.0;
  std::vector<double> p_load;  ///< kW per bus
  std::vector<double> q_load;  ///< kvar per bus
  std::vector<double> p_pv;    ///< kW per bus, non-positive (generation reduces load)
  double price_ch = 0.0;       ///< EUR/kWh
  double price_dis = 0.0;      ///< EUR/kWh
};

struct ExogenousTrajectory {
  std::string grid_id;
  std::uint64_t seed = 0;
  double dt = 0.25;
  std::size_t n_bus = 0;
  std::vector<int> charger_bus;  ///< bus index (0-based, slack excluded) per charger
  std::vector<ExogenousFrame> frames;
  std::vector<EVSession> sessions;

  int horizon() const { return static_cast<int>(frames.size()); }
  std::size_t n_chargers() const { return charger_bus.size(); }
  /// Throws ConfigError / ScenarioValidationError on any inconsistency.
  void validate() const;
};

bool operator==(const ExogenousFrame& a, const ExogenousFrame& b);
bool operator==(const ExogenousTrajectory& a, const ExogenousTrajectory& b);

struct ScenarioConfig {
  std::string grid_id = "ieee13";
  int horizon = 96;
  double dt = 0.25;
  double start_hour = 0.0;
  int chargers_per_bus = 2;
  int n_chargers = 0;  ///< overrides chargers_per_bus when positive

  double nominal_load_kw = 0.0;       ///< total feeder demand; taken from the grid when 0
  double load_multiplier = 1.0;
  double load_peak_fraction = 0.8;    ///< daily peak relative to nominal
  double load_noise = 0.05;
  double bus_weight_spread = 0.5;     ///< per-bus weights drawn in [1 - spread, 1 + spread]
  double power_factor = 0.95;

  double pv_peak_fraction = 0.3;      ///< PV peak relative to nominal per-bus demand
  double pv_bus_share = 0.5;          ///< fraction of buses hosting PV
  double cloud_noise = 0.3;

  double price_base = 0.10;
  double price_noise = 0.01;
  double price_dis_ratio = 1.0;

  double arrivals_per_charger_day = 2.0;
  double min_stay_h = 2.0;
  double max_stay_h = 10.0;
  double e_max_min = 40.0;
  double e_max_max = 80.0;
  double soc_arrival_min = 0.2;
  double soc_arrival_max = 0.6;
  double soc_target_min = 0.8;
  double soc_target_max = 1.0;
  std::vector<double> p_ch_choices{11.0, 22.0};
  double v2g_power_ratio = 1.0;       ///< p_dis_max = ratio * p_ch_max
  double soc_min_v2g = 0.1;
  int max_retries = 100;

  void validate() const;
};

void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);

/// Deterministic in (cfg, n_bus, nominal_load_kw, seed); consumes no policy input.
ExogenousTrajectory generate_scenario(const ScenarioConfig& cfg, std::size_t n_bus, double grid_nominal_load_kw,
                                      std::uint64_t seed);

/// Multiplies every load and reactive load by `factor` (load-multiplier sweeps).
ExogenousTrajectory scale_loads(ExogenousTrajectory traj, double factor);

void save_trajectory(std::ostream& out, const ExogenousTrajectory& traj);
void save_trajectory(const std::string& path, const ExogenousTrajectory& traj);
ExogenousTrajectory load_trajectory(std::istream& in, const std::string& source = "<stream>");
ExogenousTrajectory load_trajectory(const std::string& path);

// ---------------------------------------------------------------------------
// Replay store.

struct StepRecord {
  int t = 0;
  Eigen::RowVectorXd obs;
  Eigen::RowVectorXd action;
  double reward = 0.0;
  Eigen::RowVectorXd next_obs;
  bool done = false;
  Eigen::RowVectorXd soc;  ///< charger SoC before the action (0 when unoccupied)
};

struct Episode {
  std::uint64_t id = 0;
  std::shared_ptr<const ExogenousTrajectory> trajectory;
  std::vector<StepRecord> steps;
};

/// K consecutive steps of one stored episode starting at `start`.
struct TrajectorySegment {
  std::shared_ptr<const Episode> episode;
  std::size_t start = 0;
  int k = 1;

  const StepRecord& step(int j) const { return episode->steps.at(start + static_cast<std::size_t>(j)); }
  const ExogenousTrajectory& trajectory() const { return *episode->trajectory; }
};

/// FIFO store of episodes with a capacity counted in transitions. Writers and
/// samplers are serialized by an internal mutex.
class TrajectoryStore {
 public:
  explicit TrajectoryStore(std::size_t capacity);

  std::uint64_t begin_episode(std::shared_ptr<const ExogenousTrajectory> trajectory);
  void append(std::uint64_t episode_id, StepRecord record);

  std::size_t size() const;
  std::size_t episodes() const;
  std::size_t eligible_starts(int k) const;

  /// B uniformly drawn length-K segments; nullopt when fewer than B start
  /// points exist. K larger than the longest trajectory horizon is an error.
  std::optional<std::vector<TrajectorySegment>> sample(int k, std::size_t batch, std::mt19937_64& rng) const;

 private:
  void evict_locked();

  std::size_t capacity_;
  std::size_t total_ = 0;
  std::uint64_t next_id_ = 0;
  int max_horizon_ = 0;
  std::vector<std::shared_ptr<Episode>> episodes_;
  mutable std::mutex mu_;
};

}  // namespace gridvolt::scenario
