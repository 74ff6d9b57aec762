#pragma once

// Episode evaluation, the metric suite, aggregation over scenario sets, the
// exhaustive small-instance planner and report files.

#include "gridvolt/agents.hpp"
#include "gridvolt/env.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gridvolt::eval {

using Row = Eigen::RowVectorXd;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SearchTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpisodeMetrics {
  double cost_eur = 0.0;
  double satisfaction_pct = 0.0;  ///< mean over sessions (still-connected ones scored at episode end)
  long vv_per_bus = 0;            ///< bus-steps outside the band
  long vv_per_step = 0;           ///< steps with at least one bus outside the band
  double vv_pu = 0.0;             ///< sum of max(0, |1 - |v|| - band)
  double energy_charged_mwh = 0.0;
  double energy_discharged_mwh = 0.0;
  double total_reward = 0.0;
  double step_time_sec = 0.0;     ///< mean wall-clock per step (controller plus environment)
  int steps = 0;
  int sessions = 0;
  bool partial = false;           ///< episode ended by power-flow divergence
};

/// Names and accessors of the aggregated (non-timing) metrics, in report order.
const std::vector<std::pair<std::string, std::function<double(const EpisodeMetrics&)>>>& metric_fields();

struct StepTrace {
  int t = 0;
  double reward = 0.0;
  double r_violation = 0.0;
  double r_trading = 0.0;
  double r_satisfaction = 0.0;
  double cost = 0.0;
  bool diverged = false;
  Eigen::VectorXd voltages;
  Row p_ch;
  Row p_dis;
  Row soc;  ///< after the step
};

struct SessionTrace {
  int charger_id = 0;
  int t_arrival = 0;
  int t_depart = 0;
  double e_target = 0.0;
  double e_depart = 0.0;
  bool departed = true;
};

struct EpisodeTrace {
  double dt = 0.25;
  double v_band = 0.05;
  std::vector<StepTrace> steps;
  std::vector<SessionTrace> sessions;
};

struct EpisodeResult {
  EpisodeMetrics metrics;
  EpisodeTrace trace;
};

EpisodeResult run_episode(agents::Controller& controller, std::shared_ptr<const scenario::ExogenousTrajectory> traj,
                          std::shared_ptr<const pf::GridModel> grid, const env::EnvConfig& cfg);

/// Per-step and per-session CSV traces.
void write_step_trace(std::ostream& out, const EpisodeTrace& trace);
void write_session_trace(std::ostream& out, const EpisodeTrace& trace);

/// Recomputes every metric (except timing) from the two CSV traces.
EpisodeMetrics recount_metrics(std::istream& steps_csv, std::istream& sessions_csv, double dt, double v_band);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
};

struct AlgorithmSummary {
  std::string name;
  std::map<std::string, MetricSummary> metrics;
  MetricSummary step_time_sec;
  int partial_episodes = 0;
  std::vector<EpisodeMetrics> episodes;
};

struct SummaryTable {
  int scenario_count = 0;
  std::string config_hash;
  std::vector<AlgorithmSummary> algorithms;  ///< in the order the controllers were given
};

/// Builds a fresh controller per worker.
using ControllerFactory = std::function<std::unique_ptr<agents::Controller>()>;

struct SuiteResult {
  SummaryTable table;
  /// traces[a][s]: algorithm a on scenario s.
  std::vector<std::vector<EpisodeTrace>> traces;
};

SuiteResult evaluate_suite(const std::vector<ControllerFactory>& controllers,
                           const std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>>& scenarios,
                           std::shared_ptr<const pf::GridModel> grid, const env::EnvConfig& cfg,
                           const std::string& config_hash, int workers = 1);

MetricSummary summarize(const std::vector<double>& xs);

/// 16-hex-digit FNV-1a hash of raw bytes.
std::string bytes_hash(std::string_view bytes);
/// bytes_hash of the canonical JSON dump.
std::string config_hash(const nlohmann::json& config);

struct Plan {
  std::vector<Row> actions;
  double objective = 0.0;
  long evaluated = 0;  ///< leaf sequences scored
};

/// Exhaustive search over `levels` per charger per step for the next `horizon`
/// steps from the environment's current state; refuses spaces above `max_plans`.
Plan brute_force_plan(const env::Env& start, const std::vector<double>& levels, int horizon, double max_plans = 1e7);

/// Cumulative reward of a fixed action sequence from the environment's current state.
double plan_objective(const env::Env& start, const std::vector<Row>& actions);

/// Cumulative reward of a controller over the next `horizon` steps.
double controller_objective(const env::Env& start, agents::Controller& controller, int horizon);

// Report files: summary.csv, summary.json, timing.csv and per-episode traces.
void write_summary_csv(std::ostream& out, const SummaryTable& table);
void write_timing_csv(std::ostream& out, const SummaryTable& table);
nlohmann::json summary_to_json(const SummaryTable& table);
SummaryTable summary_from_json(const nlohmann::json& j);

void export_report(const SuiteResult& result, const std::string& out_dir, bool with_traces = true);

}  // namespace gridvolt::eval
