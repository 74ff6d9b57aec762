#pragma once

// The charging MDP: observation assembly, transition (fleet, aggregation,
// power flow, exogenous advance) and reward, on plain values and on the tape.

#include "gridvolt/diff.hpp"
#include "gridvolt/fleet.hpp"
#include "gridvolt/powerflow.hpp"
#include "gridvolt/scenario.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

namespace gridvolt::env {

using diff::Mat;
using diff::Var;
using Row = Eigen::RowVectorXd;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RewardConfig {
  double lambda1 = -5e4;  ///< voltage violation weight (magnitude is used)
  double lambda2 = 1.0;   ///< trading weight
  double lambda3 = -10.0; ///< unmet-SoC weight (magnitude is used)
  double v_band = 0.05;
  double soc_target = 0.9;
  int epsilon = 8;        ///< steps before departure at which the SoC penalty activates
  double divergence_penalty = -1e6;

  void validate() const;
  double v_lo() const { return 1.0 - v_band; }
  double v_hi() const { return 1.0 + v_band; }
};

enum class PfMode { tolerance, fixed };

struct EnvConfig {
  RewardConfig reward;
  PfMode pf_mode = PfMode::tolerance;
  double pf_tol = 1e-8;
  int pf_max_iters = 50;
  int pf_fixed_iters = 10;  ///< sweeps on the fixed path and in differentiable rollouts

  void validate() const;
};

void to_json(nlohmann::json& j, const RewardConfig& c);
void from_json(const nlohmann::json& j, RewardConfig& c);
void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

/// Per-row reward pieces; `total` = (violation + trading) + satisfaction.
template <class T>
struct RewardParts {
  T violation;
  T trading;
  T satisfaction;
  T total;
};

/// Row-batched constants of one transition: B rows, N buses, I chargers.
struct StepConstants {
  fleet::FleetArrays fleet;
  Mat p_base_kw;   ///< B x N, load plus (negative) PV
  Mat q_kvar;      ///< B x N
  Mat price_ch;    ///< B x 1
  Mat price_dis;   ///< B x 1
  Mat psi_mask;    ///< B x I, 1 where an occupied EV is within epsilon steps of departure
  const Mat* incidence = nullptr;  ///< I x N charger-to-bus map
  double s_base_kva = 1000.0;
  double dt = 0.25;
};

template <class T>
struct StepValues {
  fleet::Transition<T> fleet;
  T p_inj;  ///< B x N per-unit active injection
  T mags;   ///< B x N
  RewardParts<T> reward;
};

/// Reward on row batches of magnitudes, realized powers and post-action SoC.
template <class T>
RewardParts<T> reward_terms(const RewardConfig& cfg, const StepConstants& c, const T& mags, const T& p_ch, const T& p_dis,
                            const T& soc_after) {
  T viol = diff::scale(diff::sum_cols(pf::violation_terms(mags, cfg.v_lo(), cfg.v_hi())), std::abs(cfg.lambda1));
  T spend = diff::sub(diff::mul(diff::sum_cols(p_ch), c.price_ch), diff::mul(diff::sum_cols(p_dis), c.price_dis));
  T trading = diff::scale(spend, -cfg.lambda2 * c.dt);
  T psi = diff::mul(diff::relu(diff::rsub(cfg.soc_target, soc_after)), c.psi_mask);
  T sat = diff::scale(diff::sum_cols(psi), -std::abs(cfg.lambda3));
  return {viol, trading, sat, diff::add(diff::add(viol, trading), sat)};
}

/// Per-unit active injection of a row batch given realized charger powers.
template <class T>
T injection(const StepConstants& c, const T& p_ch, const T& p_dis) {
  T p_ev = diff::matmul(diff::sub(p_ch, p_dis), *c.incidence);
  return diff::div(diff::add(c.p_base_kw, p_ev), c.s_base_kva);
}

/// Fleet transition, aggregation, fixed-sweep power flow and reward.
template <class T>
StepValues<T> step_values(const pf::GridModel& grid, const RewardConfig& cfg, const StepConstants& c, const T& soc,
                          const T& a, int pf_iters) {
  fleet::Transition<T> tr = fleet::transition(c.fleet, soc, a, c.dt);
  T p = injection(c, tr.p_ch, tr.p_dis);
  T q = diff::lift(diff::div(c.q_kvar, c.s_base_kva), p);
  diff::Complex<T> v = pf::fixed_point_rows(grid, diff::Complex<T>{p, q}, pf_iters);
  T mags = diff::sqrt(diff::c_abs2(v));
  RewardParts<T> r = reward_terms(cfg, c, mags, tr.p_ch, tr.p_dis, tr.soc);
  return {tr, p, mags, r};
}

struct EnvState {
  int t = 0;
  Row obs;
  bool done = false;
};

struct StepOutcome {
  double reward = 0.0;
  double r_violation = 0.0;
  double r_trading = 0.0;
  double r_satisfaction = 0.0;
  Eigen::VectorXd voltages;    ///< per-bus magnitude
  Eigen::VectorXd violations;  ///< per-bus violation term (<= 0)
  double cost = 0.0;           ///< EUR spent this step (purchases minus discharge revenue)
  Row p_ch;                    ///< kW per charger
  Row p_dis;                   ///< kW per charger
  Row soc;                     ///< SoC per charger after the action (0 when unoccupied)
  Row action;                  ///< clipped action actually applied
  bool done = false;
  bool diverged = false;
  int clipped = 0;
  int pf_iterations = 0;
  std::vector<fleet::DepartedRecord> departed;
};

class Env {
 public:
  Env(std::shared_ptr<const pf::GridModel> grid, EnvConfig cfg = {});

  EnvState reset(std::shared_ptr<const scenario::ExogenousTrajectory> trajectory);
  /// Reconstructs the state at step `t` of `trajectory` with the given charger SoC row.
  EnvState restore(std::shared_ptr<const scenario::ExogenousTrajectory> trajectory, int t, const Row& soc);
  std::pair<EnvState, StepOutcome> step(const Row& action);

  const EnvState& state() const { return state_; }
  const fleet::Fleet& fleet() const { return fleet_; }
  const pf::GridModel& grid() const { return *grid_; }
  const EnvConfig& config() const { return cfg_; }
  const scenario::ExogenousTrajectory& trajectory() const { return *traj_; }
  std::shared_ptr<const scenario::ExogenousTrajectory> trajectory_ptr() const { return traj_; }
  std::shared_ptr<const pf::GridModel> grid_ptr() const { return grid_; }
  std::size_t n_chargers() const { return fleet_.size(); }
  std::size_t obs_size() const { return 3 + 2 * grid_->n_bus + 3 * fleet_.size(); }
  int clipped_total() const { return clipped_total_; }

  /// Sessions released so far plus, once done, the ones still connected.
  std::vector<fleet::DepartedRecord> session_records() const;

  /// Transition constants for the current state (one row).
  StepConstants constants() const;
  const Mat& incidence() const { return incidence_; }

 private:
  Row observe() const;
  void check_ready() const;

  std::shared_ptr<const pf::GridModel> grid_;
  EnvConfig cfg_;
  std::shared_ptr<const scenario::ExogenousTrajectory> traj_;
  fleet::Fleet fleet_;
  Mat incidence_;
  EnvState state_;
  std::vector<fleet::DepartedRecord> departed_;
  int clipped_total_ = 0;
};

/// Differentiable K-step objective on a batch of stored segments:
/// sum_j gamma^j c r_j + gamma^K (1 - done) Q(s_K, pi(s_K)), one value per row,
/// where c is `reward_scale` (the unit the critic was trained in).
struct RolloutResult {
  Var objective;           ///< B x 1
  std::vector<Var> rewards;  ///< K entries, each B x 1
  Var final_obs;           ///< B x obs
  Mat bootstrap_mask;      ///< B x 1, (1 - done)
};

using PolicyFn = std::function<Var(const Var& obs)>;
using CriticFn = std::function<Var(const Var& obs, const Var& action)>;

struct RolloutStart {
  std::shared_ptr<const scenario::ExogenousTrajectory> trajectory;
  int t = 0;
  Row soc;
  bool terminal_after_k = false;  ///< episode ends (or terminated) within the K steps
};

/// Throws pf::DivergenceError (listing rows) if any row's power flow diverges.
RolloutResult rollout_diff(diff::Tape& tape, const pf::GridModel& grid, const EnvConfig& cfg,
                           const std::vector<RolloutStart>& starts, int k, double gamma, const PolicyFn& policy,
                           const CriticFn& critic, double reward_scale = 1.0);

}  // namespace gridvolt::env
