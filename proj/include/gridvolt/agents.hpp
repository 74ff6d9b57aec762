#pragma once

// Networks, optimizers, TD3 and its physics-informed actor update, baseline
// controllers, checkpoints and the training loop.

#include "gridvolt/diff.hpp"
#include "gridvolt/env.hpp"
#include "gridvolt/scenario.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridvolt::agents {

using diff::Mat;
using diff::Var;
using Row = Eigen::RowVectorXd;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Non-finite loss or parameter; `diagnostics` holds a JSON dump of the offending update.
struct NumericalFailure : std::runtime_error {
  NumericalFailure(const std::string& what, nlohmann::json diagnostics);
  nlohmann::json diagnostics;
};
/// More than the allowed fraction of rollout rows diverged.
struct RolloutAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Activation { identity, tanh };

/// Tape leaves for one network's parameters.
struct BoundParams {
  std::vector<Var> w;
  std::vector<Var> b;
};

/// Fully connected network with ReLU hidden layers.
class MLP {
 public:
  MLP() = default;
  MLP(std::vector<int> sizes, Activation output, std::mt19937_64& rng);

  Mat forward(const Mat& x) const;
  Var forward(const Var& x, const BoundParams& p) const;
  Var forward(const Mat& x, const BoundParams& p) const;
  BoundParams bind(diff::Tape& tape) const;

  std::size_t param_count() const;
  const std::vector<int>& sizes() const { return sizes_; }
  Activation output() const { return output_; }
  int inputs() const { return sizes_.front(); }
  int outputs() const { return sizes_.back(); }

  /// Weights then biases, layer by layer.
  std::vector<Mat*> params();
  std::vector<const Mat*> params() const;
  std::vector<Mat>& weights() { return w_; }
  std::vector<Mat>& biases() { return b_; }

 private:
  std::vector<int> sizes_;
  Activation output_ = Activation::identity;
  std::vector<Mat> w_;  ///< fan_in x fan_out
  std::vector<Mat> b_;  ///< 1 x fan_out
};

/// Gradients of a bound network after `backward`, in `MLP::params` order.
std::vector<Mat> gradients(const diff::Tape& tape, const BoundParams& p);

/// theta' <- tau theta + (1 - tau) theta'.
void soft_update(const MLP& net, MLP& target, double tau);

/// Adaptive-moment optimizer; `weight_decay` is decoupled (AdamW) when positive.
class Adam {
 public:
  Adam() = default;
  Adam(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::vector<Mat*> params, const std::vector<Mat>& grads);

  double lr = 3e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;
};

/// Affine feature scaling (obs - mean) * inv_std, fitted once and then frozen.
struct ObsNormalizer {
  Row mean;
  Row inv_std;

  static ObsNormalizer fit(const std::vector<Row>& samples, double min_std = 1e-2);
  static ObsNormalizer identity(Eigen::Index n);
  Mat apply(const Mat& obs) const;
  Var apply(const Var& obs) const;
};

enum class Algorithm { pi_td3, td3 };

struct TrainerConfig {
  Algorithm algorithm = Algorithm::pi_td3;
  bool physics_rollout = true;  ///< false: PI-TD3 falls back to the critic-only actor gradient
  double gamma = 0.99;
  double sigma_explore = 0.1;
  double sigma_smooth = 0.2;
  double noise_clip = 0.5;
  double tau = 0.005;
  int batch_size = 64;
  int k = 20;
  int actor_delay = 2;
  double lr_actor = 3e-4;
  double lr_critic = 3e-4;
  double weight_decay = 0.0;
  std::vector<int> hidden{256, 256};
  int epochs = 100;           ///< training episodes
  int eval_every = 5;         ///< epochs between evaluations
  int warmup_steps = 500;     ///< uniform random actions before learning starts
  int updates_per_step = 1;
  double reward_scale = 1e-3; ///< rewards are multiplied by this for learning
  std::size_t store_capacity = 1000000;
  double max_drop_fraction = 0.5;
  std::vector<std::uint64_t> seeds{1};

  void validate() const;
  int effective_k() const { return algorithm == Algorithm::pi_td3 && physics_rollout ? k : 1; }
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);
std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct UpdateStats {
  double critic_loss = 0.0;
  std::optional<double> actor_loss;
  int dropped_rows = 0;
};

/// Actor, twin critics, their targets and optimizers.
class TD3Agent {
 public:
  TD3Agent(std::size_t obs_size, std::size_t action_size, TrainerConfig cfg, std::uint64_t seed);

  /// tanh policy output plus N(0, noise_std) noise, clipped to [-1, 1].
  Row act(const Row& obs, double noise_std = 0.0);
  Row act_deterministic(const Row& obs) const;

  /// Twin-critic TD targets y = c r + gamma (1 - done) min(Q1', Q2')(s', pi'(s') + clipped noise).
  Mat td_targets(const std::vector<const scenario::StepRecord*>& batch, bool smooth_noise = true);
  double critic_update(const std::vector<const scenario::StepRecord*>& batch);
  /// Ascends Q1(s, pi(s)).
  double td3_actor_update(const std::vector<const scenario::StepRecord*>& batch);
  /// Ascends the K-step rollout objective; divergent rows are dropped and counted.
  double pi_actor_update(const pf::GridModel& grid, const env::EnvConfig& env_cfg,
                         const std::vector<scenario::TrajectorySegment>& segments, int* dropped = nullptr);
  void soft_update_targets();

  /// One training update from the store; nullopt until enough data exists.
  std::optional<UpdateStats> update(const scenario::TrajectoryStore& store, const pf::GridModel& grid,
                                    const env::EnvConfig& env_cfg);

  /// The rollout objective (mean over rows) for the current actor, used by the update and by checks.
  Var rollout_objective(diff::Tape& tape, const BoundParams& actor, const pf::GridModel& grid,
                        const env::EnvConfig& env_cfg, const std::vector<env::RolloutStart>& starts, int k) const;

  void set_normalizer(ObsNormalizer n) { norm_ = std::move(n); }
  const ObsNormalizer& normalizer() const { return norm_; }
  const TrainerConfig& config() const { return cfg_; }
  MLP& actor() { return actor_; }
  const MLP& actor() const { return actor_; }
  MLP& critic1() { return critic1_; }
  MLP& critic2() { return critic2_; }
  const MLP& actor_target() const { return actor_t_; }
  const MLP& critic1_target() const { return critic1_t_; }
  const MLP& critic2_target() const { return critic2_t_; }
  std::int64_t update_count() const { return updates_; }
  std::int64_t env_steps() const { return env_steps_; }
  void count_env_step() { ++env_steps_; }
  int epochs_done() const { return epochs_; }
  void count_epoch() { ++epochs_; }
  std::mt19937_64& rng() { return rng_; }

  void save(std::ostream& out) const;
  void save(const std::string& path) const;
  static TD3Agent load(std::istream& in);
  static TD3Agent load(const std::string& path);

 private:
  Mat critic_input(const Mat& obs_n, const Mat& action) const;

  TrainerConfig cfg_;
  std::size_t obs_size_ = 0;
  std::size_t action_size_ = 0;
  std::mt19937_64 rng_;
  ObsNormalizer norm_;
  MLP actor_, critic1_, critic2_;
  MLP actor_t_, critic1_t_, critic2_t_;
  Adam actor_opt_, critic1_opt_, critic2_opt_;
  std::int64_t updates_ = 0;
  std::int64_t env_steps_ = 0;
  int epochs_ = 0;
};

// ---------------------------------------------------------------------------
// Controllers used by evaluation.

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  virtual Row act(const env::Env& env) = 0;
};

/// Full rate for every occupied charger below full SoC.
Row act_cafap(const fleet::Fleet& fleet);
Row act_none(std::size_t n_chargers);

class CafapController : public Controller {
 public:
  std::string name() const override { return "cafap"; }
  Row act(const env::Env& env) override { return act_cafap(env.fleet()); }
};

class NoneController : public Controller {
 public:
  std::string name() const override { return "none"; }
  Row act(const env::Env& env) override { return act_none(env.n_chargers()); }
};

/// Deterministic learned policy; shares the agent read-only.
class PolicyController : public Controller {
 public:
  PolicyController(std::shared_ptr<const TD3Agent> agent, std::string name)
      : agent_(std::move(agent)), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  Row act(const env::Env& env) override { return agent_->act_deterministic(env.state().obs); }

 private:
  std::shared_ptr<const TD3Agent> agent_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Training loop.

struct CurvePoint {
  int epoch = 0;
  std::int64_t env_step = 0;
  std::int64_t updates = 0;
  double eval_reward_mean = 0.0;
  double eval_reward_std = 0.0;
  int dropped_rows = 0;
  int aborted_updates = 0;
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  std::shared_ptr<TD3Agent> final_agent;
  std::shared_ptr<TD3Agent> best_agent;
  double best_eval_reward = 0.0;
};

/// Greedy returns of `agent` on each scenario.
std::vector<double> evaluate_returns(const TD3Agent& agent, std::shared_ptr<const pf::GridModel> grid,
                                     const env::EnvConfig& env_cfg,
                                     const std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>>& scenarios);

struct TrainInputs {
  std::shared_ptr<const pf::GridModel> grid;
  env::EnvConfig env;
  TrainerConfig trainer;
  std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>> train;
  std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>> eval;
};

/// Runs the training loop for one seed. `resume` continues an existing agent.
TrainResult train(const TrainInputs& in, std::uint64_t seed, std::shared_ptr<TD3Agent> resume = nullptr);

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve);
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve);

}  // namespace gridvolt::agents
