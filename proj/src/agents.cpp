#include "gridvolt/agents.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gridvolt::agents {

NumericalFailure::NumericalFailure(const std::string& what, nlohmann::json diag)
    : std::runtime_error(what), diagnostics(std::move(diag)) {}

// ---------------------------------------------------------------------------
// MLP.

MLP::MLP(std::vector<int> sizes, Activation output, std::mt19937_64& rng) : sizes_(std::move(sizes)), output_(output) {
  if (sizes_.size() < 2) throw ConfigError("a network needs at least an input and an output layer");
  for (int s : sizes_) {
    if (s < 1) throw ConfigError("layer sizes must be positive");
  }
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat w(sizes_[l], sizes_[l + 1]);
    Mat b(1, sizes_[l + 1]);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    }
    for (Eigen::Index j = 0; j < b.cols(); ++j) b(0, j) = u(rng);
    w_.push_back(std::move(w));
    b_.push_back(std::move(b));
  }
}

namespace {

template <class H>
H activate(const H& z, bool last, Activation out) {
  if (!last) return diff::relu(z);
  return out == Activation::tanh ? diff::tanh(z) : z;
}

template <class X, class P>
auto run_mlp(const X& x, const std::vector<P>& w, const std::vector<P>& b, Activation out) {
  const std::size_t layers = w.size();
  auto h = activate(diff::add_row(diff::matmul(x, w[0]), b[0]), layers == 1, out);
  for (std::size_t l = 1; l < layers; ++l) h = activate(diff::add_row(diff::matmul(h, w[l]), b[l]), l + 1 == layers, out);
  return h;
}

void check_input(const MLP& net, Eigen::Index cols) {
  if (cols != net.inputs()) {
    throw ConfigError(fmt::format("network expects {} inputs, got {}", net.inputs(), cols));
  }
}

}  // namespace

Mat MLP::forward(const Mat& x) const {
  check_input(*this, x.cols());
  return run_mlp(x, w_, b_, output_);
}

Var MLP::forward(const Var& x, const BoundParams& p) const {
  check_input(*this, x.cols());
  return run_mlp(x, p.w, p.b, output_);
}

Var MLP::forward(const Mat& x, const BoundParams& p) const {
  check_input(*this, x.cols());
  return run_mlp(x, p.w, p.b, output_);
}

BoundParams MLP::bind(diff::Tape& tape) const {
  BoundParams p;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    p.w.push_back(tape.leaf(w_[l]));
    p.b.push_back(tape.leaf(b_[l]));
  }
  return p;
}

std::size_t MLP::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    n += static_cast<std::size_t>(sizes_[l] + 1) * static_cast<std::size_t>(sizes_[l + 1]);
  }
  return n;
}

std::vector<Mat*> MLP::params() {
  std::vector<Mat*> out;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    out.push_back(&w_[l]);
    out.push_back(&b_[l]);
  }
  return out;
}

std::vector<const Mat*> MLP::params() const {
  std::vector<const Mat*> out;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    out.push_back(&w_[l]);
    out.push_back(&b_[l]);
  }
  return out;
}

std::vector<Mat> gradients(const diff::Tape& tape, const BoundParams& p) {
  std::vector<Mat> out;
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    out.push_back(tape.grad(p.w[l]));
    out.push_back(tape.grad(p.b[l]));
  }
  return out;
}

void soft_update(const MLP& net, MLP& target, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  auto src = net.params();
  auto dst = target.params();
  if (src.size() != dst.size()) throw ConfigError("soft update between networks of different depth");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->rows() != dst[i]->rows() || src[i]->cols() != dst[i]->cols()) {
      throw ConfigError("soft update between networks of different shape");
    }
    *dst[i] = tau * *src[i] + (1.0 - tau) * *dst[i];
  }
}

// ---------------------------------------------------------------------------
// Adam.

Adam::Adam(double lr_, double wd, double b1, double b2, double e)
    : lr(lr_), weight_decay(wd), beta1(b1), beta2(b2), eps(e) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

void Adam::step(std::vector<Mat*> params, const std::vector<Mat>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("parameter and gradient counts differ");
  if (m.empty()) {
    for (const Mat* p : params) {
      m.push_back(Mat::Zero(p->rows(), p->cols()));
      v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  if (m.size() != params.size()) throw std::invalid_argument("optimizer state does not match the parameters");
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
    if (weight_decay > 0.0) *params[i] -= (lr * weight_decay) * *params[i];
    Mat step = ((m[i] / c1).array() / ((v[i] / c2).array().sqrt() + eps)).matrix();
    *params[i] -= lr * step;
  }
}

// ---------------------------------------------------------------------------
// Observation normalizer.

ObsNormalizer ObsNormalizer::fit(const std::vector<Row>& samples, double min_std) {
  if (samples.empty()) throw std::invalid_argument("normalizer needs samples");
  const Eigen::Index n = samples.front().size();
  Row mean = Row::Zero(n);
  for (const auto& s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  Row var = Row::Zero(n);
  for (const auto& s : samples) var += (s - mean).cwiseProduct(s - mean);
  var /= static_cast<double>(samples.size());
  Row inv(n);
  for (Eigen::Index i = 0; i < n; ++i) inv(i) = 1.0 / std::max(std::sqrt(var(i)), min_std);
  return {mean, inv};
}

ObsNormalizer ObsNormalizer::identity(Eigen::Index n) { return {Row::Zero(n), Row::Ones(n)}; }

Mat ObsNormalizer::apply(const Mat& obs) const {
  Mat d = inv_std.asDiagonal();
  return diff::add_row(diff::matmul(obs, d), Mat(-mean.cwiseProduct(inv_std)));
}

Var ObsNormalizer::apply(const Var& obs) const {
  Mat d = inv_std.asDiagonal();
  return diff::add_row(diff::matmul(obs, d), Mat(-mean.cwiseProduct(inv_std)));
}

// ---------------------------------------------------------------------------
// Config.

void TrainerConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (k < 1) throw ConfigError("rollout horizon K must be at least 1");
  if (!(noise_clip > 0.0)) throw ConfigError("noise_clip must be positive");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (actor_delay < 1) throw ConfigError("actor_delay must be at least 1");
  if (!(lr_actor > 0.0 && lr_critic > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(sigma_explore >= 0.0 && sigma_smooth >= 0.0)) throw ConfigError("noise scales must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (hidden.empty()) throw ConfigError("at least one hidden layer is required");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("hidden sizes must be positive");
  }
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (updates_per_step < 0) throw ConfigError("updates_per_step must be non-negative");
  if (!(reward_scale > 0.0)) throw ConfigError("reward_scale must be positive");
  if (store_capacity < 1) throw ConfigError("store_capacity must be positive");
  if (!(max_drop_fraction >= 0.0 && max_drop_fraction < 1.0)) throw ConfigError("max_drop_fraction must lie in [0, 1)");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
}

std::string to_string(Algorithm a) { return a == Algorithm::pi_td3 ? "pi-td3" : "td3"; }

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "pi-td3") return Algorithm::pi_td3;
  if (s == "td3") return Algorithm::td3;
  throw ConfigError(fmt::format("unknown algorithm '{}' (expected pi-td3 or td3)", s));
}

#define GRIDVOLT_TRAINER_FIELDS(X)                                                                                   \
  X(physics_rollout) X(gamma) X(sigma_explore) X(sigma_smooth) X(noise_clip) X(tau) X(batch_size) X(k)               \
  X(actor_delay) X(lr_actor) X(lr_critic) X(weight_decay) X(hidden) X(epochs) X(eval_every) X(warmup_steps)          \
  X(updates_per_step) X(reward_scale) X(store_capacity) X(max_drop_fraction) X(seeds)

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json::object();
  j["algorithm"] = to_string(c.algorithm);
#define X(f) j[#f] = c.f;
  GRIDVOLT_TRAINER_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  if (!j.is_object()) throw ConfigError("trainer config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "algorithm") {
        c.algorithm = algorithm_from_string(value.get<std::string>());
        continue;
      }
#define X(f)                \
  if (key == #f) {          \
    value.get_to(c.f);      \
    continue;               \
  }
      GRIDVOLT_TRAINER_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("trainer config key '{}': {}", key, e.what()));
    }
    throw ConfigError(fmt::format("unknown trainer config key '{}'", key));
  }
}

// ---------------------------------------------------------------------------
// TD3 agent.

namespace {

std::vector<int> layer_sizes(std::size_t in, const std::vector<int>& hidden, std::size_t out) {
  std::vector<int> s{static_cast<int>(in)};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(static_cast<int>(out));
  return s;
}

Mat stack(const std::vector<const scenario::StepRecord*>& batch, Row scenario::StepRecord::*field) {
  Mat m(static_cast<Eigen::Index>(batch.size()), (batch.front()->*field).size());
  for (std::size_t r = 0; r < batch.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = batch[r]->*field;
  return m;
}

bool finite(const Mat& m) { return m.allFinite(); }

}  // namespace

TD3Agent::TD3Agent(std::size_t obs_size, std::size_t action_size, TrainerConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), obs_size_(obs_size), action_size_(action_size), rng_(seed) {
  cfg_.validate();
  if (obs_size == 0 || action_size == 0) throw ConfigError("observation and action sizes must be positive");
  norm_ = ObsNormalizer::identity(static_cast<Eigen::Index>(obs_size));
  actor_ = MLP(layer_sizes(obs_size, cfg_.hidden, action_size), Activation::tanh, rng_);
  critic1_ = MLP(layer_sizes(obs_size + action_size, cfg_.hidden, 1), Activation::identity, rng_);
  critic2_ = MLP(layer_sizes(obs_size + action_size, cfg_.hidden, 1), Activation::identity, rng_);
  actor_t_ = actor_;
  critic1_t_ = critic1_;
  critic2_t_ = critic2_;
  actor_opt_ = Adam(cfg_.lr_actor, cfg_.weight_decay);
  critic1_opt_ = Adam(cfg_.lr_critic, cfg_.weight_decay);
  critic2_opt_ = Adam(cfg_.lr_critic, cfg_.weight_decay);
}

Mat TD3Agent::critic_input(const Mat& obs_n, const Mat& action) const { return diff::concat_cols({obs_n, action}); }

Row TD3Agent::act_deterministic(const Row& obs) const {
  if (obs.size() != static_cast<Eigen::Index>(obs_size_)) {
    throw ConfigError(fmt::format("observation has {} entries, expected {}", obs.size(), obs_size_));
  }
  return actor_.forward(norm_.apply(Mat(obs))).row(0);
}

Row TD3Agent::act(const Row& obs, double noise_std) {
  Row a = act_deterministic(obs);
  if (noise_std > 0.0) {
    std::normal_distribution<double> n(0.0, noise_std);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = std::clamp(a(i) + n(rng_), -1.0, 1.0);
  }
  return a;
}

Mat TD3Agent::td_targets(const std::vector<const scenario::StepRecord*>& batch, bool smooth_noise) {
  Mat next = norm_.apply(stack(batch, &scenario::StepRecord::next_obs));
  Mat a = actor_t_.forward(next);
  if (smooth_noise && cfg_.sigma_smooth > 0.0) {
    std::normal_distribution<double> n(0.0, cfg_.sigma_smooth);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        a(i, j) = std::clamp(a(i, j) + std::clamp(n(rng_), -cfg_.noise_clip, cfg_.noise_clip), -1.0, 1.0);
      }
    }
  }
  Mat in = critic_input(next, a);
  Mat q = critic1_t_.forward(in).cwiseMin(critic2_t_.forward(in));
  Mat y(q.rows(), 1);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const auto& rec = *batch[static_cast<std::size_t>(r)];
    y(r, 0) = cfg_.reward_scale * rec.reward + (rec.done ? 0.0 : cfg_.gamma * q(r, 0));
  }
  return y;
}

double TD3Agent::critic_update(const std::vector<const scenario::StepRecord*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  Mat y = td_targets(batch);
  Mat in = critic_input(norm_.apply(stack(batch, &scenario::StepRecord::obs)), stack(batch, &scenario::StepRecord::action));
  diff::Tape tape;
  BoundParams p1 = critic1_.bind(tape), p2 = critic2_.bind(tape);
  Var l1 = diff::mean_all(diff::square(diff::sub(critic1_.forward(in, p1), y)));
  Var l2 = diff::mean_all(diff::square(diff::sub(critic2_.forward(in, p2), y)));
  Var loss = diff::add(l1, l2);
  const double value = loss.scalar();
  if (!std::isfinite(value)) {
    throw NumericalFailure("non-finite critic loss",
                           {{"update", updates_}, {"loss", fmt::format("{}", value)},
                            {"targets_finite", finite(y)}, {"inputs_finite", finite(in)}});
  }
  tape.backward(loss);
  critic1_opt_.step(critic1_.params(), gradients(tape, p1));
  critic2_opt_.step(critic2_.params(), gradients(tape, p2));
  return value;
}

double TD3Agent::td3_actor_update(const std::vector<const scenario::StepRecord*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  Mat obs = norm_.apply(stack(batch, &scenario::StepRecord::obs));
  diff::Tape tape;
  BoundParams pa = actor_.bind(tape);
  BoundParams pc = critic1_.bind(tape);
  Var a = actor_.forward(obs, pa);
  Var q = critic1_.forward(diff::concat_cols({tape.leaf(obs), a}), pc);
  Var loss = diff::neg(diff::mean_all(q));
  const double value = loss.scalar();
  if (!std::isfinite(value)) throw NumericalFailure("non-finite actor loss", {{"update", updates_}});
  tape.backward(loss);
  actor_opt_.step(actor_.params(), gradients(tape, pa));
  return value;
}

Var TD3Agent::rollout_objective(diff::Tape& tape, const BoundParams& pa, const pf::GridModel& grid,
                                const env::EnvConfig& env_cfg, const std::vector<env::RolloutStart>& starts,
                                int k) const {
  BoundParams pc = critic1_.bind(tape);
  env::PolicyFn policy = [&](const Var& obs) { return actor_.forward(norm_.apply(obs), pa); };
  env::CriticFn critic = [&](const Var& obs, const Var& a) {
    return critic1_.forward(diff::concat_cols({norm_.apply(obs), a}), pc);
  };
  auto r = env::rollout_diff(tape, grid, env_cfg, starts, k, cfg_.gamma, policy, critic, cfg_.reward_scale);
  return diff::mean_all(r.objective);
}

double TD3Agent::pi_actor_update(const pf::GridModel& grid, const env::EnvConfig& env_cfg,
                                 const std::vector<scenario::TrajectorySegment>& segments, int* dropped) {
  if (segments.empty()) throw std::invalid_argument("empty batch");
  const int k = segments.front().k;
  std::vector<env::RolloutStart> starts;
  for (const auto& s : segments) {
    starts.push_back({s.episode->trajectory, s.step(0).t, s.step(0).soc, s.step(k - 1).done});
  }
  const std::size_t total = starts.size();
  int lost = 0;
  for (;;) {
    diff::Tape tape;
    BoundParams pa = actor_.bind(tape);
    try {
      Var loss = diff::neg(rollout_objective(tape, pa, grid, env_cfg, starts, k));
      const double value = loss.scalar();
      if (!std::isfinite(value)) throw NumericalFailure("non-finite rollout objective", {{"update", updates_}});
      tape.backward(loss);
      actor_opt_.step(actor_.params(), gradients(tape, pa));
      if (dropped) *dropped = lost;
      return value;
    } catch (const pf::DivergenceError& e) {
      std::vector<bool> bad(starts.size(), false);
      for (auto r : e.rows) bad[static_cast<std::size_t>(r)] = true;
      std::vector<env::RolloutStart> kept;
      for (std::size_t i = 0; i < starts.size(); ++i) {
        if (!bad[i]) kept.push_back(std::move(starts[i]));
      }
      lost += static_cast<int>(starts.size() - kept.size());
      starts = std::move(kept);
      if (static_cast<double>(lost) > cfg_.max_drop_fraction * static_cast<double>(total) || starts.empty()) {
        if (dropped) *dropped = lost;
        throw RolloutAbort(fmt::format("{} of {} rollout rows diverged", lost, total));
      }
    }
  }
}

void TD3Agent::soft_update_targets() {
  soft_update(actor_, actor_t_, cfg_.tau);
  soft_update(critic1_, critic1_t_, cfg_.tau);
  soft_update(critic2_, critic2_t_, cfg_.tau);
}

std::optional<UpdateStats> TD3Agent::update(const scenario::TrajectoryStore& store, const pf::GridModel& grid,
                                            const env::EnvConfig& env_cfg) {
  const int k = cfg_.effective_k();
  auto segments = store.sample(k, static_cast<std::size_t>(cfg_.batch_size), rng_);
  if (!segments) return std::nullopt;
  std::vector<const scenario::StepRecord*> heads;
  for (const auto& s : *segments) heads.push_back(&s.step(0));
  UpdateStats stats;
  stats.critic_loss = critic_update(heads);
  ++updates_;
  if (updates_ % cfg_.actor_delay == 0) {
    if (cfg_.algorithm == Algorithm::pi_td3 && cfg_.physics_rollout) {
      stats.actor_loss = pi_actor_update(grid, env_cfg, *segments, &stats.dropped_rows);
    } else {
      stats.actor_loss = td3_actor_update(heads);
    }
    soft_update_targets();
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints: a text preamble, one JSON header line, then little-endian
// doubles for every matrix listed in the header's "blocks" order.

namespace {

constexpr const char* kMagic = "gridvolt-checkpoint";
constexpr int kVersion = 1;

void write_mat(std::ostream& out, const Mat& m) {
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

Mat read_mat(std::istream& in) {
  std::int64_t dims[2] = {0, 0};
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in || dims[0] < 0 || dims[1] < 0 || dims[0] * dims[1] > (1LL << 32)) {
    throw CheckpointError("checkpoint truncated or corrupt");
  }
  Mat m(dims[0], dims[1]);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw CheckpointError("checkpoint truncated");
  return m;
}

void write_net(std::ostream& out, const MLP& net) {
  for (const Mat* p : net.params()) write_mat(out, *p);
}

void read_net(std::istream& in, MLP& net) {
  for (Mat* p : net.params()) {
    Mat m = read_mat(in);
    if (m.rows() != p->rows() || m.cols() != p->cols()) throw CheckpointError("network shape does not match header");
    *p = std::move(m);
  }
}

void write_opt(std::ostream& out, const Adam& opt) {
  for (const auto& m : opt.m) write_mat(out, m);
  for (const auto& v : opt.v) write_mat(out, v);
}

void read_opt(std::istream& in, Adam& opt, std::size_t count) {
  opt.m.clear();
  opt.v.clear();
  for (std::size_t i = 0; i < count; ++i) opt.m.push_back(read_mat(in));
  for (std::size_t i = 0; i < count; ++i) opt.v.push_back(read_mat(in));
}

}  // namespace

void TD3Agent::save(std::ostream& out) const {
  std::ostringstream rng_state;
  rng_state << rng_;
  nlohmann::json header = {{"version", kVersion},
                           {"config", cfg_},
                           {"obs_size", obs_size_},
                           {"action_size", action_size_},
                           {"updates", updates_},
                           {"env_steps", env_steps_},
                           {"epochs", epochs_},
                           {"rng", rng_state.str()},
                           {"optimizer_steps", {actor_opt_.t, critic1_opt_.t, critic2_opt_.t}},
                           {"optimizer_slots", {actor_opt_.m.size(), critic1_opt_.m.size(), critic2_opt_.m.size()}},
                           {"blocks",
                            {"normalizer_mean", "normalizer_inv_std", "actor", "critic1", "critic2", "actor_target",
                             "critic1_target", "critic2_target", "actor_adam", "critic1_adam", "critic2_adam"}}};
  out << kMagic << ' ' << kVersion << '\n' << header.dump() << '\n';
  write_mat(out, Mat(norm_.mean));
  write_mat(out, Mat(norm_.inv_std));
  for (const MLP* n : {&actor_, &critic1_, &critic2_, &actor_t_, &critic1_t_, &critic2_t_}) write_net(out, *n);
  for (const Adam* o : {&actor_opt_, &critic1_opt_, &critic2_opt_}) write_opt(out, *o);
  if (!out) throw CheckpointError("failed to write checkpoint");
}

void TD3Agent::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  save(out);
}

TD3Agent TD3Agent::load(std::istream& in) {
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kMagic) throw CheckpointError("not a checkpoint file");
  if (version != kVersion) throw CheckpointError(fmt::format("unsupported checkpoint version {}", version));
  in.ignore(1);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  TD3Agent a(header.at("obs_size").get<std::size_t>(), header.at("action_size").get<std::size_t>(),
             header.at("config").get<TrainerConfig>(), 0);
  a.updates_ = header.at("updates").get<std::int64_t>();
  a.env_steps_ = header.at("env_steps").get<std::int64_t>();
  a.epochs_ = header.at("epochs").get<int>();
  std::istringstream rng_state(header.at("rng").get<std::string>());
  rng_state >> a.rng_;
  a.norm_.mean = read_mat(in).row(0);
  a.norm_.inv_std = read_mat(in).row(0);
  if (a.norm_.mean.size() != static_cast<Eigen::Index>(a.obs_size_)) throw CheckpointError("normalizer size mismatch");
  for (MLP* n : {&a.actor_, &a.critic1_, &a.critic2_, &a.actor_t_, &a.critic1_t_, &a.critic2_t_}) read_net(in, *n);
  const auto steps = header.at("optimizer_steps");
  const auto slots = header.at("optimizer_slots");
  Adam* opts[3] = {&a.actor_opt_, &a.critic1_opt_, &a.critic2_opt_};
  for (int i = 0; i < 3; ++i) {
    read_opt(in, *opts[i], slots.at(i).get<std::size_t>());
    opts[i]->t = steps.at(i).get<std::int64_t>();
  }
  return a;
}

TD3Agent TD3Agent::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return load(in);
}

// ---------------------------------------------------------------------------
// Baselines.

Row act_cafap(const fleet::Fleet& fleet) {
  Row a = Row::Zero(static_cast<Eigen::Index>(fleet.size()));
  for (std::size_t i = 0; i < fleet.size(); ++i) {
    if (fleet[i].occupied && fleet[i].soc < 1.0) a(static_cast<Eigen::Index>(i)) = 1.0;
  }
  return a;
}

Row act_none(std::size_t n_chargers) { return Row::Zero(static_cast<Eigen::Index>(n_chargers)); }

// ---------------------------------------------------------------------------
// Training loop.

std::vector<double> evaluate_returns(const TD3Agent& agent, std::shared_ptr<const pf::GridModel> grid,
                                     const env::EnvConfig& env_cfg,
                                     const std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>>& scenarios) {
  std::vector<double> out;
  for (const auto& traj : scenarios) {
    env::Env e(grid, env_cfg);
    auto s = e.reset(traj);
    double total = 0.0;
    while (!s.done) {
      auto [next, o] = e.step(agent.act_deterministic(s.obs));
      total += o.reward;
      s = next;
    }
    out.push_back(total);
  }
  return out;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

ObsNormalizer fit_on_scenario(std::shared_ptr<const pf::GridModel> grid, const env::EnvConfig& cfg,
                              std::shared_ptr<const scenario::ExogenousTrajectory> traj) {
  env::Env e(std::move(grid), cfg);
  auto s = e.reset(std::move(traj));
  std::vector<Row> samples{s.obs};
  while (!s.done) {
    s = e.step(act_cafap(e.fleet())).first;
    samples.push_back(s.obs);
  }
  return ObsNormalizer::fit(samples);
}

}  // namespace

TrainResult train(const TrainInputs& in, std::uint64_t seed, std::shared_ptr<TD3Agent> resume) {
  if (!in.grid) throw ConfigError("training needs a grid");
  if (in.train.empty()) throw ConfigError("training needs at least one scenario");
  in.trainer.validate();
  in.env.validate();
  const auto& tc = in.trainer;
  const std::size_t obs_size = 3 + 2 * in.grid->n_bus + 3 * in.train.front()->n_chargers();

  TrainResult result;
  std::shared_ptr<TD3Agent> agent = resume;
  if (!agent) {
    agent = std::make_shared<TD3Agent>(obs_size, in.train.front()->n_chargers(), tc, seed);
    agent->set_normalizer(fit_on_scenario(in.grid, in.env, in.train.front()));
  }
  const auto& eval_set = in.eval.empty() ? in.train : in.eval;
  auto evaluate = [&](int epoch, int dropped, int aborted) {
    auto [m, s] = mean_std(evaluate_returns(*agent, in.grid, in.env, eval_set));
    result.curve.push_back({epoch, agent->env_steps(), agent->update_count(), m, s, dropped, aborted});
    if (!result.best_agent || m > result.best_eval_reward) {
      result.best_eval_reward = m;
      result.best_agent = std::make_shared<TD3Agent>(*agent);
    }
  };
  if (!resume) evaluate(0, 0, 0);

  scenario::TrajectoryStore store(tc.store_capacity);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  int dropped = 0, aborted = 0;
  for (int epoch = agent->epochs_done() + 1; epoch <= tc.epochs; ++epoch) {
    auto traj = in.train[static_cast<std::size_t>(epoch - 1) % in.train.size()];
    env::Env e(in.grid, in.env);
    auto s = e.reset(traj);
    auto id = store.begin_episode(traj);
    bool epoch_aborted = false;
    while (!s.done) {
      Row soc = e.fleet().soc_row().row(0);
      Row a;
      if (agent->env_steps() < tc.warmup_steps) {
        a.resize(static_cast<Eigen::Index>(e.n_chargers()));
        for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = uniform(agent->rng());
      } else {
        a = agent->act(s.obs, tc.sigma_explore);
      }
      auto [next, out] = e.step(a);
      store.append(id, {s.t, s.obs, out.action, out.reward, next.obs, next.done, soc});
      agent->count_env_step();
      if (agent->env_steps() >= tc.warmup_steps && !epoch_aborted) {
        for (int u = 0; u < tc.updates_per_step; ++u) {
          try {
            auto stats = agent->update(store, *in.grid, in.env);
            if (stats) dropped += stats->dropped_rows;
          } catch (const RolloutAbort&) {
            ++aborted;
            epoch_aborted = true;
            break;
          }
        }
      }
      s = next;
    }
    agent->count_epoch();
    if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
      evaluate(epoch, dropped, aborted);
      dropped = 0;
      aborted = 0;
    }
  }
  result.final_agent = agent;
  if (!result.best_agent) result.best_agent = std::make_shared<TD3Agent>(*agent);
  return result;
}

void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "epoch,env_step,updates,eval_reward_mean,eval_reward_std,dropped_rows,aborted_updates\n";
  for (const auto& p : curve) {
    out << fmt::format("{},{},{},{},{},{},{}\n", p.epoch, p.env_step, p.updates, p.eval_reward_mean,
                       p.eval_reward_std, p.dropped_rows, p.aborted_updates);
  }
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_curve_csv(out, curve);
}

}  // namespace gridvolt::agents
