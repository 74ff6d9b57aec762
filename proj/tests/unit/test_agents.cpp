#include "doctest.h"

#include "gridvolt/agents.hpp"

#include <cmath>
#include <sstream>

using namespace gridvolt;
using agents::Row;
using agents::TD3Agent;
using agents::TrainerConfig;
using diff::Mat;
using diff::Var;

namespace {

std::shared_ptr<const pf::GridModel> weak_two_bus() {
  pf::GridSpec spec;
  spec.name = "weak";
  spec.buses = {{"s", true}, {"b", false}};
  spec.lines = {{"s", "b", 0.1, 0.2}};
  return std::make_shared<const pf::GridModel>(pf::build_grid(spec));
}

fleet::EVSession session(int charger, int arrive, int depart, double soc0) {
  fleet::EVSession s;
  s.charger_id = charger;
  s.t_arrival = arrive;
  s.t_depart = depart;
  s.e_max = 50.0;
  s.e_arrival = soc0 * 50.0;
  s.e_target = 45.0;
  s.p_ch_max = 11.0;
  s.p_dis_max = 11.0;
  s.soc_min_v2g = 0.1;
  return s;
}

std::shared_ptr<const scenario::ExogenousTrajectory> toy_trajectory(double load_kw = 450.0) {
  auto t = std::make_shared<scenario::ExogenousTrajectory>();
  t->n_bus = 1;
  t->dt = 0.25;
  t->charger_bus = {0, 0};
  for (int k = 0; k < 8; ++k) {
    scenario::ExogenousFrame f;
    f.t = k;
    f.hour = 17.0 + 0.25 * k;
    f.p_load = {load_kw + 10.0 * k};
    f.q_load = {0.3 * load_kw};
    f.p_pv = {0.0};
    f.price_ch = 0.1 + 0.02 * k;
    f.price_dis = f.price_ch;
    t->frames.push_back(f);
  }
  t->sessions = {session(0, 0, 5, 0.5), session(1, 1, 8, 0.3), session(0, 5, 8, 0.6)};
  return t;
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.hidden = {16};
  c.batch_size = 4;
  c.k = 3;
  c.warmup_steps = 8;
  c.epochs = 4;
  c.eval_every = 2;
  c.lr_actor = 1e-3;
  c.lr_critic = 1e-3;
  return c;
}

std::vector<const scenario::StepRecord*> pointers(const std::vector<scenario::StepRecord>& v) {
  std::vector<const scenario::StepRecord*> out;
  for (const auto& r : v) out.push_back(&r);
  return out;
}

scenario::StepRecord record(Eigen::Index obs, Eigen::Index act, double reward, bool done, double fill = 0.1) {
  scenario::StepRecord r;
  r.obs = Row::Constant(obs, fill);
  r.action = Row::Constant(act, 0.2);
  r.next_obs = Row::Constant(obs, -fill);
  r.reward = reward;
  r.done = done;
  return r;
}

bool same_params(const agents::MLP& a, const agents::MLP& b) {
  auto pa = a.params();
  auto pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (*pa[i] != *pb[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("mlp: parameter count, output range, zero weights") {
  std::mt19937_64 rng(1);
  agents::MLP actor({7, 32, 16, 3}, agents::Activation::tanh, rng);
  CHECK(actor.param_count() == (7 + 1) * 32 + (32 + 1) * 16 + (16 + 1) * 3);
  Mat x = Mat::Random(50, 7) * 100.0;
  Mat y = actor.forward(x);
  CHECK(y.maxCoeff() <= 1.0);
  CHECK(y.minCoeff() >= -1.0);
  for (Mat* p : actor.params()) p->setZero();
  CHECK(actor.forward(x).isZero());
  CHECK_THROWS_AS(actor.forward(Mat::Zero(1, 6)), agents::ConfigError);

  diff::Tape tape;
  agents::MLP net({4, 8, 2}, agents::Activation::identity, rng);
  Mat in = Mat::Random(3, 4);
  CHECK(net.forward(in, net.bind(tape)).value() == net.forward(in));
}

TEST_CASE("act: determinism, noise statistics, size errors") {
  TrainerConfig cfg = small_config();
  TD3Agent agent(5, 2, cfg, 3);
  Row obs = Row::LinSpaced(5, -1.0, 1.0);
  CHECK(agent.act(obs, 0.0) == agent.act(obs, 0.0));
  CHECK_THROWS_AS(agent.act(Row::Zero(4), 0.0), agents::ConfigError);

  for (Mat* p : agent.actor().params()) p->setZero();
  CHECK(agent.act(obs, 0.0).isZero());
  const int n = 10000;
  Eigen::MatrixXd draws(n, 2);
  for (int i = 0; i < n; ++i) draws.row(i) = agent.act(obs, 0.1);
  for (int j = 0; j < 2; ++j) {
    double mean = draws.col(j).mean();
    double sd = std::sqrt((draws.col(j).array() - mean).square().mean());
    CHECK(std::abs(sd - 0.1) < 0.01);
  }
}

TEST_CASE("td targets: myopic, shared critics, twin minimum") {
  TrainerConfig cfg = small_config();
  cfg.reward_scale = 1.0;
  std::vector<scenario::StepRecord> batch{record(5, 2, -3.0, false), record(5, 2, 2.0, true, 0.5),
                                          record(5, 2, 0.7, false, -0.4)};

  cfg.gamma = 0.0;
  TD3Agent myopic(5, 2, cfg, 1);
  Mat y = myopic.td_targets(pointers(batch), true);
  for (std::size_t r = 0; r < batch.size(); ++r) CHECK(y(static_cast<Eigen::Index>(r), 0) == batch[r].reward);

  cfg.gamma = 0.9;
  TD3Agent agent(5, 2, cfg, 2);
  y = agent.td_targets(pointers(batch), false);
  Mat next = agent.normalizer().apply(Mat(batch[0].next_obs));
  Mat a = agent.actor_target().forward(next);
  Mat in(1, 7);
  in << next, a;
  double q1 = agent.critic1_target().forward(in)(0, 0);
  double q2 = agent.critic2_target().forward(in)(0, 0);
  CHECK(y(0, 0) == -3.0 + 0.9 * std::min(q1, q2));
  CHECK(y(0, 0) <= -3.0 + 0.9 * q1);
  CHECK(y(0, 0) <= -3.0 + 0.9 * q2);
  CHECK(y(1, 0) == 2.0);

  cfg.tau = 1.0;
  TD3Agent twin(5, 2, cfg, 3);
  twin.critic2() = twin.critic1();
  twin.soft_update_targets();
  y = twin.td_targets(pointers(batch), false);
  in << next, twin.actor_target().forward(next);
  CHECK(y(0, 0) == -3.0 + 0.9 * twin.critic1_target().forward(in)(0, 0));
}

TEST_CASE("critic step reduces the squared error of a single transition") {
  TrainerConfig cfg = small_config();
  cfg.lr_critic = 1e-4;
  cfg.sigma_smooth = 0.0;
  cfg.reward_scale = 1.0;
  TD3Agent agent(5, 2, cfg, 4);
  std::vector<scenario::StepRecord> batch{record(5, 2, 1.5, true)};
  auto err = [&] {
    Mat in(1, 7);
    in << agent.normalizer().apply(Mat(batch[0].obs)), Mat(batch[0].action);
    double e1 = agent.critic1().forward(in)(0, 0) - 1.5;
    double e2 = agent.critic2().forward(in)(0, 0) - 1.5;
    return e1 * e1 + e2 * e2;
  };
  double before = err();
  double loss = agent.critic_update(pointers(batch));
  CHECK(loss == doctest::Approx(before).epsilon(1e-12));
  CHECK(err() < before);
}

TEST_CASE("soft update blends parameters") {
  std::mt19937_64 rng(5);
  agents::MLP a({2, 3, 1}, agents::Activation::identity, rng);
  agents::MLP b({2, 3, 1}, agents::Activation::identity, rng);
  agents::MLP c = b;
  agents::soft_update(a, c, 0.0);
  CHECK(same_params(b, c));
  agents::soft_update(a, c, 1.0);
  CHECK(same_params(a, c));

  for (Mat* p : a.params()) p->setZero();
  for (Mat* p : c.params()) p->setConstant(2.0);
  agents::soft_update(a, c, 0.5);
  for (Mat* p : c.params()) CHECK(p->isConstant(1.0));

  // Distance to the source never grows for tau < 1.
  agents::MLP d = b;
  for (double tau : {0.005, 0.3, 0.9}) {
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < d.params().size(); ++i) {
      before = std::max(before, (*d.params()[i] - *a.params()[i]).cwiseAbs().maxCoeff());
    }
    agents::soft_update(a, d, tau);
    for (std::size_t i = 0; i < d.params().size(); ++i) {
      after = std::max(after, (*d.params()[i] - *a.params()[i]).cwiseAbs().maxCoeff());
    }
    CHECK(after <= before);
  }

  agents::MLP wrong({2, 4, 1}, agents::Activation::identity, rng);
  CHECK_THROWS_AS(agents::soft_update(a, wrong, 0.5), agents::ConfigError);
}

TEST_CASE("adam minimizes a quadratic; decoupled decay shrinks weights") {
  Mat x = Mat::Constant(1, 3, 5.0);
  agents::Adam opt(0.1);
  for (int i = 0; i < 2000; ++i) opt.step({&x}, {2.0 * (x.array() - 1.0).matrix()});
  CHECK((x.array() - 1.0).abs().maxCoeff() < 1e-3);

  Mat w = Mat::Constant(1, 1, 1.0);
  agents::Adam decay(0.1, 0.5);
  decay.step({&w}, {Mat::Zero(1, 1)});
  CHECK(w(0, 0) == doctest::Approx(0.95));
}

TEST_CASE("physics-informed actor gradient matches finite differences") {
  auto grid = weak_two_bus();
  auto traj = toy_trajectory();
  TrainerConfig cfg = small_config();
  cfg.hidden = {6};
  cfg.reward_scale = 1e-2;
  env::EnvConfig env_cfg;
  TD3Agent agent(11, 2, cfg, 7);
  std::vector<Row> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(Row::Random(11) * (i + 1));
  agent.set_normalizer(agents::ObsNormalizer::fit(samples));
  Row soc(2);
  soc << 0.5, 0.0;
  std::vector<env::RolloutStart> starts{{traj, 0, soc, false}};
  soc << 0.55, 0.3;
  starts.push_back({traj, 1, soc, false});

  auto f = [&](diff::Tape& tape, const Var& w0) {
    agents::BoundParams p = agent.actor().bind(tape);
    p.w[0] = w0;
    return agent.rollout_objective(tape, p, *grid, env_cfg, starts, 3);
  };
  auto res = diff::grad_check(f, agent.actor().weights()[0], 1e-6);
  CHECK(res.nan_coords.empty());
  CHECK(res.rel_errors.size() - res.kink_coords.size() > 40);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("rollout objective is linear in the reward weights when nothing is bootstrapped") {
  auto grid = weak_two_bus();
  auto traj = toy_trajectory();
  TD3Agent agent(11, 2, small_config(), 8);
  env::EnvConfig base, doubled;
  doubled.reward.lambda1 *= 2.0;
  doubled.reward.lambda2 *= 2.0;
  doubled.reward.lambda3 *= 2.0;
  Row soc(2);
  soc << 0.5, 0.0;
  std::vector<env::RolloutStart> starts{{traj, 0, soc, true}};
  diff::Tape t1, t2;
  double a = agent.rollout_objective(t1, agent.actor().bind(t1), *grid, base, starts, 8).scalar();
  double b = agent.rollout_objective(t2, agent.actor().bind(t2), *grid, doubled, starts, 8).scalar();
  CHECK(b == doctest::Approx(2.0 * a).epsilon(1e-12));
  CHECK(a < 0.0);
}

TEST_CASE("actor updates are delayed") {
  auto grid = weak_two_bus();
  auto traj = toy_trajectory();
  for (auto alg : {agents::Algorithm::td3, agents::Algorithm::pi_td3}) {
    TrainerConfig cfg = small_config();
    cfg.algorithm = alg;
    cfg.actor_delay = 3;
    TD3Agent agent(11, 2, cfg, 9);
    env::EnvConfig env_cfg;
    scenario::TrajectoryStore store(100);
    env::Env e(grid, env_cfg);
    auto s = e.reset(traj);
    auto id = store.begin_episode(traj);
    while (!s.done) {
      Row soc = e.fleet().soc_row().row(0);
      auto [next, out] = e.step(agent.act(s.obs, 0.3));
      store.append(id, {s.t, s.obs, out.action, out.reward, next.obs, next.done, soc});
      s = next;
    }
    for (int u = 1; u <= 6; ++u) {
      agents::MLP before = agent.actor();
      auto stats = agent.update(store, *grid, env_cfg);
      REQUIRE(stats);
      CHECK(stats->actor_loss.has_value() == (u % 3 == 0));
      CHECK(same_params(before, agent.actor()) == (u % 3 != 0));
    }
  }
}

TEST_CASE("pi-td3 with K=1 and no physics path reproduces td3") {
  agents::TrainInputs in;
  in.grid = weak_two_bus();
  in.train = {toy_trajectory(), toy_trajectory(300.0)};
  in.eval = {toy_trajectory(400.0)};
  in.trainer = small_config();
  in.trainer.algorithm = agents::Algorithm::td3;
  auto td3 = agents::train(in, 11);
  in.trainer.algorithm = agents::Algorithm::pi_td3;
  in.trainer.physics_rollout = false;
  in.trainer.k = 1;
  auto pi = agents::train(in, 11);
  CHECK(same_params(td3.final_agent->actor(), pi.final_agent->actor()));
  CHECK(same_params(td3.final_agent->critic2(), pi.final_agent->critic2()));
  CHECK(td3.final_agent->update_count() == pi.final_agent->update_count());
  CHECK(td3.final_agent->update_count() > 0);
}

TEST_CASE("actor converges to the argmax of a known critic") {
  TrainerConfig cfg = small_config();
  cfg.hidden = {2};
  cfg.lr_actor = 1e-3;
  TD3Agent agent(1, 1, cfg, 12);
  // Q(s, a) = -|a - 0.3| built from two ReLU units.
  auto& c = agent.critic1();
  c.weights()[0] << 0.0, 0.0, 1.0, -1.0;
  c.biases()[0] << -0.3, 0.3;
  c.weights()[1] << -1.0, -1.0;
  c.biases()[1] << 0.0;
  std::vector<scenario::StepRecord> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(record(1, 1, 0.0, true, 0.1 * i));
  for (int i = 0; i < 3000; ++i) agent.td3_actor_update(pointers(batch));
  for (int i = 0; i < 8; ++i) CHECK(std::abs(agent.act_deterministic(Row::Constant(1, 0.1 * i))(0) - 0.3) < 1e-2);
}

TEST_CASE("checkpoints round-trip exactly") {
  agents::TrainInputs in;
  in.grid = weak_two_bus();
  in.train = {toy_trajectory()};
  in.trainer = small_config();
  in.trainer.epochs = 2;
  auto r = agents::train(in, 13);
  std::stringstream buf;
  r.final_agent->save(buf);
  TD3Agent back = TD3Agent::load(buf);
  CHECK(back.update_count() == r.final_agent->update_count());
  CHECK(back.env_steps() == r.final_agent->env_steps());
  CHECK(back.epochs_done() == 2);
  CHECK(same_params(back.actor(), r.final_agent->actor()));
  CHECK(same_params(back.critic1_target(), r.final_agent->critic1_target()));
  Row obs = Row::Random(11);
  CHECK(back.act_deterministic(obs) == r.final_agent->act_deterministic(obs));
  CHECK(back.act(obs, 0.2) == r.final_agent->act(obs, 0.2));

  // Resuming continues the counters.
  auto resumed = std::make_shared<TD3Agent>(back);
  in.trainer.epochs = 4;
  auto more = agents::train(in, 13, resumed);
  CHECK(more.final_agent->epochs_done() == 4);
  CHECK(more.final_agent->env_steps() == 32);

  std::stringstream junk("not a checkpoint\n");
  CHECK_THROWS_AS(TD3Agent::load(junk), agents::CheckpointError);
  std::stringstream truncated;
  r.final_agent->save(truncated);
  std::string t = truncated.str();
  std::stringstream cut(t.substr(0, t.size() - 100));
  CHECK_THROWS_AS(TD3Agent::load(cut), agents::CheckpointError);
}

TEST_CASE("baselines") {
  fleet::Fleet f({0, 0, 0});
  auto full = session(0, 0, 4, 1.0);
  full.e_target = 50.0;
  f.connect(full, 1.0);
  f.connect(session(1, 0, 4, 0.4), 0.4);
  Row a = agents::act_cafap(f);
  CHECK(a(0) == 0.0);
  CHECK(a(1) == 1.0);
  CHECK(a(2) == 0.0);
  CHECK(agents::act_none(3).isZero());
}

TEST_CASE("training is reproducible and configs round-trip") {
  agents::TrainInputs in;
  in.grid = weak_two_bus();
  in.train = {toy_trajectory(), toy_trajectory(350.0)};
  in.trainer = small_config();
  auto a = agents::train(in, 21);
  auto b = agents::train(in, 21);
  std::ostringstream ca, cb;
  agents::write_curve_csv(ca, a.curve);
  agents::write_curve_csv(cb, b.curve);
  CHECK(ca.str() == cb.str());
  CHECK(a.curve.size() == 3);
  CHECK(same_params(a.final_agent->actor(), b.final_agent->actor()));

  nlohmann::json j = in.trainer;
  TrainerConfig back = j.get<TrainerConfig>();
  CHECK(nlohmann::json(back) == j);
  j["nope"] = 1;
  CHECK_THROWS_AS(j.get<TrainerConfig>(), agents::ConfigError);
  TrainerConfig bad;
  bad.tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), agents::ConfigError);
}
