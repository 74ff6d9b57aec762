#include "gridvolt/env.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace gridvolt::env {

void RewardConfig::validate() const {
  if (!(v_band > 0.0)) throw ConfigError("v_band must be positive");
  if (!(soc_target > 0.0 && soc_target <= 1.0)) throw ConfigError("soc_target must lie in (0, 1]");
  if (epsilon < 1) throw ConfigError("epsilon must be at least 1");
  if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || !std::isfinite(lambda3)) {
    throw ConfigError("reward weights must be finite");
  }
  if (!(divergence_penalty <= 0.0)) throw ConfigError("divergence_penalty must not be positive");
}

void EnvConfig::validate() const {
  reward.validate();
  if (!(pf_tol > 0.0)) throw ConfigError("pf_tol must be positive");
  if (pf_max_iters < 1) throw ConfigError("pf_max_iters must be at least 1");
  if (pf_fixed_iters < 1) throw ConfigError("pf_fixed_iters must be at least 1");
}

namespace {

using KeySetters = std::vector<std::pair<const char*, std::function<void(const nlohmann::json&)>>>;

void read_keys(const nlohmann::json& j, const KeySetters& keys) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const auto& [name, set] : keys) {
      if (k == name) {
        set(v);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(fmt::format("unknown config key '{}'", k));
  }
}

}  // namespace

void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = {{"lambda1", c.lambda1},       {"lambda2", c.lambda2}, {"lambda3", c.lambda3},
       {"v_band", c.v_band},         {"soc_target", c.soc_target}, {"epsilon", c.epsilon},
       {"divergence_penalty", c.divergence_penalty}};
}

void from_json(const nlohmann::json& j, RewardConfig& c) {
  read_keys(j,
            {{"lambda1", [&](const nlohmann::json& v) { v.get_to(c.lambda1); }},
             {"lambda2", [&](const nlohmann::json& v) { v.get_to(c.lambda2); }},
             {"lambda3", [&](const nlohmann::json& v) { v.get_to(c.lambda3); }},
             {"v_band", [&](const nlohmann::json& v) { v.get_to(c.v_band); }},
             {"soc_target", [&](const nlohmann::json& v) { v.get_to(c.soc_target); }},
             {"epsilon", [&](const nlohmann::json& v) { v.get_to(c.epsilon); }},
             {"divergence_penalty", [&](const nlohmann::json& v) { v.get_to(c.divergence_penalty); }}});
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = {{"reward", c.reward},
       {"pf_mode", c.pf_mode == PfMode::tolerance ? "tolerance" : "fixed"},
       {"pf_tol", c.pf_tol},
       {"pf_max_iters", c.pf_max_iters},
       {"pf_fixed_iters", c.pf_fixed_iters}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  read_keys(j,
            {{"reward", [&](const nlohmann::json& v) { v.get_to(c.reward); }},
             {"pf_mode",
              [&](const nlohmann::json& v) {
                auto s = v.get<std::string>();
                if (s == "tolerance") c.pf_mode = PfMode::tolerance;
                else if (s == "fixed") c.pf_mode = PfMode::fixed;
                else throw ConfigError("pf_mode must be 'tolerance' or 'fixed'");
              }},
             {"pf_tol", [&](const nlohmann::json& v) { v.get_to(c.pf_tol); }},
             {"pf_max_iters", [&](const nlohmann::json& v) { v.get_to(c.pf_max_iters); }},
             {"pf_fixed_iters", [&](const nlohmann::json& v) { v.get_to(c.pf_fixed_iters); }}});
}

namespace {

const scenario::ExogenousFrame& frame_at(const scenario::ExogenousTrajectory& traj, int t) {
  return traj.frames.at(static_cast<std::size_t>(std::min(t, traj.horizon() - 1)));
}

double hour_at(const scenario::ExogenousTrajectory& traj, int t) {
  if (t < traj.horizon()) return traj.frames[static_cast<std::size_t>(t)].hour;
  return traj.frames.back().hour + traj.dt * (t - traj.horizon() + 1);
}

/// Everything in the observation except SoC: [sin, cos, price, p, q] and [t_left, bus].
struct ObsParts {
  Mat head;
  Mat tail;
};

ObsParts obs_parts(const scenario::ExogenousTrajectory& traj, int t, const fleet::Fleet& fleet, double s_base_kva) {
  const auto n = static_cast<Eigen::Index>(traj.n_bus);
  const auto m = static_cast<Eigen::Index>(fleet.size());
  const auto& f = frame_at(traj, t);
  const double angle = 2.0 * std::numbers::pi * hour_at(traj, t) / 24.0;
  ObsParts out{Mat(1, 3 + 2 * n), Mat(1, 2 * m)};
  out.head(0, 0) = std::sin(angle);
  out.head(0, 1) = std::cos(angle);
  out.head(0, 2) = f.price_ch;
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto k = static_cast<std::size_t>(b);
    out.head(0, 3 + b) = (f.p_load[k] + f.p_pv[k]) / s_base_kva;
    out.head(0, 3 + n + b) = f.q_load[k] / s_base_kva;
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& c = fleet[static_cast<std::size_t>(i)];
    out.tail(0, i) = c.occupied ? std::max(0, c.session->t_depart - t) : 0.0;
    out.tail(0, m + i) = c.bus_index;
  }
  return out;
}

Mat incidence_of(const std::vector<int>& charger_bus, std::size_t n_bus) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(charger_bus.size()), static_cast<Eigen::Index>(n_bus));
  for (std::size_t i = 0; i < charger_bus.size(); ++i) {
    if (charger_bus[i] < 0 || static_cast<std::size_t>(charger_bus[i]) >= n_bus) {
      throw ConfigError(fmt::format("charger {} sits on bus index {} outside the grid", i, charger_bus[i]));
    }
    m(static_cast<Eigen::Index>(i), charger_bus[i]) = 1.0;
  }
  return m;
}

void check_match(const pf::GridModel& grid, const scenario::ExogenousTrajectory& traj) {
  if (traj.n_bus != grid.n_bus) {
    throw ConfigError(fmt::format("trajectory has {} buses but grid '{}' has {}", traj.n_bus, grid.name, grid.n_bus));
  }
  if (traj.horizon() < 1) throw ConfigError("trajectory has no frames");
}

/// Fleet occupancy at step t: sessions with t_arrival <= t < t_depart, SoC taken from `soc`.
fleet::Fleet fleet_at(const scenario::ExogenousTrajectory& traj, int t, const Row& soc) {
  fleet::Fleet f(traj.charger_bus);
  if (soc.size() != static_cast<Eigen::Index>(f.size())) throw std::invalid_argument("SoC row has the wrong size");
  for (const auto& s : traj.sessions) {
    if (s.t_arrival <= t && t < s.t_depart) f.connect(s, soc(s.charger_id));
  }
  return f;
}

StepConstants row_constants(const scenario::ExogenousTrajectory& traj, int t, const fleet::Fleet& fleet,
                            const RewardConfig& cfg, const Mat& incidence, double s_base_kva) {
  const auto n = static_cast<Eigen::Index>(traj.n_bus);
  const auto m = static_cast<Eigen::Index>(fleet.size());
  const auto& f = frame_at(traj, t);
  StepConstants c;
  c.fleet = fleet.arrays();
  c.p_base_kw.resize(1, n);
  c.q_kvar.resize(1, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto k = static_cast<std::size_t>(b);
    c.p_base_kw(0, b) = f.p_load[k] + f.p_pv[k];
    c.q_kvar(0, b) = f.q_load[k];
  }
  c.price_ch = Mat::Constant(1, 1, f.price_ch);
  c.price_dis = Mat::Constant(1, 1, f.price_dis);
  c.psi_mask = Mat::Zero(1, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& ch = fleet[static_cast<std::size_t>(i)];
    if (ch.occupied && ch.session->t_depart - t < cfg.epsilon) c.psi_mask(0, i) = 1.0;
  }
  c.incidence = &incidence;
  c.s_base_kva = s_base_kva;
  c.dt = traj.dt;
  return c;
}

Mat stack_rows(const std::vector<Mat>& rows) {
  Mat m(static_cast<Eigen::Index>(rows.size()), rows.front().cols());
  for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r].row(0);
  return m;
}

}  // namespace

Env::Env(std::shared_ptr<const pf::GridModel> grid, EnvConfig cfg) : grid_(std::move(grid)), cfg_(cfg) {
  if (!grid_) throw std::invalid_argument("environment needs a grid");
  cfg_.validate();
}

void Env::check_ready() const {
  if (!traj_) throw std::logic_error("environment used before reset");
}

EnvState Env::reset(std::shared_ptr<const scenario::ExogenousTrajectory> trajectory) {
  if (!trajectory) throw std::invalid_argument("reset needs a trajectory");
  check_match(*grid_, *trajectory);
  trajectory->validate();
  traj_ = std::move(trajectory);
  incidence_ = incidence_of(traj_->charger_bus, grid_->n_bus);
  fleet_ = fleet::Fleet(traj_->charger_bus);
  departed_.clear();
  clipped_total_ = 0;
  fleet_.process_arrivals_departures(0, traj_->sessions);
  state_ = {0, observe(), false};
  return state_;
}

EnvState Env::restore(std::shared_ptr<const scenario::ExogenousTrajectory> trajectory, int t, const Row& soc) {
  if (!trajectory) throw std::invalid_argument("restore needs a trajectory");
  check_match(*grid_, *trajectory);
  if (t < 0 || t > trajectory->horizon()) throw std::out_of_range("restore step outside the horizon");
  traj_ = std::move(trajectory);
  incidence_ = incidence_of(traj_->charger_bus, grid_->n_bus);
  fleet_ = fleet_at(*traj_, t, soc);
  departed_.clear();
  clipped_total_ = 0;
  state_ = {t, observe(), t == traj_->horizon()};
  return state_;
}

Row Env::observe() const {
  ObsParts parts = obs_parts(*traj_, state_.t, fleet_, grid_->s_base / 1000.0);
  Row obs(parts.head.cols() + static_cast<Eigen::Index>(fleet_.size()) + parts.tail.cols());
  obs << parts.head.row(0), fleet_.soc_row().row(0), parts.tail.row(0);
  return obs;
}

StepConstants Env::constants() const {
  check_ready();
  return row_constants(*traj_, state_.t, fleet_, cfg_.reward, incidence_, grid_->s_base / 1000.0);
}

std::pair<EnvState, StepOutcome> Env::step(const Row& action) {
  check_ready();
  if (state_.done) throw std::logic_error("step called on a finished episode");
  const auto m = static_cast<Eigen::Index>(fleet_.size());
  if (action.size() != m) {
    throw std::invalid_argument(fmt::format("action has {} entries, expected {}", action.size(), m));
  }
  StepOutcome out;
  Mat a(1, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    double x = action(i);
    if (!std::isfinite(x)) throw std::invalid_argument("action entries must be finite");
    if (x < -1.0 || x > 1.0) {
      ++out.clipped;
      x = std::clamp(x, -1.0, 1.0);
    }
    a(0, i) = x;
  }
  clipped_total_ += out.clipped;
  out.action = a.row(0);

  const StepConstants c = constants();
  const Mat soc = fleet_.soc_row();
  const auto n = static_cast<Eigen::Index>(grid_->n_bus);
  try {
    Mat mags;
    fleet::Transition<Mat> tr;
    RewardParts<Mat> parts;
    if (cfg_.pf_mode == PfMode::fixed) {
      StepValues<Mat> v = step_values(*grid_, cfg_.reward, c, soc, a, cfg_.pf_fixed_iters);
      mags = v.mags;
      tr = v.fleet;
      parts = v.reward;
      out.pf_iterations = cfg_.pf_fixed_iters;
    } else {
      tr = fleet::transition(c.fleet, soc, a, c.dt);
      Mat p = injection(c, tr.p_ch, tr.p_dis);
      std::vector<pf::BusInjection> inj(static_cast<std::size_t>(n));
      for (Eigen::Index b = 0; b < n; ++b) inj[static_cast<std::size_t>(b)] = {p(0, b), c.q_kvar(0, b) / c.s_base_kva};
      pf::validate_injections(*grid_, inj);
      pf::VoltageProfile prof = pf::solve_fixed_point(*grid_, inj, cfg_.pf_max_iters, cfg_.pf_tol);
      if (!prof.converged) throw pf::DivergenceError({0}, prof.iterations_used);
      mags = prof.magnitudes().transpose();
      parts = reward_terms(cfg_.reward, c, mags, tr.p_ch, tr.p_dis, tr.soc);
      out.pf_iterations = prof.iterations_used;
    }
    out.voltages = mags.row(0).transpose();
    out.violations = pf::violation_terms(mags, cfg_.reward.v_lo(), cfg_.reward.v_hi()).row(0).transpose();
    out.p_ch = tr.p_ch.row(0);
    out.p_dis = tr.p_dis.row(0);
    out.soc = tr.soc.row(0);
    out.r_violation = parts.violation(0, 0);
    out.r_trading = parts.trading(0, 0);
    out.r_satisfaction = parts.satisfaction(0, 0);
    out.reward = parts.total(0, 0);
    out.cost = c.dt * (c.price_ch(0, 0) * tr.p_ch.sum() - c.price_dis(0, 0) * tr.p_dis.sum());
    fleet_.set_soc(tr.soc);
  } catch (const pf::DivergenceError&) {
    out.diverged = true;
    out.done = true;
    out.reward = cfg_.reward.divergence_penalty;
    out.voltages = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
    out.violations = Eigen::VectorXd::Zero(n);
    out.p_ch = Row::Zero(m);
    out.p_dis = Row::Zero(m);
    out.soc = soc.row(0);
    state_.done = true;
    return {state_, out};
  }

  state_.t += 1;
  out.departed = fleet_.process_arrivals_departures(state_.t, traj_->sessions);
  departed_.insert(departed_.end(), out.departed.begin(), out.departed.end());
  state_.done = state_.t >= traj_->horizon();
  out.done = state_.done;
  state_.obs = observe();
  return {state_, out};
}

std::vector<fleet::DepartedRecord> Env::session_records() const {
  std::vector<fleet::DepartedRecord> out = departed_;
  if (state_.done) {
    auto rest = fleet_.connected_records(state_.t);
    out.insert(out.end(), rest.begin(), rest.end());
  }
  return out;
}

RolloutResult rollout_diff(diff::Tape& tape, const pf::GridModel& grid, const EnvConfig& cfg,
                           const std::vector<RolloutStart>& starts, int k, double gamma, const PolicyFn& policy,
                           const CriticFn& critic, double reward_scale) {
  if (starts.empty()) throw std::invalid_argument("rollout needs at least one start");
  if (k < 1) throw std::invalid_argument("rollout horizon K must be at least 1");
  const double s_base_kva = grid.s_base / 1000.0;
  const std::size_t b = starts.size();

  std::vector<fleet::Fleet> fleets;
  std::vector<Mat> incidences;
  fleets.reserve(b);
  incidences.reserve(b);
  for (const auto& s : starts) {
    if (!s.trajectory) throw std::invalid_argument("rollout start without a trajectory");
    check_match(grid, *s.trajectory);
    if (s.t < 0 || s.t + k > s.trajectory->horizon()) throw std::out_of_range("segment runs past the horizon");
    fleets.push_back(fleet_at(*s.trajectory, s.t, s.soc));
    incidences.push_back(incidence_of(s.trajectory->charger_bus, grid.n_bus));
  }
  for (std::size_t r = 1; r < b; ++r) {
    if (incidences[r] != incidences[0]) throw ConfigError("rollout rows must share one charger layout");
  }
  const Mat& incidence = incidences[0];

  auto observe_rows = [&](int j, const Var& soc) {
    std::vector<Mat> heads, tails;
    for (std::size_t r = 0; r < b; ++r) {
      ObsParts p = obs_parts(*starts[r].trajectory, starts[r].t + j, fleets[r], s_base_kva);
      heads.push_back(std::move(p.head));
      tails.push_back(std::move(p.tail));
    }
    return diff::concat_cols({tape.leaf(stack_rows(heads)), soc, tape.leaf(stack_rows(tails))});
  };

  std::vector<Mat> soc0;
  for (std::size_t r = 0; r < b; ++r) soc0.push_back(fleets[r].soc_row());
  Var soc = tape.leaf(stack_rows(soc0));

  RolloutResult out;
  Var total;
  double discount = 1.0;
  for (int j = 0; j < k; ++j) {
    Var obs = observe_rows(j, soc);
    Var a = policy(obs);

    std::vector<StepConstants> rows;
    rows.reserve(b);
    for (std::size_t r = 0; r < b; ++r) {
      rows.push_back(row_constants(*starts[r].trajectory, starts[r].t + j, fleets[r], cfg.reward, incidence, s_base_kva));
    }
    StepConstants c = rows.front();
    if (b > 1) {
      std::vector<fleet::FleetArrays> fa;
      std::vector<Mat> p, q, pc, pd, psi;
      for (const auto& row : rows) {
        fa.push_back(row.fleet);
        p.push_back(row.p_base_kw);
        q.push_back(row.q_kvar);
        pc.push_back(row.price_ch);
        pd.push_back(row.price_dis);
        psi.push_back(row.psi_mask);
      }
      c.fleet = fleet::stack_arrays(fa);
      c.p_base_kw = stack_rows(p);
      c.q_kvar = stack_rows(q);
      c.price_ch = stack_rows(pc);
      c.price_dis = stack_rows(pd);
      c.psi_mask = stack_rows(psi);
    }
    c.incidence = &incidence;

    StepValues<Var> v = step_values(grid, cfg.reward, c, soc, a, cfg.pf_fixed_iters);
    out.rewards.push_back(v.reward.total);
    Var term = diff::scale(v.reward.total, discount * reward_scale);
    total = j == 0 ? term : diff::add(total, term);
    discount *= gamma;

    // Advance occupancy on plain fleets; the tape SoC survives only where the
    // same session stays plugged in, new arrivals enter as constants.
    const Mat& soc_after = v.fleet.soc.value();
    Mat keep = Mat::Zero(static_cast<Eigen::Index>(b), soc_after.cols());
    Mat arrive = Mat::Zero(static_cast<Eigen::Index>(b), soc_after.cols());
    for (std::size_t r = 0; r < b; ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      auto& f = fleets[r];
      f.set_soc(soc_after.row(ri));
      std::vector<bool> before(f.size());
      for (std::size_t i = 0; i < f.size(); ++i) before[i] = f[i].occupied;
      auto gone = f.process_arrivals_departures(starts[r].t + j + 1, starts[r].trajectory->sessions);
      std::vector<bool> left(f.size(), false);
      for (const auto& d : gone) left[static_cast<std::size_t>(d.session.charger_id)] = true;
      for (std::size_t i = 0; i < f.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        if (before[i] && !left[i]) keep(ri, ii) = 1.0;
        else if (f[i].occupied) arrive(ri, ii) = f[i].soc;
      }
    }
    soc = diff::add(diff::mul(v.fleet.soc, keep), arrive);
  }

  out.final_obs = observe_rows(k, soc);
  out.bootstrap_mask = Mat(static_cast<Eigen::Index>(b), 1);
  for (std::size_t r = 0; r < b; ++r) {
    const bool end = starts[r].terminal_after_k || starts[r].t + k >= starts[r].trajectory->horizon();
    out.bootstrap_mask(static_cast<Eigen::Index>(r), 0) = end ? 0.0 : 1.0;
  }
  Var q = critic(out.final_obs, policy(out.final_obs));
  out.objective = diff::add(total, diff::scale(diff::mul(q, out.bootstrap_mask), discount));
  return out;
}

}  // namespace gridvolt::env
