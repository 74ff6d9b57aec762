#include "gridvolt/evalharness.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace gridvolt::eval {

const std::vector<std::pair<std::string, std::function<double(const EpisodeMetrics&)>>>& metric_fields() {
  static const std::vector<std::pair<std::string, std::function<double(const EpisodeMetrics&)>>> fields{
      {"cost_eur", [](const EpisodeMetrics& m) { return m.cost_eur; }},
      {"satisfaction_pct", [](const EpisodeMetrics& m) { return m.satisfaction_pct; }},
      {"vv_per_bus", [](const EpisodeMetrics& m) { return static_cast<double>(m.vv_per_bus); }},
      {"vv_per_step", [](const EpisodeMetrics& m) { return static_cast<double>(m.vv_per_step); }},
      {"vv_pu", [](const EpisodeMetrics& m) { return m.vv_pu; }},
      {"energy_charged_mwh", [](const EpisodeMetrics& m) { return m.energy_charged_mwh; }},
      {"energy_discharged_mwh", [](const EpisodeMetrics& m) { return m.energy_discharged_mwh; }},
      {"total_reward", [](const EpisodeMetrics& m) { return m.total_reward; }},
  };
  return fields;
}

namespace {

double sequential_sum(const Row& r) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) s += r(i);
  return s;
}

}  // namespace

EpisodeResult run_episode(agents::Controller& controller, std::shared_ptr<const scenario::ExogenousTrajectory> traj,
                          std::shared_ptr<const pf::GridModel> grid, const env::EnvConfig& cfg) {
  using clock = std::chrono::steady_clock;
  env::Env e(std::move(grid), cfg);
  auto s = e.reset(traj);
  EpisodeResult res;
  EpisodeMetrics& m = res.metrics;
  res.trace.dt = e.trajectory().dt;
  res.trace.v_band = cfg.reward.v_band;
  const double band = cfg.reward.v_band;
  double elapsed = 0.0;
  while (!s.done) {
    const auto t0 = clock::now();
    Row a = controller.act(e);
    auto [next, out] = e.step(a);
    elapsed += std::chrono::duration<double>(clock::now() - t0).count();

    StepTrace st{s.t, out.reward, out.r_violation, out.r_trading, out.r_satisfaction, out.cost, out.diverged,
                 out.voltages, out.p_ch, out.p_dis, out.soc};
    m.total_reward += out.reward;
    m.cost_eur += out.cost;
    m.energy_charged_mwh += sequential_sum(out.p_ch) * res.trace.dt / 1000.0;
    m.energy_discharged_mwh += sequential_sum(out.p_dis) * res.trace.dt / 1000.0;
    if (out.diverged) {
      m.partial = true;
    } else {
      long buses = 0;
      for (Eigen::Index b = 0; b < out.voltages.size(); ++b) {
        const double dev = std::abs(1.0 - out.voltages(b)) - band;
        if (dev > 0.0) {
          ++buses;
          m.vv_pu += dev;
        }
      }
      m.vv_per_bus += buses;
      if (buses > 0) ++m.vv_per_step;
    }
    ++m.steps;
    res.trace.steps.push_back(std::move(st));
    s = next;
  }
  m.step_time_sec = m.steps > 0 ? elapsed / m.steps : 0.0;

  double sat = 0.0;
  for (const auto& r : e.session_records()) {
    res.trace.sessions.push_back({r.session.charger_id, r.session.t_arrival, r.session.t_depart, r.session.e_target,
                                  r.e_depart, r.departed});
    sat += fleet::user_satisfaction(r);
  }
  m.sessions = static_cast<int>(res.trace.sessions.size());
  m.satisfaction_pct = m.sessions > 0 ? 100.0 * sat / m.sessions : 100.0;
  return res;
}

void write_step_trace(std::ostream& out, const EpisodeTrace& trace) {
  const Eigen::Index n = trace.steps.empty() ? 0 : trace.steps.front().voltages.size();
  const Eigen::Index m = trace.steps.empty() ? 0 : trace.steps.front().p_ch.size();
  out << "t,reward,r_violation,r_trading,r_satisfaction,cost_eur,diverged";
  for (Eigen::Index b = 0; b < n; ++b) out << ",v_" << b;
  for (Eigen::Index i = 0; i < m; ++i) out << ",p_ch_" << i;
  for (Eigen::Index i = 0; i < m; ++i) out << ",p_dis_" << i;
  for (Eigen::Index i = 0; i < m; ++i) out << ",soc_" << i;
  out << '\n';
  for (const auto& s : trace.steps) {
    out << fmt::format("{},{},{},{},{},{},{}", s.t, s.reward, s.r_violation, s.r_trading, s.r_satisfaction, s.cost,
                       s.diverged ? 1 : 0);
    for (Eigen::Index b = 0; b < n; ++b) out << ',' << fmt::format("{}", s.voltages(b));
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << fmt::format("{}", s.p_ch(i));
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << fmt::format("{}", s.p_dis(i));
    for (Eigen::Index i = 0; i < m; ++i) out << ',' << fmt::format("{}", s.soc(i));
    out << '\n';
  }
}

void write_session_trace(std::ostream& out, const EpisodeTrace& trace) {
  out << "charger_id,t_arrival,t_depart,e_target_kwh,e_depart_kwh,departed\n";
  for (const auto& s : trace.sessions) {
    out << fmt::format("{},{},{},{},{},{}\n", s.charger_id, s.t_arrival, s.t_depart, s.e_target, s.e_depart,
                       s.departed ? 1 : 0);
  }
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double number(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw IoError("malformed number in trace: '" + s + "'");
  return v;
}

}  // namespace

EpisodeMetrics recount_metrics(std::istream& steps_csv, std::istream& sessions_csv, double dt, double v_band) {
  EpisodeMetrics m;
  std::string line;
  if (!std::getline(steps_csv, line)) throw IoError("empty step trace");
  const auto header = split(line);
  std::vector<std::size_t> v_cols, ch_cols, dis_cols;
  std::size_t reward_col = 0, cost_col = 0, div_col = 0;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& h = header[c];
    if (h == "reward") reward_col = c;
    else if (h == "cost_eur") cost_col = c;
    else if (h == "diverged") div_col = c;
    else if (h.rfind("v_", 0) == 0) v_cols.push_back(c);
    else if (h.rfind("p_ch_", 0) == 0) ch_cols.push_back(c);
    else if (h.rfind("p_dis_", 0) == 0) dis_cols.push_back(c);
  }
  while (std::getline(steps_csv, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw IoError("step trace row has the wrong width");
    m.total_reward += number(cells[reward_col]);
    m.cost_eur += number(cells[cost_col]);
    double ch = 0.0, dis = 0.0;
    for (auto c : ch_cols) ch += number(cells[c]);
    for (auto c : dis_cols) dis += number(cells[c]);
    m.energy_charged_mwh += ch * dt / 1000.0;
    m.energy_discharged_mwh += dis * dt / 1000.0;
    if (cells[div_col] == "1") {
      m.partial = true;
    } else {
      bool any = false;
      for (auto c : v_cols) {
        const double v = number(cells[c]);
        const double excess = std::abs(1.0 - v) - v_band;
        if (excess > 0.0) {
          ++m.vv_per_bus;
          m.vv_pu += excess;
          any = true;
        }
      }
      if (any) ++m.vv_per_step;
    }
    ++m.steps;
  }

  if (!std::getline(sessions_csv, line)) throw IoError("empty session trace");
  double sat = 0.0;
  while (std::getline(sessions_csv, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != 6) throw IoError("session trace row has the wrong width");
    const double target = number(cells[3]);
    const double got = number(cells[4]);
    sat += target == 0.0 ? 1.0 : std::min(1.0, got / target);
    ++m.sessions;
  }
  m.satisfaction_pct = m.sessions > 0 ? 100.0 * sat / m.sessions : 100.0;
  return m;
}

MetricSummary summarize(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  // Identical samples report their value and a zero spread without rounding noise.
  if (std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); })) return {xs.front(), 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

std::string bytes_hash(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string config_hash(const nlohmann::json& config) { return bytes_hash(config.dump()); }

SuiteResult evaluate_suite(const std::vector<ControllerFactory>& controllers,
                           const std::vector<std::shared_ptr<const scenario::ExogenousTrajectory>>& scenarios,
                           std::shared_ptr<const pf::GridModel> grid, const env::EnvConfig& cfg,
                           const std::string& hash, int workers) {
  if (scenarios.empty()) throw std::invalid_argument("evaluation needs at least one scenario");
  if (controllers.empty()) throw std::invalid_argument("evaluation needs at least one controller");
  const std::size_t na = controllers.size(), ns = scenarios.size();
  std::vector<std::vector<EpisodeResult>> results(na, std::vector<EpisodeResult>(ns));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    std::vector<std::unique_ptr<agents::Controller>> own;
    for (const auto& f : controllers) own.push_back(f());
    for (std::size_t job = next++; job < na * ns; job = next++) {
      const std::size_t a = job / ns, s = job % ns;
      try {
        results[a][s] = run_episode(*own[a], scenarios[s], grid, cfg);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, workers);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  SuiteResult out;
  out.table.scenario_count = static_cast<int>(ns);
  out.table.config_hash = hash;
  out.traces.resize(na);
  for (std::size_t a = 0; a < na; ++a) {
    AlgorithmSummary alg;
    alg.name = controllers[a]()->name();
    std::vector<double> times;
    for (auto& r : results[a]) {
      alg.episodes.push_back(r.metrics);
      times.push_back(r.metrics.step_time_sec);
      if (r.metrics.partial) ++alg.partial_episodes;
      out.traces[a].push_back(std::move(r.trace));
    }
    for (const auto& [name, get] : metric_fields()) {
      std::vector<double> xs;
      for (const auto& m : alg.episodes) xs.push_back(get(m));
      alg.metrics[name] = summarize(xs);
    }
    alg.step_time_sec = summarize(times);
    out.table.algorithms.push_back(std::move(alg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive planner.

namespace {

struct Search {
  const std::vector<double>& levels;
  int horizon;
  std::size_t chargers;
  std::vector<Row> current;
  Plan best;
  bool found = false;

  void run(const env::Env& e, int depth, double acc) {
    if (depth == horizon || e.state().done) {
      ++best.evaluated;
      if (!found || acc > best.objective) {
        found = true;
        best.objective = acc;
        best.actions = current;
      }
      return;
    }
    const std::size_t combos = static_cast<std::size_t>(std::pow(levels.size(), chargers));
    Row a(static_cast<Eigen::Index>(chargers));
    for (std::size_t c = 0; c < combos; ++c) {
      std::size_t code = c;
      for (std::size_t i = 0; i < chargers; ++i) {
        a(static_cast<Eigen::Index>(i)) = levels[code % levels.size()];
        code /= levels.size();
      }
      env::Env next = e;
      auto out = next.step(a).second;
      current.push_back(a);
      run(next, depth + 1, acc + out.reward);
      current.pop_back();
    }
  }
};

}  // namespace

Plan brute_force_plan(const env::Env& start, const std::vector<double>& levels, int horizon, double max_plans) {
  if (levels.empty()) throw std::invalid_argument("at least one action level is required");
  if (horizon < 0) throw std::invalid_argument("horizon must be non-negative");
  const int remaining = start.state().done ? 0 : start.trajectory().horizon() - start.state().t;
  horizon = std::min(horizon, remaining);
  const auto chargers = start.n_chargers();
  const double size = std::pow(static_cast<double>(levels.size()), static_cast<double>(chargers * horizon));
  if (size > max_plans) {
    const int fit = static_cast<int>(std::floor(std::log(max_plans) / std::log(static_cast<double>(levels.size())) /
                                                static_cast<double>(std::max<std::size_t>(chargers, 1))));
    throw SearchTooLarge(fmt::format("{} levels over {} chargers and {} steps is {:.3g} plans (limit {:.3g}); "
                                     "use a horizon of at most {} or fewer levels",
                                     levels.size(), chargers, horizon, size, max_plans, fit));
  }
  Search s{levels, horizon, chargers, {}, {}, false};
  s.run(start, 0, 0.0);
  return s.best;
}

double plan_objective(const env::Env& start, const std::vector<Row>& actions) {
  env::Env e = start;
  double total = 0.0;
  for (const auto& a : actions) {
    if (e.state().done) break;
    total += e.step(a).second.reward;
  }
  return total;
}

double controller_objective(const env::Env& start, agents::Controller& controller, int horizon) {
  env::Env e = start;
  double total = 0.0;
  for (int k = 0; k < horizon && !e.state().done; ++k) total += e.step(controller.act(e)).second.reward;
  return total;
}

// ---------------------------------------------------------------------------
// Reports.

void write_summary_csv(std::ostream& out, const SummaryTable& table) {
  out << "algorithm,metric,mean,std\n";
  for (const auto& a : table.algorithms) {
    for (const auto& [name, get] : metric_fields()) {
      (void)get;
      const auto& s = a.metrics.at(name);
      out << fmt::format("{},{},{},{}\n", a.name, name, s.mean, s.std);
    }
  }
}

void write_timing_csv(std::ostream& out, const SummaryTable& table) {
  out << "algorithm,step_time_mean_sec,step_time_std_sec\n";
  for (const auto& a : table.algorithms) {
    out << fmt::format("{},{},{}\n", a.name, a.step_time_sec.mean, a.step_time_sec.std);
  }
}

nlohmann::json summary_to_json(const SummaryTable& table) {
  nlohmann::json algs = nlohmann::json::array();
  for (const auto& a : table.algorithms) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, get] : metric_fields()) {
      (void)get;
      const auto& s = a.metrics.at(name);
      metrics[name] = {{"mean", s.mean}, {"std", s.std}};
    }
    algs.push_back({{"name", a.name}, {"metrics", metrics}, {"partial_episodes", a.partial_episodes}});
  }
  return {{"schema_version", 1},
          {"config_hash", table.config_hash},
          {"scenario_count", table.scenario_count},
          {"algorithms", algs}};
}

SummaryTable summary_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != 1) throw IoError("unsupported summary schema");
  SummaryTable t;
  t.config_hash = j.at("config_hash").get<std::string>();
  t.scenario_count = j.at("scenario_count").get<int>();
  for (const auto& a : j.at("algorithms")) {
    AlgorithmSummary s;
    s.name = a.at("name").get<std::string>();
    s.partial_episodes = a.at("partial_episodes").get<int>();
    for (const auto& [name, v] : a.at("metrics").items()) {
      s.metrics[name] = {v.at("mean").get<double>(), v.at("std").get<double>()};
    }
    t.algorithms.push_back(std::move(s));
  }
  return t;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

}  // namespace

void export_report(const SuiteResult& result, const std::string& out_dir, bool with_traces) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  {
    auto out = open_out(dir / "summary.csv");
    write_summary_csv(out, result.table);
  }
  {
    auto out = open_out(dir / "summary.json");
    out << summary_to_json(result.table).dump(2) << '\n';
  }
  {
    auto out = open_out(dir / "timing.csv");
    write_timing_csv(out, result.table);
  }
  if (!with_traces) return;
  const fs::path traces = dir / "episodes";
  fs::create_directories(traces, ec);
  if (ec) throw IoError("cannot create " + traces.string() + ": " + ec.message());
  for (std::size_t a = 0; a < result.traces.size(); ++a) {
    const std::string& name = result.table.algorithms[a].name;
    for (std::size_t s = 0; s < result.traces[a].size(); ++s) {
      auto steps = open_out(traces / fmt::format("episode_{}_{:03}.csv", name, s));
      write_step_trace(steps, result.traces[a][s]);
      auto sessions = open_out(traces / fmt::format("episode_{}_{:03}_sessions.csv", name, s));
      write_session_trace(sessions, result.traces[a][s]);
    }
  }
}

}  // namespace gridvolt::eval
