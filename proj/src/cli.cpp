#include "gridvolt/cli.hpp"

#include "gridvolt/evalharness.hpp"
#include "gridvolt/gridcheck.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace gridvolt::cli {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  if (agent != "pi-td3" && agent != "td3" && agent != "cafap" && agent != "none") {
    throw ConfigError("agent must be one of pi-td3, td3, cafap, none (got '" + agent + "')");
  }
  if (train_scenarios < 1) throw ConfigError("train_scenarios must be positive");
  if (eval_scenarios < 0) throw ConfigError("eval_scenarios must be non-negative");
  if (!fs::exists(grid)) throw ConfigError("grid file not found: " + grid);
  if (!eval_dir.empty() && !fs::is_directory(eval_dir)) throw ConfigError("eval_dir not found: " + eval_dir);
  scenario.validate();
  env.validate();
  trainer.validate();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"grid", c.grid},
       {"agent", c.agent},
       {"scenario", c.scenario},
       {"env", c.env},
       {"trainer", c.trainer},
       {"train_scenarios", c.train_scenarios},
       {"eval_scenarios", c.eval_scenarios},
       {"train_seed0", c.train_seed0},
       {"eval_seed0", c.eval_seed0},
       {"eval_dir", c.eval_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "grid") c.grid = value.get<std::string>();
      else if (key == "agent") c.agent = value.get<std::string>();
      else if (key == "scenario") c.scenario = value.get<scenario::ScenarioConfig>();
      else if (key == "env") c.env = value.get<env::EnvConfig>();
      else if (key == "trainer") c.trainer = value.get<agents::TrainerConfig>();
      else if (key == "train_scenarios") c.train_scenarios = value.get<int>();
      else if (key == "eval_scenarios") c.eval_scenarios = value.get<int>();
      else if (key == "train_seed0") c.train_seed0 = value.get<std::uint64_t>();
      else if (key == "eval_seed0") c.eval_seed0 = value.get<std::uint64_t>();
      else if (key == "eval_dir") c.eval_dir = value.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.grid);
  resolve(c.eval_dir);
  c.validate();
  return c;
}

std::string run_hash(const RunConfig& c) {
  nlohmann::json j = c;
  // Paths differ between machines; the grid's content and the scenario files' names define the run.
  std::ifstream in(c.grid, std::ios::binary);
  std::ostringstream text;
  text << in.rdbuf();
  j["grid"] = eval::bytes_hash(text.str());
  j["eval_dir"] = c.eval_dir.empty() ? "" : fs::path(c.eval_dir).filename().string();
  return eval::config_hash(j);
}

std::shared_ptr<const pf::GridModel> load_run_grid(const RunConfig& c) {
  return std::make_shared<const pf::GridModel>(pf::load_grid(c.grid));
}

Scenarios generate_set(const RunConfig& c, const pf::GridModel& grid, std::uint64_t seed0, int n) {
  Scenarios out;
  for (int i = 0; i < n; ++i) {
    out.push_back(std::make_shared<const scenario::ExogenousTrajectory>(
        scenario::generate_scenario(c.scenario, grid.n_bus, grid.nominal_load_kw, seed0 + static_cast<std::uint64_t>(i))));
  }
  return out;
}

Scenarios eval_set(const RunConfig& c, const pf::GridModel& grid) {
  if (c.eval_dir.empty()) return generate_set(c, grid, c.eval_seed0, c.eval_scenarios);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(c.eval_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".scn") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  Scenarios out;
  for (const auto& f : files) {
    auto t = std::make_shared<const scenario::ExogenousTrajectory>(scenario::load_trajectory(f.string()));
    if (t->n_bus != grid.n_bus) throw ConfigError(f.string() + " does not match the grid's bus count");
    out.push_back(std::move(t));
  }
  if (out.empty()) throw ConfigError("no .scn files in " + c.eval_dir);
  return out;
}

std::string output_dir(const std::string& flag, const std::string& command) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv("GRIDVOLT_OUT");
  return (fs::path(root && *root ? root : "out") / command).string();
}

namespace {

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw eval::IoError("cannot create " + dir + ": " + ec.message());
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw eval::IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_manifest(const std::string& dir, const std::string& command, const RunConfig& c,
                    const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json config = c;
  config["grid"] = fs::path(c.grid).filename().string();
  config["eval_dir"] = c.eval_dir.empty() ? "" : fs::path(c.eval_dir).filename().string();
  nlohmann::json j{{"command", command}, {"config_hash", run_hash(c)}, {"config", config}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_json(fs::path(dir) / "run.json", j);
}

int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

/// Runs jobs 0..n-1 on up to `workers` threads; the first failure is rethrown.
void parallel_for(int n, int workers, const std::function<void(int)>& job) {
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto loop = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int w = std::clamp(workers, 1, std::max(1, n));
  if (w == 1) {
    loop();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < w; ++i) pool.emplace_back(loop);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

agents::TrainInputs train_inputs(const RunConfig& c) {
  agents::TrainInputs in;
  in.grid = load_run_grid(c);
  in.env = c.env;
  in.trainer = c.trainer;
  in.train = generate_set(c, *in.grid, c.train_seed0, c.train_scenarios);
  in.eval = eval_set(c, *in.grid);
  return in;
}

struct NumericalContext {
  std::string dir;
};

// ---------------------------------------------------------------------------

int cmd_gen_scenarios(const std::string& config, int n, std::optional<std::uint64_t> seed0, const std::string& out_flag,
                      std::ostream& out) {
  RunConfig c = load_config(config);
  if (n < 0) throw ConfigError("--n must be non-negative");
  auto grid = load_run_grid(c);
  const std::uint64_t s0 = seed0.value_or(c.eval_seed0);
  if (n == 0) {
    out << "no scenarios requested\n";
    return ok;
  }
  const std::string dir = output_dir(out_flag, "scenarios");
  make_dir(dir);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = s0 + static_cast<std::uint64_t>(i);
    auto t = scenario::generate_scenario(c.scenario, grid->n_bus, grid->nominal_load_kw, seed);
    scenario::save_trajectory((fs::path(dir) / fmt::format("scenario_{:06}.scn", seed)).string(), t);
  }
  out << fmt::format("wrote {} scenarios to {} (config {})\n", n, dir, run_hash(c));
  return ok;
}

int cmd_train(const std::string& config, const std::string& out_flag, int workers, const std::vector<std::uint64_t>& seeds,
              const std::string& resume, NumericalContext& ctx, std::ostream& out) {
  RunConfig c = load_config(config);
  if (c.agent != "pi-td3" && c.agent != "td3") throw ConfigError("train needs agent pi-td3 or td3");
  c.trainer.algorithm = agents::algorithm_from_string(c.agent);
  if (!seeds.empty()) c.trainer.seeds = seeds;
  if (c.trainer.seeds.empty()) throw ConfigError("at least one seed is required");
  if (!resume.empty() && c.trainer.seeds.size() != 1) throw ConfigError("--resume needs exactly one seed");
  const std::string dir = output_dir(out_flag, "train");
  ctx.dir = dir;
  make_dir(dir);
  auto in = train_inputs(c);
  std::shared_ptr<agents::TD3Agent> start;
  if (!resume.empty()) start = std::make_shared<agents::TD3Agent>(agents::TD3Agent::load(resume));

  const auto& seed_list = c.trainer.seeds;
  std::vector<double> best(seed_list.size());
  parallel_for(static_cast<int>(seed_list.size()), workers, [&](int i) {
    const auto seed = seed_list[static_cast<std::size_t>(i)];
    auto r = agents::train(in, seed, start);
    agents::write_curve_csv((fs::path(dir) / fmt::format("curve_seed{}.csv", seed)).string(), r.curve);
    r.final_agent->save((fs::path(dir) / fmt::format("final_seed{}.ckpt", seed)).string());
    r.best_agent->save((fs::path(dir) / fmt::format("best_seed{}.ckpt", seed)).string());
    best[static_cast<std::size_t>(i)] = r.best_eval_reward;
  });
  write_manifest(dir, "train", c, {{"best_eval_reward", best}});
  for (std::size_t i = 0; i < seed_list.size(); ++i) {
    out << fmt::format("seed {}: best evaluation reward {}\n", seed_list[i], best[i]);
  }
  return ok;
}

int cmd_evaluate(const std::string& config, const std::string& checkpoint, std::vector<std::string> agents_list,
                 bool baselines, double load_multiplier, const std::string& out_flag, int workers, bool traces,
                 std::ostream& out) {
  RunConfig c = load_config(config);
  if (!(load_multiplier > 0.0)) throw ConfigError("--load-multiplier must be positive");
  if (agents_list.empty()) agents_list.push_back(c.agent);
  if (baselines) {
    for (const char* b : {"cafap", "none"}) {
      if (std::find(agents_list.begin(), agents_list.end(), b) == agents_list.end()) agents_list.emplace_back(b);
    }
  }
  auto grid = load_run_grid(c);
  Scenarios scen = eval_set(c, *grid);
  if (scen.empty()) throw ConfigError("evaluation needs at least one scenario");
  if (load_multiplier != 1.0) {
    for (auto& s : scen) s = std::make_shared<const scenario::ExogenousTrajectory>(scenario::scale_loads(*s, load_multiplier));
  }

  std::vector<eval::ControllerFactory> factories;
  for (const auto& name : agents_list) {
    if (name == "cafap") {
      factories.emplace_back([] { return std::make_unique<agents::CafapController>(); });
    } else if (name == "none") {
      factories.emplace_back([] { return std::make_unique<agents::NoneController>(); });
    } else if (name == "pi-td3" || name == "td3") {
      if (checkpoint.empty()) throw ConfigError("agent " + name + " needs --checkpoint");
      auto agent = std::make_shared<const agents::TD3Agent>(agents::TD3Agent::load(checkpoint));
      factories.emplace_back([agent, name] { return std::make_unique<agents::PolicyController>(agent, name); });
    } else {
      throw ConfigError("unknown agent '" + name + "'");
    }
  }

  nlohmann::json extra{{"agents", agents_list}, {"load_multiplier", load_multiplier}};
  if (!checkpoint.empty()) {
    std::ifstream in(checkpoint, std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    extra["checkpoint_hash"] = eval::bytes_hash(bytes.str());
  }
  nlohmann::json hashed = c;
  hashed["grid"] = run_hash(c);
  hashed["evaluate"] = extra;
  const std::string hash = eval::config_hash(hashed);

  const std::string dir = output_dir(out_flag, "evaluate");
  make_dir(dir);
  auto result = eval::evaluate_suite(factories, scen, grid, c.env, hash, workers);
  eval::export_report(result, dir, traces);
  extra["evaluation_hash"] = hash;
  write_manifest(dir, "evaluate", c, extra);
  for (const auto& a : result.table.algorithms) {
    out << fmt::format("{:>8}  reward {:.2f}  cost {:.2f} EUR  satisfaction {:.1f}%  vv_pu {:.4f}  {:.2e} s/step\n",
                       a.name, a.metrics.at("total_reward").mean, a.metrics.at("cost_eur").mean,
                       a.metrics.at("satisfaction_pct").mean, a.metrics.at("vv_pu").mean, a.step_time_sec.mean);
  }
  return ok;
}

int cmd_benchmark_k(const std::string& config, std::vector<int> ks, const std::vector<std::uint64_t>& seeds,
                    const std::string& out_flag, int workers, NumericalContext& ctx, std::ostream& out) {
  RunConfig c = load_config(config);
  if (ks.empty()) throw ConfigError("--k needs at least one horizon");
  for (int k : ks) {
    if (k < 1) throw ConfigError("rollout horizons must be at least 1");
  }
  c.agent = "pi-td3";
  c.trainer.algorithm = agents::Algorithm::pi_td3;
  c.trainer.physics_rollout = true;
  if (!seeds.empty()) c.trainer.seeds = seeds;
  const std::string dir = output_dir(out_flag, "benchmark-k");
  ctx.dir = dir;
  make_dir(dir);
  auto base = train_inputs(c);

  struct Job {
    int k;
    std::uint64_t seed;
    double final_reward = 0.0;
    double best_reward = 0.0;
  };
  std::vector<Job> jobs;
  for (int k : ks) {
    for (auto s : c.trainer.seeds) jobs.push_back({k, s});
  }
  parallel_for(static_cast<int>(jobs.size()), workers, [&](int i) {
    Job& job = jobs[static_cast<std::size_t>(i)];
    auto in = base;
    in.trainer.k = job.k;
    auto r = agents::train(in, job.seed);
    agents::write_curve_csv((fs::path(dir) / fmt::format("curve_k{}_seed{}.csv", job.k, job.seed)).string(), r.curve);
    job.final_reward = r.curve.back().eval_reward_mean;
    job.best_reward = r.best_eval_reward;
  });

  std::ofstream table(fs::path(dir) / "benchmark_k.csv", std::ios::binary);
  if (!table) throw eval::IoError("cannot write benchmark table in " + dir);
  table << "k,seed,final_eval_reward,best_eval_reward\n";
  for (const auto& j : jobs) table << fmt::format("{},{},{},{}\n", j.k, j.seed, j.final_reward, j.best_reward);
  write_manifest(dir, "benchmark-k", c, {{"k", ks}});
  for (int k : ks) {
    std::vector<double> finals;
    for (const auto& j : jobs) {
      if (j.k == k) finals.push_back(j.final_reward);
    }
    auto s = eval::summarize(finals);
    out << fmt::format("K={:<3} final evaluation reward {:.2f} +- {:.2f}\n", k, s.mean, s.std);
  }
  return ok;
}

int cmd_gridcheck(const std::string& path, int loadings, std::uint64_t seed, std::ostream& out) {
  auto grid = pf::load_grid(path);
  auto r = pf::run_grid_checks(grid, loadings, seed);
  out << fmt::format("grid {} ({} buses)\n", grid.name, grid.n_bus + 1);
  out << fmt::format("  reduction residual   {:.3e}\n", r.reduction_residual);
  out << fmt::format("  no-load error        {:.3e}\n", r.no_load_error);
  out << fmt::format("  oracle gap           {:.3e} over {} loadings\n", r.max_oracle_gap, r.loadings);
  if (r.closed_form_gap) out << fmt::format("  closed-form gap      {:.3e}\n", *r.closed_form_gap);
  for (const auto& f : r.failures) out << "  FAIL " << f << '\n';
  out << (r.passed() ? "PASS\n" : "FAIL\n");
  return r.passed() ? ok : check_failed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Voltage-aware EV fleet charging: scenarios, training, evaluation and checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gridvolt 0.1");

  std::string config, out_dir, checkpoint, resume, grid_path;
  int n = 0, workers = default_workers(), loadings = 200;
  std::uint64_t check_seed = 1;
  std::optional<std::uint64_t> seed0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> agent_names;
  std::vector<int> ks{5, 10, 20, 40};
  bool baselines = false, no_traces = false;
  double load_multiplier = 1.0;
  const std::string out_help = "Output directory (default: $GRIDVOLT_OUT/<command> or out/<command>)";

  auto* gen = app.add_subcommand("gen-scenarios", "Write scenario files for seeds seed0 .. seed0+n-1");
  gen->add_option("-c,--config", config, "Run config (JSON)")->required();
  gen->add_option("-n,--n", n, "Number of scenarios")->required();
  gen->add_option("--seed0", seed0, "First seed (default: eval_seed0 from the config)");
  gen->add_option("-o,--out", out_dir, out_help);

  auto* tr = app.add_subcommand("train", "Train one agent per seed; writes curves and checkpoints");
  tr->add_option("-c,--config", config, "Run config (JSON)")->required();
  tr->add_option("-o,--out", out_dir, out_help);
  tr->add_option("-j,--workers", workers, "Seeds trained in parallel");
  tr->add_option("--seeds", seeds, "Override the trainer seed list");
  tr->add_option("--resume", resume, "Continue from a checkpoint (single seed)");

  auto* ev = app.add_subcommand("evaluate", "Evaluate controllers on the evaluation scenarios");
  ev->add_option("-c,--config", config, "Run config (JSON)")->required();
  ev->add_option("--checkpoint", checkpoint, "Checkpoint for pi-td3 / td3");
  ev->add_option("-a,--agents", agent_names, "Controllers to evaluate (default: the config's agent)");
  ev->add_flag("--baselines", baselines, "Also evaluate cafap and none");
  ev->add_option("--load-multiplier", load_multiplier, "Scale every load and PV profile");
  ev->add_flag("--no-traces", no_traces, "Skip the per-episode trace files");
  ev->add_option("-o,--out", out_dir, out_help);
  ev->add_option("-j,--workers", workers, "Episodes evaluated in parallel");

  auto* bk = app.add_subcommand("benchmark-k", "Train PI-TD3 for every rollout horizon and seed");
  bk->add_option("-c,--config", config, "Run config (JSON)")->required();
  bk->add_option("-k,--k", ks, "Rollout horizons")->delimiter(',');
  bk->add_option("--seeds", seeds, "Override the trainer seed list")->delimiter(',');
  bk->add_option("-o,--out", out_dir, out_help);
  bk->add_option("-j,--workers", workers, "Runs trained in parallel");

  auto* gc = app.add_subcommand("gridcheck", "Run the power-flow invariant suite on a grid file");
  gc->add_option("grid", grid_path, "Grid file")->required();
  gc->add_option("--loadings", loadings, "Random loadings compared against the Newton oracle");
  gc->add_option("--seed", check_seed, "Seed for the random loadings");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : input_error;
  }

  NumericalContext ctx;
  try {
    if (*gen) return cmd_gen_scenarios(config, n, seed0, out_dir, out);
    if (*tr) return cmd_train(config, out_dir, workers, seeds, resume, ctx, out);
    if (*ev) return cmd_evaluate(config, checkpoint, agent_names, baselines, load_multiplier, out_dir, workers, !no_traces, out);
    if (*bk) return cmd_benchmark_k(config, ks, seeds, out_dir, workers, ctx, out);
    if (*gc) return cmd_gridcheck(grid_path, loadings, check_seed, out);
  } catch (const agents::NumericalFailure& e) {
    err << "numerical failure: " << e.what() << '\n';
    if (!ctx.dir.empty()) {
      try {
        write_json(fs::path(ctx.dir) / "diagnostics.json", e.diagnostics);
        err << "diagnostics written to " << (fs::path(ctx.dir) / "diagnostics.json").string() << '\n';
      } catch (const std::exception&) {
        err << e.diagnostics.dump(2) << '\n';
      }
    }
    return numerical_failure;
  } catch (const pf::DivergenceError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return input_error;
  }
  return input_error;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace gridvolt::cli
