#include "doctest.h"

#include "gridvolt/scenario.hpp"

#include <cmath>
#include <map>
#include <sstream>

using namespace gridvolt::scenario;

namespace {

ScenarioConfig small_cfg() {
  ScenarioConfig c;
  c.horizon = 96;
  c.chargers_per_bus = 2;
  return c;
}

std::string to_text(const ExogenousTrajectory& t) {
  std::ostringstream os;
  save_trajectory(os, t);
  return os.str();
}

std::shared_ptr<ExogenousTrajectory> dummy_trajectory(int horizon) {
  auto t = std::make_shared<ExogenousTrajectory>();
  t->n_bus = 1;
  t->frames.resize(static_cast<std::size_t>(horizon));
  return t;
}

void fill_episode(TrajectoryStore& store, int len, int horizon) {
  auto id = store.begin_episode(dummy_trajectory(horizon));
  for (int t = 0; t < len; ++t) {
    StepRecord r;
    r.t = t;
    r.done = t + 1 == len;
    store.append(id, r);
  }
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  auto a = generate_scenario(small_cfg(), 12, 3466.0, 7);
  auto b = generate_scenario(small_cfg(), 12, 3466.0, 7);
  auto c = generate_scenario(small_cfg(), 12, 3466.0, 8);
  CHECK(to_text(a) == to_text(b));
  CHECK(to_text(a) != to_text(c));
  CHECK(a.horizon() == 96);
  CHECK(a.n_chargers() == 24);
  CHECK(a.sessions.size() > 10);
}

TEST_CASE("zero load multiplier gives zero demand") {
  ScenarioConfig cfg = small_cfg();
  cfg.load_multiplier = 0.0;
  auto t = generate_scenario(cfg, 12, 3466.0, 3);
  for (const auto& f : t.frames) {
    for (double p : f.p_load) CHECK(p == 0.0);
    for (double q : f.q_load) CHECK(q == 0.0);
  }
}

TEST_CASE("generated sessions are feasible and never overlap") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto t = generate_scenario(small_cfg(), 12, 3466.0, seed);
    CHECK_NOTHROW(gridvolt::fleet::validate_sessions(t.sessions, t.n_chargers()));
    for (const auto& s : t.sessions) {
      CHECK(s.e_target <= s.e_arrival + s.p_ch_max * (s.t_depart - s.t_arrival) * t.dt);
      CHECK(s.t_depart <= t.horizon());
      CHECK(s.e_min <= s.e_target);
    }
    for (const auto& f : t.frames) {
      CHECK(f.price_ch >= 0.0);
      CHECK(f.price_dis == f.price_ch);
      for (double pv : f.p_pv) CHECK(pv <= 0.0);
    }
  }
}

TEST_CASE("load scaling") {
  auto t = generate_scenario(small_cfg(), 12, 3466.0, 1);
  auto h = scale_loads(t, 0.5);
  CHECK(h.frames[40].p_load[3] == 0.5 * t.frames[40].p_load[3]);
  CHECK(h.frames[40].p_pv[3] == t.frames[40].p_pv[3]);
}

TEST_CASE("scenario files round-trip losslessly") {
  auto t = generate_scenario(small_cfg(), 12, 3466.0, 11);
  std::istringstream in(to_text(t));
  auto back = load_trajectory(in);
  CHECK(back == t);
  CHECK(to_text(back) == to_text(t));
}

TEST_CASE("malformed scenario files are rejected with context") {
  auto text = to_text(generate_scenario(small_cfg(), 12, 3466.0, 2));

  std::istringstream truncated(text.substr(0, text.size() / 2));
  CHECK_THROWS_AS(load_trajectory(truncated), ScenarioParseError);

  std::string v0 = text;
  v0.replace(v0.find("v1"), 2, "v0");
  std::istringstream old(v0);
  CHECK_THROWS_AS(load_trajectory(old), UnsupportedVersion);

  std::string bad = text;
  auto pos = bad.find("[frames]");
  pos = bad.find('\n', bad.find('\n', pos) + 1) + 1;  // first data row
  auto sp = bad.find(' ', bad.find(' ', pos) + 1) + 1;  // third field: price_ch
  bad.replace(sp, bad.find(' ', sp) - sp, "abc");
  std::istringstream broken(bad);
  try {
    load_trajectory(broken, "s.txt");
    FAIL("expected a parse error");
  } catch (const ScenarioParseError& e) {
    CHECK(std::string(e.what()).find("price_ch") != std::string::npos);
    CHECK(e.line > 0);
  }
}

TEST_CASE("config json round-trip and unknown keys") {
  ScenarioConfig c = small_cfg();
  c.load_multiplier = 1.25;
  c.p_ch_choices = {7.4};
  nlohmann::json j = c;
  ScenarioConfig back = j.get<ScenarioConfig>();
  CHECK(back.load_multiplier == 1.25);
  CHECK(back.p_ch_choices == std::vector<double>{7.4});
  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<ScenarioConfig>(), ConfigError);
  c.horizon = 0;
  CHECK_THROWS_AS(generate_scenario(c, 12, 1000.0, 1), ConfigError);
}

TEST_CASE("store: readiness, K bounds and degenerate segments") {
  TrajectoryStore store(1000);
  std::mt19937_64 rng(1);
  CHECK_FALSE(store.sample(1, 4, rng).has_value());
  fill_episode(store, 10, 10);
  auto seg = store.sample(1, 4, rng);
  REQUIRE(seg);
  for (const auto& s : *seg) {
    CHECK(s.k == 1);
    CHECK(s.step(0).t == static_cast<int>(s.start));
  }
  CHECK_THROWS_AS(store.sample(11, 1, rng), std::invalid_argument);
  CHECK_FALSE(store.sample(10, 2, rng).has_value());
  CHECK(store.sample(10, 1, rng).has_value());
}

TEST_CASE("store: FIFO eviction by whole episodes") {
  TrajectoryStore store(25);
  fill_episode(store, 10, 10);
  fill_episode(store, 10, 10);
  fill_episode(store, 10, 10);
  CHECK(store.size() == 20);
  CHECK(store.episodes() == 2);
}

TEST_CASE("store: segments never cross episodes and starts are uniform") {
  TrajectoryStore store(100000);
  fill_episode(store, 30, 30);
  fill_episode(store, 12, 30);
  fill_episode(store, 50, 50);
  const int k = 5;
  const std::size_t starts = store.eligible_starts(k);
  CHECK(starts == 26 + 8 + 46);

  std::mt19937_64 rng(77);
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  const int draws = 100000;
  for (int round = 0; round < draws / 50; ++round) {
    auto seg = store.sample(k, 50, rng);
    REQUIRE(seg);
    for (const auto& s : *seg) {
      CHECK(s.start + static_cast<std::size_t>(k) <= s.episode->steps.size());
      ++counts[{s.episode->id, s.start}];
    }
  }
  CHECK(counts.size() == starts);
  double expected = static_cast<double>(draws) / static_cast<double>(starts);
  double chi2 = 0.0;
  for (const auto& [key, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 79 degrees of freedom: the 0.999 quantile is about 126.
  CHECK(chi2 < 126.0);
}
