#include "gridvolt/scenario.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace gridvolt::scenario {

ScenarioParseError::ScenarioParseError(const std::string& source, std::size_t line_no, const std::string& what)
    : std::runtime_error(fmt::format("{}:{}: {}", source, line_no, what)), line(line_no) {}

void ExogenousTrajectory::validate() const {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (frames.empty()) throw ConfigError("trajectory has no frames");
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto& f = frames[k];
    if (f.t != static_cast<int>(k)) throw ConfigError(fmt::format("frame {} carries step index {}", k, f.t));
    if (f.p_load.size() != n_bus || f.q_load.size() != n_bus || f.p_pv.size() != n_bus) {
      throw ConfigError(fmt::format("frame {} is not sized to {} buses", k, n_bus));
    }
    if (f.price_ch < 0.0 || f.price_dis < 0.0) throw ConfigError(fmt::format("negative price at frame {}", k));
  }
  for (int b : charger_bus) {
    if (b < 0 || static_cast<std::size_t>(b) >= n_bus) throw ConfigError(fmt::format("charger on unknown bus {}", b));
  }
  fleet::validate_sessions(sessions, charger_bus.size());
  for (const auto& s : sessions) {
    if (s.t_depart > horizon()) {
      throw ConfigError(fmt::format("session on charger {} departs after the horizon", s.charger_id));
    }
  }
}

bool operator==(const ExogenousFrame& a, const ExogenousFrame& b) {
  return a.t == b.t && a.hour == b.hour && a.p_load == b.p_load && a.q_load == b.q_load && a.p_pv == b.p_pv &&
         a.price_ch == b.price_ch && a.price_dis == b.price_dis;
}

namespace {

bool same_session(const EVSession& a, const EVSession& b) {
  return a.charger_id == b.charger_id && a.t_arrival == b.t_arrival && a.t_depart == b.t_depart &&
         a.e_arrival == b.e_arrival && a.e_target == b.e_target && a.e_min == b.e_min && a.e_max == b.e_max &&
         a.p_ch_max == b.p_ch_max && a.p_dis_max == b.p_dis_max && a.soc_min_v2g == b.soc_min_v2g;
}

}  // namespace

bool operator==(const ExogenousTrajectory& a, const ExogenousTrajectory& b) {
  if (a.grid_id != b.grid_id || a.seed != b.seed || a.dt != b.dt || a.n_bus != b.n_bus ||
      a.charger_bus != b.charger_bus || a.frames != b.frames || a.sessions.size() != b.sessions.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.sessions.size(); ++i) {
    if (!same_session(a.sessions[i], b.sessions[i])) return false;
  }
  return true;
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("scenario config: " + why); };
  if (horizon < 1) fail("horizon must be at least 1");
  if (!(dt > 0.0)) fail("dt must be positive");
  if (chargers_per_bus < 0 || n_chargers < 0) fail("charger counts must be non-negative");
  if (load_multiplier < 0.0 || load_peak_fraction < 0.0 || load_noise < 0.0) fail("load parameters must be non-negative");
  if (bus_weight_spread < 0.0 || bus_weight_spread > 1.0) fail("bus_weight_spread must lie in [0, 1]");
  if (!(power_factor > 0.0 && power_factor <= 1.0)) fail("power_factor must lie in (0, 1]");
  if (pv_peak_fraction < 0.0 || pv_bus_share < 0.0 || pv_bus_share > 1.0 || cloud_noise < 0.0 || cloud_noise > 1.0) {
    fail("PV parameters out of range");
  }
  if (price_base < 0.0 || price_noise < 0.0 || price_dis_ratio < 0.0) fail("price parameters must be non-negative");
  if (arrivals_per_charger_day < 0.0) fail("arrival rate must be non-negative");
  if (!(min_stay_h > 0.0 && min_stay_h <= max_stay_h)) fail("stay range must satisfy 0 < min <= max");
  if (!(e_max_min > 0.0 && e_max_min <= e_max_max)) fail("capacity range invalid");
  if (!(soc_min_v2g >= 0.0 && soc_min_v2g <= soc_arrival_min && soc_arrival_min <= soc_arrival_max &&
        soc_arrival_max <= 1.0)) {
    fail("arrival SoC range must lie within [soc_min_v2g, 1]");
  }
  if (!(soc_target_min <= soc_target_max && soc_target_min >= soc_min_v2g && soc_target_max <= 1.0)) {
    fail("target SoC range invalid");
  }
  if (p_ch_choices.empty()) fail("p_ch_choices must not be empty");
  for (double p : p_ch_choices) {
    if (!(p > 0.0)) fail("charger powers must be positive");
  }
  if (v2g_power_ratio < 0.0) fail("v2g_power_ratio must be non-negative");
  if (max_retries < 1) fail("max_retries must be at least 1");
}

#define GRIDVOLT_SCENARIO_FIELDS(X)                                                                              \
  X(grid_id) X(horizon) X(dt) X(start_hour) X(chargers_per_bus) X(n_chargers) X(nominal_load_kw) X(load_multiplier) \
  X(load_peak_fraction) X(load_noise) X(bus_weight_spread) X(power_factor) X(pv_peak_fraction) X(pv_bus_share)     \
  X(cloud_noise) X(price_base) X(price_noise) X(price_dis_ratio) X(arrivals_per_charger_day) X(min_stay_h)          \
  X(max_stay_h) X(e_max_min) X(e_max_max) X(soc_arrival_min) X(soc_arrival_max) X(soc_target_min)                  \
  X(soc_target_max) X(p_ch_choices) X(v2g_power_ratio) X(soc_min_v2g) X(max_retries)

void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  j = nlohmann::json::object();
#define X(f) j[#f] = c.f;
  GRIDVOLT_SCENARIO_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  if (!j.is_object()) throw ConfigError("scenario config must be an object");
  static const std::vector<std::string> known = {
#define X(f) #f,
      GRIDVOLT_SCENARIO_FIELDS(X)
#undef X
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown scenario config key '" + it.key() + "'");
    }
  }
  try {
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    GRIDVOLT_SCENARIO_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario config: ") + e.what());
  }
}

#undef GRIDVOLT_SCENARIO_FIELDS

namespace {

double bump(double h, double centre, double width) {
  // Circular distance on the 24 h clock.
  double d = std::fmod(std::abs(h - centre), 24.0);
  d = std::min(d, 24.0 - d);
  return std::exp(-0.5 * (d / width) * (d / width));
}

/// Double-peak residential/commercial demand shape with maximum near 1.
double load_shape(double h) { return 0.45 + 0.2 * bump(h, 8.0, 1.5) + 0.55 * bump(h, 19.0, 2.0); }

double pv_shape(double h) {
  if (h < 6.0 || h > 20.0) return 0.0;
  return bump(h, 13.0, 2.5);
}

double price_shape(double h) {
  return 1.0 + 0.3 * bump(h, 8.0, 2.0) + 0.6 * bump(h, 19.0, 2.0) - 0.35 * bump(h, 13.0, 2.5) - 0.2 * bump(h, 3.0, 2.5);
}

/// Relative arrival intensity over the day: morning and evening commutes.
double arrival_shape(double h) { return 0.15 + bump(h, 8.0, 1.5) + 0.7 * bump(h, 17.5, 2.0); }

double mean_arrival_shape() {
  double acc = 0.0;
  for (int k = 0; k < 2400; ++k) acc += arrival_shape(k / 100.0);
  return acc / 2400.0;
}

}  // namespace

ExogenousTrajectory generate_scenario(const ScenarioConfig& cfg, std::size_t n_bus, double grid_nominal_load_kw,
                                      std::uint64_t seed) {
  cfg.validate();
  if (n_bus == 0) throw ConfigError("grid has no load buses");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ExogenousTrajectory traj;
  traj.grid_id = cfg.grid_id;
  traj.seed = seed;
  traj.dt = cfg.dt;
  traj.n_bus = n_bus;

  const int n_chargers = cfg.n_chargers > 0 ? cfg.n_chargers : cfg.chargers_per_bus * static_cast<int>(n_bus);
  for (int i = 0; i < n_chargers; ++i) traj.charger_bus.push_back(i % static_cast<int>(n_bus));

  const double nominal = cfg.nominal_load_kw > 0.0 ? cfg.nominal_load_kw : grid_nominal_load_kw;
  const double per_bus_kw = nominal / static_cast<double>(n_bus);
  const double q_ratio = std::tan(std::acos(cfg.power_factor));

  std::vector<double> weight(n_bus);
  std::vector<bool> has_pv(n_bus);
  for (std::size_t n = 0; n < n_bus; ++n) {
    weight[n] = 1.0 + cfg.bus_weight_spread * (2.0 * unit(rng) - 1.0);
    has_pv[n] = unit(rng) < cfg.pv_bus_share;
  }

  double cloud = 0.0;
  for (int t = 0; t < cfg.horizon; ++t) {
    ExogenousFrame f;
    f.t = t;
    f.hour = std::fmod(cfg.start_hour + t * cfg.dt, 24.0);
    f.p_load.resize(n_bus);
    f.q_load.resize(n_bus);
    f.p_pv.resize(n_bus);
    // Cloud cover as a slowly varying AR(1) process shared by the feeder.
    cloud = 0.8 * cloud + 0.2 * unit(rng);
    for (std::size_t n = 0; n < n_bus; ++n) {
      double noise = std::max(0.0, 1.0 + cfg.load_noise * gauss(rng));
      double p = cfg.load_multiplier * cfg.load_peak_fraction * per_bus_kw * weight[n] * load_shape(f.hour) * noise;
      f.p_load[n] = p;
      f.q_load[n] = p * q_ratio;
      double pv = has_pv[n] ? cfg.pv_peak_fraction * per_bus_kw * pv_shape(f.hour) * (1.0 - cfg.cloud_noise * cloud) : 0.0;
      f.p_pv[n] = -std::max(0.0, pv);
    }
    f.price_ch = std::max(0.0, cfg.price_base * price_shape(f.hour) + cfg.price_noise * gauss(rng));
    f.price_dis = cfg.price_dis_ratio * f.price_ch;
    traj.frames.push_back(std::move(f));
  }

  // Sessions are laid out charger by charger, each starting after the previous
  // one left, so a charger never hosts two vehicles at once.
  const double rate_scale = cfg.arrivals_per_charger_day / 24.0 / mean_arrival_shape();
  std::uniform_int_distribution<std::size_t> pick_power(0, cfg.p_ch_choices.size() - 1);
  for (int c = 0; c < n_chargers; ++c) {
    int t = 0;
    while (t < cfg.horizon - 1) {
      double h = std::fmod(cfg.start_hour + t * cfg.dt, 24.0);
      if (unit(rng) >= rate_scale * arrival_shape(h) * cfg.dt) {
        ++t;
        continue;
      }
      EVSession s;
      int retries = 0;
      for (;; ++retries) {
        if (retries >= cfg.max_retries) {
          throw ConfigError(fmt::format("could not place a feasible session on charger {} after {} attempts", c, retries));
        }
        double stay_h = cfg.min_stay_h + (cfg.max_stay_h - cfg.min_stay_h) * unit(rng);
        int steps = std::max(1, static_cast<int>(std::lround(stay_h / cfg.dt)));
        s.charger_id = c;
        s.t_arrival = t;
        s.t_depart = std::min(cfg.horizon, t + steps);
        s.e_max = cfg.e_max_min + (cfg.e_max_max - cfg.e_max_min) * unit(rng);
        s.soc_min_v2g = cfg.soc_min_v2g;
        s.e_min = cfg.soc_min_v2g * s.e_max;
        double soc_a = cfg.soc_arrival_min + (cfg.soc_arrival_max - cfg.soc_arrival_min) * unit(rng);
        s.e_arrival = std::max(s.e_min, soc_a * s.e_max);
        s.p_ch_max = cfg.p_ch_choices[pick_power(rng)];
        s.p_dis_max = cfg.v2g_power_ratio * s.p_ch_max;
        double soc_t = cfg.soc_target_min + (cfg.soc_target_max - cfg.soc_target_min) * unit(rng);
        // Clip the target to what full-rate charging can deliver before departure.
        double reachable = s.e_arrival + s.p_ch_max * (s.t_depart - s.t_arrival) * cfg.dt * (1.0 - 1e-9);
        s.e_target = std::max(s.e_min, std::min({soc_t * s.e_max, reachable, s.e_max}));
        if (s.t_depart > s.t_arrival) break;
      }
      traj.sessions.push_back(s);
      t = s.t_depart;
    }
  }
  traj.validate();
  return traj;
}

ExogenousTrajectory scale_loads(ExogenousTrajectory traj, double factor) {
  if (factor < 0.0) throw ConfigError("load factor must be non-negative");
  for (auto& f : traj.frames) {
    for (auto& p : f.p_load) p *= factor;
    for (auto& q : f.q_load) q *= factor;
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Text format.

void save_trajectory(std::ostream& out, const ExogenousTrajectory& traj) {
  out << "gridvolt-scenario v1\n";
  out << fmt::format("grid_id {}\nseed {}\ndt {}\nn_bus {}\nn_chargers {}\nhorizon {}\n", traj.grid_id, traj.seed,
                     traj.dt, traj.n_bus, traj.charger_bus.size(), traj.frames.size());
  out << "[chargers]\n# charger bus\n";
  for (std::size_t i = 0; i < traj.charger_bus.size(); ++i) out << fmt::format("{} {}\n", i, traj.charger_bus[i]);
  out << "[frames]\n# t hour price_ch price_dis p_load[n_bus] q_load[n_bus] p_pv[n_bus]\n";
  for (const auto& f : traj.frames) {
    std::string line = fmt::format("{} {} {} {}", f.t, f.hour, f.price_ch, f.price_dis);
    for (double v : f.p_load) line += fmt::format(" {}", v);
    for (double v : f.q_load) line += fmt::format(" {}", v);
    for (double v : f.p_pv) line += fmt::format(" {}", v);
    out << line << '\n';
  }
  out << "[sessions]\n# charger t_arrival t_depart e_arrival e_target e_min e_max p_ch_max p_dis_max soc_min_v2g\n";
  for (const auto& s : traj.sessions) {
    out << fmt::format("{} {} {} {} {} {} {} {} {} {}\n", s.charger_id, s.t_arrival, s.t_depart, s.e_arrival, s.e_target,
                       s.e_min, s.e_max, s.p_ch_max, s.p_dis_max, s.soc_min_v2g);
  }
  out << "[end]\n";
}

void save_trajectory(const std::string& path, const ExogenousTrajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write scenario file " + path);
  save_trajectory(out, traj);
  if (!out) throw std::runtime_error("failed writing scenario file " + path);
}

namespace {

class LineReader {
 public:
  LineReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  /// Next non-empty, non-comment line split into tokens; false at end of input.
  bool next(std::vector<std::string>& tok) {
    std::string raw;
    while (std::getline(in_, raw)) {
      ++line_;
      std::string text = raw.substr(0, raw.find('#'));
      std::istringstream is(text);
      tok.clear();
      for (std::string t; is >> t;) tok.push_back(t);
      if (!tok.empty()) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const { throw ScenarioParseError(source_, line_, what); }

  double number(const std::string& tok, const std::string& field) const {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
      fail(fmt::format("field '{}': '{}' is not a finite number", field, tok));
    }
    return v;
  }

  template <class Int>
  Int integer(const std::string& tok, const std::string& field) const {
    Int v{};
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) fail(fmt::format("field '{}': '{}' is not an integer", field, tok));
    return v;
  }

  void expect(const std::vector<std::string>& tok, const std::string& what) const {
    if (tok.size() != 1 || tok[0] != what) fail("expected " + what);
  }

  std::size_t line() const { return line_; }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_ = 0;
};

}  // namespace

ExogenousTrajectory load_trajectory(std::istream& in, const std::string& source) {
  LineReader r(in, source);
  std::vector<std::string> tok;
  if (!r.next(tok)) r.fail("empty scenario file");
  if (tok.size() != 2 || tok[0] != "gridvolt-scenario") r.fail("expected header 'gridvolt-scenario v1'");
  if (tok[1] != "v1") throw UnsupportedVersion(source, r.line(), "unsupported scenario format version " + tok[1]);

  ExogenousTrajectory traj;
  std::size_t n_chargers = 0, horizon = 0;
  const std::vector<std::string> keys = {"grid_id", "seed", "dt", "n_bus", "n_chargers", "horizon"};
  for (const auto& key : keys) {
    if (!r.next(tok)) r.fail("truncated header: missing " + key);
    if (tok.size() != 2 || tok[0] != key) r.fail("expected '" + key + " <value>'");
    if (key == "grid_id") traj.grid_id = tok[1];
    if (key == "seed") traj.seed = r.integer<std::uint64_t>(tok[1], key);
    if (key == "dt") traj.dt = r.number(tok[1], key);
    if (key == "n_bus") traj.n_bus = r.integer<std::size_t>(tok[1], key);
    if (key == "n_chargers") n_chargers = r.integer<std::size_t>(tok[1], key);
    if (key == "horizon") horizon = r.integer<std::size_t>(tok[1], key);
  }

  if (!r.next(tok)) r.fail("truncated file: missing [chargers]");
  r.expect(tok, "[chargers]");
  for (std::size_t i = 0; i < n_chargers; ++i) {
    if (!r.next(tok)) r.fail("truncated [chargers] section");
    if (tok.size() != 2) r.fail("charger entry needs 'charger bus'");
    if (r.integer<std::size_t>(tok[0], "charger") != i) r.fail("chargers must be listed in order");
    traj.charger_bus.push_back(r.integer<int>(tok[1], "bus"));
  }

  if (!r.next(tok)) r.fail("truncated file: missing [frames]");
  r.expect(tok, "[frames]");
  const std::size_t width = 4 + 3 * traj.n_bus;
  for (std::size_t k = 0; k < horizon; ++k) {
    if (!r.next(tok)) r.fail("truncated [frames] section");
    if (tok.size() != width) r.fail(fmt::format("frame row needs {} fields, found {}", width, tok.size()));
    ExogenousFrame f;
    f.t = r.integer<int>(tok[0], "t");
    f.hour = r.number(tok[1], "hour");
    f.price_ch = r.number(tok[2], "price_ch");
    f.price_dis = r.number(tok[3], "price_dis");
    for (std::size_t n = 0; n < traj.n_bus; ++n) {
      f.p_load.push_back(r.number(tok[4 + n], "p_load"));
      f.q_load.push_back(r.number(tok[4 + traj.n_bus + n], "q_load"));
      f.p_pv.push_back(r.number(tok[4 + 2 * traj.n_bus + n], "p_pv"));
    }
    traj.frames.push_back(std::move(f));
  }

  if (!r.next(tok)) r.fail("truncated file: missing [sessions]");
  r.expect(tok, "[sessions]");
  for (;;) {
    if (!r.next(tok)) r.fail("truncated file: missing [end]");
    if (tok.size() == 1 && tok[0] == "[end]") break;
    if (tok.size() != 10) r.fail("session row needs 10 fields");
    EVSession s;
    s.charger_id = r.integer<int>(tok[0], "charger");
    s.t_arrival = r.integer<int>(tok[1], "t_arrival");
    s.t_depart = r.integer<int>(tok[2], "t_depart");
    s.e_arrival = r.number(tok[3], "e_arrival");
    s.e_target = r.number(tok[4], "e_target");
    s.e_min = r.number(tok[5], "e_min");
    s.e_max = r.number(tok[6], "e_max");
    s.p_ch_max = r.number(tok[7], "p_ch_max");
    s.p_dis_max = r.number(tok[8], "p_dis_max");
    s.soc_min_v2g = r.number(tok[9], "soc_min_v2g");
    traj.sessions.push_back(s);
  }
  if (r.next(tok)) r.fail("unexpected content after [end]");
  try {
    traj.validate();
  } catch (const std::exception& e) {
    r.fail(e.what());
  }
  return traj;
}

ExogenousTrajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open scenario file " + path);
  return load_trajectory(in, path);
}

// ---------------------------------------------------------------------------
// Replay store.

TrajectoryStore::TrajectoryStore(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("store capacity must be positive");
}

std::uint64_t TrajectoryStore::begin_episode(std::shared_ptr<const ExogenousTrajectory> trajectory) {
  if (!trajectory) throw std::invalid_argument("episode needs a trajectory");
  std::lock_guard lock(mu_);
  auto ep = std::make_shared<Episode>();
  ep->id = next_id_++;
  max_horizon_ = std::max(max_horizon_, trajectory->horizon());
  ep->trajectory = std::move(trajectory);
  episodes_.push_back(std::move(ep));
  return episodes_.back()->id;
}

void TrajectoryStore::append(std::uint64_t episode_id, StepRecord record) {
  std::lock_guard lock(mu_);
  auto it = std::find_if(episodes_.begin(), episodes_.end(), [&](const auto& e) { return e->id == episode_id; });
  if (it == episodes_.end()) throw std::invalid_argument("unknown or evicted episode");
  (*it)->steps.push_back(std::move(record));
  ++total_;
  evict_locked();
}

void TrajectoryStore::evict_locked() {
  // Drop whole episodes from the front, never the one currently being written.
  while (total_ > capacity_ && episodes_.size() > 1) {
    total_ -= episodes_.front()->steps.size();
    episodes_.erase(episodes_.begin());
  }
}

std::size_t TrajectoryStore::size() const {
  std::lock_guard lock(mu_);
  return total_;
}

std::size_t TrajectoryStore::episodes() const {
  std::lock_guard lock(mu_);
  return episodes_.size();
}

std::size_t TrajectoryStore::eligible_starts(int k) const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& e : episodes_) {
    if (e->steps.size() >= static_cast<std::size_t>(k)) n += e->steps.size() - static_cast<std::size_t>(k) + 1;
  }
  return n;
}

std::optional<std::vector<TrajectorySegment>> TrajectoryStore::sample(int k, std::size_t batch,
                                                                      std::mt19937_64& rng) const {
  if (k < 1) throw std::invalid_argument("segment length must be at least 1");
  std::lock_guard lock(mu_);
  if (max_horizon_ > 0 && k > max_horizon_) {
    throw std::invalid_argument(fmt::format("segment length {} exceeds the trajectory horizon {}", k, max_horizon_));
  }
  std::vector<std::size_t> prefix;
  prefix.reserve(episodes_.size());
  std::size_t total = 0;
  for (const auto& e : episodes_) {
    if (e->steps.size() >= static_cast<std::size_t>(k)) total += e->steps.size() - static_cast<std::size_t>(k) + 1;
    prefix.push_back(total);
  }
  if (total < batch || total == 0) return std::nullopt;
  std::uniform_int_distribution<std::size_t> draw(0, total - 1);
  std::vector<TrajectorySegment> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t u = draw(rng);
    auto ep = static_cast<std::size_t>(std::upper_bound(prefix.begin(), prefix.end(), u) - prefix.begin());
    std::size_t before = ep == 0 ? 0 : prefix[ep - 1];
    out.push_back({episodes_[ep], u - before, k});
  }
  return out;
}

}  // namespace gridvolt::scenario
