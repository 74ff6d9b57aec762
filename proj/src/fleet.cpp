#include "gridvolt/fleet.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>

namespace gridvolt::fleet {

void EVSession::validate() const {
  auto fail = [&](const std::string& why) {
    throw ScenarioValidationError(fmt::format("session on charger {} arriving at {}: {}", charger_id, t_arrival, why));
  };
  if (charger_id < 0) fail("negative charger id");
  if (!(t_arrival < t_depart)) fail("departure must follow arrival");
  if (t_arrival < 0) fail("negative arrival step");
  if (!(e_max > 0.0)) fail("capacity must be positive");
  if (!(0.0 <= e_min && e_min <= e_arrival && e_arrival <= e_max)) fail("requires 0 <= e_min <= e_arrival <= e_max");
  if (!(e_min <= e_target && e_target <= e_max)) fail("requires e_min <= e_target <= e_max");
  if (!(p_ch_max >= 0.0 && p_dis_max >= 0.0)) fail("power limits must be non-negative");
  if (!(soc_min_v2g >= 0.0 && soc_min_v2g <= 1.0)) fail("soc_min_v2g must lie in [0, 1]");
  if (e_arrival < soc_min_v2g * e_max) fail("arrival energy below the V2G floor");
}

double user_satisfaction(const DepartedRecord& record) {
  if (record.session.e_target == 0.0) return 1.0;
  return std::min(1.0, record.e_depart / record.session.e_target);
}

namespace {

FleetArrays single_arrays(const ChargerState& c) {
  FleetArrays f{Mat::Zero(1, 1), Mat::Zero(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1), Mat::Zero(1, 1),
                Mat::Constant(1, 1, c.efficiency)};
  if (c.occupied && c.session) {
    const EVSession& s = *c.session;
    f.p_up(0, 0) = s.p_ch_max * c.efficiency;
    f.p_down(0, 0) = s.p_dis_max / c.efficiency;
    f.e_max(0, 0) = s.e_max;
    f.soc_lo(0, 0) = s.soc_min_v2g;
    f.soc_hi(0, 0) = 1.0;
  }
  return f;
}

}  // namespace

StepPower apply_action(const ChargerState& state, double a, double dt) {
  if (!state.occupied) return {state.soc, 0.0, 0.0};
  if (!std::isfinite(a)) throw std::invalid_argument("action must be finite");
  Transition<Mat> t = transition<Mat>(single_arrays(state), Mat::Constant(1, 1, state.soc), Mat::Constant(1, 1, a), dt);
  return {t.soc(0, 0), t.p_ch(0, 0), t.p_dis(0, 0)};
}

Transition<Var> apply_action_diff(const ChargerState& state, const Var& a, double dt) {
  Var soc = diff::lift(Mat::Constant(1, 1, state.soc), a);
  if (!state.occupied) {
    Var zero = diff::lift(Mat::Zero(1, 1), a);
    return {soc, zero, zero};
  }
  return transition(single_arrays(state), soc, a, dt);
}

Fleet::Fleet(std::vector<int> charger_bus, std::vector<double> efficiency) {
  if (!efficiency.empty() && efficiency.size() != charger_bus.size()) {
    throw std::invalid_argument("efficiency list must match charger count");
  }
  chargers_.resize(charger_bus.size());
  for (std::size_t i = 0; i < charger_bus.size(); ++i) {
    chargers_[i].charger_id = static_cast<int>(i);
    chargers_[i].bus_index = charger_bus[i];
    chargers_[i].efficiency = efficiency.empty() ? 1.0 : efficiency[i];
    if (!(chargers_[i].efficiency > 0.0 && chargers_[i].efficiency <= 1.0)) {
      throw std::invalid_argument("charger efficiency must lie in (0, 1]");
    }
  }
}

std::vector<DepartedRecord> Fleet::process_arrivals_departures(int t, const std::vector<EVSession>& sessions) {
  std::vector<DepartedRecord> out;
  for (auto& c : chargers_) {
    if (c.occupied && c.session->t_depart == t) {
      out.push_back({*c.session, t, c.soc, c.soc * c.session->e_max, true});
      c.occupied = false;
      c.soc = 0.0;
      c.session.reset();
    }
  }
  for (const auto& s : sessions) {
    if (s.t_arrival != t) continue;
    if (s.charger_id < 0 || static_cast<std::size_t>(s.charger_id) >= chargers_.size()) {
      throw ScenarioValidationError(fmt::format("session references unknown charger {}", s.charger_id));
    }
    ChargerState& c = chargers_[static_cast<std::size_t>(s.charger_id)];
    if (c.occupied) {
      throw ScenarioValidationError(fmt::format("overlapping sessions on charger {} at step {}", s.charger_id, t));
    }
    s.validate();
    c.occupied = true;
    c.session = s;
    c.soc = s.e_arrival / s.e_max;
  }
  return out;
}

void Fleet::connect(const EVSession& session, double soc) {
  if (session.charger_id < 0 || static_cast<std::size_t>(session.charger_id) >= chargers_.size()) {
    throw ScenarioValidationError(fmt::format("session references unknown charger {}", session.charger_id));
  }
  ChargerState& c = chargers_[static_cast<std::size_t>(session.charger_id)];
  if (c.occupied) throw ScenarioValidationError(fmt::format("charger {} is already occupied", session.charger_id));
  session.validate();
  c.occupied = true;
  c.session = session;
  c.soc = soc;
}

std::vector<DepartedRecord> Fleet::connected_records(int t) const {
  std::vector<DepartedRecord> out;
  for (const auto& c : chargers_) {
    if (c.occupied) out.push_back({*c.session, t, c.soc, c.soc * c.session->e_max, false});
  }
  return out;
}

Mat Fleet::soc_row() const {
  Mat row(1, static_cast<Eigen::Index>(chargers_.size()));
  for (std::size_t i = 0; i < chargers_.size(); ++i) {
    row(0, static_cast<Eigen::Index>(i)) = chargers_[i].occupied ? chargers_[i].soc : 0.0;
  }
  return row;
}

void Fleet::set_soc(const Mat& row) {
  if (row.rows() != 1 || row.cols() != static_cast<Eigen::Index>(chargers_.size())) {
    throw std::invalid_argument("SoC row has the wrong size");
  }
  for (std::size_t i = 0; i < chargers_.size(); ++i) {
    if (chargers_[i].occupied) chargers_[i].soc = row(0, static_cast<Eigen::Index>(i));
  }
}

FleetArrays Fleet::arrays() const {
  const auto n = static_cast<Eigen::Index>(chargers_.size());
  FleetArrays f{Mat::Zero(1, n), Mat::Zero(1, n), Mat::Ones(1, n), Mat::Zero(1, n), Mat::Zero(1, n), Mat::Ones(1, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    FleetArrays one = single_arrays(chargers_[static_cast<std::size_t>(i)]);
    f.p_up(0, i) = one.p_up(0, 0);
    f.p_down(0, i) = one.p_down(0, 0);
    f.e_max(0, i) = one.e_max(0, 0);
    f.soc_lo(0, i) = one.soc_lo(0, 0);
    f.soc_hi(0, i) = one.soc_hi(0, 0);
    f.efficiency(0, i) = one.efficiency(0, 0);
  }
  return f;
}

FleetArrays stack_arrays(const std::vector<FleetArrays>& rows) {
  if (rows.empty()) throw std::invalid_argument("no fleets to stack");
  const auto b = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index n = rows[0].e_max.cols();
  auto stack = [&](Mat FleetArrays::*field) {
    Mat m(b, n);
    for (Eigen::Index r = 0; r < b; ++r) m.row(r) = (rows[static_cast<std::size_t>(r)].*field).row(0);
    return m;
  };
  return {stack(&FleetArrays::p_up),   stack(&FleetArrays::p_down), stack(&FleetArrays::e_max),
          stack(&FleetArrays::soc_lo), stack(&FleetArrays::soc_hi), stack(&FleetArrays::efficiency)};
}

void validate_sessions(const std::vector<EVSession>& sessions, std::size_t n_chargers) {
  std::map<int, std::vector<const EVSession*>> by_charger;
  for (const auto& s : sessions) {
    s.validate();
    if (static_cast<std::size_t>(s.charger_id) >= n_chargers) {
      throw ScenarioValidationError(fmt::format("session references unknown charger {}", s.charger_id));
    }
    by_charger[s.charger_id].push_back(&s);
  }
  for (auto& [id, list] : by_charger) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->t_arrival < b->t_arrival; });
    for (std::size_t i = 1; i < list.size(); ++i) {
      if (list[i]->t_arrival < list[i - 1]->t_depart) {
        throw ScenarioValidationError(fmt::format("overlapping sessions on charger {} at step {}", id, list[i]->t_arrival));
      }
    }
  }
}

}  // namespace gridvolt::fleet
