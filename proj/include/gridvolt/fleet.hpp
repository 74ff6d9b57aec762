#pragma once

// EV sessions, charger occupancy and the clamped state-of-charge transition.

#include "gridvolt/diff.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace gridvolt::fleet {

using diff::Mat;
using diff::Var;

struct ScenarioValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EVSession {
  int charger_id = 0;
  int t_arrival = 0;
  int t_depart = 1;
  double e_arrival = 0.0;    ///< kWh
  double e_target = 0.0;     ///< kWh
  double e_min = 0.0;        ///< kWh
  double e_max = 1.0;        ///< kWh
  double p_ch_max = 0.0;     ///< kW
  double p_dis_max = 0.0;    ///< kW
  double soc_min_v2g = 0.0;  ///< fraction

  /// Throws ScenarioValidationError when a field breaks the session invariants.
  void validate() const;
};

struct ChargerState {
  int charger_id = 0;
  int bus_index = 0;
  bool occupied = false;
  double soc = 0.0;
  double efficiency = 1.0;
  std::optional<EVSession> session;
};

/// A session that has left (or is still plugged in at episode end).
struct DepartedRecord {
  EVSession session;
  int t = 0;
  double soc = 0.0;
  double e_depart = 0.0;
  bool departed = true;
};

/// min(1, e_depart / e_target); 1 when the target is zero.
double user_satisfaction(const DepartedRecord& record);

/// Per-charger constants of the transition for a batch of fleets (B x I).
/// Unoccupied chargers have zero power limits and a [0, 0] SoC range.
struct FleetArrays {
  Mat p_up;     ///< SoC-side charge rate, p_ch_max * efficiency
  Mat p_down;   ///< SoC-side discharge rate, p_dis_max / efficiency
  Mat e_max;
  Mat soc_lo;
  Mat soc_hi;
  Mat efficiency;
};

template <class T>
struct Transition {
  T soc;
  T p_ch;   ///< kW drawn from the grid
  T p_dis;  ///< kW returned to the grid
};

/// x = soc + dt * a * p_max / e_max, clamped to the SoC range; realized
/// powers are back-computed from the clamped energy change.
template <class T>
Transition<T> transition(const FleetArrays& f, const T& soc, const T& a, double dt) {
  Mat p_max = diff::sign_select(a, f.p_up, f.p_down);
  T x = diff::add(soc, diff::div(diff::scale(diff::mul(a, p_max), dt), f.e_max));
  T next = diff::clamp(x, f.soc_lo, f.soc_hi);
  T de = diff::mul(diff::sub(next, soc), f.e_max);
  T p_ch = diff::div(diff::div(diff::relu(de), f.efficiency), dt);
  T p_dis = diff::div(diff::mul(diff::relu(diff::neg(de)), f.efficiency), dt);
  return {next, p_ch, p_dis};
}

struct StepPower {
  double soc = 0.0;
  double p_ch = 0.0;
  double p_dis = 0.0;
};

/// Single-charger transition; an unoccupied charger is a no-op with zero power.
StepPower apply_action(const ChargerState& state, double a, double dt);

/// Tape-valued single-charger transition with the same arithmetic as apply_action.
Transition<Var> apply_action_diff(const ChargerState& state, const Var& a, double dt);

class Fleet {
 public:
  Fleet() = default;
  /// One charger per entry of `charger_bus`; `efficiency` defaults to 1.
  explicit Fleet(std::vector<int> charger_bus, std::vector<double> efficiency = {});

  std::size_t size() const { return chargers_.size(); }
  const ChargerState& operator[](std::size_t i) const { return chargers_.at(i); }
  const std::vector<ChargerState>& chargers() const { return chargers_; }

  /// Releases sessions departing at `t`, then plugs in sessions arriving at `t`.
  /// Returns the released sessions.
  std::vector<DepartedRecord> process_arrivals_departures(int t, const std::vector<EVSession>& sessions);

  /// Plugs `session` into its charger with the given SoC (state restoration).
  void connect(const EVSession& session, double soc);

  /// Records for sessions still connected at `t`.
  std::vector<DepartedRecord> connected_records(int t) const;

  /// Row vector (1 x I) of SoC; unoccupied chargers report 0.
  Mat soc_row() const;
  /// Overwrites occupied chargers' SoC from a 1 x I row.
  void set_soc(const Mat& row);

  FleetArrays arrays() const;

 private:
  std::vector<ChargerState> chargers_;
};

/// Stacks per-fleet arrays row-wise for batched transitions.
FleetArrays stack_arrays(const std::vector<FleetArrays>& rows);

/// Checks every session and that no charger hosts overlapping sessions.
void validate_sessions(const std::vector<EVSession>& sessions, std::size_t n_chargers);

}  // namespace gridvolt::fleet
