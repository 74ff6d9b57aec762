#pragma once

// Invariant suite for a grid model: reduction residual, no-load fixed point,
// agreement with the Newton oracle on random loadings, and (for a two-bus
// feeder) the closed-form receiving-end voltage.

#include "gridvolt/powerflow.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gridvolt::pf {

/// Random feasible loading around the grid's nominal demand: a feeder-wide
/// scale in [0, max_scale], per-bus weights in [0, 2], power factor in [0.85, 1].
std::vector<BusInjection> random_loading(const GridModel& grid, std::mt19937_64& rng, double max_scale = 1.2);

/// Receiving-end |v| of a single line with impedance z feeding load s from a
/// 1.0 p.u. source; nullopt beyond the loadability limit.
std::optional<double> two_bus_closed_form(cplx z, cplx s);

struct GridCheckReport {
  double reduction_residual = 0.0;
  double no_load_error = 0.0;
  int loadings = 0;
  double max_oracle_gap = 0.0;     ///< max | |v_fp| - |v_newton| | over all loadings
  int fixed_point_failures = 0;
  int oracle_failures = 0;
  std::optional<double> closed_form_gap;
  double seconds = 0.0;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

GridCheckReport run_grid_checks(const GridModel& grid, int loadings = 200, std::uint64_t seed = 1,
                                double tolerance = 1e-6);

}  // namespace gridvolt::pf
