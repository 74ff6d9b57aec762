#include "gridvolt/gridcheck.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>

namespace gridvolt::pf {

std::vector<BusInjection> random_loading(const GridModel& grid, std::mt19937_64& rng, double max_scale) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double per_bus = grid.nominal_load_kw / static_cast<double>(grid.n_bus) / (grid.s_base / 1e3);
  const double scale = max_scale * unit(rng);
  std::vector<BusInjection> out(grid.n_bus);
  for (auto& s : out) {
    double pf = 0.85 + 0.15 * unit(rng);
    s.p = per_bus * scale * 2.0 * unit(rng);
    s.q = s.p * std::tan(std::acos(pf));
  }
  return out;
}

std::optional<double> two_bus_closed_form(cplx z, cplx s) {
  // |V|^4 + (2(PR + QX) - 1)|V|^2 + |z|^2 |S|^2 = 0, high-voltage root.
  double b = 2.0 * (s.real() * z.real() + s.imag() * z.imag()) - 1.0;
  double c = std::norm(z) * std::norm(s);
  double disc = b * b - 4.0 * c;
  if (disc < 0.0) return std::nullopt;
  return std::sqrt((-b + std::sqrt(disc)) / 2.0);
}

GridCheckReport run_grid_checks(const GridModel& grid, int loadings, std::uint64_t seed, double tolerance) {
  auto t0 = std::chrono::steady_clock::now();
  GridCheckReport rep;
  const auto n = static_cast<Eigen::Index>(grid.n_bus);

  Eigen::MatrixXcd y_red = grid.reduced_admittance();
  rep.reduction_residual =
      (grid.l_mat * y_red - Eigen::MatrixXcd::Identity(n, n)).cwiseAbs().rowwise().sum().maxCoeff();
  if (!(rep.reduction_residual < 1e-9)) {
    rep.failures.push_back(fmt::format("reduction residual {:.3g} >= 1e-9", rep.reduction_residual));
  }

  std::vector<BusInjection> zero(grid.n_bus);
  VoltageProfile flat = solve_fixed_point(grid, zero, 1, 1e-8);
  rep.no_load_error = (flat.v - grid.z_vec).cwiseAbs().maxCoeff();
  if (rep.no_load_error != 0.0) rep.failures.push_back("no-load sweep does not return Z exactly");

  std::mt19937_64 rng(seed);
  for (int k = 0; k < loadings; ++k) {
    auto inj = random_loading(grid, rng);
    ++rep.loadings;
    VoltageProfile fp, nr;
    try {
      fp = solve_fixed_point(grid, inj, 50, 1e-8);
    } catch (const DivergenceError&) {
      ++rep.fixed_point_failures;
      continue;
    }
    if (!fp.converged) {
      ++rep.fixed_point_failures;
      continue;
    }
    try {
      nr = solve_newton(grid, inj);
    } catch (const OracleFailure&) {
      ++rep.oracle_failures;
      continue;
    }
    double gap = (fp.magnitudes() - nr.magnitudes()).cwiseAbs().maxCoeff();
    rep.max_oracle_gap = std::max(rep.max_oracle_gap, gap);
  }
  if (rep.fixed_point_failures > 0) {
    rep.failures.push_back(fmt::format("{} loadings did not converge on the fixed-point path", rep.fixed_point_failures));
  }
  if (rep.oracle_failures > 0) {
    rep.failures.push_back(fmt::format("{} loadings failed in the Newton oracle", rep.oracle_failures));
  }
  if (!(rep.max_oracle_gap < tolerance)) {
    rep.failures.push_back(fmt::format("fixed-point vs Newton gap {:.3g} p.u. exceeds {:.3g}", rep.max_oracle_gap, tolerance));
  }

  if (grid.n_bus == 1) {
    cplx z = grid.l_mat(0, 0);
    cplx s(0.5, 0.2);
    auto exact = two_bus_closed_form(z, s);
    VoltageProfile fp = solve_fixed_point(grid, {{s.real(), s.imag()}}, 50, 1e-12);
    if (exact) {
      rep.closed_form_gap = std::abs(fp.magnitudes()(0) - *exact);
      if (!(*rep.closed_form_gap < 1e-8)) {
        rep.failures.push_back(fmt::format("closed-form two-bus gap {:.3g}", *rep.closed_form_gap));
      }
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace gridvolt::pf
