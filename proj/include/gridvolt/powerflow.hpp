#pragma once

// Per-unit distribution grid model and power-flow solvers.
//
// Sign convention: an injection `s = p + jq` is load-positive. Loads and EV
// charging are positive, PV output and V2G discharge negative. With that
// convention the slack-reduced fixed point reads
//
//     v <- Z - L * conj(s / v),   v(0) = 1 + 0j,
//
// where L is the inverse of the slack-reduced admittance matrix and Z the
// no-load voltage vector.

#include "gridvolt/diff.hpp"

#include <Eigen/Dense>

#include <complex>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridvolt::pf {

using diff::Complex;
using diff::Mat;
using diff::Var;
using cplx = std::complex<double>;

struct GridError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GridParseError : GridError {
  GridParseError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line = 0;
};
struct UnsupportedVersion : GridParseError {
  using GridParseError::GridParseError;
};
struct TopologyError : GridError {
  using GridError::GridError;
};
struct IllConditionedGrid : GridError {
  using GridError::GridError;
};
struct InvalidInjection : GridError {
  using GridError::GridError;
};

/// Voltage collapse or blow-up during iteration. `rows` lists the batch rows
/// that left the admissible magnitude range (a single solve reports row 0).
struct DivergenceError : std::runtime_error {
  DivergenceError(std::vector<Eigen::Index> rows, int iteration);
  std::vector<Eigen::Index> rows;
  int iteration = 0;
};

/// Newton oracle could not produce a solution (singular Jacobian or no convergence).
struct OracleFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BusRecord {
  std::string name;
  bool slack = false;
};

struct LineRecord {
  std::string from;
  std::string to;
  double r_pu = 0.0;
  double x_pu = 0.0;
};

struct BaseQuantities {
  double v_base_kv = 1.0;
  double s_base_kva = 1000.0;
};

/// Parsed content of a grid file before reduction.
struct GridSpec {
  std::string name = "grid";
  BaseQuantities base;
  double nominal_load_kw = 0.0;   ///< total feeder demand used to scale synthetic loads
  double max_injection_pu = 10.0; ///< per-bus sanity bound on |p| and |q|
  std::vector<BusRecord> buses;
  std::vector<LineRecord> lines;
};

GridSpec parse_grid(std::istream& in, const std::string& source = "<stream>");
GridSpec read_grid_file(const std::string& path);
void write_grid(std::ostream& out, const GridSpec& spec);

/// Immutable reduced network. Bus index i in every vector refers to
/// `bus_names[i]`; the slack bus is excluded.
class GridModel {
 public:
  std::size_t n_bus = 0;
  Eigen::MatrixXcd y_bus;  ///< (N+1)x(N+1); row/column 0 is the slack
  Eigen::VectorXcd z_vec;  ///< no-load voltages
  Eigen::MatrixXcd l_mat;  ///< inverse of the reduced admittance
  double v_base = 0.0;     ///< volts
  double s_base = 0.0;     ///< volt-amperes
  std::string name;
  std::string slack_name;
  std::vector<std::string> bus_names;
  double nominal_load_kw = 0.0;
  double max_injection_pu = 10.0;

  // Row-batched constants for the sweep: Z as a row, L transposed.
  Mat z_re, z_im;
  Mat lt_re, lt_im;

  std::size_t index_of(const std::string& bus) const;
  Eigen::MatrixXcd reduced_admittance() const { return y_bus.bottomRightCorner(n_bus, n_bus); }

 private:
  std::map<std::string, std::size_t> index_;
  friend GridModel build_grid(const GridSpec&);
};

GridModel build_grid(const GridSpec& spec);
GridModel load_grid(const std::string& path);

struct BusInjection {
  double p = 0.0;  ///< per-unit active power, load-positive
  double q = 0.0;  ///< per-unit reactive power, load-positive
};

/// Throws InvalidInjection if a value is non-finite or exceeds the grid's sanity bound.
void validate_injections(const GridModel& grid, const std::vector<BusInjection>& inj);

struct VoltageProfile {
  Eigen::VectorXcd v;
  int iterations_used = 0;
  bool converged = false;
  double max_step = 0.0;           ///< last iteration's max |dv| (Newton: last mismatch)
  std::vector<double> step_history;

  /// sqrt(re^2 + im^2), rounded exactly as on the tape-valued path.
  Eigen::VectorXd magnitudes() const {
    return (v.real().array() * v.real().array() + v.imag().array() * v.imag().array()).sqrt().matrix();
  }
};

/// Magnitudes outside [0.1, 2) p.u. or non-finite values count as divergence.
constexpr double kCollapseMagnitude = 0.1;
constexpr double kBlowupMagnitude = 2.0;

/// Throws DivergenceError listing offending rows of a batched voltage iterate.
void check_voltages(const Mat& re, const Mat& im, int iteration);

/// One fixed-point sweep on a row batch: rows are cases, columns are buses.
template <class T>
Complex<T> sweep(const GridModel& g, const Complex<T>& v, const Complex<T>& s) {
  Complex<T> w = diff::c_conj(diff::c_div(s, v));
  Complex<T> lw = diff::c_matmul(w, g.lt_re, g.lt_im);
  return {diff::rsub_row(g.z_re, lw.re), diff::rsub_row(g.z_im, lw.im)};
}

/// Runs exactly `iters` sweeps from the flat start on a row batch of
/// injections. Shared by the plain and the tape-valued paths.
template <class T>
Complex<T> fixed_point_rows(const GridModel& g, const Complex<T>& s, int iters) {
  if (iters < 1) throw std::invalid_argument("power flow needs at least one sweep");
  const Mat& shape = diff::value_of(s.re);
  Complex<T> v{diff::lift(Mat::Ones(shape.rows(), shape.cols()), s.re),
               diff::lift(Mat::Zero(shape.rows(), shape.cols()), s.re)};
  for (int k = 1; k <= iters; ++k) {
    v = sweep(g, v, s);
    check_voltages(diff::value_of(v.re), diff::value_of(v.im), k);
  }
  return v;
}

/// Evaluation path: iterate until max |dv| < tol or `max_iters` sweeps.
VoltageProfile solve_fixed_point(const GridModel& grid, const std::vector<BusInjection>& inj,
                                 int max_iters = 50, double tol = 1e-8);

/// Plain batched magnitudes after exactly `iters` sweeps (p, q are B x N, per-unit).
Mat solve_fixed_point_rows(const GridModel& grid, const Mat& p, const Mat& q, int iters);

/// Tape-valued magnitudes after exactly `iters` sweeps.
Var solve_fixed_point_diff(const GridModel& grid, const Var& p, const Var& q, int iters);
Var solve_fixed_point_diff(const GridModel& grid, const Var& p, const Mat& q, int iters);

/// Polar Newton-Raphson on the full bus model. Converged when the largest
/// power mismatch is below `tol`.
VoltageProfile solve_newton(const GridModel& grid, const std::vector<BusInjection>& inj,
                            double tol = 1e-10, int max_iters = 30);

/// Per-bus min(0, |v| - lo) + min(0, hi - |v|): zero inside the closed band,
/// negative by the distance outside it.
template <class T>
T violation_terms(const T& magnitudes, double v_lo = 0.95, double v_hi = 1.05) {
  return diff::add(diff::min0(diff::add_scalar(magnitudes, -v_lo)), diff::min0(diff::rsub(v_hi, magnitudes)));
}

Eigen::VectorXd violation_terms(const VoltageProfile& profile, double v_lo = 0.95, double v_hi = 1.05);

}  // namespace gridvolt::pf
