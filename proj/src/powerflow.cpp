#include "gridvolt/powerflow.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>

namespace gridvolt::pf {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

double parse_number(const std::string& tok, const std::string& source, std::size_t line, const char* field) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    throw GridParseError(source, line, fmt::format("field '{}': '{}' is not a finite number", field, tok));
  }
  return v;
}

}  // namespace

GridParseError::GridParseError(const std::string& source, std::size_t line_no, const std::string& what)
    : GridError(fmt::format("{}:{}: {}", source, line_no, what)), line(line_no) {}

DivergenceError::DivergenceError(std::vector<Eigen::Index> r, int it)
    : std::runtime_error(fmt::format("power flow diverged at sweep {} in {} case(s)", it, r.size())),
      rows(std::move(r)),
      iteration(it) {}

GridSpec parse_grid(std::istream& in, const std::string& source) {
  GridSpec spec;
  enum class Section { header, buses, lines } section = Section::header;
  bool saw_header = false, saw_buses = false, saw_lines = false;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string text = raw.substr(0, raw.find('#'));
    auto tok = split_ws(text);
    if (tok.empty()) continue;
    if (!saw_header) {
      if (tok.size() != 2 || tok[0] != "gridvolt-grid") {
        throw GridParseError(source, line_no, "expected header 'gridvolt-grid v1'");
      }
      if (tok[1] != "v1") throw UnsupportedVersion(source, line_no, "unsupported grid format version " + tok[1]);
      saw_header = true;
      continue;
    }
    if (tok[0] == "[buses]") {
      section = Section::buses;
      saw_buses = true;
      continue;
    }
    if (tok[0] == "[lines]") {
      section = Section::lines;
      saw_lines = true;
      continue;
    }
    if (tok[0].front() == '[') throw GridParseError(source, line_no, "unknown section " + tok[0]);
    switch (section) {
      case Section::header: {
        if (tok.size() != 2) throw GridParseError(source, line_no, "expected 'key value'");
        const std::string& key = tok[0];
        if (key == "name") {
          spec.name = tok[1];
        } else if (key == "v_base_kv") {
          spec.base.v_base_kv = parse_number(tok[1], source, line_no, "v_base_kv");
        } else if (key == "s_base_kva") {
          spec.base.s_base_kva = parse_number(tok[1], source, line_no, "s_base_kva");
        } else if (key == "nominal_load_kw") {
          spec.nominal_load_kw = parse_number(tok[1], source, line_no, "nominal_load_kw");
        } else if (key == "max_injection_pu") {
          spec.max_injection_pu = parse_number(tok[1], source, line_no, "max_injection_pu");
        } else {
          throw GridParseError(source, line_no, "unknown key '" + key + "'");
        }
        break;
      }
      case Section::buses: {
        if (tok.size() != 2) throw GridParseError(source, line_no, "bus entry needs 'name type'");
        if (tok[1] != "slack" && tok[1] != "pq") {
          throw GridParseError(source, line_no, "field 'type': expected slack or pq, got '" + tok[1] + "'");
        }
        spec.buses.push_back({tok[0], tok[1] == "slack"});
        break;
      }
      case Section::lines: {
        if (tok.size() != 4) throw GridParseError(source, line_no, "line entry needs 'from to r_pu x_pu'");
        spec.lines.push_back({tok[0], tok[1], parse_number(tok[2], source, line_no, "r_pu"),
                              parse_number(tok[3], source, line_no, "x_pu")});
        break;
      }
    }
  }
  if (!saw_header) throw GridParseError(source, line_no, "empty grid file");
  if (!saw_buses || spec.buses.empty()) throw GridParseError(source, line_no, "missing [buses] section");
  if (!saw_lines || spec.lines.empty()) throw GridParseError(source, line_no, "missing [lines] section");
  if (spec.base.v_base_kv <= 0.0 || spec.base.s_base_kva <= 0.0) {
    throw GridParseError(source, line_no, "base quantities must be positive");
  }
  return spec;
}

GridSpec read_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GridError("cannot open grid file " + path);
  return parse_grid(in, path);
}

void write_grid(std::ostream& out, const GridSpec& spec) {
  out << "gridvolt-grid v1\n";
  out << fmt::format("name {}\nv_base_kv {}\ns_base_kva {}\n", spec.name, spec.base.v_base_kv, spec.base.s_base_kva);
  if (spec.nominal_load_kw != 0.0) out << fmt::format("nominal_load_kw {}\n", spec.nominal_load_kw);
  out << fmt::format("max_injection_pu {}\n", spec.max_injection_pu);
  out << "[buses]\n";
  for (const auto& b : spec.buses) out << b.name << (b.slack ? " slack\n" : " pq\n");
  out << "[lines]\n";
  for (const auto& l : spec.lines) out << fmt::format("{} {} {} {}\n", l.from, l.to, l.r_pu, l.x_pu);
}

std::size_t GridModel::index_of(const std::string& bus) const {
  auto it = index_.find(bus);
  if (it == index_.end()) throw GridError("unknown bus " + bus);
  return it->second;
}

GridModel build_grid(const GridSpec& spec) {
  std::map<std::string, std::size_t> full;  // slack -> 0, pq buses -> 1..N in file order
  std::string slack;
  for (const auto& b : spec.buses) {
    if (b.slack) {
      if (!slack.empty()) throw TopologyError("more than one slack bus");
      slack = b.name;
    }
  }
  if (slack.empty()) throw TopologyError("no slack bus");
  full[slack] = 0;
  GridModel g;
  for (const auto& b : spec.buses) {
    if (b.slack) continue;
    if (full.count(b.name)) throw TopologyError("duplicate bus " + b.name);
    const std::size_t idx = full.size();
    full[b.name] = idx;
    g.bus_names.push_back(b.name);
  }
  const std::size_t n = g.bus_names.size();
  if (n == 0) throw TopologyError("grid has no load buses");

  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n + 1, n + 1);
  std::vector<std::vector<std::size_t>> adj(n + 1);
  for (const auto& l : spec.lines) {
    auto a = full.find(l.from), b = full.find(l.to);
    if (a == full.end()) throw TopologyError("line references unknown bus " + l.from);
    if (b == full.end()) throw TopologyError("line references unknown bus " + l.to);
    if (a->second == b->second) throw TopologyError("line " + l.from + "-" + l.to + " is a self-loop");
    cplx z(l.r_pu, l.x_pu);
    if (z == cplx(0.0, 0.0)) throw GridError("line " + l.from + "-" + l.to + " has zero impedance");
    cplx ya = 1.0 / z;
    std::size_t i = a->second, j = b->second;
    y(i, i) += ya;
    y(j, j) += ya;
    y(i, j) -= ya;
    y(j, i) -= ya;
    adj[i].push_back(j);
    adj[j].push_back(i);
  }

  std::vector<bool> seen(n + 1, false);
  std::queue<std::size_t> frontier;
  frontier.push(0);
  seen[0] = true;
  while (!frontier.empty()) {
    std::size_t u = frontier.front();
    frontier.pop();
    for (std::size_t w : adj[u]) {
      if (!seen[w]) {
        seen[w] = true;
        frontier.push(w);
      }
    }
  }
  for (std::size_t i = 1; i <= n; ++i) {
    if (!seen[i]) throw TopologyError("bus " + g.bus_names[i - 1] + " is not connected to the slack");
  }

  Eigen::MatrixXcd y_red = y.bottomRightCorner(n, n);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(y_red);
  if (!lu.isInvertible()) throw IllConditionedGrid("reduced admittance matrix is singular");
  Eigen::MatrixXcd l = lu.inverse();
  double residual = (l * y_red - Eigen::MatrixXcd::Identity(n, n)).cwiseAbs().rowwise().sum().maxCoeff();
  if (!(residual < 1e-9)) {
    throw IllConditionedGrid(fmt::format("reduced admittance inverse residual {:.3g} too large", residual));
  }

  g.n_bus = n;
  g.y_bus = y;
  g.l_mat = l;
  g.z_vec = -(l * y.block(1, 0, n, 1));
  g.v_base = spec.base.v_base_kv * 1e3;
  g.s_base = spec.base.s_base_kva * 1e3;
  g.name = spec.name;
  g.slack_name = slack;
  g.nominal_load_kw = spec.nominal_load_kw;
  g.max_injection_pu = spec.max_injection_pu;
  g.z_re = g.z_vec.real().transpose();
  g.z_im = g.z_vec.imag().transpose();
  g.lt_re = l.real().transpose();
  g.lt_im = l.imag().transpose();
  for (std::size_t i = 0; i < n; ++i) g.index_[g.bus_names[i]] = i;
  return g;
}

GridModel load_grid(const std::string& path) { return build_grid(read_grid_file(path)); }

void validate_injections(const GridModel& grid, const std::vector<BusInjection>& inj) {
  if (inj.size() != grid.n_bus) {
    throw InvalidInjection(fmt::format("expected {} injections, got {}", grid.n_bus, inj.size()));
  }
  for (std::size_t i = 0; i < inj.size(); ++i) {
    const auto& s = inj[i];
    if (!std::isfinite(s.p) || !std::isfinite(s.q)) {
      throw InvalidInjection("non-finite injection at bus " + grid.bus_names[i]);
    }
    if (std::abs(s.p) > grid.max_injection_pu || std::abs(s.q) > grid.max_injection_pu) {
      throw InvalidInjection(fmt::format("injection at bus {} exceeds {} p.u.", grid.bus_names[i], grid.max_injection_pu));
    }
  }
}

void check_voltages(const Mat& re, const Mat& im, int iteration) {
  std::vector<Eigen::Index> bad;
  for (Eigen::Index r = 0; r < re.rows(); ++r) {
    for (Eigen::Index c = 0; c < re.cols(); ++c) {
      double m = std::hypot(re(r, c), im(r, c));
      if (!std::isfinite(m) || m < kCollapseMagnitude || m >= kBlowupMagnitude) {
        bad.push_back(r);
        break;
      }
    }
  }
  if (!bad.empty()) throw DivergenceError(std::move(bad), iteration);
}

namespace {

Complex<Mat> injection_row(const GridModel& grid, const std::vector<BusInjection>& inj) {
  if (inj.size() != grid.n_bus) {
    throw InvalidInjection(fmt::format("expected {} injections, got {}", grid.n_bus, inj.size()));
  }
  Complex<Mat> s{Mat(1, grid.n_bus), Mat(1, grid.n_bus)};
  for (std::size_t i = 0; i < inj.size(); ++i) {
    if (!std::isfinite(inj[i].p) || !std::isfinite(inj[i].q)) throw InvalidInjection("non-finite injection");
    s.re(0, static_cast<Eigen::Index>(i)) = inj[i].p;
    s.im(0, static_cast<Eigen::Index>(i)) = inj[i].q;
  }
  return s;
}

}  // namespace

VoltageProfile solve_fixed_point(const GridModel& grid, const std::vector<BusInjection>& inj, int max_iters, double tol) {
  if (max_iters < 1) throw std::invalid_argument("max_iters must be at least 1");
  if (!(tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  Complex<Mat> s = injection_row(grid, inj);
  const auto n = static_cast<Eigen::Index>(grid.n_bus);
  Complex<Mat> v{Mat::Ones(1, n), Mat::Zero(1, n)};
  VoltageProfile out;
  for (int k = 1; k <= max_iters; ++k) {
    Complex<Mat> next = sweep(grid, v, s);
    check_voltages(next.re, next.im, k);
    double step = ((next.re - v.re).array().square() + (next.im - v.im).array().square()).sqrt().maxCoeff();
    v = std::move(next);
    out.iterations_used = k;
    out.max_step = step;
    out.step_history.push_back(step);
    if (step < tol) {
      out.converged = true;
      break;
    }
  }
  out.v.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) out.v(i) = cplx(v.re(0, i), v.im(0, i));
  return out;
}

Mat solve_fixed_point_rows(const GridModel& grid, const Mat& p, const Mat& q, int iters) {
  Complex<Mat> v = fixed_point_rows(grid, Complex<Mat>{p, q}, iters);
  return diff::sqrt(diff::c_abs2(v));
}

Var solve_fixed_point_diff(const GridModel& grid, const Var& p, const Var& q, int iters) {
  Complex<Var> v = fixed_point_rows(grid, Complex<Var>{p, q}, iters);
  return diff::c_abs(v);
}

Var solve_fixed_point_diff(const GridModel& grid, const Var& p, const Mat& q, int iters) {
  return solve_fixed_point_diff(grid, p, diff::lift(q, p), iters);
}

VoltageProfile solve_newton(const GridModel& grid, const std::vector<BusInjection>& inj, double tol, int max_iters) {
  const auto n = static_cast<Eigen::Index>(grid.n_bus);
  if (static_cast<Eigen::Index>(inj.size()) != n) throw InvalidInjection("injection count mismatch");
  Eigen::VectorXcd s_spec(n + 1);
  s_spec(0) = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s_spec(i + 1) = -cplx(inj[static_cast<std::size_t>(i)].p, inj[static_cast<std::size_t>(i)].q);

  Eigen::VectorXd va = Eigen::VectorXd::Zero(n + 1), vm = Eigen::VectorXd::Ones(n + 1);
  const Eigen::MatrixXcd& y = grid.y_bus;
  auto voltages = [&] {
    Eigen::VectorXcd v(n + 1);
    for (Eigen::Index i = 0; i <= n; ++i) v(i) = std::polar(vm(i), va(i));
    return v;
  };

  VoltageProfile out;
  for (int it = 0; it <= max_iters; ++it) {
    Eigen::VectorXcd v = voltages();
    Eigen::VectorXcd ibus = y * v;
    Eigen::VectorXcd mis = v.cwiseProduct(ibus.conjugate()) - s_spec;
    Eigen::VectorXd f(2 * n);
    f.head(n) = mis.tail(n).real();
    f.tail(n) = mis.tail(n).imag();
    double worst = f.cwiseAbs().maxCoeff();
    if (!std::isfinite(worst)) throw OracleFailure("Newton iterate became non-finite");
    out.max_step = worst;
    out.step_history.push_back(worst);
    if (worst < tol) {
      out.converged = true;
      out.iterations_used = it;
      out.v = v.tail(n);
      return out;
    }
    if (it == max_iters) break;

    // dS/dVa = j diag(V) conj(diag(I) - Y diag(V));  dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
    Eigen::VectorXcd vnorm = v.array() / vm.array().cast<cplx>();
    Eigen::MatrixXcd ydv = y * v.asDiagonal();
    Eigen::MatrixXcd ds_dva = Eigen::MatrixXcd(ibus.asDiagonal()) - ydv;
    ds_dva = (cplx(0.0, 1.0) * (v.asDiagonal() * ds_dva.conjugate())).eval();
    Eigen::MatrixXcd ds_dvm = v.asDiagonal() * (y * vnorm.asDiagonal()).conjugate();
    ds_dvm += Eigen::MatrixXcd(ibus.conjugate().asDiagonal()) * Eigen::MatrixXcd(vnorm.asDiagonal());

    Eigen::MatrixXd jac(2 * n, 2 * n);
    jac.topLeftCorner(n, n) = ds_dva.bottomRightCorner(n, n).real();
    jac.topRightCorner(n, n) = ds_dvm.bottomRightCorner(n, n).real();
    jac.bottomLeftCorner(n, n) = ds_dva.bottomRightCorner(n, n).imag();
    jac.bottomRightCorner(n, n) = ds_dvm.bottomRightCorner(n, n).imag();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible()) throw OracleFailure("Newton Jacobian is singular");
    Eigen::VectorXd dx = lu.solve(-f);
    va.tail(n) += dx.head(n);
    vm.tail(n) += dx.tail(n);
    if ((vm.tail(n).array() < kCollapseMagnitude).any()) throw OracleFailure("Newton iterate collapsed");
  }
  throw OracleFailure(fmt::format("Newton did not converge in {} iterations", max_iters));
}

Eigen::VectorXd violation_terms(const VoltageProfile& profile, double v_lo, double v_hi) {
  Mat m = profile.magnitudes().transpose();
  return violation_terms(m, v_lo, v_hi).transpose();
}

}  // namespace gridvolt::pf
