#include "gridvolt/diff.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace gridvolt::diff {

namespace {

std::string shape_str(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw DiffError("operation on a default-constructed Var");
  return *v.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (&t != &tape_of(b)) throw DiffError("operands live on different tapes");
  return t;
}

constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Mat& Var::value() const {
  if (!valid()) throw DiffError("value of a default-constructed Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Mat& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeMismatch("scalar() on " + shape_str(v));
  return v(0, 0);
}

void Tape::ensure_live() const {
  if (consumed_) throw StaleTape("tape already consumed by backward()");
}

Var Tape::leaf(Mat value) { return push(std::move(value), {}, nullptr); }

Var Tape::leaf(double value) { return leaf(Mat::Constant(1, 1, value)); }

Var Tape::push(Mat value, std::vector<std::size_t> parents, Vjp vjp) {
  ensure_live();
  nodes_.push_back(Node{std::move(value), Mat(), std::move(parents), std::move(vjp)});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Mat& contribution) {
  Node& n = nodes_.at(id);
  if (n.adjoint.size() == 0) {
    n.adjoint = contribution;
  } else {
    n.adjoint += contribution;
  }
}

void Tape::backward(const Var& root) {
  ensure_live();
  if (root.tape() != this) throw DiffError("backward: root belongs to another tape");
  const Mat& rv = value(root.id());
  if (rv.rows() != 1 || rv.cols() != 1) throw ShapeMismatch("backward: root must be scalar, got " + shape_str(rv));
  consumed_ = true;
  nodes_[root.id()].adjoint = Mat::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.vjp || n.adjoint.size() == 0) continue;
    n.vjp(*this, n.adjoint, n.value);
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.adjoint.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Tape::note_branch(std::uint64_t code) {
  signature_ ^= code + 0x9e3779b97f4a7c15ULL;
  signature_ *= kFnvPrime;
}

Var lift(const Mat& m, const Var& like) { return tape_of(like).leaf(m); }

// ---------------------------------------------------------------------------
// Plain-value ops

Mat add(const Mat& a, const Mat& b) {
  require_same(a, b, "add");
  return a + b;
}
Mat sub(const Mat& a, const Mat& b) {
  require_same(a, b, "sub");
  return a - b;
}
Mat mul(const Mat& a, const Mat& b) {
  require_same(a, b, "mul");
  return a.cwiseProduct(b);
}
Mat div(const Mat& a, const Mat& b) {
  require_same(a, b, "div");
  if ((b.array() == 0.0).any()) throw DivisionByZero("div: zero divisor");
  return a.cwiseQuotient(b);
}
Mat neg(const Mat& a) { return -a; }
Mat scale(const Mat& a, double c) { return a * c; }
Mat div(const Mat& a, double c) {
  if (c == 0.0) throw DivisionByZero("div: zero scalar divisor");
  return a / c;
}
Mat add_scalar(const Mat& a, double c) { return (a.array() + c).matrix(); }
Mat rsub(double c, const Mat& a) { return (c - a.array()).matrix(); }
Mat add_row(const Mat& x, const Mat& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeMismatch("add_row: " + shape_str(x) + " + " + shape_str(row));
  Mat out = x;
  out.rowwise() += row.row(0);
  return out;
}
Mat rsub_row(const Mat& row, const Mat& x) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeMismatch("rsub_row: " + shape_str(row) + " - " + shape_str(x));
  Mat out = -x;
  out.rowwise() += row.row(0);
  return out;
}
Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: " + shape_str(a) + " * " + shape_str(b));
  Mat out = Mat::Zero(a.rows(), b.cols());
  out.noalias() += a * b;
  return out;
}
Mat relu(const Mat& a) { return a.cwiseMax(0.0); }
Mat tanh(const Mat& a) { return a.array().tanh().matrix(); }
Mat abs(const Mat& a) { return a.cwiseAbs(); }
Mat sqrt(const Mat& a) {
  if ((a.array() < 0.0).any()) throw NonDifferentiablePoint("sqrt of a negative value");
  return a.cwiseSqrt();
}
Mat square(const Mat& a) { return a.cwiseProduct(a); }
Mat min0(const Mat& a) { return a.cwiseMin(0.0); }
Mat clamp(const Mat& x, const Mat& lo, const Mat& hi) {
  require_same(x, lo, "clamp");
  require_same(x, hi, "clamp");
  if ((lo.array() > hi.array()).any()) throw InvalidBounds("clamp: lo > hi");
  return x.cwiseMax(lo).cwiseMin(hi);
}
Mat clamp(const Mat& x, double lo, double hi) {
  if (lo > hi) throw InvalidBounds("clamp: lo > hi");
  return x.cwiseMax(lo).cwiseMin(hi);
}
Mat sum_cols(const Mat& a) { return a.rowwise().sum(); }
Mat sum_all(const Mat& a) { return Mat::Constant(1, 1, a.sum()); }
Mat mean_all(const Mat& a) {
  if (a.size() == 0) throw ShapeMismatch("mean_all of empty matrix");
  return Mat::Constant(1, 1, a.sum() / static_cast<double>(a.size()));
}
Mat concat_cols(const std::vector<Mat>& parts) {
  if (parts.empty()) return Mat();
  Eigen::Index rows = parts.front().rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return out;
}
Mat slice_cols(const Mat& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeMismatch("slice_cols out of range");
  return a.middleCols(start, count);
}

Mat sign_select(const Mat& x, const Mat& pos, const Mat& nonpos) {
  require_same(x, pos, "sign_select");
  require_same(x, nonpos, "sign_select");
  return (x.array() > 0.0).select(pos, nonpos);
}

Mat sign_select(const Var& x, const Mat& pos, const Mat& nonpos) {
  const Mat& xv = x.value();
  std::uint64_t code = 0x51;
  for (Eigen::Index i = 0; i < xv.size(); ++i) code = code * kFnvPrime + (xv.data()[i] > 0.0 ? 1 : 0);
  tape_of(x).note_branch(code);
  return sign_select(xv, pos, nonpos);
}

// ---------------------------------------------------------------------------
// Tape-recorded ops

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  std::size_t ia = a.id(), ib = b.id();
  return t.push(add(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}
Var add(const Var& a, const Mat& b) {
  std::size_t ia = a.id();
  return tape_of(a).push(add(a.value(), b), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g); });
}
Var add(const Mat& a, const Var& b) { return add(b, a); }

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  std::size_t ia = a.id(), ib = b.id();
  return t.push(sub(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}
Var sub(const Var& a, const Mat& b) {
  std::size_t ia = a.id();
  return tape_of(a).push(sub(a.value(), b), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g); });
}
Var sub(const Mat& a, const Var& b) {
  std::size_t ib = b.id();
  return tape_of(b).push(sub(a, b.value()), {ib}, [ib](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ib, -g); });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  std::size_t ia = a.id(), ib = b.id();
  return t.push(mul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}
Var mul(const Var& a, const Mat& b) {
  std::size_t ia = a.id();
  return tape_of(a).push(mul(a.value(), b), {ia}, [ia, b](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g.cwiseProduct(b)); });
}
Var mul(const Mat& a, const Var& b) { return mul(b, a); }

Var div(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  std::size_t ia = a.id(), ib = b.id();
  return t.push(div(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Mat& g, const Mat&) {
    const Mat& bv = tp.value(ib);
    Mat ga = g.cwiseQuotient(bv);
    tp.accumulate(ia, ga);
    tp.accumulate(ib, -ga.cwiseProduct(tp.value(ia)).cwiseQuotient(bv));
  });
}
Var div(const Var& a, const Mat& b) {
  std::size_t ia = a.id();
  return tape_of(a).push(div(a.value(), b), {ia}, [ia, b](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g.cwiseQuotient(b)); });
}
Var div(const Mat& a, const Var& b) {
  std::size_t ib = b.id();
  return tape_of(b).push(div(a, b.value()), {ib}, [ib, a](Tape& tp, const Mat& g, const Mat&) {
    const Mat& bv = tp.value(ib);
    tp.accumulate(ib, -g.cwiseProduct(a).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

Var neg(const Var& a) {
  std::size_t ia = a.id();
  return tape_of(a).push(neg(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, -g); });
}
Var scale(const Var& a, double c) {
  std::size_t ia = a.id();
  return tape_of(a).push(scale(a.value(), c), {ia}, [ia, c](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g * c); });
}
Var div(const Var& a, double c) {
  std::size_t ia = a.id();
  return tape_of(a).push(div(a.value(), c), {ia}, [ia, c](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g / c); });
}
Var add_scalar(const Var& a, double c) {
  std::size_t ia = a.id();
  return tape_of(a).push(add_scalar(a.value(), c), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g); });
}
Var rsub(double c, const Var& a) {
  std::size_t ia = a.id();
  return tape_of(a).push(rsub(c, a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, -g); });
}

Var add_row(const Var& x, const Var& row) {
  Tape& t = tape_of(x, row);
  std::size_t ix = x.id(), ir = row.id();
  return t.push(add_row(x.value(), row.value()), {ix, ir}, [ix, ir](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ix, g);
    tp.accumulate(ir, g.colwise().sum());
  });
}
Var add_row(const Var& x, const Mat& row) {
  std::size_t ix = x.id();
  return tape_of(x).push(add_row(x.value(), row), {ix}, [ix](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ix, g); });
}
Var rsub_row(const Mat& row, const Var& x) {
  std::size_t ix = x.id();
  return tape_of(x).push(rsub_row(row, x.value()), {ix}, [ix](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ix, -g); });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  std::size_t ia = a.id(), ib = b.id();
  return t.push(matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, g * tp.value(ib).transpose());
    tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}
Var matmul(const Var& a, const Mat& b) {
  std::size_t ia = a.id();
  return tape_of(a).push(matmul(a.value(), b), {ia}, [ia, b](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g * b.transpose()); });
}
Var matmul(const Mat& a, const Var& b) {
  std::size_t ib = b.id();
  return tape_of(b).push(matmul(a, b.value()), {ib}, [ib, a](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ib, a.transpose() * g); });
}

namespace {

// Hash of an elementwise branch pattern; `code_of` maps a value to a small int.
template <class F>
void note_pattern(Tape& t, std::uint64_t tag, const Mat& x, F code_of) {
  std::uint64_t code = tag;
  for (Eigen::Index i = 0; i < x.size(); ++i) code = code * kFnvPrime + static_cast<std::uint64_t>(code_of(x.data()[i]));
  t.note_branch(code);
}

}  // namespace

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  std::size_t ia = a.id();
  note_pattern(t, 0x11, a.value(), [](double v) { return v > 0.0 ? 1 : 0; });
  return t.push(relu(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, (tp.value(ia).array() > 0.0).select(g, 0.0));
  });
}
Var tanh(const Var& a) {
  std::size_t ia = a.id();
  Tape& t = tape_of(a);
  return t.push(tanh(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat& y) {
    tp.accumulate(ia, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}
Var abs(const Var& a) {
  Tape& t = tape_of(a);
  std::size_t ia = a.id();
  note_pattern(t, 0x12, a.value(), [](double v) { return v > 0.0 ? 2 : (v < 0.0 ? 0 : 1); });
  return t.push(abs(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) {
    const Mat& x = tp.value(ia);
    Mat s = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    tp.accumulate(ia, g.cwiseProduct(s));
  });
}
Var sqrt(const Var& a) {
  Tape& t = tape_of(a);
  std::size_t ia = a.id();
  if ((a.value().array() <= 0.0).any()) throw NonDifferentiablePoint("sqrt at a non-positive value");
  return t.push(sqrt(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat& y) {
    tp.accumulate(ia, g.cwiseQuotient(2.0 * y));
  });
}
Var square(const Var& a) {
  std::size_t ia = a.id();
  return tape_of(a).push(square(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, 2.0 * g.cwiseProduct(tp.value(ia)));
  });
}
Var min0(const Var& a) {
  Tape& t = tape_of(a);
  std::size_t ia = a.id();
  note_pattern(t, 0x13, a.value(), [](double v) { return v < 0.0 ? 1 : 0; });
  return t.push(min0(a.value()), {ia}, [ia](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, (tp.value(ia).array() < 0.0).select(g, 0.0));
  });
}
Var clamp(const Var& x, const Mat& lo, const Mat& hi) {
  Tape& t = tape_of(x);
  std::size_t ix = x.id();
  Mat out = clamp(x.value(), lo, hi);
  // Interior elements pass gradient; saturated and boundary elements get 0.
  Mat pass = ((x.value().array() > lo.array()) && (x.value().array() < hi.array())).cast<double>().matrix();
  std::uint64_t code = 0x14;
  for (Eigen::Index i = 0; i < pass.size(); ++i) {
    double v = x.value().data()[i];
    int region = v <= lo.data()[i] ? 0 : (v >= hi.data()[i] ? 2 : 1);
    code = code * kFnvPrime + static_cast<std::uint64_t>(region);
  }
  t.note_branch(code);
  return t.push(std::move(out), {ix}, [ix, pass](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ix, g.cwiseProduct(pass)); });
}
Var clamp(const Var& x, double lo, double hi) {
  if (lo > hi) throw InvalidBounds("clamp: lo > hi");
  return clamp(x, Mat::Constant(x.rows(), x.cols(), lo), Mat::Constant(x.rows(), x.cols(), hi));
}
Var sum_cols(const Var& a) {
  std::size_t ia = a.id();
  Eigen::Index cols = a.cols();
  return tape_of(a).push(sum_cols(a.value()), {ia}, [ia, cols](Tape& tp, const Mat& g, const Mat&) { tp.accumulate(ia, g.replicate(1, cols)); });
}
Var sum_all(const Var& a) {
  std::size_t ia = a.id();
  Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).push(sum_all(a.value()), {ia}, [ia, r, c](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
  });
}
Var mean_all(const Var& a) {
  std::size_t ia = a.id();
  Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).push(mean_all(a.value()), {ia}, [ia, r, c](Tape& tp, const Mat& g, const Mat&) {
    tp.accumulate(ia, Mat::Constant(r, c, g(0, 0) / static_cast<double>(r * c)));
  });
}
Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  Tape& t = tape_of(parts.front());
  std::vector<Mat> values;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (&tape_of(p) != &t) throw DiffError("operands live on different tapes");
    values.push_back(p.value());
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  return t.push(concat_cols(values), ids, [ids, widths](Tape& tp, const Mat& g, const Mat&) {
    Eigen::Index c = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.accumulate(ids[k], g.middleCols(c, widths[k]));
      c += widths[k];
    }
  });
}
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  std::size_t ia = a.id();
  Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).push(slice_cols(a.value(), start, count), {ia}, [ia, r, c, start, count](Tape& tp, const Mat& g, const Mat&) {
    Mat full = Mat::Zero(r, c);
    full.middleCols(start, count) = g;
    tp.accumulate(ia, full);
  });
}

// ---------------------------------------------------------------------------
// grad_check

GradCheckResult grad_check(const ScalarFn& f, const Mat& x, double h) {
  GradCheckResult res;
  std::uint64_t base_sig = 0;
  {
    Tape t;
    Var xv = t.leaf(x);
    Var y = f(t, xv);
    base_sig = t.branch_signature();
    t.backward(y);
    res.analytic = t.grad(xv);
  }
  auto eval = [&](const Mat& pt, std::uint64_t& sig) {
    Tape t;
    Var y = f(t, t.leaf(pt));
    sig = t.branch_signature();
    return y.scalar();
  };
  res.numeric = Mat::Zero(x.rows(), x.cols());
  res.rel_errors.assign(static_cast<std::size_t>(x.size()), std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Mat xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    std::uint64_t sp = 0, sm = 0;
    double fp = eval(xp, sp), fm = eval(xm, sm);
    double num = (fp - fm) / (2.0 * h);
    res.numeric.data()[i] = num;
    auto idx = static_cast<std::size_t>(i);
    double an = res.analytic.data()[i];
    if (!std::isfinite(num) || !std::isfinite(an)) {
      res.nan_coords.push_back(idx);
      continue;
    }
    if (sp != base_sig || sm != base_sig) {
      res.kink_coords.push_back(idx);
      continue;
    }
    double err = std::abs(an - num) / std::max(1.0, std::abs(num));
    res.rel_errors[idx] = err;
    res.max_rel_error = std::max(res.max_rel_error, err);
  }
  return res;
}

}  // namespace gridvolt::diff
