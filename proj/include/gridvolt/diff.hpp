#pragma once

// Reverse-mode automatic differentiation over dense real matrices.
//
// Every operation exists in two overloads: one on plain `Mat` values and one
// on tape-recorded `Var` handles. The `Var` overload computes its forward
// value by calling the `Mat` overload, so code written generically over both
// produces bit-identical values on either path. Scalars are 1x1 matrices;
// complex quantities are pairs of real matrices (see `Complex`).

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridvolt::diff {

using Mat = Eigen::MatrixXd;

struct DiffError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivisionByZero : DiffError {
  using DiffError::DiffError;
};
struct NonDifferentiablePoint : DiffError {
  using DiffError::DiffError;
};
struct InvalidBounds : DiffError {
  using DiffError::DiffError;
};
struct StaleTape : DiffError {
  using DiffError::DiffError;
};
struct ShapeMismatch : DiffError {
  using DiffError::DiffError;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Mat& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  friend class Tape;
};

/// Single-use recording of a computation. Node ids are assigned in creation
/// order, which is a topological order of the (acyclic) graph. After
/// `backward` the tape is consumed: no further ops may be recorded and a
/// second `backward` raises `StaleTape`.
class Tape {
 public:
  using Vjp = std::function<void(Tape&, const Mat& out_adjoint, const Mat& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value);
  Var leaf(double value);

  /// Records a derived node. `vjp` receives the node's adjoint and value and
  /// must call `accumulate` for each parent it propagates to.
  Var push(Mat value, std::vector<std::size_t> parents, Vjp vjp);
  void accumulate(std::size_t id, const Mat& contribution);

  void backward(const Var& root);

  /// Adjoint of `v` after `backward`; zeros if no path reached it.
  Mat grad(const Var& v) const;

  const Mat& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Non-smooth ops fold their active branch pattern into this signature so
  /// callers can tell whether two evaluations took the same smooth piece.
  void note_branch(std::uint64_t code);
  std::uint64_t branch_signature() const { return signature_; }

 private:
  struct Node {
    Mat value;
    Mat adjoint;
    std::vector<std::size_t> parents;
    Vjp vjp;
  };
  void ensure_live() const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t signature_ = 1469598103934665603ULL;
};

// ---------------------------------------------------------------------------
// Plain-value ops.

Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat mul(const Mat& a, const Mat& b);
Mat div(const Mat& a, const Mat& b);
Mat neg(const Mat& a);
Mat scale(const Mat& a, double c);
Mat div(const Mat& a, double c);
Mat add_scalar(const Mat& a, double c);
Mat rsub(double c, const Mat& a);
Mat add_row(const Mat& x, const Mat& row);
Mat rsub_row(const Mat& row, const Mat& x);
Mat matmul(const Mat& a, const Mat& b);
Mat relu(const Mat& a);
Mat tanh(const Mat& a);
Mat abs(const Mat& a);
Mat sqrt(const Mat& a);
Mat square(const Mat& a);
Mat min0(const Mat& a);
Mat clamp(const Mat& x, const Mat& lo, const Mat& hi);
Mat clamp(const Mat& x, double lo, double hi);
Mat sum_cols(const Mat& a);
Mat sum_all(const Mat& a);
Mat mean_all(const Mat& a);
Mat concat_cols(const std::vector<Mat>& parts);
Mat slice_cols(const Mat& a, Eigen::Index start, Eigen::Index count);

// ---------------------------------------------------------------------------
// Tape-recorded ops. Mixed overloads treat the `Mat` operand as a constant.

Var add(const Var& a, const Var& b);
Var add(const Var& a, const Mat& b);
Var add(const Mat& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var sub(const Var& a, const Mat& b);
Var sub(const Mat& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul(const Var& a, const Mat& b);
Var mul(const Mat& a, const Var& b);
Var div(const Var& a, const Var& b);
Var div(const Var& a, const Mat& b);
Var div(const Mat& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var div(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var rsub(double c, const Var& a);
Var add_row(const Var& x, const Var& row);
Var add_row(const Var& x, const Mat& row);
Var rsub_row(const Mat& row, const Var& x);
Var matmul(const Var& a, const Var& b);
Var matmul(const Var& a, const Mat& b);
Var matmul(const Mat& a, const Var& b);
Var relu(const Var& a);
Var tanh(const Var& a);
Var abs(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var min0(const Var& a);
Var clamp(const Var& x, const Mat& lo, const Mat& hi);
Var clamp(const Var& x, double lo, double hi);
Var sum_cols(const Var& a);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(double c, const Var& a) { return rsub(c, a); }

// Scalar spellings used throughout the tests.
inline Var d_add(const Var& a, const Var& b) { return add(a, b); }
inline Var d_mul(const Var& a, const Var& b) { return mul(a, b); }
inline Var d_div(const Var& a, const Var& b) { return div(a, b); }
inline Var d_neg(const Var& a) { return neg(a); }
inline Var d_clamp(const Var& x, double lo, double hi) { return clamp(x, lo, hi); }

// ---------------------------------------------------------------------------
// Generic helpers for code templated over Mat / Var.

inline const Mat& value_of(const Mat& m) { return m; }
inline const Mat& value_of(const Var& v) { return v.value(); }

/// A constant in the same representation as `like`.
inline Mat lift(const Mat& m, const Mat&) { return m; }
Var lift(const Mat& m, const Var& like);

/// Elementwise choice between two constants by the sign of `x` (> 0 picks
/// `pos`). Records the branch pattern on the tape for the `Var` overload.
Mat sign_select(const Mat& x, const Mat& pos, const Mat& nonpos);
Mat sign_select(const Var& x, const Mat& pos, const Mat& nonpos);

// ---------------------------------------------------------------------------
// Complex values as real pairs.

template <class T>
struct Complex {
  T re;
  T im;
};

using DComplex = Complex<Var>;

template <class T>
Complex<T> c_add(const Complex<T>& a, const Complex<T>& b) {
  return {add(a.re, b.re), add(a.im, b.im)};
}

template <class T>
Complex<T> c_sub(const Complex<T>& a, const Complex<T>& b) {
  return {sub(a.re, b.re), sub(a.im, b.im)};
}

template <class T>
Complex<T> c_mul(const Complex<T>& a, const Complex<T>& b) {
  return {sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.re, b.im), mul(a.im, b.re))};
}

template <class T>
Complex<T> c_conj(const Complex<T>& a) {
  return {a.re, neg(a.im)};
}

template <class T>
T c_abs2(const Complex<T>& a) {
  return add(mul(a.re, a.re), mul(a.im, a.im));
}

/// |z|; raises NonDifferentiablePoint if any element is exactly zero.
template <class T>
T c_abs(const Complex<T>& a) {
  T sq = c_abs2(a);
  if ((value_of(sq).array() == 0.0).any()) {
    throw NonDifferentiablePoint("c_abs: modulus is zero");
  }
  return sqrt(sq);
}

/// a / b elementwise.
template <class T>
Complex<T> c_div(const Complex<T>& a, const Complex<T>& b) {
  T den = c_abs2(b);
  T re = add(mul(a.re, b.re), mul(a.im, b.im));
  T im = sub(mul(a.im, b.re), mul(a.re, b.im));
  return {div(re, den), div(im, den)};
}

/// Row-batched complex product X * M where each row of X is a complex vector
/// and M is a constant complex matrix given by its real and imaginary parts.
template <class T>
Complex<T> c_matmul(const Complex<T>& x, const Mat& m_re, const Mat& m_im) {
  return {sub(matmul(x.re, m_re), matmul(x.im, m_im)), add(matmul(x.re, m_im), matmul(x.im, m_re))};
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
  double max_rel_error = 0.0;           ///< over non-excluded coordinates
  std::vector<double> rel_errors;       ///< per coordinate (NaN if unusable)
  std::vector<std::size_t> kink_coords; ///< excluded: perturbation crossed a kink
  std::vector<std::size_t> nan_coords;  ///< non-finite analytic or numeric value
  Mat analytic;
  Mat numeric;

  bool passed(double tol) const { return nan_coords.empty() && max_rel_error <= tol; }
};

using ScalarFn = std::function<Var(Tape&, const Var& x)>;

/// Compares reverse-mode gradients of `f` at `x` with central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(const ScalarFn& f, const Mat& x, double h);

}  // namespace gridvolt::diff
