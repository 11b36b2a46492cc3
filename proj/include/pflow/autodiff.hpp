#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// Every primitive appends one node to a Tape. Gradients are obtained by a
// reverse sweep over the tape, either numerically (fast, values only) or
// recorded as new nodes on the same tape, which makes the result itself
// differentiable (gradients of gradients).
//
// Values are dense row-major double arrays. A node is a vector of length
// rows (cols == 1) or a rows x cols matrix. Elementwise binary primitives
// accept two operands of equal size or one operand of size 1 (scalar
// broadcast); nothing else broadcasts.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pflow::ad {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Tanh,
  Square,
  Sum,
  Dot,
  Scale,
  MatVec,
  Affine,
  ClipStopGrad,
  // Needed to express the backward rules of MatVec/Affine on the tape.
  MatVecT,
  Outer,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Leaf;
  int in[3] = {-1, -1, -1};
  std::size_t rows = 0;
  std::size_t cols = 1;
  bool requires_grad = false;
  double c0 = 0.0;  // Scale factor, or lower clip bound.
  double c1 = 0.0;  // Upper clip bound.
  std::vector<double> value;
};

class Tape;

class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  // The span stays valid for the lifetime of the tape.
  std::span<const double> value() const;
  double scalar() const;
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(std::vector<double> value);
  Var variable(std::vector<double> value, std::size_t rows, std::size_t cols);
  Var constant(std::vector<double> value);
  Var constant(std::vector<double> value, std::size_t rows, std::size_t cols);
  Var scalar_constant(double v) { return constant({v}); }

  std::size_t size() const { return nodes_.size(); }

  // Drops every node recorded after the first `size` nodes. Vars pointing
  // at dropped nodes become dangling.
  void rewind(std::size_t size);
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  // Records a primitive. Shapes are validated and the result must be finite.
  Var apply(Op op, std::initializer_list<Var> inputs, double c0 = 0.0, double c1 = 0.0);

  // Recomputes every non-leaf value from the leaves in tape order.
  std::vector<std::vector<double>> replay() const;

  // d(out)/d(input) for each input; `out` must be a scalar node.
  std::vector<std::vector<double>> gradient(const Var& out, std::span<const Var> inputs) const;
  // covector^T d(out)/d(input).
  std::vector<std::vector<double>> vjp(const Var& out, std::span<const double> covector,
                                       std::span<const Var> inputs) const;

  // Same sweeps, recorded on this tape. The returned Vars can be
  // differentiated again. Inputs that `out` does not depend on receive a
  // zero constant.
  std::vector<Var> gradient_graph(const Var& out, std::span<const Var> inputs);
  std::vector<Var> vjp_graph(const Var& out, const Var& covector, std::span<const Var> inputs);

 private:
  friend class Var;

  Var push(Node node);
  void check_owned(const Var& v) const;
  std::vector<char> relevant_nodes(int out, std::span<const Var> inputs, int& lo) const;

  std::vector<Node> nodes_;
};

// Primitive set.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var dot(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var matvec(const Var& w, const Var& x);
Var affine(const Var& w, const Var& x, const Var& b);
// Clamps to [lo, hi]. Gradient passes unchanged where lo <= a <= hi and is
// zero elsewhere.
Var clip_stopgrad(const Var& a, double lo, double hi);
Var matvec_t(const Var& w, const Var& v);
Var outer(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

}  // namespace pflow::ad
