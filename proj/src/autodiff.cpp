#include "pflow/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace pflow::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Dot: return "dot";
    case Op::Scale: return "scale";
    case Op::MatVec: return "matvec";
    case Op::Affine: return "affine";
    case Op::ClipStopGrad: return "clip_stopgrad";
    case Op::MatVecT: return "matvec_t";
    case Op::Outer: return "outer";
  }
  return "?";
}

namespace {

int arity(Op op) {
  switch (op) {
    case Op::Leaf: return 0;
    case Op::Neg:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
    case Op::Square:
    case Op::Sum:
    case Op::Scale:
    case Op::ClipStopGrad: return 1;
    case Op::Affine: return 3;
    default: return 2;
  }
}

std::string shape_str(const Node& n) {
  return "[" + std::to_string(n.rows) + "x" + std::to_string(n.cols) + "]";
}

[[noreturn]] void shape_fail(Op op, const Node& a, const Node& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Output shape of an elementwise binary op with scalar broadcast.
void broadcast_shape(Op op, const Node& a, const Node& b, std::size_t& rows, std::size_t& cols) {
  const std::size_t na = a.value.size();
  const std::size_t nb = b.value.size();
  if (na == nb) {
    // Equal sizes: keep a matrix shape if either side has one.
    const Node& m = (a.cols == 1 && b.cols != 1) ? b : a;
    rows = m.rows;
    cols = m.cols;
  } else if (nb == 1) {
    rows = a.rows;
    cols = a.cols;
  } else if (na == 1) {
    rows = b.rows;
    cols = b.cols;
  } else {
    shape_fail(op, a, b);
  }
}

inline std::size_t bidx(std::size_t n, std::size_t i) { return n == 1 ? 0 : i; }

// Evaluates a primitive. `in` holds the operand nodes in order.
void evaluate(Op op, const Node* const* in, double c0, double c1, Node& out) {
  const Node& a = *in[0];
  auto& y = out.value;
  switch (op) {
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Node& b = *in[1];
      broadcast_shape(op, a, b, out.rows, out.cols);
      const std::size_t n = out.rows * out.cols;
      const std::size_t na = a.value.size();
      const std::size_t nb = b.value.size();
      y.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double u = a.value[bidx(na, i)];
        const double v = b.value[bidx(nb, i)];
        switch (op) {
          case Op::Add: y[i] = u + v; break;
          case Op::Sub: y[i] = u - v; break;
          case Op::Mul: y[i] = u * v; break;
          default: y[i] = u / v; break;
        }
      }
      return;
    }
    case Op::Neg:
    case Op::Exp:
    case Op::Log:
    case Op::Tanh:
    case Op::Square:
    case Op::Scale:
    case Op::ClipStopGrad: {
      out.rows = a.rows;
      out.cols = a.cols;
      y.resize(a.value.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double u = a.value[i];
        switch (op) {
          case Op::Neg: y[i] = -u; break;
          case Op::Exp: y[i] = std::exp(u); break;
          case Op::Log: y[i] = std::log(u); break;
          case Op::Tanh: y[i] = std::tanh(u); break;
          case Op::Square: y[i] = u * u; break;
          case Op::Scale: y[i] = c0 * u; break;
          default: y[i] = std::clamp(u, c0, c1); break;
        }
      }
      return;
    }
    case Op::Sum: {
      out.rows = 1;
      out.cols = 1;
      double s = 0.0;
      for (double u : a.value) s += u;
      y.assign(1, s);
      return;
    }
    case Op::Dot: {
      const Node& b = *in[1];
      if (a.value.size() != b.value.size()) shape_fail(op, a, b);
      out.rows = 1;
      out.cols = 1;
      double s = 0.0;
      for (std::size_t i = 0; i < a.value.size(); ++i) s += a.value[i] * b.value[i];
      y.assign(1, s);
      return;
    }
    case Op::MatVec:
    case Op::Affine: {
      const Node& x = *in[1];
      if (a.cols != x.value.size()) shape_fail(op, a, x);
      out.rows = a.rows;
      out.cols = 1;
      y.assign(a.rows, 0.0);
      if (op == Op::Affine) {
        const Node& b = *in[2];
        if (b.value.size() != a.rows) shape_fail(op, a, b);
        y = b.value;
      }
      for (std::size_t r = 0; r < a.rows; ++r) {
        const double* row = a.value.data() + r * a.cols;
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols; ++c) s += row[c] * x.value[c];
        y[r] += s;
      }
      return;
    }
    case Op::MatVecT: {
      const Node& v = *in[1];
      if (a.rows != v.value.size()) shape_fail(op, a, v);
      out.rows = a.cols;
      out.cols = 1;
      y.assign(a.cols, 0.0);
      for (std::size_t r = 0; r < a.rows; ++r) {
        const double* row = a.value.data() + r * a.cols;
        const double vr = v.value[r];
        for (std::size_t c = 0; c < a.cols; ++c) y[c] += row[c] * vr;
      }
      return;
    }
    case Op::Outer: {
      const Node& b = *in[1];
      out.rows = a.value.size();
      out.cols = b.value.size();
      y.resize(out.rows * out.cols);
      for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) y[r * out.cols + c] = a.value[r] * b.value[c];
      return;
    }
    case Op::Leaf: break;
  }
}

}  // namespace

// --- Var -------------------------------------------------------------------

std::span<const double> Var::value() const { return tape_->node(id_).value; }

double Var::scalar() const {
  const auto& v = tape_->node(id_).value;
  if (v.size() != 1) throw ShapeError("scalar() on a node of size " + std::to_string(v.size()));
  return v[0];
}

std::size_t Var::size() const { return tape_->node(id_).value.size(); }
std::size_t Var::rows() const { return tape_->node(id_).rows; }
std::size_t Var::cols() const { return tape_->node(id_).cols; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

// --- Tape ------------------------------------------------------------------

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
}

void Tape::rewind(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

Var Tape::variable(std::vector<double> value) {
  const std::size_t n = value.size();
  return variable(std::move(value), n, 1);
}

Var Tape::variable(std::vector<double> value, std::size_t rows, std::size_t cols) {
  if (rows * cols != value.size()) throw ShapeError("leaf shape does not match value size");
  for (double v : value)
    if (!std::isfinite(v)) throw NonFiniteError("non-finite leaf value");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.requires_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(std::vector<double> value) {
  const std::size_t n = value.size();
  return constant(std::move(value), n, 1);
}

Var Tape::constant(std::vector<double> value, std::size_t rows, std::size_t cols) {
  Var v = variable(std::move(value), rows, cols);
  nodes_.back().requires_grad = false;
  return v;
}

Var Tape::apply(Op op, std::initializer_list<Var> inputs, double c0, double c1) {
  if (op == Op::Leaf) throw std::invalid_argument("apply() cannot create leaves");
  if (static_cast<int>(inputs.size()) != arity(op)) {
    throw std::invalid_argument(std::string(op_name(op)) + ": wrong number of operands");
  }
  Node n;
  n.op = op;
  n.c0 = c0;
  n.c1 = c1;
  const Node* in[3] = {nullptr, nullptr, nullptr};
  int k = 0;
  for (const Var& v : inputs) {
    check_owned(v);
    n.in[k] = v.id_;
    in[k] = &nodes_[static_cast<std::size_t>(v.id_)];
    n.requires_grad = n.requires_grad || in[k]->requires_grad;
    ++k;
  }
  evaluate(op, in, c0, c1, n);
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op_name(op)) + " produced a non-finite value");
    }
  }
  return push(std::move(n));
}

std::vector<std::vector<double>> Tape::replay() const {
  std::vector<Node> scratch;
  scratch.reserve(nodes_.size());
  for (const Node& src : nodes_) {
    Node n;
    n.op = src.op;
    n.rows = src.rows;
    n.cols = src.cols;
    std::copy(std::begin(src.in), std::end(src.in), n.in);
    if (src.op == Op::Leaf) {
      n.value = src.value;
    } else {
      const Node* in[3] = {nullptr, nullptr, nullptr};
      for (int k = 0; k < arity(src.op); ++k) in[k] = &scratch[static_cast<std::size_t>(src.in[k])];
      evaluate(src.op, in, src.c0, src.c1, n);
    }
    scratch.push_back(std::move(n));
  }
  std::vector<std::vector<double>> out;
  out.reserve(scratch.size());
  for (Node& n : scratch) out.push_back(std::move(n.value));
  return out;
}

std::vector<char> Tape::relevant_nodes(int out, std::span<const Var> inputs, int& lo) const {
  lo = out;
  for (const Var& v : inputs) {
    check_owned(v);
    lo = std::min(lo, v.id_);
  }
  std::vector<char> rel(static_cast<std::size_t>(out - lo + 1), 0);
  for (const Var& v : inputs) {
    if (v.id_ <= out) rel[static_cast<std::size_t>(v.id_ - lo)] = 1;
  }
  for (int id = lo; id <= out; ++id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (rel[static_cast<std::size_t>(id - lo)] || n.op == Op::Leaf) continue;
    for (int k = 0; k < arity(n.op); ++k) {
      const int j = n.in[k];
      if (j >= lo && rel[static_cast<std::size_t>(j - lo)]) {
        rel[static_cast<std::size_t>(id - lo)] = 1;
        break;
      }
    }
  }
  return rel;
}

// --- numeric reverse sweep -------------------------------------------------

std::vector<std::vector<double>> Tape::gradient(const Var& out, std::span<const Var> inputs) const {
  check_owned(out);
  if (out.size() != 1) throw ShapeError("gradient() needs a scalar output");
  const double one = 1.0;
  return vjp(out, std::span<const double>(&one, 1), inputs);
}

std::vector<std::vector<double>> Tape::vjp(const Var& out, std::span<const double> covector,
                                           std::span<const Var> inputs) const {
  check_owned(out);
  const Node& on = nodes_[static_cast<std::size_t>(out.id_)];
  if (covector.size() != on.value.size()) throw ShapeError("covector size does not match output");

  int lo = 0;
  const std::vector<char> rel = relevant_nodes(out.id_, inputs, lo);
  std::vector<std::vector<double>> adj(rel.size());
  auto slot = [&](int id) -> std::vector<double>* {
    if (id < lo || !rel[static_cast<std::size_t>(id - lo)]) return nullptr;
    auto& a = adj[static_cast<std::size_t>(id - lo)];
    if (a.empty()) a.assign(nodes_[static_cast<std::size_t>(id)].value.size(), 0.0);
    return &a;
  };
  if (rel.back()) adj.back().assign(covector.begin(), covector.end());

  std::vector<char> is_input(rel.size(), 0);
  for (const Var& v : inputs)
    if (v.id_ <= out.id_) is_input[static_cast<std::size_t>(v.id_ - lo)] = 1;

  for (int id = out.id_; id >= lo; --id) {
    const std::size_t k = static_cast<std::size_t>(id - lo);
    if (!rel[k] || adj[k].empty() || is_input[k]) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.op == Op::Leaf) continue;
    const std::vector<double>& g = adj[k];
    const std::vector<double>& y = n.value;
    const Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
    std::vector<double>* ga = slot(n.in[0]);
    const Node* b = n.in[1] >= 0 ? &nodes_[static_cast<std::size_t>(n.in[1])] : nullptr;
    std::vector<double>* gb = n.in[1] >= 0 ? slot(n.in[1]) : nullptr;
    const std::size_t m = g.size();

    switch (n.op) {
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const std::size_t na = a.value.size();
        const std::size_t nb = b->value.size();
        for (std::size_t i = 0; i < m; ++i) {
          const double u = a.value[bidx(na, i)];
          const double v = b->value[bidx(nb, i)];
          double da = 0.0, db = 0.0;
          switch (n.op) {
            case Op::Add: da = g[i]; db = g[i]; break;
            case Op::Sub: da = g[i]; db = -g[i]; break;
            case Op::Mul: da = g[i] * v; db = g[i] * u; break;
            default: da = g[i] / v; db = -g[i] * y[i] / v; break;
          }
          if (ga) (*ga)[bidx(na, i)] += da;
          if (gb) (*gb)[bidx(nb, i)] += db;
        }
        break;
      }
      case Op::Neg:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] -= g[i];
        break;
      case Op::Exp:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] += g[i] * y[i];
        break;
      case Op::Log:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] += g[i] / a.value[i];
        break;
      case Op::Tanh:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case Op::Square:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] += 2.0 * g[i] * a.value[i];
        break;
      case Op::Scale:
        if (ga) for (std::size_t i = 0; i < m; ++i) (*ga)[i] += n.c0 * g[i];
        break;
      case Op::ClipStopGrad:
        if (ga)
          for (std::size_t i = 0; i < m; ++i)
            if (a.value[i] >= n.c0 && a.value[i] <= n.c1) (*ga)[i] += g[i];
        break;
      case Op::Sum:
        if (ga) for (double& v : *ga) v += g[0];
        break;
      case Op::Dot:
        if (ga) for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * b->value[i];
        if (gb) for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[0] * a.value[i];
        break;
      case Op::MatVec:
      case Op::Affine: {
        const std::size_t rows = a.rows, cols = a.cols;
        for (std::size_t r = 0; r < rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = a.value.data() + r * cols;
          if (gb)
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += wr[c] * gr;
          if (ga) {
            double* gw = ga->data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gw[c] += gr * b->value[c];
          }
        }
        if (n.op == Op::Affine) {
          if (std::vector<double>* gbias = slot(n.in[2]))
            for (std::size_t r = 0; r < rows; ++r) (*gbias)[r] += g[r];
        }
        break;
      }
      case Op::MatVecT: {
        const std::size_t rows = a.rows, cols = a.cols;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* wr = a.value.data() + r * cols;
          if (gb) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += wr[c] * g[c];
            (*gb)[r] += s;
          }
          if (ga) {
            double* gw = ga->data() + r * cols;
            const double vr = b->value[r];
            for (std::size_t c = 0; c < cols; ++c) gw[c] += vr * g[c];
          }
        }
        break;
      }
      case Op::Outer: {
        const std::size_t rows = n.rows, cols = n.cols;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * cols;
          if (ga) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += gr[c] * b->value[c];
            (*ga)[r] += s;
          }
          if (gb)
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += gr[c] * a.value[r];
        }
        break;
      }
      case Op::Leaf: break;
    }
  }

  std::vector<std::vector<double>> result;
  result.reserve(inputs.size());
  for (const Var& v : inputs) {
    const std::size_t n = nodes_[static_cast<std::size_t>(v.id_)].value.size();
    if (v.id_ > out.id_ || adj[static_cast<std::size_t>(v.id_ - lo)].empty()) {
      result.emplace_back(n, 0.0);
    } else {
      result.push_back(adj[static_cast<std::size_t>(v.id_ - lo)]);
    }
  }
  return result;
}

// --- recorded reverse sweep ------------------------------------------------

std::vector<Var> Tape::gradient_graph(const Var& out, std::span<const Var> inputs) {
  check_owned(out);
  if (out.size() != 1) throw ShapeError("gradient_graph() needs a scalar output");
  return vjp_graph(out, scalar_constant(1.0), inputs);
}

std::vector<Var> Tape::vjp_graph(const Var& out, const Var& covector, std::span<const Var> inputs) {
  check_owned(out);
  check_owned(covector);
  if (covector.size() != out.size()) throw ShapeError("covector size does not match output");

  int lo = 0;
  const std::vector<char> rel = relevant_nodes(out.id_, inputs, lo);
  std::vector<Var> adj(rel.size());
  std::vector<char> is_input(rel.size(), 0);
  for (const Var& v : inputs)
    if (v.id_ <= out.id_) is_input[static_cast<std::size_t>(v.id_ - lo)] = 1;

  auto accumulate = [&](int id, Var contrib) {
    if (id < lo || !rel[static_cast<std::size_t>(id - lo)]) return;
    if (nodes_[static_cast<std::size_t>(id)].value.size() == 1 && contrib.size() != 1) {
      contrib = sum(contrib);
    }
    Var& slot = adj[static_cast<std::size_t>(id - lo)];
    slot = slot.valid() ? add(slot, contrib) : contrib;
  };
  auto wants = [&](int id) { return id >= lo && rel[static_cast<std::size_t>(id - lo)]; };

  if (rel.back()) adj.back() = covector;

  for (int id = out.id_; id >= lo; --id) {
    const std::size_t k = static_cast<std::size_t>(id - lo);
    if (!rel[k] || !adj[k].valid() || is_input[k]) continue;
    // Copy what we need: recording below may reallocate nodes_.
    const Op op = nodes_[static_cast<std::size_t>(id)].op;
    if (op == Op::Leaf) continue;
    const int ia = nodes_[static_cast<std::size_t>(id)].in[0];
    const int ib = nodes_[static_cast<std::size_t>(id)].in[1];
    const int ic = nodes_[static_cast<std::size_t>(id)].in[2];
    const double c0 = nodes_[static_cast<std::size_t>(id)].c0;
    const double c1 = nodes_[static_cast<std::size_t>(id)].c1;
    const Var g = adj[k];
    const Var y(this, id);
    const Var a(this, ia);
    const Var b = ib >= 0 ? Var(this, ib) : Var();

    switch (op) {
      case Op::Add:
        if (wants(ia)) accumulate(ia, g);
        if (wants(ib)) accumulate(ib, g);
        break;
      case Op::Sub:
        if (wants(ia)) accumulate(ia, g);
        if (wants(ib)) accumulate(ib, neg(g));
        break;
      case Op::Mul:
        if (wants(ia)) accumulate(ia, mul(g, b));
        if (wants(ib)) accumulate(ib, mul(g, a));
        break;
      case Op::Div:
        if (wants(ia)) accumulate(ia, div(g, b));
        if (wants(ib)) accumulate(ib, neg(div(mul(g, y), b)));
        break;
      case Op::Neg:
        if (wants(ia)) accumulate(ia, neg(g));
        break;
      case Op::Exp:
        if (wants(ia)) accumulate(ia, mul(g, y));
        break;
      case Op::Log:
        if (wants(ia)) accumulate(ia, div(g, a));
        break;
      case Op::Tanh:
        if (wants(ia)) accumulate(ia, mul(g, sub(scalar_constant(1.0), square(y))));
        break;
      case Op::Square:
        if (wants(ia)) accumulate(ia, mul(g, scale(a, 2.0)));
        break;
      case Op::Scale:
        if (wants(ia)) accumulate(ia, scale(g, c0));
        break;
      case Op::ClipStopGrad:
        if (wants(ia)) {
          std::vector<double> mask(a.size());
          const auto av = a.value();
          for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (av[i] >= c0 && av[i] <= c1) ? 1.0 : 0.0;
          accumulate(ia, mul(g, constant(std::move(mask), a.rows(), a.cols())));
        }
        break;
      case Op::Sum:
        if (wants(ia)) accumulate(ia, mul(constant(std::vector<double>(a.size(), 1.0), a.rows(), a.cols()), g));
        break;
      case Op::Dot:
        if (wants(ia)) accumulate(ia, mul(b, g));
        if (wants(ib)) accumulate(ib, mul(a, g));
        break;
      case Op::MatVec:
      case Op::Affine:
        if (wants(ib)) accumulate(ib, matvec_t(a, g));
        if (wants(ia)) accumulate(ia, outer(g, b));
        if (op == Op::Affine && wants(ic)) accumulate(ic, g);
        break;
      case Op::MatVecT:
        if (wants(ib)) accumulate(ib, matvec(a, g));
        if (wants(ia)) accumulate(ia, outer(b, g));
        break;
      case Op::Outer: {
        Var gm = g;
        if (g.cols() != y.cols()) {
          gm = mul(constant(std::vector<double>(y.size(), 1.0), y.rows(), y.cols()), g);
        }
        if (wants(ia)) accumulate(ia, matvec(gm, b));
        if (wants(ib)) accumulate(ib, matvec_t(gm, a));
        break;
      }
      case Op::Leaf: break;
    }
    (void)c1;
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const Var& v : inputs) {
    const bool have = v.id_ <= out.id_ && adj[static_cast<std::size_t>(v.id_ - lo)].valid();
    if (have) {
      result.push_back(adj[static_cast<std::size_t>(v.id_ - lo)]);
    } else {
      result.push_back(constant(std::vector<double>(v.size(), 0.0), v.rows(), v.cols()));
    }
  }
  return result;
}

// --- primitives ------------------------------------------------------------

namespace {
Tape& tape_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("operation on an empty variable");
  return *v.tape();
}
}  // namespace

Var add(const Var& a, const Var& b) { return tape_of(a).apply(Op::Add, {a, b}); }
Var sub(const Var& a, const Var& b) { return tape_of(a).apply(Op::Sub, {a, b}); }
Var mul(const Var& a, const Var& b) { return tape_of(a).apply(Op::Mul, {a, b}); }
Var div(const Var& a, const Var& b) { return tape_of(a).apply(Op::Div, {a, b}); }
Var neg(const Var& a) { return tape_of(a).apply(Op::Neg, {a}); }
Var exp(const Var& a) { return tape_of(a).apply(Op::Exp, {a}); }
Var log(const Var& a) { return tape_of(a).apply(Op::Log, {a}); }
Var tanh(const Var& a) { return tape_of(a).apply(Op::Tanh, {a}); }
Var square(const Var& a) { return tape_of(a).apply(Op::Square, {a}); }
Var sum(const Var& a) { return tape_of(a).apply(Op::Sum, {a}); }
Var dot(const Var& a, const Var& b) { return tape_of(a).apply(Op::Dot, {a, b}); }
Var scale(const Var& a, double c) { return tape_of(a).apply(Op::Scale, {a}, c); }
Var matvec(const Var& w, const Var& x) { return tape_of(w).apply(Op::MatVec, {w, x}); }
Var affine(const Var& w, const Var& x, const Var& b) { return tape_of(w).apply(Op::Affine, {w, x, b}); }
Var matvec_t(const Var& w, const Var& v) { return tape_of(w).apply(Op::MatVecT, {w, v}); }
Var outer(const Var& a, const Var& b) { return tape_of(a).apply(Op::Outer, {a, b}); }

Var clip_stopgrad(const Var& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip_stopgrad: lo > hi");
  return tape_of(a).apply(Op::ClipStopGrad, {a}, lo, hi);
}

}  // namespace pflow::ad
