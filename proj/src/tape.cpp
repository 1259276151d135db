#include "klflow/tape.hpp"

#include <cmath>
#include <string>

#include "klflow/error.hpp"

namespace klflow::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumCols: return "sum_cols";
    case Op::kMean: return "mean";
  }
  return "unknown";
}

namespace {

std::string shape_str(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "," + std::to_string(t.cols()) + ")";
}

std::size_t broadcast_dim(std::size_t a, std::size_t b, Op op, const Tensor& ta,
                          const Tensor& tb) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ContractViolation(std::string(op_name(op)) + ": shape mismatch " + shape_str(ta) +
                          " vs " + shape_str(tb));
}

// Adds every element of src (shape r x c) into dst, summing over the axes
// along which dst was broadcast.
void accumulate_reduced(Tensor& dst, const Tensor& src) {
  const std::size_t r = src.rows();
  const std::size_t c = src.cols();
  if (dst.rows() == r && dst.cols() == c) {
    dst.matrix() += src.matrix();
    return;
  }
  const bool row1 = dst.rows() == 1;
  const bool col1 = dst.cols() == 1;
  for (std::size_t i = 0; i < r; ++i) {
    const double* s = src.values().data() + i * c;
    double* d = dst.values().data() + (row1 ? 0 : i) * dst.cols();
    if (col1) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += s[j];
      d[0] += acc;
    } else {
      for (std::size_t j = 0; j < c; ++j) d[j] += s[j];
    }
  }
}

template <typename F>
void broadcast_apply(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const std::size_t r = out.rows();
  const std::size_t c = out.cols();
  const bool ar = a.rows() == 1, ac = a.cols() == 1;
  const bool br = b.rows() == 1, bc = b.cols() == 1;
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  if (a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c) {
    for (std::size_t k = 0; k < r * c; ++k) po[k] = f(pa[k], pb[k]);
    return;
  }
  if (a.rows() == r && a.cols() == c && br && !bc) {
    // Row vector broadcast down the rows: the common bias case.
    for (std::size_t i = 0; i < r; ++i) {
      const double* ra = pa + i * c;
      double* ro = po + i * c;
      for (std::size_t j = 0; j < c; ++j) ro[j] = f(ra[j], pb[j]);
    }
    return;
  }
  if (a.rows() == r && a.cols() == c && bc && !br) {
    for (std::size_t i = 0; i < r; ++i) {
      const double* ra = pa + i * c;
      double* ro = po + i * c;
      const double y = pb[i];
      for (std::size_t j = 0; j < c; ++j) ro[j] = f(ra[j], y);
    }
    return;
  }
  for (std::size_t i = 0; i < r; ++i) {
    const double* ra = pa + (ar ? 0 : i) * a.cols();
    const double* rb = pb + (br ? 0 : i) * b.cols();
    double* ro = po + i * c;
    for (std::size_t j = 0; j < c; ++j) ro[j] = f(ra[ac ? 0 : j], rb[bc ? 0 : j]);
  }
}

// grad_a += reduce(g * b) for the product rule under broadcasting.
void accumulate_product(Tensor& ga, const Tensor& g, const Tensor& other, Tensor& scratch) {
  scratch.resize(g.rows(), g.cols());
  broadcast_apply(g, other, scratch, [](double x, double y) { return x * y; });
  accumulate_reduced(ga, scratch);
}

}  // namespace

void Tape::check_owner(Var v) const {
  KLFLOW_REQUIRE(v.valid() && &v.tape() == this && v.id() < used_,
                 "variable does not belong to this tape");
}

Tape::Node& Tape::push(Op op, std::uint32_t a, std::uint32_t b, bool requires_grad,
                       std::size_t rows, std::size_t cols) {
  if (used_ == nodes_.size()) nodes_.emplace_back();
  Node& n = nodes_[used_++];
  n.op = op;
  n.a = a;
  n.b = b;
  n.factor = 0.0;
  n.requires_grad = requires_grad;
  n.value.resize(rows, cols);
  backward_done_ = false;
  return n;
}

Var Tape::finish(Node& n) {
  const std::size_t bad = n.value.first_non_finite();
  const auto id = static_cast<std::uint32_t>(&n - nodes_.data());
  if (bad != n.value.size()) {
    throw DomainError(std::string("non-finite value produced by ") + std::string(op_name(n.op)) +
                      " at flat index " + std::to_string(bad) + " (node " +
                      std::to_string(id) + ")");
  }
  return Var(this, id);
}

Var Tape::constant(const Tensor& value) {
  Node& n = push(Op::kConstant, 0, 0, false, value.rows(), value.cols());
  std::copy(value.values().begin(), value.values().end(), n.value.values().begin());
  return finish(n);
}

Var Tape::constant(std::size_t rows, std::size_t cols, double fill) {
  Node& n = push(Op::kConstant, 0, 0, false, rows, cols);
  n.value.fill(fill);
  return finish(n);
}

Var Tape::parameter(const Tensor& value) {
  Node& n = push(Op::kParameter, 0, 0, true, value.rows(), value.cols());
  std::copy(value.values().begin(), value.values().end(), n.value.values().begin());
  return finish(n);
}

Var Tape::matmul(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.cols() != tb.rows()) {
    throw ContractViolation("matmul: inner dimensions differ " + shape_str(ta) + " x " +
                            shape_str(tb));
  }
  const bool rg = requires_grad(a) || requires_grad(b);
  Node& n = push(Op::kMatmul, a.id(), b.id(), rg, ta.rows(), tb.cols());
  // push() may have grown nodes_; re-fetch the operands.
  n.value.matrix().noalias() = nodes_[a.id()].value.matrix() * nodes_[b.id()].value.matrix();
  return finish(n);
}

Var Tape::binary(Op op, Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const std::size_t r = broadcast_dim(value(a).rows(), value(b).rows(), op, value(a), value(b));
  const std::size_t c = broadcast_dim(value(a).cols(), value(b).cols(), op, value(a), value(b));
  const bool rg = requires_grad(a) || requires_grad(b);
  Node& n = push(op, a.id(), b.id(), rg, r, c);
  const Tensor& ta = nodes_[a.id()].value;
  const Tensor& tb = nodes_[b.id()].value;
  switch (op) {
    case Op::kAdd: broadcast_apply(ta, tb, n.value, [](double x, double y) { return x + y; }); break;
    case Op::kSub: broadcast_apply(ta, tb, n.value, [](double x, double y) { return x - y; }); break;
    case Op::kMul: broadcast_apply(ta, tb, n.value, [](double x, double y) { return x * y; }); break;
    default: throw ContractViolation("not a binary op");
  }
  return finish(n);
}

Var Tape::add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::kMul, a, b); }

Var Tape::scale(Var a, double factor) {
  check_owner(a);
  Node& n = push(Op::kScale, a.id(), 0, requires_grad(a), value(a).rows(), value(a).cols());
  n.factor = factor;
  n.value.matrix() = factor * nodes_[a.id()].value.matrix();
  return finish(n);
}

Var Tape::tanh(Var a) {
  check_owner(a);
  Node& n = push(Op::kTanh, a.id(), 0, requires_grad(a), value(a).rows(), value(a).cols());
  auto x = nodes_[a.id()].value.matrix().array();
  // Vectorised through exp; exact at 0 and saturates cleanly at +-1.
  n.value.matrix().array() = 1.0 - 2.0 / ((2.0 * x).exp() + 1.0);
  return finish(n);
}

Var Tape::exp(Var a) {
  check_owner(a);
  Node& n = push(Op::kExp, a.id(), 0, requires_grad(a), value(a).rows(), value(a).cols());
  n.value.matrix().array() = nodes_[a.id()].value.matrix().array().exp();
  return finish(n);
}

Var Tape::log(Var a) {
  check_owner(a);
  const Tensor& x = value(a);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(x[i]) + " at flat index " +
                        std::to_string(i));
    }
  }
  Node& n = push(Op::kLog, a.id(), 0, requires_grad(a), x.rows(), x.cols());
  n.value.matrix().array() = nodes_[a.id()].value.matrix().array().log();
  return finish(n);
}

Var Tape::square(Var a) {
  check_owner(a);
  Node& n = push(Op::kSquare, a.id(), 0, requires_grad(a), value(a).rows(), value(a).cols());
  n.value.matrix().array() = nodes_[a.id()].value.matrix().array().square();
  return finish(n);
}

Var Tape::sum(Var a) {
  check_owner(a);
  Node& n = push(Op::kSum, a.id(), 0, requires_grad(a), 1, 1);
  n.value[0] = pairwise_sum(nodes_[a.id()].value.values());
  return finish(n);
}

Var Tape::sum_rows(Var a) {
  check_owner(a);
  Node& n = push(Op::kSumRows, a.id(), 0, requires_grad(a), 1, value(a).cols());
  n.value.matrix() = nodes_[a.id()].value.matrix().colwise().sum();
  return finish(n);
}

Var Tape::sum_cols(Var a) {
  check_owner(a);
  Node& n = push(Op::kSumCols, a.id(), 0, requires_grad(a), value(a).rows(), 1);
  n.value.matrix() = nodes_[a.id()].value.matrix().rowwise().sum();
  return finish(n);
}

Var Tape::mean(Var a) {
  check_owner(a);
  const std::size_t count = value(a).size();
  KLFLOW_REQUIRE(count > 0, "mean of empty tensor");
  Node& n = push(Op::kMean, a.id(), 0, requires_grad(a), 1, 1);
  n.value[0] = pairwise_sum(nodes_[a.id()].value.values()) / static_cast<double>(count);
  return finish(n);
}

const Tensor& Tape::grad(Var v) const {
  check_owner(v);
  KLFLOW_REQUIRE(backward_done_, "grad() requested before backward()");
  const Node& n = nodes_[v.id()];
  KLFLOW_REQUIRE(n.requires_grad, "node does not carry a gradient");
  return n.grad;
}

void Tape::backward(Var output) {
  check_owner(output);
  const Tensor& out = value(output);
  KLFLOW_REQUIRE(out.rows() == 1 && out.cols() == 1, "backward() requires a scalar output");

  for (std::size_t i = 0; i < used_; ++i) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    n.grad.resize(n.value.rows(), n.value.cols());
    n.grad.fill(0.0);
  }
  backward_done_ = true;
  if (!nodes_[output.id()].requires_grad) return;
  nodes_[output.id()].grad[0] = 1.0;

  Tensor scratch;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
        break;
      case Op::kMatmul: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        if (a.requires_grad) a.grad.matrix().noalias() += g.matrix() * b.value.matrix().transpose();
        if (b.requires_grad) b.grad.matrix().noalias() += a.value.matrix().transpose() * g.matrix();
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        if (a.requires_grad) accumulate_reduced(a.grad, g);
        if (b.requires_grad) {
          if (n.op == Op::kAdd) {
            accumulate_reduced(b.grad, g);
          } else {
            scratch.resize(g.rows(), g.cols());
            scratch.matrix() = -g.matrix();
            accumulate_reduced(b.grad, scratch);
          }
        }
        break;
      }
      case Op::kMul: {
        Node& a = nodes_[n.a];
        Node& b = nodes_[n.b];
        if (a.requires_grad) accumulate_product(a.grad, g, b.value, scratch);
        if (b.requires_grad) accumulate_product(b.grad, g, a.value, scratch);
        break;
      }
      case Op::kScale: {
        Node& a = nodes_[n.a];
        a.grad.matrix() += n.factor * g.matrix();
        break;
      }
      case Op::kTanh: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += g.matrix().array() * (1.0 - n.value.matrix().array().square());
        break;
      }
      case Op::kExp: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += g.matrix().array() * n.value.matrix().array();
        break;
      }
      case Op::kLog: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += g.matrix().array() / a.value.matrix().array();
        break;
      }
      case Op::kSquare: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += 2.0 * g.matrix().array() * a.value.matrix().array();
        break;
      }
      case Op::kSum: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += g[0];
        break;
      }
      case Op::kMean: {
        Node& a = nodes_[n.a];
        a.grad.matrix().array() += g[0] / static_cast<double>(a.value.size());
        break;
      }
      case Op::kSumRows: {
        Node& a = nodes_[n.a];
        a.grad.matrix().rowwise() += g.matrix().row(0);
        break;
      }
      case Op::kSumCols: {
        Node& a = nodes_[n.a];
        a.grad.matrix().colwise() += g.matrix().col(0);
        break;
      }
    }
  }
}

}  // namespace klflow::ad
