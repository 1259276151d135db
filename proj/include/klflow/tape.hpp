#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "klflow/tensor.hpp"

namespace klflow::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kTanh,
  kExp,
  kLog,
  kSquare,
  kSum,
  kSumRows,
  kSumCols,
  kMean,
};

std::string_view op_name(Op op);

/// Linear record of one loss evaluation. Nodes are appended in execution
/// order, so the record is already topologically sorted and backward() is a
/// single reverse sweep. clear() keeps every node buffer allocated so a loop
/// that rebuilds the same graph each step stops touching the allocator.
///
/// Binary elementwise ops broadcast an operand whose row or column count is 1.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const Tensor& value);
  Var constant(std::size_t rows, std::size_t cols, double fill);
  /// A leaf that receives a gradient in backward().
  Var parameter(const Tensor& value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sum(Var a);
  /// Column sums: (r, c) -> (1, c).
  Var sum_rows(Var a);
  /// Row sums: (r, c) -> (r, 1).
  Var sum_cols(Var a);
  Var mean(Var a);

  /// Reverse sweep from a 1x1 output. Every node that depends on a parameter
  /// gets a gradient; parameters the output does not reach get zeros.
  void backward(Var output);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  Op op(Var v) const { return nodes_[v.id()].op; }

  std::size_t size() const { return used_; }
  void clear() { used_ = 0; backward_done_ = false; }

 private:
  struct Node {
    Op op = Op::kConstant;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    double factor = 0.0;
    bool requires_grad = false;
    Tensor value;
    Tensor grad;
  };

  Node& push(Op op, std::uint32_t a, std::uint32_t b, bool requires_grad, std::size_t rows,
             std::size_t cols);
  Var finish(Node& node);
  Var binary(Op op, Var a, Var b);
  Node& node(Var v) { return nodes_[v.id()]; }
  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  std::size_t used_ = 0;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

inline Var operator+(Var a, Var b) { return a.tape().add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape().sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape().mul(a, b); }
inline Var operator*(double s, Var a) { return a.tape().scale(a, s); }
inline Var operator*(Var a, double s) { return a.tape().scale(a, s); }
inline Var operator-(Var a) { return a.tape().scale(a, -1.0); }

inline Var matmul(Var a, Var b) { return a.tape().matmul(a, b); }
inline Var tanh(Var a) { return a.tape().tanh(a); }
inline Var exp(Var a) { return a.tape().exp(a); }
inline Var log(Var a) { return a.tape().log(a); }
inline Var square(Var a) { return a.tape().square(a); }
inline Var sum(Var a) { return a.tape().sum(a); }
inline Var sum_rows(Var a) { return a.tape().sum_rows(a); }
inline Var sum_cols(Var a) { return a.tape().sum_cols(a); }
inline Var mean(Var a) { return a.tape().mean(a); }

}  // namespace klflow::ad
