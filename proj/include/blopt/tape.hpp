#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "blopt/tensor.hpp"

namespace blopt {

// Every recorded operation. The *Adj ops are the adjoints needed so that
// backward passes can themselves be expressed as tape ops and differentiated
// again (second order).
enum class Op : std::uint8_t {
  kConst,
  kInput,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kTranspose,
  kReshape,
  kBroadcast,
  kReduceTo,
  kSum,
  kMean,
  kMaxReduce,
  kExp,
  kLog,
  kSqrt,
  kTanh,
  kSigmoid,
  kRelu,
  kSoftplus,
  kSoftmax,
  kConcat,
  kSlice,
  kSliceAdjoint,
  kSelect,
  kConv3x3,
  kConv3x3InputAdj,
  kConv3x3KernelAdj,
  kLinsolve,
};

const char* op_name(Op op);

class Tape;

// Handle to a tape node. Cheap to copy; owns nothing.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

struct Node {
  Op op;
  std::array<std::int32_t, 3> in{-1, -1, -1};
  Tensor value;                     // cached forward value, never mutated by backward passes
  std::vector<std::int64_t> attr;  // op-specific integers (axis, slice bounds, target shape)
};

// Append-only record of operations. Node ids are topologically ordered:
// inputs always precede consumers. A tape belongs to exactly one experiment
// instance at a time.
class Tape {
 public:
  Var constant(Tensor v);
  Var constant(double v) { return constant(Tensor::scalar(v)); }
  Var input(Tensor v);

  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Tensor& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  std::int32_t size() const { return static_cast<std::int32_t>(nodes_.size()); }

  // Drops nodes [mark, size). Safe because consumers always have larger ids
  // than their inputs; used to discard detached backward passes.
  void rollback(std::int32_t mark);

  // Whether the tape currently records backward passes (set during recorded
  // gradient construction; informational).
  bool recording_backward() const { return recording_backward_; }

  Var emit(Op op, std::array<std::int32_t, 3> in, Tensor value, std::vector<std::int64_t> attr = {});

 private:
  friend std::vector<Var> gradient(Var, std::span<const Var>, bool);
  std::vector<Node> nodes_;
  bool recording_backward_ = false;
};

// ---- op builders -----------------------------------------------------------
//
// Binary elementwise ops broadcast in the documented cases only: scalar with
// tensor, and row/column vector with matrix. Anything else is a ShapeError.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);  // rejects exact zeros in the denominator

Var matmul(Var a, Var b);      // [n,k] x [k,m]
Var transpose(Var a);          // rank 2
Var reshape(Var a, Shape s);   // same element count
Var broadcast_to(Var a, Shape s);
Var reduce_to(Var a, Shape s);  // sums over broadcast axes

Var sum(Var a);
Var mean(Var a);
Var reduce_max(Var a);  // ties resolved to the first element in row-major order

Var exp(Var a);
Var log(Var a);  // rejects nonpositive inputs
Var sqrt(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var softplus(Var a);
Var softmax(Var a);  // rows of the last axis; rank 1 treated as one row

Var concat(Var a, Var b, std::int64_t axis);
Var slice(Var a, const std::vector<std::int64_t>& starts, const std::vector<std::int64_t>& sizes);
Var slice_adjoint(Var g, const Shape& full, const std::vector<std::int64_t>& starts);

// mask ? a : b, elementwise. The mask participates as data only; no gradient
// flows to it.
Var select(Var mask, Var a, Var b);

// 3x3 neighborhood aggregation (zero padding, stride 1).
// x: [Cin,H,W], k: [Cout,Cin,3,3] -> [Cout,H,W]
Var conv3x3(Var x, Var k);
Var conv3x3_input_adj(Var g, Var k);   // [Cout,H,W],[Cout,Cin,3,3] -> [Cin,H,W]
Var conv3x3_kernel_adj(Var x, Var g);  // [Cin,H,W],[Cout,H,W] -> [Cout,Cin,3,3]

// X solving A X = B for square A; partial-pivot LU.
Var linsolve(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

Var operator+(Var a, double b);
Var operator-(Var a, double b);
Var operator*(Var a, double b);
Var operator/(Var a, double b);
Var operator+(double a, Var b);
Var operator-(double a, Var b);
Var operator*(double a, Var b);
Var operator-(Var a);

Var dot(Var a, Var b);  // sum(a * b)

}  // namespace blopt
