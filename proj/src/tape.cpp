#include "blopt/tape.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace blopt {

const char* op_name(Op op) {
  switch (op) {
    case Op::kConst: return "const";
    case Op::kInput: return "input";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kBroadcast: return "broadcast";
    case Op::kReduceTo: return "reduce_to";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMaxReduce: return "max";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kSoftplus: return "softplus";
    case Op::kSoftmax: return "softmax";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSliceAdjoint: return "slice_adjoint";
    case Op::kSelect: return "select";
    case Op::kConv3x3: return "conv3x3";
    case Op::kConv3x3InputAdj: return "conv3x3_input_adj";
    case Op::kConv3x3KernelAdj: return "conv3x3_kernel_adj";
    case Op::kLinsolve: return "linsolve";
  }
  return "?";
}

Var Tape::emit(Op op, std::array<std::int32_t, 3> in, Tensor value, std::vector<std::int64_t> attr) {
  nodes_.push_back(Node{op, in, std::move(value), std::move(attr)});
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor v) { return emit(Op::kConst, {-1, -1, -1}, std::move(v)); }

Var Tape::input(Tensor v) { return emit(Op::kInput, {-1, -1, -1}, std::move(v)); }

void Tape::rollback(std::int32_t mark) {
  if (mark < 0 || mark > size()) throw std::logic_error("tape rollback out of range");
  nodes_.resize(static_cast<std::size_t>(mark));
}

namespace {

Tape& tape_of(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape != b.tape) {
    throw std::logic_error(std::string(op) + ": operands from different tapes");
  }
  return *a.tape;
}

// How each operand of a binary elementwise op maps onto the output index.
enum class BcMode { kSame, kScalar, kRow, kCol };

struct BcPlan {
  Shape out;
  std::int64_t rows = 1, cols = 1;  // output viewed as rows x cols
  BcMode a, b;
};

BcMode classify(const Shape& s, std::int64_t rows, std::int64_t cols, const Shape& out) {
  if (s == out) return BcMode::kSame;
  if (numel(s) == 1) return BcMode::kScalar;
  if (out.size() == 2) {
    if (s.size() == 2 && s[0] == 1 && s[1] == cols) return BcMode::kRow;
    if (s.size() == 1 && s[0] == cols) return BcMode::kRow;
    if (s.size() == 2 && s[0] == rows && s[1] == 1) return BcMode::kCol;
  }
  throw ShapeError("");  // caller re-throws with op name
}

BcPlan broadcast_plan(const char* op, const Tensor& a, const Tensor& b) {
  BcPlan plan;
  const bool a_small = numel(a.shape()) == 1 && numel(b.shape()) > 1;
  const bool b_small = numel(b.shape()) == 1 && numel(a.shape()) > 1;
  if (a.shape() == b.shape()) {
    plan.out = a.shape();
  } else if (numel(a.shape()) == 1 && numel(b.shape()) == 1) {
    plan.out = a.rank() >= b.rank() ? a.shape() : b.shape();
  } else if (a_small) {
    plan.out = b.shape();
  } else if (b_small) {
    plan.out = a.shape();
  } else if (a.rank() == 2 && (b.rank() <= 2)) {
    plan.out = a.shape();
  } else if (b.rank() == 2 && (a.rank() <= 2)) {
    plan.out = b.shape();
  } else {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcastable");
  }
  if (plan.out.size() == 2) {
    plan.rows = plan.out[0];
    plan.cols = plan.out[1];
  } else {
    plan.rows = 1;
    plan.cols = numel(plan.out);
  }
  try {
    plan.a = classify(a.shape(), plan.rows, plan.cols, plan.out);
    plan.b = classify(b.shape(), plan.rows, plan.cols, plan.out);
  } catch (const ShapeError&) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcastable");
  }
  return plan;
}

inline std::int64_t bc_index(BcMode m, std::int64_t r, std::int64_t c, std::int64_t cols) {
  switch (m) {
    case BcMode::kSame: return r * cols + c;
    case BcMode::kScalar: return 0;
    case BcMode::kRow: return c;
    case BcMode::kCol: return r;
  }
  return 0;
}

template <typename F>
Var binary_op(const char* name, Op op, Var a, Var b, F f) {
  Tape& t = tape_of(a, b, name);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  BcPlan plan = broadcast_plan(name, ta, tb);
  Tensor out = Tensor::zeros(plan.out);
  std::int64_t idx = 0;
  for (std::int64_t r = 0; r < plan.rows; ++r) {
    for (std::int64_t c = 0; c < plan.cols; ++c, ++idx) {
      out[idx] = f(ta[bc_index(plan.a, r, c, plan.cols)], tb[bc_index(plan.b, r, c, plan.cols)]);
    }
  }
  return t.emit(op, {a.id, b.id, -1}, std::move(out));
}

template <typename F>
Var unary_op(Op op, Var a, F f) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  Tensor out = Tensor::zeros(ta.shape());
  for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = f(ta[i]);
  return t.emit(op, {a.id, -1, -1}, std::move(out));
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op("add", Op::kAdd, a, b, [](double x, double y) { return x + y; });
}

Var sub(Var a, Var b) {
  return binary_op("sub", Op::kSub, a, b, [](double x, double y) { return x - y; });
}

Var mul(Var a, Var b) {
  return binary_op("mul", Op::kMul, a, b, [](double x, double y) { return x * y; });
}

Var div(Var a, Var b) {
  const Tensor& denom = b.tape->value(b);
  for (std::int64_t i = 0; i < denom.size(); ++i) {
    if (denom[i] == 0.0) throw DomainError("div: zero denominator");
  }
  return binary_op("div", Op::kDiv, a, b, [](double x, double y) { return x / y; });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b, "matmul");
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape()) + " and " +
                     shape_str(tb.shape()));
  }
  Tensor out = Tensor::zeros({ta.dim(0), tb.dim(1)});
  mat_view(out) = mat_view(ta) * mat_view(tb);
  return t.emit(Op::kMatmul, {a.id, b.id, -1}, std::move(out));
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (ta.rank() != 2) {
    throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(ta.shape()));
  }
  Tensor out = Tensor::zeros({ta.dim(1), ta.dim(0)});
  mat_view(out) = mat_view(ta).transpose();
  return t.emit(Op::kTranspose, {a.id, -1, -1}, std::move(out));
}

Var reshape(Var a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (numel(s) != ta.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(ta.shape()) + " as " + shape_str(s));
  }
  Tensor out(s, std::vector<double>(ta.data(), ta.data() + ta.size()));
  std::vector<std::int64_t> attr(s.begin(), s.end());
  return t.emit(Op::kReshape, {a.id, -1, -1}, std::move(out), std::move(attr));
}

Var broadcast_to(Var a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  Tensor probe = Tensor::zeros(s);
  BcPlan plan = broadcast_plan("broadcast", probe, ta);
  if (plan.out != s) {
    throw ShapeError("broadcast: cannot expand " + shape_str(ta.shape()) + " to " + shape_str(s));
  }
  Tensor out = Tensor::zeros(s);
  std::int64_t idx = 0;
  for (std::int64_t r = 0; r < plan.rows; ++r) {
    for (std::int64_t c = 0; c < plan.cols; ++c, ++idx) {
      out[idx] = ta[bc_index(plan.b, r, c, plan.cols)];
    }
  }
  std::vector<std::int64_t> attr(s.begin(), s.end());
  return t.emit(Op::kBroadcast, {a.id, -1, -1}, std::move(out), std::move(attr));
}

Var reduce_to(Var a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (ta.shape() == s) {
    Tensor out = ta;
    return t.emit(Op::kReduceTo, {a.id, -1, -1}, std::move(out),
                  std::vector<std::int64_t>(s.begin(), s.end()));
  }
  Tensor probe = Tensor::zeros(s);
  BcPlan plan = broadcast_plan("reduce_to", ta, probe);
  if (plan.out != ta.shape()) {
    throw ShapeError("reduce_to: cannot reduce " + shape_str(ta.shape()) + " to " + shape_str(s));
  }
  Tensor out = Tensor::zeros(s);
  std::int64_t idx = 0;
  for (std::int64_t r = 0; r < plan.rows; ++r) {
    for (std::int64_t c = 0; c < plan.cols; ++c, ++idx) {
      out[bc_index(plan.b, r, c, plan.cols)] += ta[idx];
    }
  }
  std::vector<std::int64_t> attr(s.begin(), s.end());
  return t.emit(Op::kReduceTo, {a.id, -1, -1}, std::move(out), std::move(attr));
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
  return t.emit(Op::kSum, {a.id, -1, -1}, Tensor::scalar(s));
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (ta.size() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) s += ta[i];
  return t.emit(Op::kMean, {a.id, -1, -1}, Tensor::scalar(s / static_cast<double>(ta.size())));
}

Var reduce_max(Var a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (ta.size() == 0) throw ShapeError("max: empty tensor");
  double m = ta[0];
  for (std::int64_t i = 1; i < ta.size(); ++i) m = std::max(m, ta[i]);
  return t.emit(Op::kMaxReduce, {a.id, -1, -1}, Tensor::scalar(m));
}

Var exp(Var a) {
  return unary_op(Op::kExp, a, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  const Tensor& ta = a.tape->value(a);
  for (std::int64_t i = 0; i < ta.size(); ++i) {
    if (ta[i] <= 0.0) throw DomainError("log: nonpositive input " + std::to_string(ta[i]));
  }
  return unary_op(Op::kLog, a, [](double x) { return std::log(x); });
}

Var sqrt(Var a) {
  const Tensor& ta = a.tape->value(a);
  for (std::int64_t i = 0; i < ta.size(); ++i) {
    if (ta[i] < 0.0) throw DomainError("sqrt: negative input");
  }
  return unary_op(Op::kSqrt, a, [](double x) { return std::sqrt(x); });
}

Var tanh(Var a) {
  return unary_op(Op::kTanh, a, [](double x) { return std::tanh(x); });
}

Var sigmoid(Var a) {
  return unary_op(Op::kSigmoid, a, [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
}

Var relu(Var a) {
  return unary_op(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var softplus(Var a) {
  // log(1+e^x), computed as max(x,0) + log1p(e^-|x|) for stability
  return unary_op(Op::kSoftplus, a, [](double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  });
}

Var softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  if (ta.rank() > 2 || ta.size() == 0) {
    throw ShapeError("softmax: expected rank-1 or rank-2 tensor, got " + shape_str(ta.shape()));
  }
  const std::int64_t rows = ta.rank() == 2 ? ta.dim(0) : 1;
  const std::int64_t cols = ta.rank() == 2 ? ta.dim(1) : ta.size();
  Tensor out = Tensor::zeros(ta.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = ta.data() + r * cols;
    double* y = out.data() + r * cols;
    double m = x[0];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      z += y[c];
    }
    for (std::int64_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return t.emit(Op::kSoftmax, {a.id, -1, -1}, std::move(out));
}

Var concat(Var a, Var b, std::int64_t axis) {
  Tape& t = tape_of(a, b, "concat");
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != tb.rank() || axis < 0 || axis >= ta.rank()) {
    throw ShapeError("concat: shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()) +
                     " along axis " + std::to_string(axis));
  }
  for (std::int64_t d = 0; d < ta.rank(); ++d) {
    if (d != axis && ta.dim(d) != tb.dim(d)) {
      throw ShapeError("concat: shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()) +
                       " along axis " + std::to_string(axis));
    }
  }
  Shape out_shape = ta.shape();
  out_shape[static_cast<std::size_t>(axis)] += tb.dim(axis);
  Tensor out = Tensor::zeros(out_shape);
  // outer = dims before axis, inner = dims after axis
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= ta.dim(d);
  for (std::int64_t d = axis + 1; d < ta.rank(); ++d) inner *= ta.dim(d);
  const std::int64_t na = ta.dim(axis), nb = tb.dim(axis);
  for (std::int64_t o = 0; o < outer; ++o) {
    double* dst = out.data() + o * (na + nb) * inner;
    std::copy_n(ta.data() + o * na * inner, na * inner, dst);
    std::copy_n(tb.data() + o * nb * inner, nb * inner, dst + na * inner);
  }
  return t.emit(Op::kConcat, {a.id, b.id, -1}, std::move(out), {axis});
}

namespace {

void check_slice_bounds(const Tensor& ta, const std::vector<std::int64_t>& starts,
                        const std::vector<std::int64_t>& sizes) {
  if (static_cast<std::int64_t>(starts.size()) != ta.rank() || starts.size() != sizes.size()) {
    throw ShapeError("slice: rank mismatch for " + shape_str(ta.shape()));
  }
  for (std::int64_t d = 0; d < ta.rank(); ++d) {
    auto du = static_cast<std::size_t>(d);
    if (starts[du] < 0 || sizes[du] < 0 || starts[du] + sizes[du] > ta.dim(d)) {
      throw ShapeError("slice: out of bounds for " + shape_str(ta.shape()));
    }
  }
}

// Copies the [starts, starts+sizes) region between a full tensor and a patch.
template <bool kExtract>
void slice_copy(Tensor& full, Tensor& patch, const std::vector<std::int64_t>& starts) {
  const Shape& fs = full.shape();
  const Shape& ps = patch.shape();
  const std::int64_t rank = full.rank();
  std::vector<std::int64_t> fstride(static_cast<std::size_t>(rank), 1);
  for (std::int64_t d = rank - 2; d >= 0; --d) {
    fstride[static_cast<std::size_t>(d)] =
        fstride[static_cast<std::size_t>(d + 1)] * fs[static_cast<std::size_t>(d + 1)];
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  const std::int64_t n = patch.size();
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t foff = 0;
    for (std::int64_t d = 0; d < rank; ++d) {
      auto du = static_cast<std::size_t>(d);
      foff += (starts[du] + idx[du]) * fstride[du];
    }
    if constexpr (kExtract) {
      patch[flat] = full[foff];
    } else {
      full[foff] = patch[flat];
    }
    for (std::int64_t d = rank - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      if (++idx[du] < ps[du]) break;
      idx[du] = 0;
    }
  }
}

}  // namespace

Var slice(Var a, const std::vector<std::int64_t>& starts, const std::vector<std::int64_t>& sizes) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  check_slice_bounds(ta, starts, sizes);
  Tensor out = Tensor::zeros(Shape(sizes.begin(), sizes.end()));
  Tensor full = ta;
  slice_copy<true>(full, out, starts);
  std::vector<std::int64_t> attr = starts;
  attr.insert(attr.end(), sizes.begin(), sizes.end());
  return t.emit(Op::kSlice, {a.id, -1, -1}, std::move(out), std::move(attr));
}

Var slice_adjoint(Var g, const Shape& full, const std::vector<std::int64_t>& starts) {
  Tape& t = *g.tape;
  const Tensor& tg = t.value(g);
  Tensor out = Tensor::zeros(full);
  std::vector<std::int64_t> sizes(tg.shape().begin(), tg.shape().end());
  check_slice_bounds(out, starts, sizes);
  Tensor patch = tg;
  slice_copy<false>(out, patch, starts);
  std::vector<std::int64_t> attr = starts;
  attr.insert(attr.end(), full.begin(), full.end());
  return t.emit(Op::kSliceAdjoint, {g.id, -1, -1}, std::move(out), std::move(attr));
}

Var select(Var mask, Var a, Var b) {
  Tape& t = tape_of(a, b, "select");
  const Tensor& tm = t.value(mask);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (!(tm.shape() == ta.shape() && tm.shape() == tb.shape())) {
    throw ShapeError("select: shapes " + shape_str(tm.shape()) + ", " + shape_str(ta.shape()) +
                     ", " + shape_str(tb.shape()) + " must match");
  }
  Tensor out = Tensor::zeros(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = tm[i] != 0.0 ? ta[i] : tb[i];
  return t.emit(Op::kSelect, {mask.id, a.id, b.id}, std::move(out));
}

namespace {

void check_conv_shapes(const char* name, const Tensor& x, const Tensor& k, bool x_is_image) {
  if (x_is_image && x.rank() != 3) {
    throw ShapeError(std::string(name) + ": expected [C,H,W] input, got " + shape_str(x.shape()));
  }
  if (k.rank() != 4 || k.dim(2) != 3 || k.dim(3) != 3) {
    throw ShapeError(std::string(name) + ": expected [Cout,Cin,3,3] kernel, got " +
                     shape_str(k.shape()));
  }
}

}  // namespace

Var conv3x3(Var x, Var k) {
  Tape& t = tape_of(x, k, "conv3x3");
  const Tensor& tx = t.value(x);
  const Tensor& tk = t.value(k);
  check_conv_shapes("conv3x3", tx, tk, true);
  if (tk.dim(1) != tx.dim(0)) {
    throw ShapeError("conv3x3: input channels " + shape_str(tx.shape()) + " vs kernel " +
                     shape_str(tk.shape()));
  }
  const std::int64_t ci = tx.dim(0), h = tx.dim(1), w = tx.dim(2), co = tk.dim(0);
  Tensor out = Tensor::zeros({co, h, w});
  for (std::int64_t o = 0; o < co; ++o) {
    for (std::int64_t i = 0; i < ci; ++i) {
      const double* kk = tk.data() + ((o * ci + i) * 9);
      const double* xx = tx.data() + i * h * w;
      double* yy = out.data() + o * h * w;
      for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
          double acc = 0.0;
          for (std::int64_t dr = -1; dr <= 1; ++dr) {
            const std::int64_t rr = r + dr;
            if (rr < 0 || rr >= h) continue;
            for (std::int64_t dc = -1; dc <= 1; ++dc) {
              const std::int64_t cc = c + dc;
              if (cc < 0 || cc >= w) continue;
              acc += xx[rr * w + cc] * kk[(dr + 1) * 3 + (dc + 1)];
            }
          }
          yy[r * w + c] += acc;
        }
      }
    }
  }
  return t.emit(Op::kConv3x3, {x.id, k.id, -1}, std::move(out));
}

Var conv3x3_input_adj(Var g, Var k) {
  Tape& t = tape_of(g, k, "conv3x3_input_adj");
  const Tensor& tg = t.value(g);
  const Tensor& tk = t.value(k);
  check_conv_shapes("conv3x3_input_adj", tg, tk, true);
  if (tk.dim(0) != tg.dim(0)) {
    throw ShapeError("conv3x3_input_adj: channels " + shape_str(tg.shape()) + " vs kernel " +
                     shape_str(tk.shape()));
  }
  const std::int64_t co = tg.dim(0), h = tg.dim(1), w = tg.dim(2), ci = tk.dim(1);
  Tensor out = Tensor::zeros({ci, h, w});
  for (std::int64_t o = 0; o < co; ++o) {
    for (std::int64_t i = 0; i < ci; ++i) {
      const double* kk = tk.data() + ((o * ci + i) * 9);
      const double* gg = tg.data() + o * h * w;
      double* yy = out.data() + i * h * w;
      for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
          double acc = 0.0;
          for (std::int64_t dr = -1; dr <= 1; ++dr) {
            const std::int64_t rr = r - dr;
            if (rr < 0 || rr >= h) continue;
            for (std::int64_t dc = -1; dc <= 1; ++dc) {
              const std::int64_t cc = c - dc;
              if (cc < 0 || cc >= w) continue;
              acc += gg[rr * w + cc] * kk[(dr + 1) * 3 + (dc + 1)];
            }
          }
          yy[r * w + c] += acc;
        }
      }
    }
  }
  return t.emit(Op::kConv3x3InputAdj, {g.id, k.id, -1}, std::move(out));
}

Var conv3x3_kernel_adj(Var x, Var g) {
  Tape& t = tape_of(x, g, "conv3x3_kernel_adj");
  const Tensor& tx = t.value(x);
  const Tensor& tg = t.value(g);
  if (tx.rank() != 3 || tg.rank() != 3 || tx.dim(1) != tg.dim(1) || tx.dim(2) != tg.dim(2)) {
    throw ShapeError("conv3x3_kernel_adj: shapes " + shape_str(tx.shape()) + " and " +
                     shape_str(tg.shape()));
  }
  const std::int64_t ci = tx.dim(0), h = tx.dim(1), w = tx.dim(2), co = tg.dim(0);
  Tensor out = Tensor::zeros({co, ci, 3, 3});
  for (std::int64_t o = 0; o < co; ++o) {
    for (std::int64_t i = 0; i < ci; ++i) {
      const double* xx = tx.data() + i * h * w;
      const double* gg = tg.data() + o * h * w;
      double* kk = out.data() + ((o * ci + i) * 9);
      for (std::int64_t dr = -1; dr <= 1; ++dr) {
        for (std::int64_t dc = -1; dc <= 1; ++dc) {
          double acc = 0.0;
          for (std::int64_t r = std::max<std::int64_t>(0, -dr); r < std::min(h, h - dr); ++r) {
            for (std::int64_t c = std::max<std::int64_t>(0, -dc); c < std::min(w, w - dc); ++c) {
              acc += xx[(r + dr) * w + (c + dc)] * gg[r * w + c];
            }
          }
          kk[(dr + 1) * 3 + (dc + 1)] = acc;
        }
      }
    }
  }
  return t.emit(Op::kConv3x3KernelAdj, {x.id, g.id, -1}, std::move(out));
}

Var linsolve(Var a, Var b) {
  Tape& t = tape_of(a, b, "linsolve");
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != 2 || ta.dim(0) != ta.dim(1) || tb.rank() != 2 || tb.dim(0) != ta.dim(0)) {
    throw ShapeError("linsolve: shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(mat_view(ta));
  Eigen::MatrixXd sol = lu.solve(Eigen::MatrixXd(mat_view(tb)));
  if (!sol.allFinite()) throw SolveError("linsolve: singular system");
  Tensor out = Tensor::zeros({tb.dim(0), tb.dim(1)});
  mat_view(out) = sol;
  return t.emit(Op::kLinsolve, {a.id, b.id, -1}, std::move(out));
}

Var operator+(Var a, double b) { return add(a, a.tape->constant(b)); }
Var operator-(Var a, double b) { return sub(a, a.tape->constant(b)); }
Var operator*(Var a, double b) { return mul(a, a.tape->constant(b)); }
Var operator/(Var a, double b) { return div(a, a.tape->constant(b)); }
Var operator+(double a, Var b) { return add(b.tape->constant(a), b); }
Var operator-(double a, Var b) { return sub(b.tape->constant(a), b); }
Var operator*(double a, Var b) { return mul(b.tape->constant(a), b); }
Var operator-(Var a) { return mul(a, a.tape->constant(-1.0)); }

Var dot(Var a, Var b) { return sum(mul(a, b)); }

}  // namespace blopt
