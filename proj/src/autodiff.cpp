#include "blopt/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace blopt {

namespace {

Var zeros_like_input(Tape& t, const Tensor& ref) { return t.constant(Tensor::zeros(ref.shape())); }

// Row-wise sum as matmul with a ones column; rank-1 input reduces to a scalar.
Var row_sum(Var x) {
  Tape& t = *x.tape;
  const Tensor& tx = t.value(x);
  if (tx.rank() <= 1) return sum(x);
  Var ones_col = t.constant(Tensor::ones({tx.dim(1), 1}));
  return matmul(x, ones_col);  // [rows,1]
}

// Appends the vector-Jacobian products of `node_id` given upstream adjoint g,
// returning one contribution per differentiable input. All contributions are
// built from tape ops so a recorded backward pass stays differentiable.
void append_vjps(Tape& t, std::int32_t node_id, Var g,
                 std::vector<std::pair<std::int32_t, Var>>& out) {
  // copy everything out of the node up front: emitting VJP ops reallocates
  // the tape's node storage, so references into it must not be retained
  const Op op = t.node(node_id).op;
  const auto in = t.node(node_id).in;
  const std::vector<std::int64_t> attr = t.node(node_id).attr;
  Var self{&t, node_id};
  const auto in0 = in[0];
  const auto in1 = in[1];
  const auto in2 = in[2];
  auto shape_of = [&](std::int32_t id) -> Shape { return t.value(id).shape(); };

  switch (op) {
    case Op::kConst:
    case Op::kInput:
      break;
    case Op::kAdd:
      out.emplace_back(in0, reduce_to(g, shape_of(in0)));
      out.emplace_back(in1, reduce_to(g, shape_of(in1)));
      break;
    case Op::kSub:
      out.emplace_back(in0, reduce_to(g, shape_of(in0)));
      out.emplace_back(in1, reduce_to(-g, shape_of(in1)));
      break;
    case Op::kMul:
      out.emplace_back(in0, reduce_to(mul(g, Var{&t, in1}), shape_of(in0)));
      out.emplace_back(in1, reduce_to(mul(g, Var{&t, in0}), shape_of(in1)));
      break;
    case Op::kDiv: {
      Var b{&t, in1};
      Var ga = div(g, b);
      out.emplace_back(in0, reduce_to(ga, shape_of(in0)));
      out.emplace_back(in1, reduce_to(-mul(ga, self) , shape_of(in1)));
      break;
    }
    case Op::kMatmul:
      out.emplace_back(in0, matmul(g, transpose(Var{&t, in1})));
      out.emplace_back(in1, matmul(transpose(Var{&t, in0}), g));
      break;
    case Op::kTranspose:
      out.emplace_back(in0, transpose(g));
      break;
    case Op::kReshape:
      out.emplace_back(in0, reshape(g, shape_of(in0)));
      break;
    case Op::kBroadcast:
      out.emplace_back(in0, reduce_to(g, shape_of(in0)));
      break;
    case Op::kReduceTo:
      out.emplace_back(in0, broadcast_to(g, shape_of(in0)));
      break;
    case Op::kSum:
      out.emplace_back(in0, broadcast_to(g, shape_of(in0)));
      break;
    case Op::kMean: {
      const double inv = 1.0 / static_cast<double>(numel(shape_of(in0)));
      out.emplace_back(in0, broadcast_to(g * inv, shape_of(in0)));
      break;
    }
    case Op::kMaxReduce: {
      // indicator of the first maximal element, fixed at forward time
      const Tensor& x = t.value(in0);
      Tensor mask = Tensor::zeros(x.shape());
      std::int64_t arg = 0;
      for (std::int64_t i = 1; i < x.size(); ++i) {
        if (x[i] > x[arg]) arg = i;
      }
      mask[arg] = 1.0;
      out.emplace_back(in0, mul(broadcast_to(g, x.shape()), t.constant(std::move(mask))));
      break;
    }
    case Op::kExp:
      out.emplace_back(in0, mul(g, self));
      break;
    case Op::kLog:
      out.emplace_back(in0, div(g, Var{&t, in0}));
      break;
    case Op::kSqrt:
      out.emplace_back(in0, div(g, self * 2.0));
      break;
    case Op::kTanh:
      out.emplace_back(in0, mul(g, 1.0 - mul(self, self)));
      break;
    case Op::kSigmoid:
      out.emplace_back(in0, mul(g, mul(self, 1.0 - self)));
      break;
    case Op::kRelu: {
      const Tensor& x = t.value(in0);
      Tensor step = Tensor::zeros(x.shape());
      for (std::int64_t i = 0; i < x.size(); ++i) step[i] = x[i] > 0.0 ? 1.0 : 0.0;
      out.emplace_back(in0, mul(g, t.constant(std::move(step))));
      break;
    }
    case Op::kSoftplus:
      out.emplace_back(in0, mul(g, sigmoid(Var{&t, in0})));
      break;
    case Op::kSoftmax: {
      // y ⊙ (g − rowsum(g ⊙ y))
      Var gy = mul(g, self);
      Var s = row_sum(gy);
      out.emplace_back(in0, mul(self, sub(g, broadcast_to(s, t.value(in0).shape()))));
      break;
    }
    case Op::kConcat: {
      const std::int64_t axis = attr[0];
      const Shape sa = shape_of(in0);
      const Shape sb = shape_of(in1);
      std::vector<std::int64_t> za(sa.size(), 0);
      std::vector<std::int64_t> zb(sb.size(), 0);
      zb[static_cast<std::size_t>(axis)] = sa[static_cast<std::size_t>(axis)];
      out.emplace_back(in0, slice(g, za, std::vector<std::int64_t>(sa.begin(), sa.end())));
      out.emplace_back(in1, slice(g, zb, std::vector<std::int64_t>(sb.begin(), sb.end())));
      break;
    }
    case Op::kSlice: {
      const Shape full = shape_of(in0);
      std::vector<std::int64_t> starts(attr.begin(),
                                       attr.begin() + static_cast<std::ptrdiff_t>(full.size()));
      out.emplace_back(in0, slice_adjoint(g, full, starts));
      break;
    }
    case Op::kSliceAdjoint: {
      const Shape patch = shape_of(in0);
      std::vector<std::int64_t> starts(attr.begin(),
                                       attr.begin() + static_cast<std::ptrdiff_t>(patch.size()));
      out.emplace_back(in0, slice(g, starts, std::vector<std::int64_t>(patch.begin(), patch.end())));
      break;
    }
    case Op::kSelect: {
      Var mask{&t, in0};
      Var zero_a = zeros_like_input(t, t.value(in1));
      Var zero_b = zeros_like_input(t, t.value(in2));
      out.emplace_back(in1, select(mask, g, zero_a));
      out.emplace_back(in2, select(mask, zero_b, g));
      break;
    }
    case Op::kConv3x3:
      out.emplace_back(in0, conv3x3_input_adj(g, Var{&t, in1}));
      out.emplace_back(in1, conv3x3_kernel_adj(Var{&t, in0}, g));
      break;
    case Op::kConv3x3InputAdj:
      out.emplace_back(in0, conv3x3(g, Var{&t, in1}));
      out.emplace_back(in1, conv3x3_kernel_adj(g, Var{&t, in0}));
      break;
    case Op::kConv3x3KernelAdj:
      out.emplace_back(in0, conv3x3_input_adj(Var{&t, in1}, g));
      out.emplace_back(in1, conv3x3(Var{&t, in0}, g));
      break;
    case Op::kLinsolve: {
      // X = A⁻¹B:  gB = A⁻ᵀg, gA = −gB Xᵀ
      Var gb = linsolve(transpose(Var{&t, in0}), g);
      out.emplace_back(in1, gb);
      out.emplace_back(in0, -matmul(gb, transpose(self)));
      break;
    }
  }
}

std::vector<Var> build_backward(Tape& t, Var output, std::span<const Var> wrt) {
  if (t.value(output).size() != 1) {
    throw ShapeError("gradient: output has shape " + shape_str(t.value(output).shape()) +
                     ", expected a scalar");
  }
  // adjoint per node id; -1 = no adjoint yet
  std::vector<std::int32_t> adj(static_cast<std::size_t>(output.id) + 1, -1);
  Var seed = t.constant(Tensor::ones(t.value(output).shape()));
  adj[static_cast<std::size_t>(output.id)] = seed.id;

  std::vector<std::pair<std::int32_t, Var>> contribs;
  for (std::int32_t id = output.id; id >= 0; --id) {
    const std::int32_t a = adj[static_cast<std::size_t>(id)];
    if (a < 0) continue;
    contribs.clear();
    append_vjps(t, id, Var{&t, a}, contribs);
    for (auto& [input_id, v] : contribs) {
      std::int32_t& slot = adj[static_cast<std::size_t>(input_id)];
      slot = slot < 0 ? v.id : add(Var{&t, slot}, v).id;
    }
  }

  std::vector<Var> grads;
  grads.reserve(wrt.size());
  for (Var w : wrt) {
    if (!w.valid() || w.tape != &t) throw std::logic_error("gradient: wrt var from another tape");
    std::int32_t a = w.id <= output.id ? adj[static_cast<std::size_t>(w.id)] : -1;
    if (a < 0) {
      grads.push_back(t.constant(Tensor::zeros(t.value(w).shape())));
    } else {
      grads.push_back(Var{&t, a});
    }
  }
  return grads;
}

}  // namespace

std::vector<Var> gradient(Var output, std::span<const Var> wrt, bool record) {
  Tape& t = *output.tape;
  if (record) {
    const bool prev = t.recording_backward_;
    t.recording_backward_ = true;
    auto grads = build_backward(t, output, wrt);
    t.recording_backward_ = prev;
    return grads;
  }
  const std::int32_t mark = t.size();
  auto grads = build_backward(t, output, wrt);
  std::vector<Tensor> values;
  values.reserve(grads.size());
  for (Var g : grads) values.push_back(t.value(g));
  t.rollback(mark);
  std::vector<Var> result;
  result.reserve(values.size());
  for (auto& v : values) result.push_back(t.constant(std::move(v)));
  return result;
}

std::vector<Tensor> gradient_values(Var output, std::span<const Var> wrt) {
  Tape& t = *output.tape;
  const std::int32_t mark = t.size();
  auto grads = build_backward(t, output, wrt);
  std::vector<Tensor> values;
  values.reserve(grads.size());
  for (Var g : grads) values.push_back(t.value(g));
  t.rollback(mark);
  return values;
}

Tensor gradient_value(Var output, Var wrt) {
  const Var w[] = {wrt};
  return gradient_values(output, std::span<const Var>(w, 1))[0];
}

Var hvp(Var y, Var x, Var v, bool record) {
  Tape& t = *y.tape;
  if (!(t.value(x).shape() == t.value(v).shape())) {
    throw ShapeError("hvp: x shape " + shape_str(t.value(x).shape()) + " vs v shape " +
                     shape_str(t.value(v).shape()));
  }
  Var g = gradient(y, x, /*record=*/true);
  Var s = dot(g, v);
  return gradient(s, x, record);
}

Tensor hvp(const ScalarFn& f, const Tensor& x, const Tensor& v) {
  Tape t;
  Var xv = t.input(x);
  Var vv = t.constant(v);
  Var y = f(t, xv);
  return t.value(hvp(y, xv, vv, /*record=*/false));
}

}  // namespace blopt
