#pragma once

#include <functional>
#include <span>
#include <vector>

#include "blopt/tape.hpp"

namespace blopt {

// Reverse-mode gradient of a scalar output with respect to each wrt var.
//
// The backward pass is always built out of tape ops, so its values follow the
// exact same computation in both modes:
//   record=true   the backward nodes stay on the tape and the returned vars
//                 may be differentiated again (second order);
//   record=false  the backward nodes are evaluated, the tape is rolled back,
//                 and the results are re-emitted as constants.
//
// Unreachable wrt vars get zero gradients. Non-scalar outputs are rejected.
std::vector<Var> gradient(Var output, std::span<const Var> wrt, bool record = false);

inline Var gradient(Var output, Var wrt, bool record = false) {
  const Var w[] = {wrt};
  return gradient(output, std::span<const Var>(w, 1), record)[0];
}

// Gradient values copied off the tape (tape restored to its prior length).
std::vector<Tensor> gradient_values(Var output, std::span<const Var> wrt);
Tensor gradient_value(Var output, Var wrt);

using ScalarFn = std::function<Var(Tape&, Var)>;

// Hessian-vector product H(x)·v for scalar f, computed as the gradient of
// <grad f, v> without materializing H.
Tensor hvp(const ScalarFn& f, const Tensor& x, const Tensor& v);

// Tape-level variant: y must be scalar and depend on x.
Var hvp(Var y, Var x, Var v, bool record = false);

}  // namespace blopt
