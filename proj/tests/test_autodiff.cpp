#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "blopt/autodiff.hpp"
#include "blopt/rng.hpp"

using namespace blopt;

namespace {

using BuildFn = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval_scalar(const BuildFn& f, const std::vector<Tensor>& inputs) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(t.input(x));
  return t.value(f(t, vars)).value();
}

// Central-difference check of every gradient component of every input.
void check_fd(const char* label, const BuildFn& f, std::vector<Tensor> inputs,
              double eps = 1e-5) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(t.input(x));
  Var y = f(t, vars);
  auto grads = gradient_values(y, vars);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::int64_t k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs;
      auto minus = inputs;
      plus[i][k] += eps;
      minus[i][k] -= eps;
      const double fd = (eval_scalar(f, plus) - eval_scalar(f, minus)) / (2 * eps);
      const double got = grads[i][k];
      const double tol = 1e-6 + 1e-5 * std::abs(fd);
      INFO(label, " input ", i, " component ", k, " fd=", fd, " got=", got);
      CHECK(std::abs(got - fd) <= tol);
    }
  }
}

Tensor rand_tensor(CounterRng& rng, Shape s, double lo = -1, double hi = 1) {
  Tensor t = Tensor::zeros(std::move(s));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// weighted sum so every output component influences the scalar loss; the
// weights are a fixed function of the output shape so repeated evaluations
// (finite-difference probes) see the same scalar function
Var weigh(Tape& t, Var x) {
  CounterRng wrng(555, static_cast<std::uint64_t>(t.value(x).size()));
  Tensor w = rand_tensor(wrng, t.value(x).shape());
  return sum(mul(x, t.constant(std::move(w))));
}

}  // namespace

TEST_CASE("finite differences across the op set") {
  CounterRng rng(2024);
  auto w = [](Var x) { return weigh(*x.tape, x); };

  check_fd("add", [&](Tape&, const std::vector<Var>& v) { return w(add(v[0], v[1])); },
           {rand_tensor(rng, {2, 3}), rand_tensor(rng, {2, 3})});
  check_fd("add row bcast", [&](Tape&, const std::vector<Var>& v) { return w(add(v[0], v[1])); },
           {rand_tensor(rng, {2, 3}), rand_tensor(rng, {1, 3})});
  check_fd("add col bcast", [&](Tape&, const std::vector<Var>& v) { return w(add(v[0], v[1])); },
           {rand_tensor(rng, {2, 3}), rand_tensor(rng, {2, 1})});
  check_fd("sub scalar", [&](Tape&, const std::vector<Var>& v) { return w(sub(v[0], v[1])); },
           {rand_tensor(rng, {4}), rand_tensor(rng, {})});
  check_fd("mul", [&](Tape&, const std::vector<Var>& v) { return w(mul(v[0], v[1])); },
           {rand_tensor(rng, {3, 2}), rand_tensor(rng, {3, 2})});
  check_fd("div", [&](Tape&, const std::vector<Var>& v) { return w(div(v[0], v[1])); },
           {rand_tensor(rng, {5}), rand_tensor(rng, {5}, 0.5, 1.5)});
  check_fd("matmul", [&](Tape&, const std::vector<Var>& v) { return w(matmul(v[0], v[1])); },
           {rand_tensor(rng, {2, 3}), rand_tensor(rng, {3, 2})});
  check_fd("transpose", [&](Tape&, const std::vector<Var>& v) { return w(transpose(v[0])); },
           {rand_tensor(rng, {2, 3})});
  check_fd("reshape", [&](Tape&, const std::vector<Var>& v) { return w(reshape(v[0], {3, 2})); },
           {rand_tensor(rng, {2, 3})});
  check_fd("broadcast_to",
           [&](Tape&, const std::vector<Var>& v) { return w(broadcast_to(v[0], {4, 3})); },
           {rand_tensor(rng, {1, 3})});
  check_fd("reduce_to",
           [&](Tape&, const std::vector<Var>& v) { return w(reduce_to(v[0], {1, 3})); },
           {rand_tensor(rng, {4, 3})});
  check_fd("sum", [&](Tape&, const std::vector<Var>& v) { return sum(v[0]); },
           {rand_tensor(rng, {2, 2})});
  check_fd("mean", [&](Tape&, const std::vector<Var>& v) { return mean(v[0]); },
           {rand_tensor(rng, {5})});
  check_fd("max", [&](Tape&, const std::vector<Var>& v) { return reduce_max(v[0]); },
           {Tensor::from({4}, {0.1, 0.9, -0.3, 0.2})});
  check_fd("exp", [&](Tape&, const std::vector<Var>& v) { return w(exp(v[0])); },
           {rand_tensor(rng, {4})});
  check_fd("log", [&](Tape&, const std::vector<Var>& v) { return w(log(v[0])); },
           {rand_tensor(rng, {4}, 0.5, 1.5)});
  check_fd("sqrt", [&](Tape&, const std::vector<Var>& v) { return w(sqrt(v[0])); },
           {rand_tensor(rng, {4}, 0.5, 1.5)});
  check_fd("tanh", [&](Tape&, const std::vector<Var>& v) { return w(tanh(v[0])); },
           {rand_tensor(rng, {4})});
  check_fd("sigmoid", [&](Tape&, const std::vector<Var>& v) { return w(sigmoid(v[0])); },
           {rand_tensor(rng, {4})});
  check_fd("relu", [&](Tape&, const std::vector<Var>& v) { return w(relu(v[0])); },
           {Tensor::from({4}, {0.3, -0.4, 0.8, -0.9})});
  check_fd("softplus", [&](Tape&, const std::vector<Var>& v) { return w(softplus(v[0])); },
           {rand_tensor(rng, {4})});
  check_fd("softmax", [&](Tape&, const std::vector<Var>& v) { return w(softmax(v[0])); },
           {rand_tensor(rng, {2, 3})});
  check_fd("concat", [&](Tape&, const std::vector<Var>& v) { return w(concat(v[0], v[1], 0)); },
           {rand_tensor(rng, {2, 2}), rand_tensor(rng, {1, 2})});
  check_fd("slice",
           [&](Tape&, const std::vector<Var>& v) { return w(slice(v[0], {0, 1}, {2, 2})); },
           {rand_tensor(rng, {2, 3})});
  check_fd("slice_adjoint",
           [&](Tape&, const std::vector<Var>& v) { return w(slice_adjoint(v[0], {3, 3}, {1, 0})); },
           {rand_tensor(rng, {2, 3})});
  check_fd("select",
           [&](Tape& t, const std::vector<Var>& v) {
             Var mask = t.constant(Tensor::from({4}, {1, 0, 0, 1}));
             return w(select(mask, v[0], v[1]));
           },
           {rand_tensor(rng, {4}), rand_tensor(rng, {4})});
  check_fd("conv3x3", [&](Tape&, const std::vector<Var>& v) { return w(conv3x3(v[0], v[1])); },
           {rand_tensor(rng, {2, 4, 4}), rand_tensor(rng, {2, 2, 3, 3})});
  check_fd("conv3x3_input_adj",
           [&](Tape&, const std::vector<Var>& v) { return w(conv3x3_input_adj(v[0], v[1])); },
           {rand_tensor(rng, {2, 4, 4}), rand_tensor(rng, {2, 2, 3, 3})});
  check_fd("conv3x3_kernel_adj",
           [&](Tape&, const std::vector<Var>& v) { return w(conv3x3_kernel_adj(v[0], v[1])); },
           {rand_tensor(rng, {2, 4, 4}), rand_tensor(rng, {3, 4, 4})});
  check_fd("linsolve",
           [&](Tape& t, const std::vector<Var>& v) {
             // keep A well conditioned: A = M + 3I
             Var a = add(v[0], t.constant(Tensor::from({2, 2}, {3, 0, 0, 3})));
             return w(linsolve(a, v[1]));
           },
           {rand_tensor(rng, {2, 2}), rand_tensor(rng, {2, 2})});
}

TEST_CASE("gradient basics") {
  Tape t;
  Var x = t.input(Tensor::scalar(3.0));
  Var y = mul(x, x);
  CHECK(t.value(gradient(y, x)).value() == doctest::Approx(6.0).epsilon(1e-14));

  // sum of softmax is constant, so its gradient vanishes
  Var z = t.input(Tensor::from({3}, {0.3, -1.2, 2.0}));
  Var s = sum(softmax(z));
  Tensor gz = t.value(gradient(s, z));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(gz[i]) < 1e-14);

  // f = 0.5 x' diag(1,2) x at (1,1)
  Var q = t.input(Tensor::from({2}, {1, 1}));
  Var d = t.constant(Tensor::from({2}, {1, 2}));
  Var f = sum(mul(mul(q, q), d)) * 0.5;
  Tensor gq = t.value(gradient(f, q));
  CHECK(gq[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(gq[1] == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("gradient rejects non-scalar output, zeros unreachable") {
  Tape t;
  Var x = t.input(Tensor::from({2}, {1, 2}));
  CHECK_THROWS_AS(gradient(exp(x), x), ShapeError);

  Var other = t.input(Tensor::from({3}, {0, 0, 0}));
  Var y = sum(mul(x, x));
  Tensor g = t.value(gradient(y, other));
  CHECK(g.shape() == Shape{3});
  for (int i = 0; i < 3; ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("second derivative through recorded backward") {
  Tape t;
  Var x = t.input(Tensor::scalar(2.0));
  Var y = mul(mul(x, x), x);  // x^3
  Var g1 = gradient(y, x, /*record=*/true);
  CHECK(t.value(g1).value() == doctest::Approx(12.0).epsilon(1e-14));  // 3x^2
  Var g2 = gradient(g1, x, /*record=*/true);
  CHECK(t.value(g2).value() == doctest::Approx(12.0).epsilon(1e-14));  // 6x
  Var g3 = gradient(g2, x);
  CHECK(t.value(g3).value() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("hvp examples") {
  // f = 0.5 x' diag(1,2) x
  ScalarFn quad = [](Tape& t, Var x) {
    Var d = t.constant(Tensor::from({2}, {1, 2}));
    return sum(mul(mul(x, x), d)) * 0.5;
  };
  Tensor hv = hvp(quad, Tensor::from({2}, {5, -3}), Tensor::from({2}, {1, 1}));
  CHECK(hv[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(hv[1] == doctest::Approx(2.0).epsilon(1e-14));

  // identity Hessian
  ScalarFn half_norm = [](Tape&, Var x) { return sum(mul(x, x)) * 0.5; };
  Tensor v = Tensor::from({3}, {0.3, -0.7, 1.1});
  Tensor hv2 = hvp(half_norm, Tensor::from({3}, {9, 9, 9}), v);
  for (int i = 0; i < 3; ++i) CHECK(hv2[i] == doctest::Approx(v[i]).epsilon(1e-14));

  // f = ||x||^4 / 4 at (1,0): H = (x'x) I + 2 x x' = [[3,0],[0,1]]
  ScalarFn quartic = [](Tape&, Var x) {
    Var n = sum(mul(x, x));
    return mul(n, n) * 0.25;
  };
  Tensor hv3 = hvp(quartic, Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1}));
  CHECK(hv3[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(hv3[1] == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(hvp(half_norm, Tensor::from({3}, {1, 1, 1}), Tensor::from({2}, {1, 1})),
                  ShapeError);
}

namespace {

// random smooth scalar function of n variables
ScalarFn random_smooth(CounterRng& rng, std::int64_t n) {
  Tensor a = rand_tensor(rng, {n, n});
  Tensor b = rand_tensor(rng, {n, n});
  Tensor c = rand_tensor(rng, {n});
  return [a, b, c](Tape& t, Var x) {
    Var xa = reshape(x, {t.value(x).size(), 1});
    Var h1 = tanh(matmul(t.constant(a), xa));
    Var h2 = matmul(t.constant(b), xa);
    Var quad = sum(mul(h2, h2)) * 0.5;
    return add(add(sum(mul(h1, reshape(t.constant(c), {t.value(x).size(), 1}))), quad),
               sum(softplus(xa)));
  };
}

// explicit Hessian assembled row by row from the recorded first gradient
Eigen::MatrixXd explicit_hessian(const ScalarFn& f, const Tensor& x) {
  const std::int64_t n = x.size();
  Eigen::MatrixXd h(n, n);
  Tape t;
  Var xv = t.input(x);
  Var y = f(t, xv);
  Var g = gradient(y, xv, /*record=*/true);
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor e = Tensor::zeros(x.shape());
    e[i] = 1.0;
    Var gi = dot(g, t.constant(e));
    Tensor row = gradient_value(gi, xv);
    for (std::int64_t j = 0; j < n; ++j) h(i, j) = row[j];
  }
  return h;
}

}  // namespace

TEST_CASE("hvp symmetry") {
  CounterRng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    const std::int64_t n = 2 + rng.uniform_int(5);
    ScalarFn f = random_smooth(rng, n);
    Tensor x = rand_tensor(rng, {n});
    Tensor u = rand_tensor(rng, {n});
    Tensor v = rand_tensor(rng, {n});
    Tensor hv = hvp(f, x, v);
    Tensor hu = hvp(f, x, u);
    double uhv = 0, vhu = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      uhv += u[i] * hv[i];
      vhu += v[i] * hu[i];
    }
    CHECK(std::abs(uhv - vhu) <= 1e-8 * (1.0 + std::abs(uhv)));
  }
}

TEST_CASE("hvp matches explicit Hessian") {
  CounterRng rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    const std::int64_t n = 2 + rng.uniform_int(9);  // up to 10 variables
    ScalarFn f = random_smooth(rng, n);
    Tensor x = rand_tensor(rng, {n});
    Tensor v = rand_tensor(rng, {n});
    Eigen::MatrixXd h = explicit_hessian(f, x);
    Eigen::VectorXd hv_explicit = h * vec_view(v);
    Tensor hv = hvp(f, x, v);
    for (std::int64_t i = 0; i < n; ++i) {
      CHECK(std::abs(hv[i] - hv_explicit(i)) <= 1e-8);
    }
  }
}

TEST_CASE("identical seeds give bit-identical tapes and gradients") {
  auto run = [](std::vector<Tensor>* node_values, Tensor* grad) {
    CounterRng rng(31415);
    Tape t;
    Var x = t.input(rand_tensor(rng, {4}));
    Var a = t.constant(rand_tensor(rng, {4, 4}));
    Var y = sum(tanh(matmul(a, reshape(x, {4, 1}))));
    Var hv = hvp(y, x, t.constant(rand_tensor(rng, {4})), /*record=*/false);
    *grad = t.value(hv);
    node_values->clear();
    for (std::int32_t i = 0; i < t.size(); ++i) node_values->push_back(t.value(i));
  };
  std::vector<Tensor> nodes1, nodes2;
  Tensor g1, g2;
  run(&nodes1, &g1);
  run(&nodes2, &g2);
  REQUIRE(nodes1.size() == nodes2.size());
  for (std::size_t i = 0; i < nodes1.size(); ++i) {
    REQUIRE(nodes1[i].size() == nodes2[i].size());
    CHECK(std::memcmp(nodes1[i].data(), nodes2[i].data(),
                      sizeof(double) * static_cast<std::size_t>(nodes1[i].size())) == 0);
  }
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())) ==
        0);
}
