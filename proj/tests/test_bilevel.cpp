#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <Eigen/Dense>

#include "blopt/bilevel.hpp"
#include "blopt/rng.hpp"

using namespace blopt;

namespace {

// scalar 1-d bilevel problem: L = 0.5 (phi - a*psi)^2, U configurable
BilevelProblem scalar_problem(double a, std::function<Var(Tape&, Var, Var)> upper) {
  BilevelProblem p;
  p.phi_dim = 1;
  p.lower = [a](Tape&, Var psi, Var phi) {
    Var d = sub(phi, psi * a);
    return sum(mul(d, d)) * 0.5;
  };
  p.upper = std::move(upper);
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 100, 0.5, 1e-12};
  return p;
}

Var half_sq(Var x) { return sum(mul(x, x)) * 0.5; }

}  // namespace

TEST_CASE("solve_lower one exact gd step on a unit quadratic") {
  BilevelProblem p;
  p.phi_dim = 1;
  p.lower = [](Tape&, Var, Var phi) {
    Var d = phi - 3.0;
    return sum(mul(d, d)) * 0.5;
  };
  p.upper = [](Tape&, Var, Var phi) { return sum(phi); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 1, 1.0, 1e-12};
  auto res = solve_lower(p, Tensor::from({1}, {0.0}));
  CHECK(res.phi[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(res.converged);
}

TEST_CASE("solve_lower matches the geometric recursion") {
  auto p = scalar_problem(1.0, [](Tape&, Var, Var phi) { return half_sq(phi); });
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 20, 0.5, 0.0};
  auto res = solve_lower(p, Tensor::from({1}, {2.0}), /*keep_trajectory=*/true);
  // independent oracle: phi_{t+1} = phi_t - 0.5(phi_t - 2), phi_0 = 0
  double phi = 0.0;
  for (int t = 0; t < 20; ++t) phi = phi - 0.5 * (phi - 2.0);
  CHECK(phi == doctest::Approx(2.0 * (1.0 - std::pow(0.5, 20))).epsilon(1e-15));
  CHECK(res.phi[0] == doctest::Approx(phi).epsilon(1e-15));
  CHECK(res.trajectory.size() == 21);  // phi_0 .. phi_20
}

TEST_CASE("solve_lower closed form has trajectory length 1") {
  BilevelProblem p;
  p.phi_dim = 1;
  p.lower = [](Tape&, Var psi, Var phi) { return half_sq(sub(phi, psi)); };
  p.upper = [](Tape&, Var, Var phi) { return sum(phi); };
  p.closed_form = [](Tape&, Var psi) { return psi + 0.0; };
  p.ll = LLSolverConfig{LLSolverKind::kClosedForm, 1, 1.0, 1e-9};
  auto res = solve_lower(p, Tensor::from({1}, {7.0}), /*keep_trajectory=*/true);
  CHECK(res.trajectory.size() == 1);
  CHECK(res.phi[0] == 7.0);
  CHECK(res.converged);
}

TEST_CASE("solve_lower aborts with step index on non-finite cost") {
  BilevelProblem p;
  p.phi_dim = 1;
  p.lower = [](Tape&, Var, Var phi) { return exp(exp(mul(phi, phi))); };
  p.upper = [](Tape&, Var, Var phi) { return sum(phi); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 500, 10.0, 1e-15};
  try {
    solve_lower(p, Tensor::from({1}, {0.0}), false);
    // the gradient at phi=0 is 0 so it converges immediately; start away from 0
    p.init_phi = [](const Tensor&) { return Tensor::from({1}, {2.0}); };
    solve_lower(p, Tensor::from({1}, {0.0}), false);
    FAIL("expected SolveError");
  } catch (const SolveError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("solve_lower adam and newton kinds reach the optimum") {
  for (auto kind : {LLSolverKind::kAdam, LLSolverKind::kGaussNewton,
                    LLSolverKind::kLevenbergMarquardt}) {
    BilevelProblem p;
    p.phi_dim = 2;
    p.lower = [](Tape& t, Var, Var phi) {
      Var d = t.constant(Tensor::from({2}, {2.0, 5.0}));
      Var c = t.constant(Tensor::from({2}, {1.0, -2.0}));
      Var r = sub(phi, c);
      return sum(mul(mul(r, r), d)) * 0.5;
    };
    p.upper = [](Tape&, Var, Var phi) { return sum(phi); };
    p.ll = LLSolverConfig{kind, kind == LLSolverKind::kAdam ? 4000 : 10, 0.05, 1e-8};
    auto res = solve_lower(p, Tensor::from({1}, {0.0}));
    INFO("kind ", static_cast<int>(kind));
    CHECK(res.converged);
    CHECK(res.phi[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(res.phi[1] == doctest::Approx(-2.0).epsilon(1e-5));
  }
}

TEST_CASE("unrolled hypergradient: exact one-step fixture") {
  auto upper = [](Tape&, Var, Var phi) { return half_sq(phi); };
  auto p = scalar_problem(1.0, upper);
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 1, 1.0, 0.0};
  Tensor psi = Tensor::from({1}, {1.7});
  Tensor g1 = hypergrad_unrolled(p, psi);
  CHECK(g1[0] == doctest::Approx(1.7).epsilon(1e-14));

  p.ll.steps = 2;  // fixed point reached after one step
  p.ll.tolerance = 1e-15;
  Tensor g2 = hypergrad_unrolled(p, psi);
  CHECK(g2[0] == doctest::Approx(g1[0]).epsilon(1e-14));
}

TEST_CASE("unrolled hypergradient approaches 4 psi") {
  auto p = scalar_problem(2.0, [](Tape&, Var, Var phi) { return half_sq(phi); });
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 30, 0.5, 0.0};
  Tensor psi = Tensor::from({1}, {0.9});
  Tensor g = hypergrad_unrolled(p, psi);
  CHECK(g[0] == doctest::Approx(4.0 * 0.9).epsilon(1e-6));
}

TEST_CASE("implicit hypergradient on the scalar identity fixture") {
  auto p = scalar_problem(1.0, [](Tape&, Var, Var phi) { return half_sq(phi); });
  Tensor psi = Tensor::from({1}, {-2.5});
  Tensor phi = Tensor::from({1}, {-2.5});  // phi* = psi
  HypergradConfig cfg;
  auto res = hypergrad_implicit(p, cfg, psi, phi);
  CHECK(res.grad[0] == doctest::Approx(-2.5).epsilon(1e-10));
  CHECK(res.solve.converged);
}

TEST_CASE("implicit hypergradient with matrix coupling") {
  // L = 0.5 ||phi - W psi||^2, U = 0.5||phi||^2 -> grad = W'W psi
  Eigen::Matrix2d w;
  w << 1, 2, 0, 1;
  BilevelProblem p;
  p.phi_dim = 2;
  Tensor wt = tensor_from_mat(w);
  p.lower = [wt](Tape& t, Var psi, Var phi) {
    Var wpsi = matmul(t.constant(wt), reshape(psi, {2, 1}));
    return half_sq(sub(reshape(phi, {2, 1}), wpsi));
  };
  p.upper = [](Tape&, Var, Var phi) { return half_sq(phi); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 100, 0.5, 1e-10};

  Eigen::Vector2d psi(0.7, -1.2);
  Eigen::Vector2d phi_star = w * psi;
  Eigen::Vector2d expect = w.transpose() * w * psi;
  HypergradConfig cfg;
  auto res = hypergrad_implicit(p, cfg, tensor_from_vec(psi), tensor_from_vec(phi_star));
  CHECK(res.grad[0] == doctest::Approx(expect(0)).epsilon(1e-9));
  CHECK(res.grad[1] == doctest::Approx(expect(1)).epsilon(1e-9));
}

TEST_CASE("implicit hypergradient with diagonal lower Hessian") {
  // L = 0.5 phi'A phi - psi'phi, A = diag(2,4), U = sum(phi) -> ([0.5, 0.25])
  BilevelProblem p;
  p.phi_dim = 2;
  p.lower = [](Tape& t, Var psi, Var phi) {
    Var a = t.constant(Tensor::from({2}, {2.0, 4.0}));
    return sub(sum(mul(mul(phi, phi), a)) * 0.5, dot(psi, phi));
  };
  p.upper = [](Tape&, Var, Var phi) { return sum(phi); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 100, 0.25, 1e-10};
  Eigen::Vector2d psi(1.0, 1.0);
  Eigen::Vector2d phi_star(0.5, 0.25);  // A^{-1} psi by hand
  HypergradConfig cfg;
  auto res = hypergrad_implicit(p, cfg, tensor_from_vec(psi), tensor_from_vec(phi_star));
  CHECK(res.grad[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(res.grad[1] == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("implicit route rejects an unconverged lower level") {
  auto p = scalar_problem(1.0, [](Tape&, Var, Var phi) { return half_sq(phi); });
  HypergradConfig cfg;
  CHECK_THROWS_AS(
      hypergrad_implicit(p, cfg, Tensor::from({1}, {1.0}), Tensor::from({1}, {9.0})),
      SolveError);
}

TEST_CASE("cg exhaustion is flagged with its residual") {
  BilevelProblem p;
  p.phi_dim = 3;
  p.lower = [](Tape& t, Var psi, Var phi) {
    Var a = t.constant(Tensor::from({3}, {1.0, 2.0, 3.0}));
    return sub(sum(mul(mul(phi, phi), a)) * 0.5, dot(psi, phi));
  };
  p.upper = [](Tape&, Var, Var phi) { return half_sq(phi); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 100, 0.2, 1e-9};
  Tensor psi = Tensor::from({3}, {1.0, 1.0, 1.0});
  Tensor phi = Tensor::from({3}, {1.0, 0.5, 1.0 / 3.0});
  HypergradConfig cfg;
  cfg.max_iterations = 1;  // cannot reach 1e-10 on a 3-eigenvalue system
  auto res = hypergrad_implicit(p, cfg, psi, phi);
  CHECK_FALSE(res.solve.converged);
  CHECK(res.solve.residual_rel > cfg.residual_tol);
}

TEST_CASE("damping engages on an indefinite stationary point") {
  BilevelProblem p;
  p.phi_dim = 2;
  p.lower = [](Tape& t, Var, Var phi) {
    Var a = t.constant(Tensor::from({2}, {1.0, -0.5}));
    return sum(mul(mul(phi, phi), a)) * 0.5;
  };
  p.upper = [](Tape& t, Var, Var phi) { return dot(phi, t.constant(Tensor::from({2}, {0, 1}))); };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 1, 0.1, 1e-8};
  Tensor psi = Tensor::from({1}, {0.0});
  Tensor phi = Tensor::from({2}, {0.0, 0.0});  // saddle, gradient exactly zero
  HypergradConfig cfg;
  auto res = hypergrad_implicit(p, cfg, psi, phi);
  CHECK(res.solve.damping > 0.0);
}

TEST_CASE("first-order approximation and its error estimate") {
  HypergradConfig cfg;

  // U independent of phi: exact, zero error term
  auto p1 = scalar_problem(1.0, [](Tape&, Var psi, Var) { return half_sq(psi); });
  Tensor psi = Tensor::from({1}, {1.3});
  auto r1 = hypergrad_first_order(p1, cfg, psi, Tensor::from({1}, {1.3}), true);
  CHECK(r1.grad[0] == doctest::Approx(1.3).epsilon(1e-12));
  REQUIRE(r1.error_estimate.has_value());
  CHECK(*r1.error_estimate == doctest::Approx(0.0).epsilon(1e-12));

  // U = 0.5 phi^2 + 0.5 psi^2 at phi* = psi: estimate ~ |psi|, truth 2 psi
  auto p2 = scalar_problem(1.0, [](Tape&, Var psi, Var phi) {
    return add(half_sq(phi), half_sq(psi));
  });
  auto r2 = hypergrad_first_order(p2, cfg, psi, Tensor::from({1}, {1.3}), true);
  CHECK(r2.grad[0] == doctest::Approx(1.3).epsilon(1e-12));
  REQUIRE(r2.error_estimate.has_value());
  CHECK(*r2.error_estimate == doctest::Approx(1.3).epsilon(1e-8));
  auto exact = hypergrad_implicit(p2, cfg, psi, Tensor::from({1}, {1.3}));
  CHECK(exact.grad[0] == doctest::Approx(2.0 * 1.3).epsilon(1e-9));
}

namespace {

// min 0.5||phi||^2 s.t. a'phi = psi (scalar psi)
BilevelProblem norm_min_problem(ConstraintKind kind) {
  BilevelProblem p;
  p.phi_dim = 2;
  p.lower = [](Tape&, Var, Var phi) { return half_sq(phi); };
  p.upper = [](Tape&, Var, Var phi) { return sum(mul(phi, phi)); };
  p.constraint = [](Tape& t, Var psi, Var phi) {
    Var a = t.constant(Tensor::from({2}, {1, 1}));
    return sub(dot(a, phi), sum(psi));
  };
  p.constraint_kind = kind;
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 100, 0.5, 1e-9};
  return p;
}

}  // namespace

TEST_CASE("constrained hypergradient: equality KKT fixture") {
  auto p = norm_min_problem(ConstraintKind::kEquality);
  const double psi0 = 0.8;
  Tensor psi = Tensor::from({1}, {psi0});
  Tensor phi = Tensor::from({2}, {psi0 / 2, psi0 / 2});
  HypergradConfig cfg;

  // dphi*/dpsi = (0.5, 0.5): probe with U = phi_1 and U = phi_2
  for (int comp = 0; comp < 2; ++comp) {
    auto probe = p;
    probe.upper = [comp](Tape& t, Var, Var phi_v) {
      Tensor e = Tensor::zeros({2});
      e[comp] = 1.0;
      return dot(phi_v, t.constant(e));
    };
    auto res = hypergrad_constrained(probe, cfg, psi, phi);
    CHECK(res.grad[0] == doctest::Approx(0.5).epsilon(1e-9));
  }

  // U = ||phi*||^2 = psi^2/2 so the hypergradient is psi
  auto res = hypergrad_constrained(p, cfg, psi, phi);
  CHECK(res.grad[0] == doctest::Approx(psi0).epsilon(1e-9));
}

TEST_CASE("inactive inequality falls back to the unconstrained gradient") {
  // L = 0.5||phi - psi*(1,1)||^2, constraint a'phi <= 10 inactive at optimum
  BilevelProblem p;
  p.phi_dim = 2;
  p.lower = [](Tape& t, Var psi, Var phi) {
    Var target = mul(broadcast_to(reshape(psi, Shape{}), Shape{2}),
                     t.constant(Tensor::from({2}, {1, 1})));
    return half_sq(sub(phi, target));
  };
  p.upper = [](Tape&, Var, Var phi) { return half_sq(phi); };
  p.constraint = [](Tape& t, Var, Var phi) {
    Var a = t.constant(Tensor::from({2}, {1, 1}));
    return sub(dot(a, phi), t.constant(10.0));
  };
  p.constraint_kind = ConstraintKind::kInequality;
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 200, 0.5, 1e-10};

  Tensor psi = Tensor::from({1}, {1.5});
  Tensor phi = Tensor::from({2}, {1.5, 1.5});
  HypergradConfig cfg;
  auto con = hypergrad_constrained(p, cfg, psi, phi);
  auto unc = hypergrad_implicit(p, cfg, psi, phi);
  CHECK(con.grad[0] == doctest::Approx(unc.grad[0]).epsilon(1e-12));
}

TEST_CASE("constraint violation is rejected") {
  auto p = norm_min_problem(ConstraintKind::kEquality);
  HypergradConfig cfg;
  CHECK_THROWS_AS(
      hypergrad_constrained(p, cfg, Tensor::from({1}, {1.0}), Tensor::from({2}, {3.0, 3.0})),
      SolveError);
}

// ---- oracle properties ---------------------------------------------------------

namespace {

struct QuadOracle {
  Eigen::MatrixXd a, b, pm, rm, sm;
  Eigen::VectorXd c, pv, qv, psi;
};

QuadOracle random_quad(CounterRng& rng, int n_psi, int n_phi) {
  auto rnd = [&rng](int r, int cdim) {
    Eigen::MatrixXd m(r, cdim);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < cdim; ++j) m(i, j) = rng.uniform(-1, 1);
    return m;
  };
  QuadOracle f;
  Eigen::MatrixXd root = rnd(n_phi, n_phi);
  f.a = root.transpose() * root + 0.5 * Eigen::MatrixXd::Identity(n_phi, n_phi);
  f.b = rnd(n_phi, n_psi);
  f.c = rnd(n_phi, 1);
  Eigen::MatrixXd ph = rnd(n_phi, n_phi);
  f.pm = 0.5 * (ph + ph.transpose());
  f.rm = rnd(n_psi, n_phi);
  Eigen::MatrixXd sh = rnd(n_psi, n_psi);
  f.sm = 0.5 * (sh + sh.transpose());
  f.pv = rnd(n_phi, 1);
  f.qv = rnd(n_psi, 1);
  f.psi = rnd(n_psi, 1);
  return f;
}

BilevelProblem quad_problem(const QuadOracle& f) {
  BilevelProblem p;
  const std::int64_t n_phi = f.a.rows(), n_psi = f.sm.rows();
  Tensor ta = tensor_from_mat(f.a), tb = tensor_from_mat(f.b), tc = tensor_from_vec(f.c);
  Tensor tp = tensor_from_mat(f.pm), tr = tensor_from_mat(f.rm), ts = tensor_from_mat(f.sm);
  Tensor tpv = tensor_from_vec(f.pv), tqv = tensor_from_vec(f.qv);
  p.phi_dim = n_phi;
  p.lower = [ta, tb, tc, n_phi, n_psi](Tape& t, Var psi, Var phi) {
    Var pc = reshape(phi, {n_phi, 1});
    Var sc = reshape(psi, {n_psi, 1});
    return add(sum(mul(pc, matmul(t.constant(ta), pc))) * 0.5,
               sum(mul(pc, add(matmul(t.constant(tb), sc), reshape(t.constant(tc), {n_phi, 1})))));
  };
  p.upper = [tp, tr, ts, tpv, tqv, n_phi, n_psi](Tape& t, Var psi, Var phi) {
    Var pc = reshape(phi, {n_phi, 1});
    Var sc = reshape(psi, {n_psi, 1});
    return add(add(sum(mul(pc, matmul(t.constant(tp), pc))) * 0.5,
                   sum(mul(sc, matmul(t.constant(tr), pc)))),
               add(sum(mul(sc, matmul(t.constant(ts), sc))) * 0.5,
                   add(dot(phi, t.constant(tpv)), dot(psi, t.constant(tqv)))));
  };
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 60000, 1e-2, 1e-9};
  return p;
}

Eigen::VectorXd analytic_hypergrad(const QuadOracle& f) {
  Eigen::VectorXd phi = -f.a.ldlt().solve(f.b * f.psi + f.c);
  Eigen::MatrixXd dphi = -f.a.ldlt().solve(f.b);
  Eigen::VectorXd du_dphi = f.pm * phi + f.rm.transpose() * f.psi + f.pv;
  Eigen::VectorXd du_dpsi = f.sm * f.psi + f.rm * phi + f.qv;
  return du_dpsi + dphi.transpose() * du_dphi;
}

double upper_value(const QuadOracle& f, const Eigen::VectorXd& psi, const Eigen::VectorXd& phi) {
  return 0.5 * phi.dot(f.pm * phi) + psi.dot(f.rm * phi) + 0.5 * psi.dot(f.sm * psi) +
         f.pv.dot(phi) + f.qv.dot(psi);
}

}  // namespace

TEST_CASE("oracle equivalence on random strongly convex quadratics") {
  CounterRng rng(501);
  HypergradConfig cfg;
  cfg.residual_tol = 1e-12;
  cfg.max_iterations = 400;
  for (int rep = 0; rep < 10; ++rep) {
    const int n_psi = 2 + static_cast<int>(rng.uniform_int(7));
    const int n_phi = 2 + static_cast<int>(rng.uniform_int(7));
    QuadOracle f = random_quad(rng, n_psi, n_phi);
    Eigen::VectorXd analytic = analytic_hypergrad(f);
    Eigen::VectorXd phi_star = -f.a.ldlt().solve(f.b * f.psi + f.c);

    BilevelProblem p = quad_problem(f);
    auto imp = hypergrad_implicit(p, cfg, tensor_from_vec(f.psi), tensor_from_vec(phi_star));
    double rel = (Eigen::VectorXd(vec_view(imp.grad)) - analytic).norm() / analytic.norm();
    CHECK(rel <= 1e-6);

    // unrolled approaches the analytic value monotonically in T
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(f.a);
    p.ll.step_size = 1.0 / es.eigenvalues().maxCoeff();
    p.ll.tolerance = 1e-8;
    double last_gap = 1e100;
    for (int steps : {40, 160, 640, 20000}) {
      p.ll.steps = steps;
      Tensor ug = hypergrad_unrolled(p, tensor_from_vec(f.psi));
      double gap = (Eigen::VectorXd(vec_view(ug)) - analytic).norm() / analytic.norm();
      CHECK(gap <= last_gap * (1.0 + 1e-9));
      last_gap = gap;
    }
    CHECK(last_gap <= 1e-5);
  }
}

TEST_CASE("implicit route matches finite differences of the value function") {
  CounterRng rng(733);
  HypergradConfig cfg;
  cfg.residual_tol = 1e-12;
  cfg.max_iterations = 400;
  for (int rep = 0; rep < 6; ++rep) {
    const int n_psi = 2 + static_cast<int>(rng.uniform_int(7));
    const int n_phi = 2 + static_cast<int>(rng.uniform_int(7));
    QuadOracle f = random_quad(rng, n_psi, n_phi);
    Eigen::VectorXd phi_star = -f.a.ldlt().solve(f.b * f.psi + f.c);
    BilevelProblem p = quad_problem(f);
    auto imp = hypergrad_implicit(p, cfg, tensor_from_vec(f.psi), tensor_from_vec(phi_star));

    const double eps = 1e-6;
    Eigen::VectorXd fd(n_psi);
    for (int j = 0; j < n_psi; ++j) {
      Eigen::VectorXd pp = f.psi, pmns = f.psi;
      pp(j) += eps;
      pmns(j) -= eps;
      // value function re-solved at each probe (exact lower solve)
      Eigen::VectorXd phi_p = -f.a.ldlt().solve(f.b * pp + f.c);
      Eigen::VectorXd phi_m = -f.a.ldlt().solve(f.b * pmns + f.c);
      fd(j) = (upper_value(f, pp, phi_p) - upper_value(f, pmns, phi_m)) / (2 * eps);
    }
    double rel = (Eigen::VectorXd(vec_view(imp.grad)) - fd).norm() / fd.norm();
    CHECK(rel <= 1e-4);
  }
}

TEST_CASE("constrained route matches finite differences on equality QPs") {
  CounterRng rng(977);
  HypergradConfig cfg;
  cfg.residual_tol = 1e-12;
  cfg.max_iterations = 400;
  for (int rep = 0; rep < 6; ++rep) {
    const int n_psi = 1 + static_cast<int>(rng.uniform_int(3));
    const int n_phi = 2 + static_cast<int>(rng.uniform_int(5));  // <= 6
    QuadOracle f = random_quad(rng, n_psi, n_phi);
    Eigen::VectorXd avec(n_phi), dvec(n_psi);
    for (int i = 0; i < n_phi; ++i) avec(i) = rng.uniform(0.5, 1.5);
    for (int i = 0; i < n_psi; ++i) dvec(i) = rng.uniform(-1, 1);
    const double e0 = rng.uniform(-0.5, 0.5);

    // KKT solve of: min 0.5 phi'A phi + phi'(B psi + c)   s.t. a'phi = d'psi + e
    auto kkt_solve = [&](const Eigen::VectorXd& psi) {
      Eigen::MatrixXd k(n_phi + 1, n_phi + 1);
      k.setZero();
      k.topLeftCorner(n_phi, n_phi) = f.a;
      k.topRightCorner(n_phi, 1) = -avec;
      k.bottomLeftCorner(1, n_phi) = avec.transpose();
      Eigen::VectorXd rhs(n_phi + 1);
      rhs.head(n_phi) = -(f.b * psi + f.c);
      rhs(n_phi) = dvec.dot(psi) + e0;
      Eigen::VectorXd sol = k.lu().solve(rhs);
      return Eigen::VectorXd(sol.head(n_phi));
    };

    BilevelProblem p = quad_problem(f);
    Tensor ta = tensor_from_vec(avec), td = tensor_from_vec(dvec);
    p.constraint = [ta, td, e0](Tape& t, Var psi, Var phi) {
      return sub(dot(t.constant(ta), phi), add(dot(t.constant(td), psi), t.constant(e0)));
    };
    p.constraint_kind = ConstraintKind::kEquality;

    Eigen::VectorXd phi_star = kkt_solve(f.psi);
    auto got = hypergrad_constrained(p, cfg, tensor_from_vec(f.psi), tensor_from_vec(phi_star));

    const double eps = 1e-6;
    Eigen::VectorXd fd(n_psi);
    for (int j = 0; j < n_psi; ++j) {
      Eigen::VectorXd pp = f.psi, pmns = f.psi;
      pp(j) += eps;
      pmns(j) -= eps;
      fd(j) = (upper_value(f, pp, kkt_solve(pp)) - upper_value(f, pmns, kkt_solve(pmns))) /
              (2 * eps);
    }
    double rel = (Eigen::VectorXd(vec_view(got.grad)) - fd).norm() / fd.norm();
    CHECK(rel <= 1e-4);
  }
}

TEST_CASE("cg contract: residual within tolerance unless flagged") {
  CounterRng rng(314);
  for (int rep = 0; rep < 8; ++rep) {
    const int n = 2 + static_cast<int>(rng.uniform_int(9));
    Eigen::MatrixXd root(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) root(i, j) = rng.uniform(-1, 1);
    Eigen::MatrixXd h = root.transpose() * root + 0.1 * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd b(n);
    for (int i = 0; i < n; ++i) b(i) = rng.uniform(-1, 1);

    ApplyFn apply = [&h](const Tensor& v) {
      Eigen::VectorXd hv = h * Eigen::VectorXd(vec_view(v));
      return tensor_from_vec(hv);
    };
    Tensor x;
    const double tol = 1e-10;
    auto st = cg_solve(apply, tensor_from_vec(b), x, tol, 10 * n);
    REQUIRE(st.converged);
    Eigen::VectorXd resid = h * Eigen::VectorXd(vec_view(x)) - b;
    CHECK(resid.norm() <= tol * b.norm() * (1 + 1e-12));
  }
}

TEST_CASE("gd linear solver agrees with cg on an spd system") {
  Eigen::Matrix3d h;
  h << 4, 1, 0, 1, 3, 0.5, 0, 0.5, 2;
  Eigen::Vector3d b(1, -2, 0.5);
  ApplyFn apply = [&h](const Tensor& v) {
    return tensor_from_vec(Eigen::Vector3d(h * Eigen::Vector3d(vec_view(v))));
  };
  Tensor xc, xg;
  cg_solve(apply, tensor_from_vec(b), xc, 1e-12, 50);
  auto st = gd_linear_solve(apply, tensor_from_vec(b), xg, 1e-10, 20000);
  REQUIRE(st.converged);
  for (int i = 0; i < 3; ++i) CHECK(xg[i] == doctest::Approx(xc[i]).epsilon(1e-7));
}

TEST_CASE("outer training drives psi to the target") {
  // L = 0.5(phi-psi)^2, U = 0.5(phi*-1)^2: value function 0.5(psi-1)^2
  auto p = scalar_problem(1.0, [](Tape&, Var, Var phi) { return half_sq(phi - 1.0); });
  p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 200, 0.5, 1e-10};
  TrainConfig cfg;
  cfg.hypergrad.method = HypergradMethod::kImplicit;
  cfg.outer_lr = 0.5;
  cfg.iterations = 40;
  auto res = bilevel_train(p, cfg, Tensor::from({1}, {0.0}));
  CHECK(std::abs(res.psi[0] - 1.0) <= 1e-4);
  CHECK_FALSE(res.aborted);
  CHECK(res.cost_history.size() == 40);

  // already at the minimum: psi unchanged
  auto res2 = bilevel_train(p, cfg, Tensor::from({1}, {1.0}));
  CHECK(std::abs(res2.psi[0] - 1.0) <= 1e-9);
}

TEST_CASE("unrolled and implicit training trajectories coincide on a quadratic") {
  auto make = [](HypergradMethod m) {
    auto p = scalar_problem(1.0, [](Tape&, Var, Var phi) { return half_sq(phi - 1.0); });
    p.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 1, 1.0, 0.0};  // exact in one step
    TrainConfig cfg;
    cfg.hypergrad.method = m;
    cfg.outer_lr = 0.3;
    cfg.iterations = 25;
    return std::pair{p, cfg};
  };
  auto [p1, c1] = make(HypergradMethod::kUnrolled);
  auto [p2, c2] = make(HypergradMethod::kImplicit);
  // tolerance gate for the implicit route: phi* = psi exactly after one step
  p2.ll.tolerance = 1e-9;
  Tensor psi1 = Tensor::from({1}, {-0.7});
  Tensor psi2 = psi1;
  for (int it = 0; it < 25; ++it) {
    auto r1 = bilevel_train(p1, {c1.hypergrad, c1.outer, c1.outer_lr, 1}, psi1);
    auto r2 = bilevel_train(p2, {c2.hypergrad, c2.outer, c2.outer_lr, 1}, psi2);
    psi1 = r1.psi;
    psi2 = r2.psi;
    CHECK(std::abs(psi1[0] - psi2[0]) <= 1e-6);
  }
}

TEST_CASE("selftest battery passes") {
  auto report = run_selftest(12345);
  CHECK(report.size() >= 10);
  for (const auto& e : report) {
    INFO(e.name, " rel_error=", e.rel_error);
    CHECK(e.pass);
  }
}
