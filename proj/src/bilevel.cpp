#include "blopt/bilevel.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "blopt/rng.hpp"

namespace blopt {

namespace {

double norm2(const Tensor& t) { return vec_view(t).norm(); }

Tensor initial_phi(const BilevelProblem& p, const Tensor& psi) {
  if (p.init_phi) return p.init_phi(psi);
  if (p.phi_dim <= 0) throw SolveError("solve_lower: phi_dim not set and no initializer given");
  return Tensor::zeros({p.phi_dim});
}

// value and gradient of L at fixed numeric (psi, phi)
std::pair<double, Tensor> lower_value_grad(const BilevelProblem& p, const Tensor& psi,
                                           const Tensor& phi) {
  Tape t;
  Var psi_v = t.constant(psi);
  Var phi_v = t.input(phi);
  Var l = p.lower(t, psi_v, phi_v);
  double lv = t.value(l).value();
  Tensor g = gradient_value(l, phi_v);
  return {lv, std::move(g)};
}

}  // namespace

LowerSolveResult solve_lower(const BilevelProblem& p, const Tensor& psi, bool keep_trajectory) {
  LowerSolveResult res;
  if (p.ll.steps < 1) throw SolveError("solve_lower: steps must be >= 1");
  if (p.ll.step_size <= 0) throw SolveError("solve_lower: step size must be positive");

  if (p.ll.kind == LLSolverKind::kClosedForm) {
    if (!p.closed_form) throw SolveError("solve_lower: closed-form kind without a closed_form callback");
    Tape t;
    Var psi_v = t.constant(psi);
    res.phi = t.value(p.closed_form(t, psi_v));
    res.grad_norm = norm2(lower_value_grad(p, psi, res.phi).second);
    res.converged = true;
    res.steps = 0;
    if (keep_trajectory) res.trajectory = {res.phi};
    return res;
  }

  Tensor phi = initial_phi(p, psi);
  if (keep_trajectory) res.trajectory.push_back(phi);

  // Adam state
  Tensor m = Tensor::zeros(phi.shape());
  Tensor v = Tensor::zeros(phi.shape());
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  // LM damping state
  double lambda = p.ll.kind == LLSolverKind::kLevenbergMarquardt ? 1e-3 : 0.0;

  auto newton_like_step = [&](const Tensor& g, const Tensor& phi_now, double cost_now) -> Tensor {
    // direction from (H + lambda I) d = g using Hessian-vector products
    ApplyFn apply = [&](const Tensor& vv) -> Tensor {
      Tape t;
      Var psi_v = t.constant(psi);
      Var phi_v = t.input(phi_now);
      Var l = p.lower(t, psi_v, phi_v);
      Var gl = gradient(l, phi_v, /*record=*/true);
      Var s = dot(gl, t.constant(vv));
      return gradient_value(s, phi_v);
    };
    for (int attempt = 0; attempt < 12; ++attempt) {
      Tensor d = Tensor::zeros(phi_now.shape());
      cg_solve(apply, g, d, 1e-12, 4 * static_cast<int>(g.size()) + 20, lambda);
      Tensor cand = phi_now;
      vec_view(cand) -= vec_view(d);
      const double cand_cost = lower_value_grad(p, psi, cand).first;
      if (std::isfinite(cand_cost) &&
          (p.ll.kind == LLSolverKind::kGaussNewton || cand_cost <= cost_now)) {
        if (p.ll.kind == LLSolverKind::kLevenbergMarquardt) lambda = std::max(lambda * 0.5, 1e-12);
        return cand;
      }
      lambda = std::max(lambda * 4.0, 1e-6);
    }
    return phi_now;  // no acceptable step; caller sees stalled gradient
  };

  int step = 0;
  for (; step < p.ll.steps; ++step) {
    auto [cost, g] = lower_value_grad(p, psi, phi);
    if (!std::isfinite(cost)) {
      throw SolveError("solve_lower: non-finite cost at step " + std::to_string(step));
    }
    res.grad_norm = norm2(g);
    if (res.grad_norm <= p.ll.tolerance) {
      res.converged = true;
      break;
    }
    switch (p.ll.kind) {
      case LLSolverKind::kGradientDescent: {
        vec_view(phi) -= p.ll.step_size * vec_view(g);
        break;
      }
      case LLSolverKind::kAdam: {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
        for (std::int64_t k = 0; k < phi.size(); ++k) {
          m[k] = beta1 * m[k] + (1 - beta1) * g[k];
          v[k] = beta2 * v[k] + (1 - beta2) * g[k] * g[k];
          phi[k] -= p.ll.step_size * (m[k] / bc1) / (std::sqrt(v[k] / bc2 + 1e-18) + adam_eps);
        }
        break;
      }
      case LLSolverKind::kGaussNewton:
      case LLSolverKind::kLevenbergMarquardt: {
        phi = newton_like_step(g, phi, cost);
        break;
      }
      case LLSolverKind::kClosedForm:
        break;  // handled above
    }
    if (keep_trajectory) res.trajectory.push_back(phi);
  }
  if (!res.converged) {
    auto [cost, g] = lower_value_grad(p, psi, phi);
    if (!std::isfinite(cost)) {
      throw SolveError("solve_lower: non-finite cost at step " + std::to_string(step));
    }
    res.grad_norm = norm2(g);
    res.converged = res.grad_norm <= p.ll.tolerance;
  }
  res.phi = std::move(phi);
  res.steps = step;
  return res;
}

// ---- linear solvers -----------------------------------------------------------

LinearSolveStats cg_solve(const ApplyFn& apply, const Tensor& b, Tensor& x, double tol,
                          int max_iterations, double damping0) {
  LinearSolveStats stats;
  stats.damping = damping0;
  const double bnorm = norm2(b);
  x = Tensor::zeros(b.shape());
  if (bnorm == 0.0) {
    stats.converged = true;
    return stats;
  }
  for (int restart = 0; restart < 64; ++restart) {
    x = Tensor::zeros(b.shape());
    Tensor r = b;
    Tensor d = r;
    double rr = vec_view(r).squaredNorm();
    bool indefinite = false;
    int it = 0;
    for (; it < max_iterations; ++it) {
      Tensor hd = apply(d);
      if (stats.damping > 0.0) vec_view(hd) += stats.damping * vec_view(d);
      const double dhd = vec_view(d).dot(vec_view(hd));
      if (!(dhd > 0.0)) {
        indefinite = true;
        break;
      }
      const double alpha = rr / dhd;
      vec_view(x) += alpha * vec_view(d);
      vec_view(r) -= alpha * vec_view(hd);
      const double rr_new = vec_view(r).squaredNorm();
      if (std::sqrt(rr_new) <= tol * bnorm) {
        stats.iterations += it + 1;
        stats.residual_rel = std::sqrt(rr_new) / bnorm;
        stats.converged = true;
        return stats;
      }
      vec_view(d) = vec_view(r) + (rr_new / rr) * vec_view(d);
      rr = rr_new;
    }
    stats.iterations += it;
    if (indefinite) {
      stats.damping = stats.damping <= 0.0 ? 1e-6 : stats.damping * 2.0;
      continue;
    }
    stats.residual_rel = std::sqrt(rr) / bnorm;
    stats.converged = false;
    return stats;
  }
  throw SolveError("cg_solve: Hessian stayed indefinite after damping restarts");
}

LinearSolveStats gd_linear_solve(const ApplyFn& apply, const Tensor& b, Tensor& x, double tol,
                                 int max_iterations, double damping0) {
  LinearSolveStats stats;
  stats.damping = damping0;
  const double bnorm = norm2(b);
  x = Tensor::zeros(b.shape());
  if (bnorm == 0.0) {
    stats.converged = true;
    return stats;
  }
  // spectral-norm estimate by a few fixed power iterations
  Tensor pv = Tensor::ones(b.shape());
  vec_view(pv).normalize();
  double hnorm = 1.0;
  for (int i = 0; i < 12; ++i) {
    Tensor hv = apply(pv);
    if (stats.damping > 0.0) vec_view(hv) += stats.damping * vec_view(pv);
    hnorm = norm2(hv);
    if (hnorm <= 0.0) break;
    vec_view(pv) = vec_view(hv) / hnorm;
  }
  const double eta = 1.0 / std::max(hnorm * 1.05, 1e-12);
  for (int it = 0; it < max_iterations; ++it) {
    Tensor hx = apply(x);
    if (stats.damping > 0.0) vec_view(hx) += stats.damping * vec_view(x);
    Tensor r = b;
    vec_view(r) -= vec_view(hx);
    const double rn = norm2(r);
    stats.iterations = it;
    stats.residual_rel = rn / bnorm;
    if (rn <= tol * bnorm) {
      stats.converged = true;
      return stats;
    }
    vec_view(x) += eta * vec_view(r);
  }
  return stats;
}

// ---- hypergradient routes -------------------------------------------------------

Tensor hypergrad_unrolled(const BilevelProblem& p, const Tensor& psi) {
  Tape t;
  Var psi_v = t.input(psi);

  Var phi_v{nullptr, -1};
  if (p.ll.kind == LLSolverKind::kClosedForm) {
    if (!p.closed_form) throw SolveError("hypergrad_unrolled: closed-form kind without callback");
    phi_v = p.closed_form(t, psi_v);
  } else if (p.ll.kind == LLSolverKind::kGradientDescent || p.ll.kind == LLSolverKind::kAdam) {
    phi_v = t.constant(initial_phi(p, psi));
    Var m{nullptr, -1}, vv{nullptr, -1};
    if (p.ll.kind == LLSolverKind::kAdam) {
      m = t.constant(Tensor::zeros(t.value(phi_v).shape()));
      vv = t.constant(Tensor::zeros(t.value(phi_v).shape()));
    }
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    for (int step = 0; step < p.ll.steps; ++step) {
      Var l = p.lower(t, psi_v, phi_v);
      if (!std::isfinite(t.value(l).value())) {
        throw SolveError("hypergrad_unrolled: non-finite cost at step " + std::to_string(step));
      }
      Var g = gradient(l, phi_v, /*record=*/true);
      if (norm2(t.value(g)) <= p.ll.tolerance) break;
      if (p.ll.kind == LLSolverKind::kGradientDescent) {
        phi_v = sub(phi_v, g * p.ll.step_size);
      } else {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step + 1));
        m = add(m * beta1, g * (1.0 - beta1));
        vv = add(vv * beta2, mul(g, g) * (1.0 - beta2));
        Var denom = add(sqrt(add(vv * (1.0 / bc2), t.constant(1e-18))), t.constant(adam_eps));
        phi_v = sub(phi_v, div(m * (p.ll.step_size / bc1), denom));
      }
    }
  } else {
    throw SolveError(
        "hypergrad_unrolled: lower solver is not differentiable; use gradient-descent, adam, or "
        "closed-form");
  }

  Var u = p.upper(t, psi_v, phi_v);
  return gradient_value(u, psi_v);
}

namespace {

struct UpperGrads {
  Tensor du_dpsi;
  Tensor du_dphi;
  double u_value = 0.0;
};

UpperGrads upper_grads_at(const BilevelProblem& p, const Tensor& psi, const Tensor& phi) {
  Tape t;
  Var psi_v = t.input(psi);
  Var phi_v = t.input(phi);
  Var u = p.upper(t, psi_v, phi_v);
  const Var wrt[] = {psi_v, phi_v};
  auto g = gradient_values(u, wrt);
  return {std::move(g[0]), std::move(g[1]), t.value(u).value()};
}

LinearSolveStats solve_hessian_system(const HypergradConfig& cfg, const ApplyFn& apply,
                                      const Tensor& rhs, Tensor& out) {
  if (cfg.linear_solver == LinearSolverKind::kConjugateGradient) {
    return cg_solve(apply, rhs, out, cfg.residual_tol, cfg.max_iterations, cfg.damping);
  }
  return gd_linear_solve(apply, rhs, out, cfg.residual_tol, cfg.max_iterations, cfg.damping);
}

}  // namespace

HypergradResult hypergrad_implicit(const BilevelProblem& p, const HypergradConfig& cfg,
                                   const Tensor& psi, const Tensor& phi_star) {
  const double ll_grad = norm2(lower_value_grad(p, psi, phi_star).second);
  if (ll_grad > p.ll.tolerance) {
    throw SolveError("hypergrad_implicit: lower level not converged (||dL/dphi|| = " +
                     std::to_string(ll_grad) + ")");
  }

  UpperGrads ug = upper_grads_at(p, psi, phi_star);

  Tape t;
  Var psi_v = t.input(psi);
  Var phi_v = t.input(phi_star);
  Var l = p.lower(t, psi_v, phi_v);
  Var gl = gradient(l, phi_v, /*record=*/true);
  const std::int32_t mark = t.size();

  ApplyFn apply = [&](const Tensor& v) -> Tensor {
    Var s = dot(gl, t.constant(v));
    Tensor hv = gradient_value(s, phi_v);
    t.rollback(mark);
    return hv;
  };

  HypergradResult res;
  Tensor q;
  res.solve = solve_hessian_system(cfg, apply, ug.du_dphi, q);

  // q' H_{phi psi} as the psi-gradient of <dL/dphi, q>
  Var s2 = dot(gl, t.constant(q));
  Tensor cross = gradient_value(s2, psi_v);
  t.rollback(mark);

  res.grad = ug.du_dpsi;
  vec_view(res.grad) -= vec_view(cross);
  return res;
}

FirstOrderResult hypergrad_first_order(const BilevelProblem& p, const HypergradConfig& cfg,
                                       const Tensor& psi, const Tensor& phi_t,
                                       bool with_error_estimate) {
  FirstOrderResult res;
  UpperGrads ug = upper_grads_at(p, psi, phi_t);
  res.grad = std::move(ug.du_dpsi);

  if (!with_error_estimate) return res;

  // ||dphi*/dpsi||_F column by column: column_j = -H^{-1} H_{phi psi} e_j.
  // Only meaningful at a stationary phi (the implicit route's precondition).
  if (norm2(lower_value_grad(p, psi, phi_t).second) > p.ll.tolerance) {
    return res;  // estimate absent
  }

  Tape t;
  Var psi_v = t.input(psi);
  Var phi_v = t.input(phi_t);
  Var l = p.lower(t, psi_v, phi_v);
  Var gl_phi = gradient(l, phi_v, /*record=*/true);
  Var gl_psi = gradient(l, psi_v, /*record=*/true);
  const std::int32_t mark = t.size();

  ApplyFn apply = [&](const Tensor& v) -> Tensor {
    Var s = dot(gl_phi, t.constant(v));
    Tensor hv = gradient_value(s, phi_v);
    t.rollback(mark);
    return hv;
  };

  double fro_sq = 0.0;
  const std::int64_t npsi = psi.size();
  for (std::int64_t j = 0; j < npsi; ++j) {
    Tensor ej = Tensor::zeros(psi.shape());
    ej[j] = 1.0;
    // H_{phi psi} e_j = d/dphi <dL/dpsi, e_j>
    Var s = dot(gl_psi, t.constant(ej));
    Tensor col_rhs = gradient_value(s, phi_v);
    t.rollback(mark);
    Tensor col;
    solve_hessian_system(cfg, apply, col_rhs, col);
    fro_sq += vec_view(col).squaredNorm();
  }
  res.error_estimate = norm2(ug.du_dphi) * std::sqrt(fro_sq);
  return res;
}

HypergradResult hypergrad_constrained(const BilevelProblem& p, const HypergradConfig& cfg,
                                      const Tensor& psi, const Tensor& phi_star) {
  if (!p.constraint || p.constraint_kind == ConstraintKind::kNone) {
    throw SolveError("hypergrad_constrained: problem has no constraint");
  }

  // constraint value and first derivatives at (psi, phi*)
  Tensor c_phi, c_psi;
  double xi0 = 0.0;
  {
    Tape t;
    Var psi_v = t.input(psi);
    Var phi_v = t.input(phi_star);
    Var xi = p.constraint(t, psi_v, phi_v);
    xi0 = t.value(xi).value();
    const Var wrt[] = {phi_v, psi_v};
    auto g = gradient_values(xi, wrt);
    c_phi = std::move(g[0]);
    c_psi = std::move(g[1]);
  }

  if (p.constraint_kind == ConstraintKind::kInequality && xi0 < -cfg.constraint_tol) {
    return hypergrad_implicit(p, cfg, psi, phi_star);  // strictly feasible: inactive
  }
  if (std::abs(xi0) > cfg.constraint_tol) {
    throw SolveError("hypergrad_constrained: constraint violated at phi* (xi = " +
                     std::to_string(xi0) + ")");
  }

  // scalar multiplier by least squares: dL/dphi = lambda * dxi/dphi
  Tensor gl_phi0 = lower_value_grad(p, psi, phi_star).second;
  const double cc = vec_view(c_phi).squaredNorm();
  if (cc <= 1e-300) throw SolveError("hypergrad_constrained: dxi/dphi vanishes at phi*");
  const double lambda = vec_view(gl_phi0).dot(vec_view(c_phi)) / cc;

  {
    Tensor resid = gl_phi0;
    vec_view(resid) -= lambda * vec_view(c_phi);
    if (norm2(resid) > 1e-6 * (1.0 + norm2(gl_phi0))) {
      throw SolveError("hypergrad_constrained: phi* is not a KKT point (stationarity residual " +
                       std::to_string(norm2(resid)) + ")");
    }
  }

  if (p.constraint_kind == ConstraintKind::kInequality && lambda == 0.0) {
    return hypergrad_implicit(p, cfg, psi, phi_star);  // lambda = 0 branch: inactive
  }

  UpperGrads ug = upper_grads_at(p, psi, phi_star);

  // Lagrangian LG = L - lambda * xi with lambda held fixed
  Tape t;
  Var psi_v = t.input(psi);
  Var phi_v = t.input(phi_star);
  Var lg = sub(p.lower(t, psi_v, phi_v), p.constraint(t, psi_v, phi_v) * lambda);
  Var glg = gradient(lg, phi_v, /*record=*/true);
  const std::int32_t mark = t.size();

  ApplyFn apply = [&](const Tensor& v) -> Tensor {
    Var s = dot(glg, t.constant(v));
    Tensor hv = gradient_value(s, phi_v);
    t.rollback(mark);
    return hv;
  };
  auto cross_psi = [&](const Tensor& v) -> Tensor {
    // v' d2LG/(dphi dpsi)
    Var s = dot(glg, t.constant(v));
    Tensor w = gradient_value(s, psi_v);
    t.rollback(mark);
    return w;
  };

  HypergradResult res;
  Tensor a;  // H^{-1} dU/dphi*
  res.solve = solve_hessian_system(cfg, apply, ug.du_dphi, a);
  Tensor b;  // H^{-1} c_phi
  LinearSolveStats st2 = solve_hessian_system(cfg, apply, c_phi, b);
  res.solve.iterations += st2.iterations;
  res.solve.converged = res.solve.converged && st2.converged;
  res.solve.residual_rel = std::max(res.solve.residual_rel, st2.residual_rel);

  const double cb = vec_view(c_phi).dot(vec_view(b));  // c_phi' H^{-1} c_phi
  if (std::abs(cb) <= 1e-14 * (1.0 + cc)) {
    throw SolveError("hypergrad_constrained: [c_phi' H^{-1} c_phi] singular (value " +
                     std::to_string(cb) + ")");
  }

  Tensor wa = cross_psi(a);
  Tensor wb = cross_psi(b);

  // u' dphi*/dpsi = (u'b)/(c'b) * (b' LG_{phi psi} - c_psi) - a' LG_{phi psi}
  const double ub = vec_view(ug.du_dphi).dot(vec_view(b));
  Tensor tangent = wb;
  vec_view(tangent) -= vec_view(c_psi);
  vec_view(tangent) *= ub / cb;
  vec_view(tangent) -= vec_view(wa);

  res.grad = ug.du_dpsi;
  vec_view(res.grad) += vec_view(tangent);
  return res;
}

TrainResult bilevel_train(const BilevelProblem& p, const TrainConfig& cfg, const Tensor& psi0) {
  if (cfg.iterations < 1) throw SolveError("bilevel_train: iterations must be >= 1");
  TrainResult out;
  Tensor psi = psi0;

  Tensor m = Tensor::zeros(psi.shape());
  Tensor v = Tensor::zeros(psi.shape());
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor grad;
    Tensor phi;
    switch (cfg.hypergrad.method) {
      case HypergradMethod::kUnrolled: {
        grad = hypergrad_unrolled(p, psi);
        phi = solve_lower(p, psi).phi;
        break;
      }
      case HypergradMethod::kImplicit: {
        auto low = solve_lower(p, psi);
        phi = low.phi;
        grad = hypergrad_implicit(p, cfg.hypergrad, psi, phi).grad;
        break;
      }
      case HypergradMethod::kFirstOrder: {
        auto low = solve_lower(p, psi);
        phi = low.phi;
        grad = hypergrad_first_order(p, cfg.hypergrad, psi, phi).grad;
        break;
      }
      case HypergradMethod::kConstrainedImplicit: {
        auto low = solve_lower(p, psi);
        phi = low.phi;
        grad = hypergrad_constrained(p, cfg.hypergrad, psi, phi).grad;
        break;
      }
    }
    const double u = upper_grads_at(p, psi, phi).u_value;
    out.cost_history.push_back(u);
    if (!std::isfinite(u)) {
      out.aborted = true;
      break;
    }
    if (cfg.outer == OuterOptKind::kGradientDescent) {
      vec_view(psi) -= cfg.outer_lr * vec_view(grad);
    } else {
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(it + 1));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(it + 1));
      for (std::int64_t k = 0; k < psi.size(); ++k) {
        m[k] = beta1 * m[k] + (1 - beta1) * grad[k];
        v[k] = beta2 * v[k] + (1 - beta2) * grad[k] * grad[k];
        psi[k] -= cfg.outer_lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + adam_eps);
      }
    }
  }
  out.psi = std::move(psi);
  return out;
}

// ---- self-test battery ----------------------------------------------------------

namespace {

struct QuadraticFixture {
  Eigen::MatrixXd a;  // SPD lower Hessian
  Eigen::MatrixXd b;  // coupling
  Eigen::VectorXd c;
  Eigen::MatrixXd pm;  // upper phi-quadratic (symmetric)
  Eigen::MatrixXd rm;  // upper cross term
  Eigen::MatrixXd sm;  // upper psi-quadratic (symmetric)
  Eigen::VectorXd pv, qv;
  Eigen::VectorXd psi;

  // L = 0.5 phi'A phi + phi'(B psi + c)
  // U = 0.5 phi'P phi + psi'R phi + 0.5 psi'S psi + p'phi + q'psi
  Eigen::VectorXd phi_star() const { return -a.ldlt().solve(b * psi + c); }

  Eigen::VectorXd analytic_hypergrad() const {
    Eigen::VectorXd phi = phi_star();
    Eigen::MatrixXd dphi = -a.ldlt().solve(b);  // dphi*/dpsi
    Eigen::VectorXd du_dphi = pm * phi + rm.transpose() * psi + pv;
    Eigen::VectorXd du_dpsi = sm * psi + rm * phi + qv;
    return du_dpsi + dphi.transpose() * du_dphi;
  }

  BilevelProblem problem(double tol = 1e-9) const {
    BilevelProblem prob;
    const Tensor ta = tensor_from_mat(a);
    const Tensor tb = tensor_from_mat(b);
    const Tensor tc = tensor_from_vec(c);
    const Tensor tp = tensor_from_mat(pm);
    const Tensor tr = tensor_from_mat(rm);
    const Tensor ts = tensor_from_mat(sm);
    const Tensor tpv = tensor_from_vec(pv);
    const Tensor tqv = tensor_from_vec(qv);
    const std::int64_t n_phi = a.rows();
    const std::int64_t n_psi = sm.rows();
    prob.phi_dim = n_phi;
    prob.lower = [ta, tb, tc, n_phi, n_psi](Tape& t, Var psi_v, Var phi_v) {
      Var phi_col = reshape(phi_v, {n_phi, 1});
      Var psi_col = reshape(psi_v, {n_psi, 1});
      Var quad = sum(mul(phi_col, matmul(t.constant(ta), phi_col))) * 0.5;
      Var lin = sum(mul(phi_col, add(matmul(t.constant(tb), psi_col),
                                     reshape(t.constant(tc), {n_phi, 1}))));
      return add(quad, lin);
    };
    prob.upper = [tp, tr, ts, tpv, tqv, n_phi, n_psi](Tape& t, Var psi_v, Var phi_v) {
      Var phi_col = reshape(phi_v, {n_phi, 1});
      Var psi_col = reshape(psi_v, {n_psi, 1});
      Var term1 = sum(mul(phi_col, matmul(t.constant(tp), phi_col))) * 0.5;
      Var term2 = sum(mul(psi_col, matmul(t.constant(tr), phi_col)));
      Var term3 = sum(mul(psi_col, matmul(t.constant(ts), psi_col))) * 0.5;
      Var term4 = add(dot(phi_v, t.constant(tpv)), dot(psi_v, t.constant(tqv)));
      return add(add(term1, term2), add(term3, term4));
    };
    prob.ll = LLSolverConfig{LLSolverKind::kGradientDescent, 20000, 1e-2, tol};
    return prob;
  }
};

QuadraticFixture random_quadratic(CounterRng& rng, std::int64_t n_psi, std::int64_t n_phi) {
  QuadraticFixture f;
  auto rand_mat = [&rng](std::int64_t r, std::int64_t c) {
    Eigen::MatrixXd m(r, c);
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) m(i, j) = rng.uniform(-1, 1);
    return m;
  };
  Eigen::MatrixXd mroot = rand_mat(n_phi, n_phi);
  f.a = mroot.transpose() * mroot + 0.5 * Eigen::MatrixXd::Identity(n_phi, n_phi);
  f.b = rand_mat(n_phi, n_psi);
  f.c = rand_mat(n_phi, 1);
  Eigen::MatrixXd ph = rand_mat(n_phi, n_phi);
  f.pm = 0.5 * (ph + ph.transpose());
  f.rm = rand_mat(n_psi, n_phi);
  Eigen::MatrixXd sh = rand_mat(n_psi, n_psi);
  f.sm = 0.5 * (sh + sh.transpose());
  f.pv = rand_mat(n_phi, 1);
  f.qv = rand_mat(n_psi, 1);
  f.psi = rand_mat(n_psi, 1);
  return f;
}

}  // namespace

std::vector<SelftestEntry> run_selftest(std::uint64_t seed) {
  std::vector<SelftestEntry> report;
  CounterRng rng(seed);

  auto push = [&report](const std::string& name, const Eigen::VectorXd& analytic,
                        const Eigen::VectorXd& computed, int cg_iters, double tol) {
    SelftestEntry e;
    e.name = name;
    e.cg_iterations = cg_iters;
    e.tolerance = tol;
    e.rel_error = (analytic - computed).norm() / std::max(1e-30, analytic.norm());
    e.pass = e.rel_error <= tol;
    report.push_back(e);
  };

  HypergradConfig cfg;
  cfg.residual_tol = 1e-12;
  cfg.max_iterations = 500;

  for (int rep = 0; rep < 8; ++rep) {
    const std::int64_t n_psi = 2 + rng.uniform_int(6);
    const std::int64_t n_phi = 2 + rng.uniform_int(6);
    QuadraticFixture f = random_quadratic(rng, n_psi, n_phi);
    BilevelProblem prob = f.problem();
    Tensor psi = tensor_from_vec(f.psi);
    Tensor phi = tensor_from_vec(f.phi_star());
    Eigen::VectorXd analytic = f.analytic_hypergrad();

    auto imp = hypergrad_implicit(prob, cfg, psi, phi);
    push("quadratic/implicit/" + std::to_string(rep), analytic,
         Eigen::VectorXd(vec_view(imp.grad)), imp.solve.iterations, 1e-6);

    // unrolled on the same fixture, GD to tight residual
    BilevelProblem up = f.problem(1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(f.a);
    up.ll.step_size = 1.0 / es.eigenvalues().maxCoeff();
    up.ll.steps = 40000;
    Tensor ug = hypergrad_unrolled(up, psi);
    push("quadratic/unrolled/" + std::to_string(rep), analytic, Eigen::VectorXd(vec_view(ug)), 0,
         1e-5);
  }

  // constrained fixture: min 0.5||phi||^2 s.t. a'phi = psi, with U = ||phi||^2
  {
    BilevelProblem prob;
    prob.phi_dim = 2;
    prob.lower = [](Tape&, Var, Var phi_v) { return sum(mul(phi_v, phi_v)) * 0.5; };
    prob.upper = [](Tape&, Var, Var phi_v) { return sum(mul(phi_v, phi_v)); };
    prob.constraint = [](Tape& t, Var psi_v, Var phi_v) {
      Var a = t.constant(Tensor::from({2}, {1, 1}));
      return sub(dot(a, phi_v), sum(psi_v));
    };
    prob.constraint_kind = ConstraintKind::kEquality;
    prob.ll = LLSolverConfig{LLSolverKind::kClosedForm, 1, 1.0, 1e-9};
    const double psi0 = 0.8;
    Tensor psi = Tensor::from({1}, {psi0});
    Tensor phi = Tensor::from({2}, {psi0 / 2, psi0 / 2});
    auto got = hypergrad_constrained(prob, cfg, psi, phi);
    Eigen::VectorXd analytic(1);
    analytic << psi0;  // U(psi) = psi^2/2
    push("constrained/equality", analytic, Eigen::VectorXd(vec_view(got.grad)),
         got.solve.iterations, 1e-6);
  }

  return report;
}

}  // namespace blopt
