#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "blopt/autodiff.hpp"
#include "blopt/tape.hpp"

namespace blopt {

enum class ConstraintKind { kNone, kEquality, kInequality };

enum class LLSolverKind { kGradientDescent, kAdam, kGaussNewton, kLevenbergMarquardt, kClosedForm };

struct LLSolverConfig {
  LLSolverKind kind = LLSolverKind::kGradientDescent;
  int steps = 100;          // T >= 1
  double step_size = 1e-2;  // eta > 0
  double tolerance = 1e-8;  // convergence gate on ||dL/dphi||
};

enum class LinearSolverKind { kConjugateGradient, kGradientDescent };

enum class HypergradMethod { kUnrolled, kImplicit, kFirstOrder, kConstrainedImplicit };

struct HypergradConfig {
  HypergradMethod method = HypergradMethod::kImplicit;
  LinearSolverKind linear_solver = LinearSolverKind::kConjugateGradient;
  int max_iterations = 200;
  double residual_tol = 1e-10;
  double damping = 0.0;           // added to the Hessian when curvature fails
  double constraint_tol = 1e-6;   // activity test on xi
};

// Upper cost U(psi, phi), lower cost L(psi, phi), optional scalar constraint.
// Cost callbacks build tape expressions so both blocks stay differentiable.
struct BilevelProblem {
  std::function<Var(Tape&, Var psi, Var phi)> upper;
  std::function<Var(Tape&, Var psi, Var phi)> lower;
  std::function<Var(Tape&, Var psi, Var phi)> constraint;  // scalar xi, optional
  ConstraintKind constraint_kind = ConstraintKind::kNone;

  std::int64_t phi_dim = 0;
  // Phi_0(psi); defaults to zeros(phi_dim)
  std::function<Tensor(const Tensor& psi)> init_phi;
  // argmin_phi L as a differentiable expression, for the closed-form kind
  std::function<Var(Tape&, Var psi)> closed_form;

  LLSolverConfig ll;
};

struct LowerSolveResult {
  Tensor phi;
  std::vector<Tensor> trajectory;  // [phi_0 ... phi_T] when requested, else empty
  bool converged = false;
  double grad_norm = 0.0;
  int steps = 0;
};

// Runs the configured lower-level optimizer from Phi_0(psi). Non-finite cost
// aborts with the failing step index in the message.
LowerSolveResult solve_lower(const BilevelProblem& p, const Tensor& psi,
                             bool keep_trajectory = false);

// ---- linear solves on the lower-level Hessian -------------------------------

struct LinearSolveStats {
  int iterations = 0;
  double residual_rel = 0.0;
  bool converged = false;
  double damping = 0.0;  // damping actually applied after non-PD restarts
};

using ApplyFn = std::function<Tensor(const Tensor&)>;

// Conjugate gradient on H q = b with curvature guard: when d'Hd <= 0, restarts
// with H + lambda I, lambda = 1e-6 doubling until the system behaves PD.
LinearSolveStats cg_solve(const ApplyFn& apply, const Tensor& b, Tensor& x, double tol,
                          int max_iterations, double damping0 = 0.0);

// Plain gradient-descent fallback for the same system.
LinearSolveStats gd_linear_solve(const ApplyFn& apply, const Tensor& b, Tensor& x, double tol,
                                 int max_iterations, double damping0 = 0.0);

// ---- hypergradient routes ----------------------------------------------------

struct HypergradResult {
  Tensor grad;
  LinearSolveStats solve;  // stats of the H q = v solve (implicit routes)
};

// Differentiates U(psi, Phi_T(...Phi_0(psi))) through the whole recorded
// trajectory. Requires a differentiable lower solver (GD, Adam, closed-form).
Tensor hypergrad_unrolled(const BilevelProblem& p, const Tensor& psi);

// Implicit route at a stationary phi*: grad = dU/dpsi - q' H_phi_psi with
// H q = (dU/dphi*)' solved via Hessian-vector products only.
HypergradResult hypergrad_implicit(const BilevelProblem& p, const HypergradConfig& cfg,
                                   const Tensor& psi, const Tensor& phi_star);

struct FirstOrderResult {
  Tensor grad;
  // ||dU/dphi*|| * ||dphi*/dpsi||_F, present when requested (implicit route
  // must be available, i.e. the lower level is stationary)
  std::optional<double> error_estimate;
};

// Treats phi_T as a constant and returns dU/dpsi evaluated there.
FirstOrderResult hypergrad_first_order(const BilevelProblem& p, const HypergradConfig& cfg,
                                       const Tensor& psi, const Tensor& phi_t,
                                       bool with_error_estimate = false);

// Constrained lower level (scalar xi). Assembles the implicit derivative from
// the Lagrangian stationarity conditions; every Hessian inverse is realized by
// a linear solve. Inactive inequalities fall back to the unconstrained route.
HypergradResult hypergrad_constrained(const BilevelProblem& p, const HypergradConfig& cfg,
                                      const Tensor& psi, const Tensor& phi_star);

// ---- outer loop ---------------------------------------------------------------

enum class OuterOptKind { kGradientDescent, kAdam };

struct TrainConfig {
  HypergradConfig hypergrad;
  OuterOptKind outer = OuterOptKind::kGradientDescent;
  double outer_lr = 1e-2;
  int iterations = 100;
};

struct TrainResult {
  Tensor psi;
  std::vector<double> cost_history;  // U per iteration
  bool aborted = false;              // non-finite U encountered
};

TrainResult bilevel_train(const BilevelProblem& p, const TrainConfig& cfg, const Tensor& psi0);

// ---- self-test battery --------------------------------------------------------

struct SelftestEntry {
  std::string name;
  double rel_error = 0.0;    // computed vs analytic hypergradient
  int cg_iterations = 0;
  double tolerance = 0.0;
  bool pass = false;
};

// Analytic-oracle battery over random strongly convex quadratic bilevel
// problems plus the constrained fixtures; powering the selftest subcommand.
std::vector<SelftestEntry> run_selftest(std::uint64_t seed);

}  // namespace blopt
