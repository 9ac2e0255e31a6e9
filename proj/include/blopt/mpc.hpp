#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "blopt/autodiff.hpp"
#include "blopt/params.hpp"
#include "blopt/rng.hpp"
#include "blopt/tape.hpp"

namespace blopt {

// Linear plant x+ = A x + B(p) u with the inertia-like parameter entering as
// B(p) = B0 / p.
struct LinearPlant {
  int n = 2;
  int m = 1;
  Tensor a;                 // [n,n]
  Tensor b0;                // [n,m]
  double sigma_w = 0.0;       // process noise std (attitude channel)
  double sigma_v = 8.73e-2;   // measurement noise std, attitude channel
  double sigma_v_rate = 5e-3; // measurement noise std, rate channel (gyro-grade)
  double sigma_u = 1e-4;      // control input noise std
};

// 2-state (angle, rate) attitude model discretized at dt.
LinearPlant attitude_plant(double dt);

// Finite-horizon tracking problem. State weights apply to x_1..x_T, control
// weights to u_0..u_{T-1}; per-step weights, linear terms and references.
struct MpcProblem {
  int horizon = 1;
  std::vector<Tensor> qx;      // T entries, [n,n] PSD
  std::vector<Tensor> ru;      // T entries, [m,m] PD
  std::vector<Tensor> qx_lin;  // T entries, [n]
  std::vector<Tensor> ru_lin;  // T entries, [m]
  std::vector<Tensor> x_ref;   // T entries, [n]
  std::vector<Tensor> u_ref;   // T entries, [m]
  Tensor x0;                   // [n]

  static MpcProblem constant(int horizon, Tensor qx, Tensor ru, Tensor x0);
};

// Tape-level LQR solution: backward Riccati recursion followed by a forward
// rollout, everything expressed in ops so any scalar of the trajectory can be
// differentiated with respect to p, x0 or the weights.
struct LqrVars {
  std::vector<Var> x;          // x_0..x_T, [n,1]
  std::vector<Var> u;          // u_0..u_{T-1}, [m,1]
  Var cost;                    // scalar objective value
  std::vector<Tensor> gains;   // feedback K_k, [m,n] numeric
  std::vector<Tensor> riccati; // quadratic value matrices, outermost first
};

LqrVars lqr_solve_expr(Tape& t, const LinearPlant& plant, const MpcProblem& prob, Var p, Var x0);

struct LqrSolution {
  std::vector<Tensor> x;
  std::vector<Tensor> u;
  double cost = 0.0;
  std::vector<Tensor> gains;
  std::vector<Tensor> riccati;
};

LqrSolution lqr_solve(const LinearPlant& plant, const MpcProblem& prob, double p);

struct LqrGradients {
  double dp = 0.0;
  Tensor dx0;
  std::vector<Tensor> dqx;  // per-step weight gradients
  std::vector<Tensor> dru;
};

// Gradients of an arbitrary scalar of the optimal trajectory. The scalar is
// built from the returned LqrVars on the same tape.
LqrGradients lqr_backward(const LinearPlant& plant, const MpcProblem& prob, double p,
                          const std::function<Var(Tape&, const LqrVars&)>& scalar_of_traj);

// One plant step under the true parameter: x+ = A x + B(u + eta_u) + w,
// measurement y = x+ + v.
struct SimStep {
  Tensor next_state;
  Tensor measurement;
};
SimStep simulate_step(const LinearPlant& plant, double p_true, const Tensor& state,
                      const Tensor& control, CounterRng& rng);

// ST / RMSE / SSE of a scalar tracked channel. The steady value is the mean of
// the trailing 10% of samples; ST is reported in sample indices.
struct ControlMetrics {
  double settling_time = 0.0;
  double rmse = 0.0;
  double sse = 0.0;
  bool settled = true;
};
ControlMetrics control_metrics(const std::vector<double>& trajectory,
                               const std::vector<double>& reference, double band);

// Residual window denoiser: estimate = latest measurement + mlp(window).
struct DenoiserNet {
  int window = 4;
  int state_dim = 2;
  int hidden = 16;
  ParameterStore params;

  // first layer randomly initialized so gradients reach it through the
  // zero-initialized output layer; the initial correction is exactly zero
  static DenoiserNet make(int window, int state_dim, int hidden, std::uint64_t seed = 0);
  // estimate expression given bound parameter vars and the flattened window
  Var forward(Tape& t, const std::vector<Var>& param_vars, const Tensor& window_flat,
              const Tensor& latest_measurement) const;
};

struct MpcTrainConfig {
  int episodes = 50;
  int steps_per_episode = 200;
  int horizon = 8;
  double dt = 0.2;
  double p_true = 1.0;
  double sigma_w = 0.0;  // optional attitude process noise, flight-rate level
  double p_init_offset = 0.5;  // p_hat starts at p_true * (1 + offset)
  double lr = 0.025;
  double initial_angle = 0.05;
  double divergence_bound = 50.0;
  // sigma_u and sigma_w are flight-rate (1 kHz) injection levels; the desk
  // plant rate-matches their white-noise power via noise_rate_scale. sigma_v
  // is the per-measurement sensor noise the denoiser works against.
  double sigma_u = 1e-4;
  double sigma_v = 8.73e-2;   // attitude channel sensor noise
  double sigma_v_rate = 5e-3; // rate channel sensor noise
  double noise_rate_scale = 0.1414;  // sqrt(20 Hz / 1 kHz)
  bool freeze_p = false;        // denoiser-only ablation
  bool freeze_denoiser = false; // parameter-only ablation
  std::uint64_t seed = 0;
};

struct MpcEpisodeRecord {
  int episode = 0;
  double ul_loss = 0.0;  // mean per-step consistency loss
  double p_hat = 0.0;
  double rmse = 0.0;  // tracking error of the true angle vs reference 0
  double st = 0.0;
  double sse = 0.0;
  double est_rmse = 0.0;  // denoised estimate vs true state
  double meas_rmse = 0.0; // raw measurement vs true state
  double est_angle_rmse = 0.0;
  double meas_angle_rmse = 0.0;
  bool diverged = false;
};

struct MpcTrainResult {
  double p_hat = 0.0;
  DenoiserNet denoiser;
  std::vector<MpcEpisodeRecord> history;
};

MpcTrainResult mpc_train(const MpcTrainConfig& cfg);

}  // namespace blopt
