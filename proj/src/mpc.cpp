#include "blopt/mpc.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace blopt {

LinearPlant attitude_plant(double dt) {
  LinearPlant p;
  p.n = 2;
  p.m = 1;
  p.a = Tensor::from({2, 2}, {1.0, dt, 0.0, 1.0});
  p.b0 = Tensor::from({2, 1}, {0.0, dt});
  return p;
}

MpcProblem MpcProblem::constant(int horizon, Tensor qx, Tensor ru, Tensor x0) {
  MpcProblem prob;
  prob.horizon = horizon;
  const auto n = qx.dim(0);
  const auto m = ru.dim(0);
  for (int k = 0; k < horizon; ++k) {
    prob.qx.push_back(qx);
    prob.ru.push_back(ru);
    prob.qx_lin.push_back(Tensor::zeros({n}));
    prob.ru_lin.push_back(Tensor::zeros({m}));
    prob.x_ref.push_back(Tensor::zeros({n}));
    prob.u_ref.push_back(Tensor::zeros({m}));
  }
  prob.x0 = std::move(x0);
  return prob;
}

namespace {

void check_problem(const LinearPlant& plant, const MpcProblem& prob) {
  if (prob.horizon < 1) throw SolveError("lqr: horizon must be >= 1");
  const std::size_t t = static_cast<std::size_t>(prob.horizon);
  if (prob.qx.size() != t || prob.ru.size() != t || prob.qx_lin.size() != t ||
      prob.ru_lin.size() != t || prob.x_ref.size() != t || prob.u_ref.size() != t) {
    throw SolveError("lqr: per-step arrays must all have horizon entries");
  }
  for (const auto& r : prob.ru) {
    // R must be PD for a unique minimizer; a cheap necessary check
    for (std::int64_t i = 0; i < plant.m; ++i) {
      if (r.at(i, i) <= 0.0) throw SolveError("lqr: control weight block is not positive definite");
    }
  }
}

}  // namespace

namespace {

// shared builder; weight vars override the problem's weight tensors when given
LqrVars build_lqr(Tape& t, const LinearPlant& plant, const MpcProblem& prob, Var p, Var x0,
                  const std::vector<Var>* qx_vars, const std::vector<Var>* ru_vars) {
  check_problem(plant, prob);
  const int horizon = prob.horizon;
  const std::int64_t n = plant.n, m = plant.m;

  Var a = t.constant(plant.a);
  // B(p) = B0 / p, the scalar broadcast over the matrix
  Var b = div(t.constant(plant.b0), broadcast_to(reshape(p, Shape{}), Shape{n, m}));
  Var at = transpose(a);
  Var bt = transpose(b);

  auto qx_at = [&](std::size_t k) { return qx_vars ? (*qx_vars)[k] : t.constant(prob.qx[k]); };
  auto ru_at = [&](std::size_t k) { return ru_vars ? (*ru_vars)[k] : t.constant(prob.ru[k]); };

  // backward Riccati on the value form x'Px + 2 v'x + const
  LqrVars out;
  Var pmat = t.constant(Tensor::zeros({n, n}));
  Var pvec = t.constant(Tensor::zeros({n, 1}));
  std::vector<Var> ks(static_cast<std::size_t>(horizon), Var{});
  std::vector<Var> kffs(static_cast<std::size_t>(horizon), Var{});
  out.riccati.resize(static_cast<std::size_t>(horizon));
  out.gains.resize(static_cast<std::size_t>(horizon));

  for (int k = horizon - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    Var qk = qx_at(ku);
    Var rk = ru_at(ku);
    Var qlin = reshape(t.constant(prob.qx_lin[ku]), {n, 1});
    Var rlin = reshape(t.constant(prob.ru_lin[ku]), {m, 1});
    Var xref = reshape(t.constant(prob.x_ref[ku]), {n, 1});
    Var uref = reshape(t.constant(prob.u_ref[ku]), {m, 1});

    // cost charged at x_{k+1} folded into the value-to-go
    Var mmat = add(qk, pmat);
    Var mvec = add(pvec, sub(qlin * 0.5, matmul(qk, xref)));

    // u'(R + B'MB)u + 2 (B'MA x + B'mvec - R uref + rlin/2)'u + ...
    Var h = add(rk, matmul(bt, matmul(mmat, b)));
    Var g = matmul(bt, matmul(mmat, a));
    Var g0 = add(sub(matmul(bt, mvec), matmul(rk, uref)), rlin * 0.5);
    Var kk = linsolve(h, g);
    Var kf = linsolve(h, g0);
    ks[ku] = kk;
    kffs[ku] = kf;
    out.gains[ku] = t.value(kk);

    pmat = sub(matmul(at, matmul(mmat, a)), matmul(transpose(g), kk));
    pvec = sub(matmul(at, mvec), matmul(transpose(g), kf));
    out.riccati[ku] = t.value(pmat);
  }

  // forward rollout with u = -(K x + kff); the cost comes from the stages
  out.x.resize(static_cast<std::size_t>(horizon) + 1, Var{});
  out.u.resize(static_cast<std::size_t>(horizon), Var{});
  out.x[0] = reshape(x0, {n, 1});
  Var cost = t.constant(0.0);
  for (int k = 0; k < horizon; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Var uk = -(add(matmul(ks[ku], out.x[ku]), kffs[ku]));
    Var xn = add(matmul(a, out.x[ku]), matmul(b, uk));
    out.u[ku] = uk;
    out.x[ku + 1] = xn;

    Var dx = sub(xn, reshape(t.constant(prob.x_ref[ku]), {n, 1}));
    Var du = sub(uk, reshape(t.constant(prob.u_ref[ku]), {m, 1}));
    Var stage = add(add(sum(mul(dx, matmul(qx_at(ku), dx))),
                        dot(reshape(t.constant(prob.qx_lin[ku]), {n, 1}), dx)),
                    add(sum(mul(du, matmul(ru_at(ku), du))),
                        dot(reshape(t.constant(prob.ru_lin[ku]), {m, 1}), du)));
    cost = add(cost, stage);
  }
  out.cost = cost;
  return out;
}

}  // namespace

LqrVars lqr_solve_expr(Tape& t, const LinearPlant& plant, const MpcProblem& prob, Var p, Var x0) {
  return build_lqr(t, plant, prob, p, x0, nullptr, nullptr);
}

LqrSolution lqr_solve(const LinearPlant& plant, const MpcProblem& prob, double p) {
  Tape t;
  Var pv = t.constant(Tensor::scalar(p));
  Var x0 = t.constant(prob.x0);
  LqrVars vars = lqr_solve_expr(t, plant, prob, pv, x0);
  LqrSolution sol;
  for (Var x : vars.x) sol.x.push_back(t.value(x));
  for (Var u : vars.u) sol.u.push_back(t.value(u));
  sol.cost = t.value(vars.cost).value();
  sol.gains = std::move(vars.gains);
  sol.riccati = std::move(vars.riccati);
  return sol;
}

LqrGradients lqr_backward(const LinearPlant& plant, const MpcProblem& prob, double p,
                          const std::function<Var(Tape&, const LqrVars&)>& scalar_of_traj) {
  Tape t;
  Var pv = t.input(Tensor::scalar(p));
  Var x0 = t.input(prob.x0);
  std::vector<Var> qx_vars, ru_vars, wrt;
  wrt.push_back(pv);
  wrt.push_back(x0);
  for (int k = 0; k < prob.horizon; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    qx_vars.push_back(t.input(prob.qx[ku]));
    ru_vars.push_back(t.input(prob.ru[ku]));
    wrt.push_back(qx_vars.back());
    wrt.push_back(ru_vars.back());
  }
  LqrVars out = build_lqr(t, plant, prob, pv, x0, &qx_vars, &ru_vars);
  Var scalar = scalar_of_traj(t, out);
  auto grads = gradient_values(scalar, wrt);
  LqrGradients lg;
  lg.dp = grads[0].value();
  lg.dx0 = std::move(grads[1]);
  for (int k = 0; k < prob.horizon; ++k) {
    lg.dqx.push_back(std::move(grads[2 + 2 * static_cast<std::size_t>(k)]));
    lg.dru.push_back(std::move(grads[3 + 2 * static_cast<std::size_t>(k)]));
  }
  return lg;
}

SimStep simulate_step(const LinearPlant& plant, double p_true, const Tensor& state,
                      const Tensor& control, CounterRng& rng) {
  const std::int64_t n = plant.n, m = plant.m;
  Eigen::VectorXd x = vec_view(state);
  Eigen::VectorXd u = vec_view(control);
  for (std::int64_t i = 0; i < m; ++i) u(i) += plant.sigma_u * rng.normal();
  Eigen::MatrixXd a = mat_view(plant.a);
  Eigen::MatrixXd b = Eigen::MatrixXd(mat_view(plant.b0)) / p_true;
  Eigen::VectorXd xn = a * x + b * u;
  xn(0) += plant.sigma_w * rng.normal();  // attitude-channel process noise
  SimStep out;
  out.next_state = tensor_from_vec(xn);
  Eigen::VectorXd y = xn;
  y(0) += plant.sigma_v * rng.normal();
  for (std::int64_t i = 1; i < n; ++i) y(i) += plant.sigma_v_rate * rng.normal();
  out.measurement = tensor_from_vec(y);
  return out;
}

ControlMetrics control_metrics(const std::vector<double>& trajectory,
                               const std::vector<double>& reference, double band) {
  if (trajectory.size() < 2 || trajectory.size() != reference.size()) {
    throw SolveError("control_metrics: need matched trajectories of length >= 2");
  }
  ControlMetrics out;
  const std::size_t n = trajectory.size();
  std::size_t tail = std::max<std::size_t>(1, n / 10);
  double steady = 0.0;
  for (std::size_t k = n - tail; k < n; ++k) steady += trajectory[k];
  steady /= static_cast<double>(tail);

  // first index from which the signal stays inside the band
  std::size_t st = n;
  for (std::size_t k = n; k-- > 0;) {
    if (std::abs(trajectory[k] - steady) > band) {
      st = k + 1;
      break;
    }
    st = k;
  }
  if (st >= n) {
    out.settled = false;
    out.settling_time = static_cast<double>(n - 1);
  } else {
    out.settling_time = static_cast<double>(st);
  }

  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = trajectory[k] - reference[k];
    acc += d * d;
  }
  out.rmse = std::sqrt(acc / static_cast<double>(n));
  out.sse = std::abs(steady - reference.back());
  return out;
}

DenoiserNet DenoiserNet::make(int window, int state_dim, int hidden, std::uint64_t seed) {
  DenoiserNet net;
  net.window = window;
  net.state_dim = state_dim;
  net.hidden = hidden;
  const std::int64_t in_dim = static_cast<std::int64_t>(window) * state_dim;
  Tensor w1 = Tensor::zeros({in_dim, hidden});
  CounterRng rng(seed, 23);
  const double r = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (std::int64_t i = 0; i < w1.size(); ++i) w1[i] = rng.uniform(-r, r);
  net.params.add("denoiser.w1", std::move(w1));
  net.params.add("denoiser.b1", Tensor::zeros({1, hidden}));
  net.params.add("denoiser.w2", Tensor::zeros({hidden, state_dim}));
  net.params.add("denoiser.b2", Tensor::zeros({1, state_dim}));
  return net;
}

Var DenoiserNet::forward(Tape& t, const std::vector<Var>& pv, const Tensor& window_flat,
                         const Tensor& latest) const {
  Var w = t.constant(Tensor(Shape{1, window_flat.size()},
                            std::vector<double>(window_flat.data(),
                                                window_flat.data() + window_flat.size())));
  Var h = tanh(add(matmul(w, pv[0]), pv[1]));
  Var corr = add(matmul(h, pv[2]), pv[3]);  // [1, n]
  Var y = t.constant(Tensor(Shape{1, latest.size()},
                            std::vector<double>(latest.data(), latest.data() + latest.size())));
  return reshape(add(y, corr), {latest.size(), 1});
}

MpcTrainResult mpc_train(const MpcTrainConfig& cfg) {
  LinearPlant plant = attitude_plant(cfg.dt);
  plant.sigma_u = cfg.sigma_u * cfg.noise_rate_scale;
  plant.sigma_w = cfg.sigma_w * cfg.noise_rate_scale;  // attitude channel
  plant.sigma_v = cfg.sigma_v;
  plant.sigma_v_rate = cfg.sigma_v_rate;
  const std::int64_t n = plant.n;

  MpcTrainResult out;
  out.denoiser = DenoiserNet::make(4, plant.n, 16, cfg.seed);
  double p_hat = cfg.p_true * (1.0 + cfg.p_init_offset);

  // Adam state over (denoiser params..., p_hat)
  AdamOptimizer opt(AdamConfig{.lr = cfg.lr});
  ParameterStore& store = out.denoiser.params;
  store.add("plant.p_hat", Tensor::scalar(p_hat), !cfg.freeze_p);
  if (cfg.freeze_denoiser) {
    for (auto& prm : store) {
      if (prm.name != "plant.p_hat") prm.trainable = false;
    }
  }

  const Tensor qx = Tensor::from({2, 2}, {40.0, 0.0, 0.0, 2.0});
  const Tensor ru = Tensor::from({1, 1}, {0.3});

  CounterRng rng(cfg.seed, 17);
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    MpcEpisodeRecord rec;
    rec.episode = ep;

    Tensor x_true = Tensor::from({2}, {cfg.initial_angle, 0.0});
    std::vector<Tensor> window;  // most recent last
    Tensor y0 = x_true;
    y0[0] += plant.sigma_v * rng.normal();
    for (std::int64_t i = 1; i < n; ++i) y0[i] += plant.sigma_v_rate * rng.normal();
    for (int w = 0; w < out.denoiser.window; ++w) window.push_back(y0);

    Tape t;
    auto pvars = store.bind(t);
    Var p_hat_var = pvars.back();
    std::vector<Var> net_vars(pvars.begin(), pvars.end() - 1);

    auto flatten_window = [&]() {
      Tensor flat = Tensor::zeros({static_cast<std::int64_t>(window.size()) * n});
      std::int64_t at = 0;
      for (const auto& wv : window) {
        for (std::int64_t i = 0; i < n; ++i) flat[at++] = wv[i];
      }
      return flat;
    };

    Var loss = t.constant(0.0);
    Var xhat_k = out.denoiser.forward(t, net_vars, flatten_window(), window.back());
    int steps_done = 0;
    std::vector<double> angle_traj, est_err, meas_err, est_angle_err, meas_angle_err;
    angle_traj.push_back(x_true[0]);

    for (int k = 0; k < cfg.steps_per_episode; ++k) {
      // receding-horizon control from the current estimate
      MpcProblem prob = MpcProblem::constant(cfg.horizon, qx, ru, t.value(xhat_k));
      LqrVars lqr = lqr_solve_expr(t, plant, prob, reshape(p_hat_var, Shape{}),
                                   reshape(xhat_k, {n}));
      Var u0 = lqr.u[0];

      SimStep sim = simulate_step(plant, cfg.p_true, x_true, t.value(u0), rng);
      x_true = sim.next_state;
      angle_traj.push_back(x_true[0]);
      window.erase(window.begin());
      window.push_back(sim.measurement);

      Var xhat_next = out.denoiser.forward(t, net_vars, flatten_window(), window.back());
      est_err.push_back((vec_view(t.value(xhat_next)) - vec_view(x_true)).norm());
      meas_err.push_back((vec_view(sim.measurement) - vec_view(x_true)).norm());
      est_angle_err.push_back(std::abs(t.value(xhat_next)[0] - x_true[0]));
      meas_angle_err.push_back(std::abs(sim.measurement[0] - x_true[0]));

      // discrepancy between the model-predicted next state and the denoised
      // estimate, plus a measurement anchor on the estimate itself; the raw
      // measurement enters as data only. Without the anchor a constant
      // angle-offset in the correction is a null direction of the pure
      // consistency term (A has a unit eigenvalue) and the estimate drifts.
      Var bmat = div(t.constant(plant.b0),
                     broadcast_to(reshape(p_hat_var, Shape{}), Shape{n, 1}));
      Var pred = add(matmul(t.constant(plant.a), xhat_k), matmul(bmat, u0));
      Var diff = sub(xhat_next, pred);
      Var y_next = t.constant(Tensor(Shape{n, 1},
                                     std::vector<double>(sim.measurement.data(),
                                                         sim.measurement.data() + n)));
      Var anchor = sub(xhat_next, y_next);
      loss = add(loss, add(sum(mul(diff, diff)), sum(mul(anchor, anchor))));

      xhat_k = xhat_next;
      ++steps_done;
      if (vec_view(x_true).norm() > cfg.divergence_bound) {
        rec.diverged = true;
        break;
      }
    }

    rec.ul_loss = t.value(loss).value() / std::max(1, steps_done);
    rec.p_hat = store.get("plant.p_hat").value.value();
    std::vector<double> zeros_ref(angle_traj.size(), 0.0);
    ControlMetrics cm = control_metrics(angle_traj, zeros_ref, 0.0262);  // ~1.5 deg
    rec.rmse = cm.rmse;
    rec.st = cm.settling_time * cfg.dt;
    rec.sse = cm.sse;
    double se = 0, sm = 0, sea = 0, sma = 0;
    for (double v : est_err) se += v * v;
    for (double v : meas_err) sm += v * v;
    for (double v : est_angle_err) sea += v * v;
    for (double v : meas_angle_err) sma += v * v;
    rec.est_rmse = std::sqrt(se / std::max<std::size_t>(1, est_err.size()));
    rec.meas_rmse = std::sqrt(sm / std::max<std::size_t>(1, meas_err.size()));
    rec.est_angle_rmse = std::sqrt(sea / std::max<std::size_t>(1, est_angle_err.size()));
    rec.meas_angle_rmse = std::sqrt(sma / std::max<std::size_t>(1, meas_angle_err.size()));
    out.history.push_back(rec);

    auto grads = gradient_values(loss, pvars);
    opt.step(store, grads);
  }
  out.p_hat = store.get("plant.p_hat").value.value();
  return out;
}

}  // namespace blopt
