#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "blopt/rng.hpp"
#include "blopt/tensor.hpp"

namespace blopt {

double wrap_angle(double a);  // to (-pi, pi]

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // wrapped to (-pi, pi] by all constructors below

  static Pose2 make(double x, double y, double theta);
  Pose2 compose(const Pose2& rhs) const;  // this * rhs
  Pose2 inverse() const;
  Eigen::Vector3d log() const;  // se(2) coordinates (V^{-1} t, theta)
  static Pose2 exp(const Eigen::Vector3d& xi);
};

struct PgoEdge {
  int i = 0;
  int j = 0;
  Pose2 measurement;
  Eigen::Matrix3d info = Eigen::Matrix3d::Identity();  // PSD information weight
};

// Anchored pose graph: node 0 is held fixed by every solver.
struct PoseGraph2D {
  std::vector<Pose2> nodes;
  std::vector<PgoEdge> edges;
};

// r = vee(log(Z^{-1} (P_i^{-1} P_j))); zero iff the measurement is consistent.
Eigen::Vector3d edge_residual(const PoseGraph2D& g, const PgoEdge& e);

// sum_e r' W r
double graph_cost(const PoseGraph2D& g);

struct GnConfig {
  int max_iterations = 50;
  double grad_tol = 1e-10;   // on ||d cost / d poses||
  double damping = 0.0;      // fixed LM damping; 0 = pure Gauss-Newton
  bool adapt_damping = true; // auto-damp on singular or non-decreasing steps
};

struct GnResult {
  PoseGraph2D graph;
  double final_cost = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool damped = false;  // auto-damping engaged at least once
  std::vector<double> cost_history;  // cost after each accepted step
};

GnResult gauss_newton_solve(const PoseGraph2D& g, const GnConfig& cfg);

// Learnable stand-in for an odometry front-end: scale and bias applied to raw
// relative motions.
struct SyntheticFrontEnd {
  Eigen::Vector3d bias = Eigen::Vector3d::Zero();  // (bx, by, btheta)
  double scale = 1.0;                              // s > 0

  Pose2 apply(const Pose2& motion) const;
  Eigen::Vector4d params() const { return {bias(0), bias(1), bias(2), scale}; }
  void set_params(const Eigen::Vector4d& p);
};

// Raw odometry: relative motions between node i and j plus edge weights.
struct OdometrySample {
  int i = 0;
  int j = 0;
  Pose2 motion;  // front-end input (true motion plus sensor noise)
  Eigen::Matrix3d info = Eigen::Matrix3d::Identity();
  // metric channels (inertial-style deltas) bypass the front-end entirely;
  // they pin the scale gauge that the consistency cost leaves free
  bool metric = false;
};

struct PgoFixture {
  std::vector<Pose2> ground_truth;
  std::vector<OdometrySample> odometry;
};

// Graph whose measurements are the front-end outputs; nodes initialized by
// integrating the consecutive-edge chain from the anchor.
PoseGraph2D build_graph(const PgoFixture& fx, const SyntheticFrontEnd& fe);

// Trajectory integrated from consecutive front-end measurements only.
std::vector<Pose2> integrate_frontend(const PgoFixture& fx, const SyntheticFrontEnd& fe);

struct OneStepResult {
  Eigen::Vector4d grad = Eigen::Vector4d::Zero();  // d U / d (bx, by, btheta, s)
  double u_value = 0.0;
  double ll_grad_norm = 0.0;
};

// One-step hypergradient: U is the lower-level cost re-evaluated at the solved
// poses, differentiated through the measurements only. Requires the solve to
// be stationary to within stationarity_tol.
OneStepResult one_step_hypergrad(const PoseGraph2D& solved, const PgoFixture& fx,
                                 const SyntheticFrontEnd& fe, double stationarity_tol = 1e-9);

// RMSE of positional error after re-anchoring both trajectories at node 0.
double ate(const std::vector<Pose2>& estimated, const std::vector<Pose2>& ground_truth);

// ---- fixtures and training ---------------------------------------------------

struct TrajectoryGenConfig {
  int num_nodes = 12;
  double step_length = 0.5;
  double turn_std = 0.4;
  double trans_noise_std = 0.005;
  double rot_noise_std = 0.002;
  // consecutive chain edges pass through the learnable front-end; skip and
  // anchor closures are geometrically verified, metric edges
  int skip_stride = 3;    // add (i, i+skip_stride) metric consistency edges
  int anchor_stride = 4;  // add (0, k) metric closure edges
  double info_trans = 100.0;
  double info_rot = 400.0;
};

PgoFixture generate_trajectory(const TrajectoryGenConfig& cfg, CounterRng& rng);

struct SlamTrainConfig {
  int iterations = 50;
  double lr = 0.01;
  GnConfig gn{200, 1e-11, 0.0, true};
  double stationarity_tol = 1e-8;
};

struct SlamIterRecord {
  int iter = 0;
  double ate_frontend = 0.0;
  double ate_optimized = 0.0;
  double u_value = 0.0;
};

struct SlamTrainResult {
  SyntheticFrontEnd frontend;
  std::vector<SlamIterRecord> history;
};

SlamTrainResult slam_train(const PgoFixture& fx, const SyntheticFrontEnd& init,
                                      const SlamTrainConfig& cfg);

// line-oriented graph text: NODE id x y theta / EDGE i j dx dy dth w_xx w_yy w_tt
void save_graph(const PoseGraph2D& g, const std::string& path);
PoseGraph2D load_graph(const std::string& path);

}  // namespace blopt
