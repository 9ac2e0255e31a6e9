#include "blopt/pgo.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

namespace blopt {

double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a <= 0.0) a += 2.0 * M_PI;
  return a - M_PI;
}

Pose2 Pose2::make(double x, double y, double theta) { return Pose2{x, y, wrap_angle(theta)}; }

Pose2 Pose2::compose(const Pose2& rhs) const {
  const double c = std::cos(theta), s = std::sin(theta);
  return make(x + c * rhs.x - s * rhs.y, y + s * rhs.x + c * rhs.y, theta + rhs.theta);
}

Pose2 Pose2::inverse() const {
  const double c = std::cos(theta), s = std::sin(theta);
  return make(-(c * x + s * y), -(-s * x + c * y), -theta);
}

namespace {

// forward-mode scalar carrying N directional derivatives
template <int N>
struct Jet {
  double a = 0.0;
  Eigen::Matrix<double, N, 1> v = Eigen::Matrix<double, N, 1>::Zero();

  Jet() = default;
  Jet(double value) : a(value) {}  // NOLINT(google-explicit-constructor)
  static Jet var(double value, int idx) {
    Jet j(value);
    j.v(idx) = 1.0;
    return j;
  }
};

template <int N>
Jet<N> operator+(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a + y.a);
  r.v = x.v + y.v;
  return r;
}
template <int N>
Jet<N> operator-(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a - y.a);
  r.v = x.v - y.v;
  return r;
}
template <int N>
Jet<N> operator-(const Jet<N>& x) {
  Jet<N> r(-x.a);
  r.v = -x.v;
  return r;
}
template <int N>
Jet<N> operator*(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a * y.a);
  r.v = x.a * y.v + y.a * x.v;
  return r;
}
template <int N>
Jet<N> operator/(const Jet<N>& x, const Jet<N>& y) {
  Jet<N> r(x.a / y.a);
  r.v = (x.v - r.a * y.v) / y.a;
  return r;
}
template <int N>
Jet<N> sin(const Jet<N>& x) {
  Jet<N> r(std::sin(x.a));
  r.v = std::cos(x.a) * x.v;
  return r;
}
template <int N>
Jet<N> cos(const Jet<N>& x) {
  Jet<N> r(std::cos(x.a));
  r.v = -std::sin(x.a) * x.v;
  return r;
}

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Jet<N>& x) {
  return x.a;
}

using std::cos;
using std::sin;

// wrap by a value-derived constant so derivatives pass through untouched
template <typename T>
T wrap_t(const T& a) {
  const double shift = wrap_angle(value_of(a)) - value_of(a);
  return a + T(shift);
}

// r = vee(log(Z^{-1} (P_i^{-1} P_j))) for scalar type T
template <typename T>
std::array<T, 3> se2_residual_t(const T& zx, const T& zy, const T& zth, const T& xi, const T& yi,
                                const T& thi, const T& xj, const T& yj, const T& thj) {
  // delta = P_i^{-1} P_j
  const T ci = cos(thi), si = sin(thi);
  const T dxw = xj - xi, dyw = yj - yi;
  const T dx = ci * dxw + si * dyw;
  const T dy = T(-1.0) * si * dxw + ci * dyw;
  const T dth = thj - thi;

  // e = Z^{-1} delta
  const T cz = cos(zth), sz = sin(zth);
  const T ex = cz * (dx - zx) + sz * (dy - zy);
  const T ey = T(-1.0) * sz * (dx - zx) + cz * (dy - zy);
  const T eth = wrap_t(dth - zth);

  // log: V(a)^{-1} applied to the translation part
  // V = [[s, -c], [c, s]], s = sin a / a, c = (1 - cos a)/a
  T s, c;
  if (std::abs(value_of(eth)) < 1e-6) {
    const T a2 = eth * eth;
    s = T(1.0) - a2 * T(1.0 / 6.0) + a2 * a2 * T(1.0 / 120.0);
    c = eth * (T(0.5) - a2 * T(1.0 / 24.0));
  } else {
    s = sin(eth) / eth;
    c = (T(1.0) - cos(eth)) / eth;
  }
  const T den = s * s + c * c;
  const T rx = (s * ex + c * ey) / den;
  const T ry = (T(-1.0) * c * ex + s * ey) / den;
  return {rx, ry, eth};
}

}  // namespace

Eigen::Vector3d Pose2::log() const {
  auto r = se2_residual_t<double>(0, 0, 0, 0, 0, 0, x, y, theta);
  return {r[0], r[1], r[2]};
}

Pose2 Pose2::exp(const Eigen::Vector3d& xi) {
  const double a = xi(2);
  double s, c;
  if (std::abs(a) < 1e-6) {
    const double a2 = a * a;
    s = 1.0 - a2 / 6.0 + a2 * a2 / 120.0;
    c = a * (0.5 - a2 / 24.0);
  } else {
    s = std::sin(a) / a;
    c = (1.0 - std::cos(a)) / a;
  }
  return make(s * xi(0) - c * xi(1), c * xi(0) + s * xi(1), a);
}

Eigen::Vector3d edge_residual(const PoseGraph2D& g, const PgoEdge& e) {
  const Pose2& pi = g.nodes[static_cast<std::size_t>(e.i)];
  const Pose2& pj = g.nodes[static_cast<std::size_t>(e.j)];
  auto r = se2_residual_t<double>(e.measurement.x, e.measurement.y, e.measurement.theta, pi.x,
                                  pi.y, pi.theta, pj.x, pj.y, pj.theta);
  return {r[0], r[1], r[2]};
}

double graph_cost(const PoseGraph2D& g) {
  double cost = 0.0;
  for (const auto& e : g.edges) {
    Eigen::Vector3d r = edge_residual(g, e);
    cost += r.dot(e.info * r);
  }
  return cost;
}

namespace {

// residual and its Jacobian w.r.t. the 6 pose coordinates (i then j)
void edge_residual_jac(const PoseGraph2D& g, const PgoEdge& e, Eigen::Vector3d& r,
                       Eigen::Matrix<double, 3, 6>& jac) {
  const Pose2& pi = g.nodes[static_cast<std::size_t>(e.i)];
  const Pose2& pj = g.nodes[static_cast<std::size_t>(e.j)];
  using J = Jet<6>;
  auto rr = se2_residual_t<J>(J(e.measurement.x), J(e.measurement.y), J(e.measurement.theta),
                              J::var(pi.x, 0), J::var(pi.y, 1), J::var(pi.theta, 2),
                              J::var(pj.x, 3), J::var(pj.y, 4), J::var(pj.theta, 5));
  for (int k = 0; k < 3; ++k) {
    r(k) = rr[static_cast<std::size_t>(k)].a;
    jac.row(k) = rr[static_cast<std::size_t>(k)].v.transpose();
  }
}

// gradient of sum r'Wr over free pose coordinates (nodes 1..N-1)
Eigen::VectorXd cost_gradient(const PoseGraph2D& g) {
  const std::int64_t nfree = 3 * (static_cast<std::int64_t>(g.nodes.size()) - 1);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(nfree);
  Eigen::Vector3d r;
  Eigen::Matrix<double, 3, 6> jac;
  for (const auto& e : g.edges) {
    edge_residual_jac(g, e, r, jac);
    Eigen::Matrix<double, 6, 1> ge = 2.0 * jac.transpose() * (e.info * r);
    if (e.i > 0) grad.segment<3>(3 * (e.i - 1)) += ge.head<3>();
    if (e.j > 0) grad.segment<3>(3 * (e.j - 1)) += ge.tail<3>();
  }
  return grad;
}

}  // namespace

GnResult gauss_newton_solve(const PoseGraph2D& g, const GnConfig& cfg) {
  GnResult res;
  res.graph = g;
  if (g.nodes.empty()) throw SolveError("gauss_newton_solve: empty graph");
  const int n_free = static_cast<int>(g.nodes.size()) - 1;
  if (n_free == 0) {
    res.final_cost = graph_cost(res.graph);
    res.converged = true;
    return res;
  }
  const int dim = 3 * n_free;
  double cost = graph_cost(res.graph);
  res.cost_history.push_back(cost);
  double lambda = cfg.damping;

  for (int it = 0; it < cfg.max_iterations; ++it) {
    Eigen::VectorXd grad = cost_gradient(res.graph);
    res.grad_norm = grad.norm();
    if (res.grad_norm <= cfg.grad_tol) {
      res.converged = true;
      break;
    }
    // normal equations J'WJ delta = -J'Wr
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);
    Eigen::Vector3d r;
    Eigen::Matrix<double, 3, 6> jac;
    for (const auto& e : res.graph.edges) {
      edge_residual_jac(res.graph, e, r, jac);
      Eigen::Matrix<double, 6, 6> he = jac.transpose() * e.info * jac;
      Eigen::Matrix<double, 6, 1> be = jac.transpose() * (e.info * r);
      if (e.i > 0) {
        h.block<3, 3>(3 * (e.i - 1), 3 * (e.i - 1)) += he.topLeftCorner<3, 3>();
        b.segment<3>(3 * (e.i - 1)) += be.head<3>();
      }
      if (e.j > 0) {
        h.block<3, 3>(3 * (e.j - 1), 3 * (e.j - 1)) += he.bottomRightCorner<3, 3>();
        b.segment<3>(3 * (e.j - 1)) += be.tail<3>();
      }
      if (e.i > 0 && e.j > 0) {
        h.block<3, 3>(3 * (e.i - 1), 3 * (e.j - 1)) += he.topRightCorner<3, 3>();
        h.block<3, 3>(3 * (e.j - 1), 3 * (e.i - 1)) += he.bottomLeftCorner<3, 3>();
      }
    }

    bool stepped = false;
    for (int attempt = 0; attempt < 16; ++attempt) {
      Eigen::MatrixXd hd = h + lambda * Eigen::MatrixXd::Identity(dim, dim);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(hd);
      Eigen::VectorXd delta = ldlt.solve(-b);
      bool ok = ldlt.info() == Eigen::Success && delta.allFinite();
      PoseGraph2D cand = res.graph;
      double cand_cost = cost;
      if (ok) {
        for (int k = 0; k < n_free; ++k) {
          Pose2& p = cand.nodes[static_cast<std::size_t>(k + 1)];
          p = Pose2::make(p.x + delta(3 * k), p.y + delta(3 * k + 1),
                          p.theta + delta(3 * k + 2));
        }
        cand_cost = graph_cost(cand);
        ok = std::isfinite(cand_cost) && cand_cost <= cost * (1.0 + 1e-12) + 1e-15;
      }
      if (ok) {
        res.graph = std::move(cand);
        cost = cand_cost;
        res.cost_history.push_back(cost);
        if (cfg.adapt_damping && lambda > cfg.damping) {
          lambda = std::max(cfg.damping, lambda * 0.25);
        }
        stepped = true;
        break;
      }
      if (!cfg.adapt_damping) break;  // fixed damping: accept stall
      lambda = lambda <= 0.0 ? 1e-8 : lambda * 10.0;
      res.damped = true;
    }
    res.iterations = it + 1;
    if (!stepped) break;
  }
  if (!res.converged) {
    res.grad_norm = cost_gradient(res.graph).norm();
    res.converged = res.grad_norm <= cfg.grad_tol;
  }
  res.final_cost = cost;
  return res;
}

Pose2 SyntheticFrontEnd::apply(const Pose2& motion) const {
  return Pose2::make(scale * motion.x + bias(0), scale * motion.y + bias(1),
                     motion.theta + bias(2));
}

void SyntheticFrontEnd::set_params(const Eigen::Vector4d& p) {
  bias = p.head<3>();
  scale = std::max(p(3), 0.05);  // keep s > 0
}

PoseGraph2D build_graph(const PgoFixture& fx, const SyntheticFrontEnd& fe) {
  PoseGraph2D g;
  g.nodes.resize(fx.ground_truth.size());
  for (const auto& od : fx.odometry) {
    g.edges.push_back(PgoEdge{od.i, od.j, od.metric ? od.motion : fe.apply(od.motion), od.info});
  }
  // initialize by integrating the consecutive chain from the anchor
  std::vector<Pose2> init(fx.ground_truth.size());
  init[0] = Pose2{};
  for (const auto& e : g.edges) {
    if (e.j == e.i + 1) {
      init[static_cast<std::size_t>(e.j)] =
          init[static_cast<std::size_t>(e.i)].compose(e.measurement);
    }
  }
  g.nodes = std::move(init);
  return g;
}

std::vector<Pose2> integrate_frontend(const PgoFixture& fx, const SyntheticFrontEnd& fe) {
  std::vector<Pose2> traj(fx.ground_truth.size());
  traj[0] = Pose2{};
  for (const auto& od : fx.odometry) {
    if (od.j == od.i + 1) {
      traj[static_cast<std::size_t>(od.j)] =
          traj[static_cast<std::size_t>(od.i)].compose(fe.apply(od.motion));
    }
  }
  return traj;
}

OneStepResult one_step_hypergrad(const PoseGraph2D& solved, const PgoFixture& fx,
                                 const SyntheticFrontEnd& fe, double stationarity_tol) {
  OneStepResult out;
  out.ll_grad_norm = cost_gradient(solved).norm();
  if (out.ll_grad_norm > stationarity_tol) {
    throw SolveError("one_step_hypergrad: lower level not stationary (||dL/dmu|| = " +
                     std::to_string(out.ll_grad_norm) + ")");
  }
  using J = Jet<4>;
  const J bx = J::var(fe.bias(0), 0), by = J::var(fe.bias(1), 1), bt = J::var(fe.bias(2), 2),
          sc = J::var(fe.scale, 3);
  J u(0.0);
  for (std::size_t k = 0; k < fx.odometry.size(); ++k) {
    const auto& od = fx.odometry[k];
    const Pose2& pi = solved.nodes[static_cast<std::size_t>(od.i)];
    const Pose2& pj = solved.nodes[static_cast<std::size_t>(od.j)];
    // measurement as a function of the front-end parameters; metric edges do
    // not pass through the front-end
    const J zx = od.metric ? J(od.motion.x) : sc * J(od.motion.x) + bx;
    const J zy = od.metric ? J(od.motion.y) : sc * J(od.motion.y) + by;
    const J zth = od.metric ? J(od.motion.theta) : wrap_t(J(od.motion.theta) + bt);
    auto r = se2_residual_t<J>(zx, zy, zth, J(pi.x), J(pi.y), J(pi.theta), J(pj.x), J(pj.y),
                               J(pj.theta));
    // r' W r with W from the edge
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        u = u + r[static_cast<std::size_t>(a)] * J(od.info(a, b)) * r[static_cast<std::size_t>(b)];
      }
    }
  }
  out.u_value = u.a;
  out.grad = u.v;
  return out;
}

double ate(const std::vector<Pose2>& estimated, const std::vector<Pose2>& ground_truth) {
  if (estimated.size() != ground_truth.size()) {
    throw ShapeError("ate: trajectory lengths differ (" + std::to_string(estimated.size()) +
                     " vs " + std::to_string(ground_truth.size()) + ")");
  }
  if (estimated.empty()) return 0.0;
  const Pose2 e0 = estimated[0].inverse();
  const Pose2 g0 = ground_truth[0].inverse();
  double sq = 0.0;
  for (std::size_t k = 0; k < estimated.size(); ++k) {
    const Pose2 pe = e0.compose(estimated[k]);
    const Pose2 pg = g0.compose(ground_truth[k]);
    const double dx = pe.x - pg.x, dy = pe.y - pg.y;
    sq += dx * dx + dy * dy;
  }
  return std::sqrt(sq / static_cast<double>(estimated.size()));
}

PgoFixture generate_trajectory(const TrajectoryGenConfig& cfg, CounterRng& rng) {
  PgoFixture fx;
  fx.ground_truth.resize(static_cast<std::size_t>(cfg.num_nodes));
  fx.ground_truth[0] = Pose2{};
  for (int k = 1; k < cfg.num_nodes; ++k) {
    const double turn = cfg.turn_std * rng.normal();
    const Pose2 motion = Pose2::make(cfg.step_length, 0.0, turn);
    fx.ground_truth[static_cast<std::size_t>(k)] =
        fx.ground_truth[static_cast<std::size_t>(k - 1)].compose(motion);
  }
  Eigen::Matrix3d info = Eigen::Vector3d(cfg.info_trans, cfg.info_trans, cfg.info_rot).asDiagonal();
  auto noisy_motion = [&](int i, int j) {
    const Pose2 rel = fx.ground_truth[static_cast<std::size_t>(i)].inverse().compose(
        fx.ground_truth[static_cast<std::size_t>(j)]);
    return Pose2::make(rel.x + cfg.trans_noise_std * rng.normal(),
                       rel.y + cfg.trans_noise_std * rng.normal(),
                       rel.theta + cfg.rot_noise_std * rng.normal());
  };
  for (int k = 0; k + 1 < cfg.num_nodes; ++k) {
    fx.odometry.push_back(OdometrySample{k, k + 1, noisy_motion(k, k + 1), info, false});
  }
  if (cfg.skip_stride > 1) {
    for (int k = 0; k + cfg.skip_stride < cfg.num_nodes; k += cfg.skip_stride) {
      fx.odometry.push_back(OdometrySample{k, k + cfg.skip_stride,
                                           noisy_motion(k, k + cfg.skip_stride), info, true});
    }
  }
  if (cfg.anchor_stride > 0) {
    for (int k = cfg.anchor_stride; k < cfg.num_nodes; k += cfg.anchor_stride) {
      fx.odometry.push_back(OdometrySample{0, k, noisy_motion(0, k), info, true});
    }
  }
  return fx;
}

SlamTrainResult slam_train(const PgoFixture& fx, const SyntheticFrontEnd& init,
                                      const SlamTrainConfig& cfg) {
  SlamTrainResult out;
  out.frontend = init;
  // Adam on the 4 front-end parameters; raw one-step gradients carry the
  // information-weight scale and would need a per-fixture step size
  Eigen::Vector4d m = Eigen::Vector4d::Zero(), v = Eigen::Vector4d::Zero();
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (int it = 0; it < cfg.iterations; ++it) {
    PoseGraph2D g = build_graph(fx, out.frontend);
    GnResult solved = gauss_newton_solve(g, cfg.gn);
    OneStepResult step = one_step_hypergrad(solved.graph, fx, out.frontend, cfg.stationarity_tol);

    SlamIterRecord rec;
    rec.iter = it;
    rec.ate_frontend = ate(integrate_frontend(fx, out.frontend), fx.ground_truth);
    rec.ate_optimized = ate(solved.graph.nodes, fx.ground_truth);
    rec.u_value = step.u_value;
    out.history.push_back(rec);

    m = beta1 * m + (1 - beta1) * step.grad;
    v = beta2 * v + (1 - beta2) * step.grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(beta1, it + 1);
    const double bc2 = 1.0 - std::pow(beta2, it + 1);
    Eigen::Vector4d p = out.frontend.params();
    p -= cfg.lr * (m / bc1).cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
    out.frontend.set_params(p);
  }
  return out;
}

void save_graph(const PoseGraph2D& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  char buf[256];
  for (std::size_t k = 0; k < g.nodes.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "NODE %zu %.17g %.17g %.17g\n", k, g.nodes[k].x, g.nodes[k].y,
                  g.nodes[k].theta);
    f << buf;
  }
  for (const auto& e : g.edges) {
    std::snprintf(buf, sizeof(buf), "EDGE %d %d %.17g %.17g %.17g %.17g %.17g %.17g\n", e.i, e.j,
                  e.measurement.x, e.measurement.y, e.measurement.theta, e.info(0, 0), e.info(1, 1),
                  e.info(2, 2));
    f << buf;
  }
}

PoseGraph2D load_graph(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
  PoseGraph2D g;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "NODE") {
      std::size_t id;
      double x, y, th;
      if (!(ss >> id >> x >> y >> th)) throw std::runtime_error("bad NODE line: " + line);
      if (g.nodes.size() != id) throw std::runtime_error("NODE ids must be consecutive from 0");
      g.nodes.push_back(Pose2::make(x, y, th));
    } else if (tag == "EDGE") {
      PgoEdge e;
      double dx, dy, dth, wx, wy, wt;
      if (!(ss >> e.i >> e.j >> dx >> dy >> dth >> wx >> wy >> wt)) {
        throw std::runtime_error("bad EDGE line: " + line);
      }
      e.measurement = Pose2::make(dx, dy, dth);
      e.info = Eigen::Vector3d(wx, wy, wt).asDiagonal();
      g.edges.push_back(e);
    } else {
      throw std::runtime_error("unknown record '" + tag + "' in graph file");
    }
  }
  return g;
}

}  // namespace blopt
