#include "blopt/mtsp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "blopt/autodiff.hpp"

namespace blopt {

namespace {

double dist(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

void MtspInstance::validate() const {
  if (agents < 1) throw SolveError("mtsp: need at least one agent");
  if (static_cast<int>(cities.size()) < agents) {
    throw SolveError("mtsp: need at least as many cities as agents");
  }
  auto in_unit = [](const Point& p) { return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1; };
  if (!in_unit(depot)) throw SolveError("mtsp: depot outside the unit square");
  for (const auto& c : cities) {
    if (!in_unit(c)) throw SolveError("mtsp: city outside the unit square");
  }
}

MtspInstance generate_mtsp(int cities, int agents, CounterRng& rng) {
  MtspInstance inst;
  inst.agents = agents;
  inst.depot = {rng.uniform(), rng.uniform()};
  inst.cities.reserve(static_cast<std::size_t>(cities));
  for (int i = 0; i < cities; ++i) inst.cities.push_back({rng.uniform(), rng.uniform()});
  inst.validate();
  return inst;
}

void save_mtsp(const MtspInstance& inst, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  f << "{\"depot\": [" << num(inst.depot.x) << ", " << num(inst.depot.y) << "], \"cities\": [";
  for (std::size_t i = 0; i < inst.cities.size(); ++i) {
    if (i) f << ", ";
    f << "[" << num(inst.cities[i].x) << ", " << num(inst.cities[i].y) << "]";
  }
  f << "], \"agents\": " << inst.agents << "}\n";
}

MtspInstance load_mtsp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  nlohmann::json doc = nlohmann::json::parse(f);
  MtspInstance inst;
  inst.depot = {doc.at("depot").at(0).get<double>(), doc.at("depot").at(1).get<double>()};
  for (const auto& c : doc.at("cities")) {
    inst.cities.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  }
  inst.agents = doc.at("agents").get<int>();
  inst.validate();
  return inst;
}

double tour_length(const std::vector<Point>& points, const Point& depot,
                   const std::vector<int>& order) {
  if (order.empty()) return 0.0;
  double len = dist(depot, points[static_cast<std::size_t>(order.front())]);
  for (std::size_t i = 1; i < order.size(); ++i) {
    len += dist(points[static_cast<std::size_t>(order[i - 1])],
                points[static_cast<std::size_t>(order[i])]);
  }
  len += dist(points[static_cast<std::size_t>(order.back())], depot);
  return len;
}

AgentTour tsp_solve(const std::vector<Point>& points, const Point& depot) {
  AgentTour tour;
  const int n = static_cast<int>(points.size());
  if (n == 0) return tour;

  // nearest-neighbor construction from the depot, ties to the smaller index
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  Point at = depot;
  for (int step = 0; step < n; ++step) {
    int best = -1;
    double best_d = 0;
    for (int i = 0; i < n; ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      const double d = dist(at, points[static_cast<std::size_t>(i)]);
      if (best < 0 || d < best_d - 1e-15) {
        best = i;
        best_d = d;
      }
    }
    used[static_cast<std::size_t>(best)] = true;
    tour.cities.push_back(best);
    at = points[static_cast<std::size_t>(best)];
  }

  // 2-opt: every accepted move strictly decreases the length
  auto point_at = [&](int pos) -> const Point& {
    return points[static_cast<std::size_t>(tour.cities[static_cast<std::size_t>(pos)])];
  };
  bool improved = true;
  while (improved) {
    improved = false;
    for (int i = 0; i < n - 1 && !improved; ++i) {
      const Point& prev = i == 0 ? depot : point_at(i - 1);
      for (int j = i + 1; j < n && !improved; ++j) {
        const Point& next = j == n - 1 ? depot : point_at(j + 1);
        const double before = dist(prev, point_at(i)) + dist(point_at(j), next);
        const double after = dist(prev, point_at(j)) + dist(point_at(i), next);
        if (after < before - 1e-12) {
          std::reverse(tour.cities.begin() + i, tour.cities.begin() + j + 1);
          improved = true;
        }
      }
    }
  }
  tour.length = tour_length(points, depot, tour.cities);
  return tour;
}

double minmax_cost(const std::vector<AgentTour>& tours) {
  double m = 0.0;
  for (const auto& t : tours) m = std::max(m, t.length);
  return m;
}

std::vector<AgentTour> decode_tours(const MtspInstance& inst, const std::vector<int>& assignment) {
  std::vector<AgentTour> tours(static_cast<std::size_t>(inst.agents));
  for (int a = 0; a < inst.agents; ++a) {
    std::vector<Point> pts;
    std::vector<int> ids;
    for (std::size_t i = 0; i < inst.cities.size(); ++i) {
      if (assignment[i] == a) {
        pts.push_back(inst.cities[i]);
        ids.push_back(static_cast<int>(i));
      }
    }
    AgentTour local = tsp_solve(pts, inst.depot);
    AgentTour remapped;
    remapped.length = local.length;
    for (int k : local.cities) remapped.cities.push_back(ids[static_cast<std::size_t>(k)]);
    tours[static_cast<std::size_t>(a)] = std::move(remapped);
  }
  return tours;
}

// ---- networks --------------------------------------------------------------------

namespace {

constexpr int kCityFeatures = 7;

Tensor city_features(const MtspInstance& inst) {
  const std::int64_t n = static_cast<std::int64_t>(inst.cities.size());
  Tensor f = Tensor::zeros({n, kCityFeatures});
  for (std::int64_t i = 0; i < n; ++i) {
    const Point& c = inst.cities[static_cast<std::size_t>(i)];
    const double dx = c.x - inst.depot.x, dy = c.y - inst.depot.y;
    const double r = std::sqrt(dx * dx + dy * dy);
    double* row = f.data() + i * kCityFeatures;
    row[0] = c.x;
    row[1] = c.y;
    row[2] = dx;
    row[3] = dy;
    row[4] = r;
    row[5] = r > 1e-12 ? dx / r : 0.0;
    row[6] = r > 1e-12 ? dy / r : 0.0;
  }
  return f;
}

Tensor rand_init(CounterRng& rng, Shape s, double scale) {
  Tensor t = Tensor::zeros(std::move(s));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-scale, scale);
  return t;
}

}  // namespace

AllocationNet AllocationNet::make(int agents, int hidden, std::uint64_t seed) {
  AllocationNet net;
  net.agents = agents;
  net.hidden = hidden;
  CounterRng rng(seed, 41);
  net.params.add("alloc.w1", rand_init(rng, {kCityFeatures, hidden}, 1.0 / std::sqrt(7.0)));
  net.params.add("alloc.b1", Tensor::zeros({1, hidden}));
  net.params.add("alloc.w2", rand_init(rng, {hidden, hidden}, 1.0 / std::sqrt(1.0 * hidden)));
  net.params.add("alloc.b2", Tensor::zeros({1, hidden}));
  net.params.add("alloc.w3", Tensor::zeros({hidden, agents}));  // uniform rows at init
  net.params.add("alloc.b3", Tensor::zeros({1, agents}));
  return net;
}

Var AllocationNet::forward(Tape& t, const std::vector<Var>& pv, const MtspInstance& inst) const {
  Var x = t.constant(city_features(inst));
  Var h1 = tanh(add(matmul(x, pv[0]), pv[1]));
  Var h2 = tanh(add(matmul(h1, pv[2]), pv[3]));
  Var logits = add(matmul(h2, pv[4]), pv[5]);
  return softmax(logits);  // [N, M]
}

Tensor AllocationNet::probabilities(const MtspInstance& inst) const {
  Tape t;
  auto pv = params.bind(t);
  return t.value(forward(t, pv, inst));
}

SurrogateNet SurrogateNet::make(int max_cities, int agents, int hidden, std::uint64_t seed) {
  SurrogateNet net;
  net.max_cities = max_cities;
  net.agents = agents;
  net.hidden = hidden;
  CounterRng rng(seed, 43);
  const std::int64_t in_dim = static_cast<std::int64_t>(max_cities) * agents + 3;
  net.params.add("surr.w1", rand_init(rng, {in_dim, hidden}, 1.0 / std::sqrt(static_cast<double>(in_dim))));
  net.params.add("surr.b1", Tensor::zeros({1, hidden}));
  net.params.add("surr.w2", rand_init(rng, {hidden, hidden}, 1.0 / std::sqrt(1.0 * hidden)));
  net.params.add("surr.b2", Tensor::zeros({1, hidden}));
  net.params.add("surr.w3", Tensor::zeros({hidden, 1}));
  // start the bias at the typical min-max route scale so the control variate
  // centers the score coefficient from the first iteration
  net.params.add("surr.b3", Tensor::from({1, 1}, {3.0}));
  return net;
}

Var SurrogateNet::forward(Tape& t, const std::vector<Var>& pv, const MtspInstance& inst,
                          Var allocation) const {
  const std::int64_t n = static_cast<std::int64_t>(inst.cities.size());
  if (n > max_cities) throw SolveError("surrogate: instance larger than max_cities");
  // pad the flattened allocation to the fixed input width and append summary
  Var flat = reshape(allocation, {1, n * agents});
  const std::int64_t pad = static_cast<std::int64_t>(max_cities) * agents - n * agents;
  if (pad > 0) flat = concat(flat, t.constant(Tensor::zeros({1, pad})), 1);
  double mean_r = 0.0;
  for (const auto& c : inst.cities) mean_r += dist(c, inst.depot);
  mean_r /= static_cast<double>(n);
  Tensor summary = Tensor::from(
      {1, 3}, {static_cast<double>(n) / max_cities, mean_r, static_cast<double>(inst.agents)});
  Var x = concat(flat, t.constant(std::move(summary)), 1);
  Var h1 = tanh(add(matmul(x, pv[0]), pv[1]));
  Var h2 = tanh(add(matmul(h1, pv[2]), pv[3]));
  return reshape(add(matmul(h2, pv[4]), pv[5]), Shape{});
}

// ---- hypergradient ----------------------------------------------------------------

MtspGradients mtsp_grad(const MtspInstance& inst, const AllocationNet& alloc,
                          const SurrogateNet& surrogate,
                          const MtspGradConfig& cfg, CounterRng& rng) {
  inst.validate();
  if (cfg.samples < 1) throw SolveError("mtsp_grad: need at least one sample");
  const std::int64_t n = static_cast<std::int64_t>(inst.cities.size());
  const int m = inst.agents;

  Tape t;
  auto theta = alloc.params.bind(t);
  auto gamma = surrogate.params.bind(t);
  Var probs = alloc.forward(t, theta, inst);
  const Tensor probs_val = t.value(probs);

  // pathwise term through the probability matrix, recorded so the variance
  // objective can differentiate it with respect to the surrogate parameters
  Var spath = surrogate.forward(t, gamma, inst, probs);
  std::vector<Var> gpath = gradient(spath, std::span<const Var>(theta), /*record=*/true);

  MtspGradients out;
  out.theta_grad.assign(theta.size(), Tensor());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    out.theta_grad[j] = Tensor::zeros(alloc.params[j].value.shape());
  }

  Var var_obj = t.constant(0.0);
  std::int64_t total_components = 0;
  for (std::size_t j = 0; j < theta.size(); ++j) total_components += alloc.params[j].value.size();

  for (int s = 0; s < cfg.samples; ++s) {
    // draw one assignment row by row
    std::vector<int> assignment(static_cast<std::size_t>(n));
    Tensor onehot = Tensor::zeros({n, m});
    for (std::int64_t i = 0; i < n; ++i) {
      const double u = rng.uniform();
      double acc = 0.0;
      int pick = m - 1;
      for (int a = 0; a < m; ++a) {
        acc += probs_val[i * m + a];
        if (u < acc) {
          pick = a;
          break;
        }
      }
      assignment[static_cast<std::size_t>(i)] = pick;
      onehot[i * m + pick] = 1.0;
    }

    const double cost = minmax_cost(decode_tours(inst, assignment));
    out.mean_cost += cost;

    // surrogate value at the one-hot allocation; cut in the theta estimator,
    // gamma-live in the variance objective (which anchors L' to the cost)
    Var sv{nullptr, -1};
    double surr_val = 0.0;
    if (cfg.use_surrogate) {
      sv = surrogate.forward(t, gamma, inst, t.constant(onehot));
      surr_val = t.value(sv).value();
    }
    out.mean_surrogate += surr_val;

    // dlog f(z|theta)/dtheta for this sample
    const std::int32_t mark = t.size();
    Var logp = sum(mul(log(probs + 1e-300), t.constant(onehot)));
    std::vector<Tensor> glogp = gradient_values(logp, std::span<const Var>(theta));
    t.rollback(mark);

    const double coeff = cost - surr_val;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      vec_view(out.theta_grad[j]) += coeff * vec_view(glogp[j]);
      if (cfg.use_surrogate) vec_view(out.theta_grad[j]) += vec_view(t.value(gpath[j]));
    }

    if (cfg.use_surrogate) {
      // single-sample variance term: mean of squared estimator components
      Var coeff_var = sub(t.constant(cost), sv);
      Var sq = t.constant(0.0);
      for (std::size_t j = 0; j < theta.size(); ++j) {
        Var est = add(mul(t.constant(glogp[j]), coeff_var), gpath[j]);
        sq = add(sq, sum(mul(est, est)));
      }
      var_obj = add(var_obj, sq * (1.0 / static_cast<double>(total_components)));
    }
  }

  const double inv_s = 1.0 / static_cast<double>(cfg.samples);
  out.mean_cost *= inv_s;
  out.mean_surrogate *= inv_s;
  for (auto& g : out.theta_grad) vec_view(g) *= inv_s;

  if (cfg.entropy_weight > 0.0) {
    // exploration bonus: descend on -H(P), i.e. add d(-H)/dtheta
    const std::int32_t mark = t.size();
    Var neg_entropy = sum(mul(probs, log(probs + 1e-300)));
    auto ge = gradient_values(neg_entropy, std::span<const Var>(theta));
    t.rollback(mark);
    for (std::size_t j = 0; j < theta.size(); ++j) {
      vec_view(out.theta_grad[j]) += cfg.entropy_weight * vec_view(ge[j]);
    }
  }

  Tensor sq_diag = Tensor::scalar(0.0);
  if (cfg.use_surrogate) {
    var_obj = var_obj * inv_s;
    sq_diag = t.value(var_obj);
    out.gamma_grad = gradient_values(var_obj, std::span<const Var>(gamma));
  } else {
    for (std::size_t j = 0; j < gamma.size(); ++j) {
      out.gamma_grad.push_back(Tensor::zeros(surrogate.params[j].value.shape()));
    }
  }
  out.per_sample_theta_sq = std::move(sq_diag);
  return out;
}

// ---- baselines ----------------------------------------------------------------------

double angular_sector_baseline(const MtspInstance& inst) {
  // greedy construction: one angular sweep, contiguous count-balanced arcs
  const int n = static_cast<int>(inst.cities.size());
  const int m = inst.agents;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const Point& pa = inst.cities[static_cast<std::size_t>(a)];
    const Point& pb = inst.cities[static_cast<std::size_t>(b)];
    const double aa = std::atan2(pa.y - inst.depot.y, pa.x - inst.depot.x);
    const double ab = std::atan2(pb.y - inst.depot.y, pb.x - inst.depot.x);
    if (aa != ab) return aa < ab;
    return a < b;
  });
  double worst = 0.0;
  int at = 0;
  for (int a = 0; a < m; ++a) {
    const int take = (n - at) / (m - a) + (((n - at) % (m - a)) > 0 ? 1 : 0);
    std::vector<Point> pts;
    for (int k = 0; k < take; ++k) {
      pts.push_back(inst.cities[static_cast<std::size_t>(order[static_cast<std::size_t>(at + k)])]);
    }
    at += take;
    worst = std::max(worst, tsp_solve(pts, inst.depot).length);
  }
  return worst;
}

double sampled_allocation_cost(const MtspInstance& inst, const AllocationNet& alloc, int draws,
                               CounterRng& rng) {
  Tensor probs = alloc.probabilities(inst);
  const std::int64_t n = static_cast<std::int64_t>(inst.cities.size());
  double best = 1e18;
  for (int k = 0; k < draws; ++k) {
    std::vector<int> assignment(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      const double u = rng.uniform();
      double acc = 0.0;
      int pick = inst.agents - 1;
      for (int a = 0; a < inst.agents; ++a) {
        acc += probs[i * inst.agents + a];
        if (u < acc) {
          pick = a;
          break;
        }
      }
      assignment[static_cast<std::size_t>(i)] = pick;
    }
    best = std::min(best, minmax_cost(decode_tours(inst, assignment)));
  }
  return best;
}

double argmax_allocation_cost(const MtspInstance& inst, const AllocationNet& alloc) {
  Tensor probs = alloc.probabilities(inst);
  const std::int64_t n = static_cast<std::int64_t>(inst.cities.size());
  std::vector<int> assignment(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (int a = 1; a < inst.agents; ++a) {
      if (probs[i * inst.agents + a] > probs[i * inst.agents + best]) best = a;
    }
    assignment[static_cast<std::size_t>(i)] = best;
  }
  return minmax_cost(decode_tours(inst, assignment));
}

// ---- training -------------------------------------------------------------------------

MtspTrainResult mtsp_train(const MtspTrainConfig& cfg) {
  MtspTrainResult out;
  out.alloc = AllocationNet::make(cfg.agents, 64, cfg.seed);
  out.surrogate = SurrogateNet::make(cfg.cities_max, cfg.agents, 256, cfg.seed + 1);

  AdamOptimizer opt_theta(AdamConfig{.lr = cfg.lr_theta});
  AdamOptimizer opt_gamma(AdamConfig{.lr = cfg.lr_gamma});
  CounterRng gen_rng(cfg.seed, 301);
  CounterRng sample_rng(cfg.seed, 302);
  VarianceTracker tracker;

  MtspGradConfig gcfg;
  gcfg.samples = cfg.samples;
  gcfg.use_surrogate = cfg.use_surrogate;
  gcfg.entropy_weight = cfg.entropy_weight;

  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Tensor> theta_acc, gamma_acc;
    std::vector<Tensor> per_instance_flat;  // estimator per instance, for variance
    double mean_cost = 0.0;
    for (int b = 0; b < cfg.batch_instances; ++b) {
      const int n = cfg.cities_min +
                    static_cast<int>(gen_rng.uniform_int(cfg.cities_max - cfg.cities_min + 1));
      MtspInstance inst = generate_mtsp(n, cfg.agents, gen_rng);
      auto grads = mtsp_grad(inst, out.alloc, out.surrogate, gcfg, sample_rng);
      mean_cost += grads.mean_cost;

      std::int64_t total = 0;
      for (const auto& g : grads.theta_grad) total += g.size();
      Tensor flat = Tensor::zeros({total});
      std::int64_t at = 0;
      for (const auto& g : grads.theta_grad) {
        for (std::int64_t k = 0; k < g.size(); ++k) flat[at++] = g[k];
      }
      per_instance_flat.push_back(std::move(flat));

      if (theta_acc.empty()) {
        theta_acc = std::move(grads.theta_grad);
        gamma_acc = std::move(grads.gamma_grad);
      } else {
        for (std::size_t j = 0; j < theta_acc.size(); ++j) {
          vec_view(theta_acc[j]) += vec_view(grads.theta_grad[j]);
        }
        for (std::size_t j = 0; j < gamma_acc.size(); ++j) {
          vec_view(gamma_acc[j]) += vec_view(grads.gamma_grad[j]);
        }
      }
    }
    const double invb = 1.0 / static_cast<double>(cfg.batch_instances);
    for (auto& g : theta_acc) vec_view(g) *= invb;
    for (auto& g : gamma_acc) vec_view(g) *= invb;

    MtspIterRecord rec;
    rec.iter = it;
    rec.mean_minmax = mean_cost * invb;
    rec.log_grad_variance = cfg.batch_instances >= 2
                                ? track_variance(tracker, per_instance_flat).mean_log_variance
                                : 0.0;
    out.history.push_back(rec);

    opt_theta.step(out.alloc.params, theta_acc);
    if (cfg.use_surrogate) opt_gamma.step(out.surrogate.params, gamma_acc);
  }

  // held-out evaluation: best-of-K draws from the trained allocation against
  // the angular-sector baseline (the policy is stochastic; sampling is its
  // native decode, seeded for reproducibility)
  CounterRng eval_rng(cfg.seed, 404);
  CounterRng decode_rng(cfg.seed, 405);
  for (int e = 0; e < cfg.eval_instances; ++e) {
    const int n = cfg.cities_min +
                  static_cast<int>(eval_rng.uniform_int(cfg.cities_max - cfg.cities_min + 1));
    MtspInstance inst = generate_mtsp(n, cfg.agents, eval_rng);
    out.eval_mean_minmax += sampled_allocation_cost(inst, out.alloc, cfg.eval_draws, decode_rng);
    out.eval_baseline += angular_sector_baseline(inst);
  }
  out.eval_mean_minmax /= static_cast<double>(cfg.eval_instances);
  out.eval_baseline /= static_cast<double>(cfg.eval_instances);
  return out;
}

}  // namespace blopt
