#include "blopt/astar.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>

#include "blopt/autodiff.hpp"

namespace blopt {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kBigCost = 1e6;

const int kDr[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
const int kDc[8] = {-1, 0, 1, -1, 1, -1, 0, 1};

double step_cost(int dir) { return (kDr[dir] != 0 && kDc[dir] != 0) ? kSqrt2 : 1.0; }

}  // namespace

void GridPlanInstance::validate() const {
  if (height < 3 || width < 3) throw ShapeError("grid: H and W must be at least 3");
  if (static_cast<std::int64_t>(occupied.size()) != static_cast<std::int64_t>(height) * width) {
    throw ShapeError("grid: occupancy size does not match H x W");
  }
  auto inside = [&](const Cell& c) {
    return c.row >= 0 && c.row < height && c.col >= 0 && c.col < width;
  };
  if (!inside(start) || !inside(goal)) throw ShapeError("grid: start/goal out of bounds");
  if (start == goal) throw ShapeError("grid: start equals goal");
  if (blocked(start.row, start.col) || blocked(goal.row, goal.col)) {
    throw ShapeError("grid: start/goal on an obstacle");
  }
}

GridPlanInstance parse_map(const std::string& text) {
  GridPlanInstance g;
  std::istringstream ss(text);
  std::string line;
  int starts = 0, goals = 0;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (g.width == 0) {
      g.width = static_cast<int>(line.size());
    } else if (static_cast<int>(line.size()) != g.width) {
      throw std::runtime_error("map: ragged line length");
    }
    for (int c = 0; c < g.width; ++c) {
      const char ch = line[static_cast<std::size_t>(c)];
      switch (ch) {
        case '.': g.occupied.push_back(0); break;
        case '#': g.occupied.push_back(1); break;
        case 'S':
          g.occupied.push_back(0);
          g.start = Cell{g.height, c};
          ++starts;
          break;
        case 'G':
          g.occupied.push_back(0);
          g.goal = Cell{g.height, c};
          ++goals;
          break;
        default: throw std::runtime_error(std::string("map: unknown character '") + ch + "'");
      }
    }
    ++g.height;
  }
  if (starts != 1 || goals != 1) throw std::runtime_error("map: need exactly one S and one G");
  g.validate();
  return g;
}

std::string map_to_text(const GridPlanInstance& g) {
  std::string out;
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      char ch = g.blocked(r, c) ? '#' : '.';
      if (Cell{r, c} == g.start) ch = 'S';
      if (Cell{r, c} == g.goal) ch = 'G';
      out += ch;
    }
    out += '\n';
  }
  return out;
}

GridPlanInstance load_map(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_map(ss.str());
}

void save_map(const GridPlanInstance& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << map_to_text(g);
}

HeuristicField zero_heuristic(const GridPlanInstance& g) {
  return HeuristicField{Tensor::zeros({g.height, g.width})};
}

HeuristicField euclidean_heuristic(const GridPlanInstance& g) {
  Tensor h = Tensor::zeros({g.height, g.width});
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      const double dr = r - g.goal.row, dc = c - g.goal.col;
      h[static_cast<std::int64_t>(r) * g.width + c] = std::sqrt(dr * dr + dc * dc);
    }
  }
  return HeuristicField{std::move(h)};
}

namespace {

SearchResult astar_impl(const GridPlanInstance& g, const HeuristicField& hf,
                        const std::vector<std::uint8_t>* allowed) {
  g.validate();
  if (!(hf.h.shape() == Shape{g.height, g.width})) {
    throw ShapeError("astar: heuristic field shape " + shape_str(hf.h.shape()));
  }
  const int n = g.height * g.width;
  auto id = [&](int r, int c) { return r * g.width + c; };
  std::vector<double> dist(static_cast<std::size_t>(n), kBigCost);
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  std::vector<std::uint8_t> closed(static_cast<std::size_t>(n), 0);

  // (f, id); deterministic tie-break on the node id
  using Entry = std::pair<double, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> open;

  SearchResult res;
  res.explored = Tensor::zeros({g.height, g.width});

  const int sid = id(g.start.row, g.start.col);
  const int gid = id(g.goal.row, g.goal.col);
  dist[static_cast<std::size_t>(sid)] = 0.0;
  open.push({hf.h[sid], sid});

  while (!open.empty()) {
    auto [f, u] = open.top();
    open.pop();
    ++res.work;
    if (closed[static_cast<std::size_t>(u)]) continue;
    closed[static_cast<std::size_t>(u)] = 1;
    res.explored[u] = 1.0;
    res.explored_count += 1.0;
    if (u == gid) {
      res.found = true;
      break;
    }
    const int ur = u / g.width, uc = u % g.width;
    for (int d = 0; d < 8; ++d) {
      const int vr = ur + kDr[d], vc = uc + kDc[d];
      if (vr < 0 || vr >= g.height || vc < 0 || vc >= g.width) continue;
      if (g.blocked(vr, vc)) continue;
      const int v = id(vr, vc);
      if (allowed && !(*allowed)[static_cast<std::size_t>(v)] && v != gid && v != sid) continue;
      if (closed[static_cast<std::size_t>(v)]) continue;
      ++res.work;
      const double nd = dist[static_cast<std::size_t>(u)] + step_cost(d);
      if (nd < dist[static_cast<std::size_t>(v)] - 1e-15) {
        dist[static_cast<std::size_t>(v)] = nd;
        parent[static_cast<std::size_t>(v)] = u;
        open.push({nd + hf.h[v], v});
      }
    }
  }
  if (!res.found) return res;  // explicit no-path result

  res.path_cost = dist[static_cast<std::size_t>(gid)];
  std::vector<Cell> rev;
  for (int v = gid; v != -1; v = parent[static_cast<std::size_t>(v)]) {
    rev.push_back(Cell{v / g.width, v % g.width});
  }
  res.path.assign(rev.rbegin(), rev.rend());
  return res;
}

}  // namespace

SearchResult astar_classic(const GridPlanInstance& g, const HeuristicField& h) {
  return astar_impl(g, h, nullptr);
}

SearchResult astar_classic_masked(const GridPlanInstance& g, const HeuristicField& h,
                                  const std::vector<std::uint8_t>& allowed) {
  return astar_impl(g, h, &allowed);
}

// ---- differentiable search ------------------------------------------------------

SoftSearchVars diff_astar(Tape& t, const GridPlanInstance& g, Var h_field,
                          const DiffAstarConfig& cfg) {
  g.validate();
  if (cfg.temperature <= 0) throw SolveError("diff_astar: temperature must be positive");
  const int hgt = g.height, wid = g.width;
  const std::int64_t n = static_cast<std::int64_t>(hgt) * wid;
  const int max_iters = cfg.max_iterations > 0 ? cfg.max_iterations : 4 * hgt * wid;
  auto id = [&](int r, int c) { return r * wid + c; };
  const std::int64_t sid = id(g.start.row, g.start.col);
  const std::int64_t gid = id(g.goal.row, g.goal.col);
  const Tensor hv = t.value(h_field);  // copy: the tape vector reallocates

  Tensor free_t = Tensor::zeros({hgt, wid});
  for (std::int64_t i = 0; i < n; ++i) free_t[i] = g.occupied[static_cast<std::size_t>(i)] ? 0 : 1;
  Var free_m = t.constant(std::move(free_t));
  Var kernel8 = t.constant(Tensor::from({1, 1, 3, 3}, {1, 1, 1, 1, 0, 1, 1, 1, 1}));
  Var kernel_s = t.constant(Tensor::from({1, 1, 3, 3}, {0, 1, 0, 1, 0, 1, 0, 1, 0}));
  Var kernel_d = t.constant(Tensor::from({1, 1, 3, 3}, {1, 0, 1, 0, 0, 0, 1, 0, 1}));
  Var zeros_m = t.constant(Tensor::zeros({hgt, wid}));

  // hard search state (the forward truth)
  std::vector<double> dist(static_cast<std::size_t>(n), kBigCost);
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  std::vector<std::uint8_t> closed(static_cast<std::size_t>(n), 0);
  std::vector<std::uint8_t> in_open(static_cast<std::size_t>(n), 0);
  dist[static_cast<std::size_t>(sid)] = 0.0;
  in_open[static_cast<std::size_t>(sid)] = 1;

  // soft open mass mirrors the hard open set exactly in value
  Tensor o0 = Tensor::zeros({hgt, wid});
  o0[sid] = 1.0;
  Var open_m = t.constant(std::move(o0));
  Var soft_mass = t.constant(Tensor::zeros({hgt, wid}));
  // soft cost-to-come: values track the hard distances exactly (selections
  // are one-hot forward) while gradients flow through the selection softmax
  Tensor gs0 = Tensor::full({hgt, wid}, kBigCost);
  gs0[sid] = 0.0;
  Var g_soft = t.constant(std::move(gs0));

  SoftSearchVars out;
  int it = 0;
  for (; it < max_iters; ++it) {
    // hard selection: smallest f = g + h, ties to the smallest id
    std::int64_t sel = -1;
    double best = kBigCost * 2;
    double c0 = kBigCost * 2;
    for (std::int64_t i = 0; i < n; ++i) {
      if (!in_open[static_cast<std::size_t>(i)]) continue;
      const double f = dist[static_cast<std::size_t>(i)] + hv[i];
      c0 = std::min(c0, f);
      if (f < best - 1e-15) {
        best = f;
        sel = i;
      }
    }
    if (sel < 0) break;  // open set exhausted: no path

    // soft selection over the same open set (G values are data)
    Tensor gconst = Tensor::zeros({hgt, wid});
    for (std::int64_t i = 0; i < n; ++i) gconst[i] = dist[static_cast<std::size_t>(i)];
    Var delta = add(t.constant(std::move(gconst)), h_field) - c0;
    {
      const Tensor& dv = t.value(delta);
      Tensor neg = Tensor::zeros({hgt, wid});
      bool any = false;
      for (std::int64_t i = 0; i < n; ++i) {
        if (dv[i] < 0.0) {
          neg[i] = 1.0;
          any = true;
        }
      }
      if (any) delta = select(t.constant(std::move(neg)), zeros_m, delta);
    }
    Var score = mul(open_m, exp(mul(delta, t.constant(-1.0 / cfg.temperature))));
    Var p = div(score, broadcast_to(reshape(sum(score), Shape{}), Shape{hgt, wid}));
    soft_mass = add(soft_mass, p);

    // straight-through selection indicator: hard value, softmax gradient
    Tensor sel_onehot = Tensor::zeros({hgt, wid});
    sel_onehot[sel] = 1.0;
    Tensor correction = sel_onehot;
    vec_view(correction) -= vec_view(t.value(p));
    Var sel_ste = add(p, t.constant(std::move(correction)));

    // hard bookkeeping: close and relax
    closed[static_cast<std::size_t>(sel)] = 1;
    in_open[static_cast<std::size_t>(sel)] = 0;
    if (sel == gid) {
      out.goal_reached = true;
      ++it;
      break;
    }
    const int sr = static_cast<int>(sel) / wid, sc = static_cast<int>(sel) % wid;
    for (int d = 0; d < 8; ++d) {
      const int vr = sr + kDr[d], vc = sc + kDc[d];
      if (vr < 0 || vr >= hgt || vc < 0 || vc >= wid) continue;
      if (g.blocked(vr, vc)) continue;
      const auto v = static_cast<std::size_t>(id(vr, vc));
      if (closed[v]) continue;
      const double nd = dist[static_cast<std::size_t>(sel)] + step_cost(d);
      if (nd < dist[v] - 1e-15) {
        dist[v] = nd;
        parent[v] = static_cast<int>(sel);
      }
      in_open[v] = 1;
    }

    // expansion on the tape: neighborhood aggregation of the selection opens
    // the frontier; closed cells drop out. Values track the hard sets exactly.
    Var sel3 = reshape(sel_ste, {1, hgt, wid});
    Var nb = mul(free_m, reshape(conv3x3(sel3, kernel8), {hgt, wid}));
    Var ow = add(open_m, nb);
    ow = sub(ow, relu(ow - 1.0));
    Tensor closed_t = Tensor::zeros({hgt, wid});
    for (std::int64_t i = 0; i < n; ++i) closed_t[i] = closed[static_cast<std::size_t>(i)];
    open_m = relu(sub(ow, t.constant(std::move(closed_t))));

    // soft-min relaxation of the cost-to-come through the same aggregation
    Var ms = reshape(conv3x3(sel3, kernel_s), {hgt, wid});
    Var md = reshape(conv3x3(sel3, kernel_d), {hgt, wid});
    Var pg3 = reshape(mul(sel_ste, g_soft), {1, hgt, wid});
    Var pgs = reshape(conv3x3(pg3, kernel_s), {hgt, wid});
    Var pgd = reshape(conv3x3(pg3, kernel_d), {hgt, wid});
    Var cand = div(add(add(pgs, pgd), add(ms, md * kSqrt2)), add(ms, md) + 1e-12);
    Tensor touched = Tensor::zeros({hgt, wid});
    for (int d = 0; d < 8; ++d) {
      const int vr = static_cast<int>(sel) / wid + kDr[d], vc = static_cast<int>(sel) % wid + kDc[d];
      if (vr < 0 || vr >= hgt || vc < 0 || vc >= wid) continue;
      if (g.blocked(vr, vc) || closed[static_cast<std::size_t>(id(vr, vc))]) continue;
      touched[id(vr, vc)] = 1.0;
    }
    g_soft = sub(g_soft, mul(t.constant(std::move(touched)), relu(sub(g_soft, cand))));
  }

  out.iterations = it;
  out.budget_exhausted = !out.goal_reached && it >= max_iters;
  out.soft_mass = soft_mass;

  // straight-through explored mask: closed indicator forward, soft backward
  Tensor closed_ind = Tensor::zeros({hgt, wid});
  double closed_count = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (closed[static_cast<std::size_t>(i)]) {
      closed_ind[i] = 1.0;
      closed_count += 1.0;
    }
  }
  Tensor mask_corr = closed_ind;
  vec_view(mask_corr) -= vec_view(t.value(soft_mass));
  out.explored = add(soft_mass, t.constant(std::move(mask_corr)));
  out.explored_count = sum(out.explored);

  if (out.goal_reached) {
    out.hard_cost = dist[static_cast<std::size_t>(gid)];
    std::vector<Cell> rev;
    for (int v = static_cast<int>(gid); v != -1; v = parent[static_cast<std::size_t>(v)]) {
      rev.push_back(Cell{v / wid, v % wid});
    }
    out.path.assign(rev.rbegin(), rev.rend());
  }
  out.path_cost = reshape(slice(g_soft, {g.goal.row, g.goal.col}, {1, 1}), Shape{});

  // off-path soft mass (the area term is measured against the returned path)
  Tensor offpath = Tensor::ones({hgt, wid});
  for (const Cell& c : out.path) offpath[id(c.row, c.col)] = 0.0;
  out.offpath_mass = dot(soft_mass, t.constant(std::move(offpath)));
  return out;
}

SearchResult diff_astar_forward(const GridPlanInstance& g, const HeuristicField& h,
                                double temperature, int max_iterations) {
  Tape t;
  Var hv = t.constant(h.h);
  DiffAstarConfig cfg;
  cfg.temperature = temperature;
  cfg.max_iterations = max_iterations;
  SoftSearchVars s = diff_astar(t, g, hv, cfg);
  SearchResult res;
  res.found = s.goal_reached;
  res.budget_exhausted = s.budget_exhausted;
  res.path = s.path;
  res.path_cost = res.found ? t.value(s.path_cost).value() : 0.0;
  res.explored = t.value(s.soft_mass);  // soft mask; count is the hard area
  res.explored_count = t.value(s.explored_count).value();
  res.work = s.iterations;
  return res;
}

Var ul_cost(Tape&, const SoftSearchVars& s, double w_a, double w_l) {
  // search area measured against the returned path plus the soft path length
  return add(s.offpath_mass * w_a, s.path_cost * w_l);
}

ExpRt metric_exp_rt(double s_base, double s, double t_base, double t) {
  if (s_base <= 0 || t_base <= 0) {
    throw SolveError("metric_exp_rt: baselines must be positive");
  }
  return ExpRt{100.0 * (s_base - s) / s_base, 100.0 * (t_base - t) / t_base};
}

// ---- heuristic network ----------------------------------------------------------

namespace {

// per-cell displacement and distance features, a fixed function of the one-hot
// start/goal channels. Two 3x3 aggregation layers only see a 5x5 window, so
// goal direction has to enter the per-cell perceptron explicitly.
constexpr int kCoordFeatures = 4;

Tensor coord_features(const GridPlanInstance& g) {
  const std::int64_t hgt = g.height, wid = g.width;
  const double scale = 1.0 / static_cast<double>(std::max(g.height, g.width));
  Tensor f = Tensor::zeros({hgt * wid, kCoordFeatures});
  std::int64_t at = 0;
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) {
      const double dgr = (g.goal.row - r) * scale;
      const double dgc = (g.goal.col - c) * scale;
      const double dsr = (g.start.row - r) * scale;
      const double dsc = (g.start.col - c) * scale;
      f[at * kCoordFeatures + 0] = dgr;
      f[at * kCoordFeatures + 1] = dgc;
      f[at * kCoordFeatures + 2] = std::sqrt(dgr * dgr + dgc * dgc);
      f[at * kCoordFeatures + 3] = std::sqrt(dsr * dsr + dsc * dsc);
      ++at;
    }
  }
  return f;
}

}  // namespace

HeuristicNet HeuristicNet::make(int channels, int hidden, std::uint64_t seed) {
  HeuristicNet net;
  net.channels = channels;
  net.hidden = hidden;
  CounterRng rng(seed, 31);
  auto rand_tensor = [&rng](Shape s, double scale) {
    Tensor t = Tensor::zeros(std::move(s));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-scale, scale);
    return t;
  };
  // zero output head: the initial field is exactly softplus(0) everywhere
  net.params.add("hnet.k1", rand_tensor({channels, 3, 3, 3}, 1.0 / std::sqrt(27.0)));
  net.params.add("hnet.k2", rand_tensor({channels, channels, 3, 3},
                                        1.0 / std::sqrt(9.0 * channels)));
  net.params.add("hnet.w1", rand_tensor({channels + kCoordFeatures, hidden},
                                        1.0 / std::sqrt(channels + 4.0)));
  net.params.add("hnet.b1", Tensor::zeros({1, hidden}));
  net.params.add("hnet.w2", Tensor::zeros({hidden, 1}));
  net.params.add("hnet.b2", Tensor::from({1, 1}, {2.0}));
  // direct gain on the raw goal distance feeding the output unit; the
  // distance-proportional part of the field is then one coefficient away
  net.params.add("hnet.wd", Tensor::zeros({1, 1}));
  return net;
}

Var HeuristicNet::forward(Tape& t, const std::vector<Var>& pv, const GridPlanInstance& g) const {
  const std::int64_t hgt = g.height, wid = g.width;
  const std::int64_t n = hgt * wid;
  Tensor enc = Tensor::zeros({3, hgt, wid});
  for (std::int64_t i = 0; i < n; ++i) enc[i] = g.occupied[static_cast<std::size_t>(i)] ? 1 : 0;
  enc[n + g.start.row * wid + g.start.col] = 1.0;
  enc[2 * n + g.goal.row * wid + g.goal.col] = 1.0;
  Var x = t.constant(std::move(enc));

  Var z1 = tanh(conv3x3(x, pv[0]));
  Var z2 = tanh(conv3x3(z1, pv[1]));
  Var cells = concat(transpose(reshape(z2, {channels, n})), t.constant(coord_features(g)), 1);
  Var hid = tanh(add(matmul(cells, pv[2]), pv[3]));  // [n, hidden]
  Tensor dgoal = Tensor::zeros({n, 1});
  for (int r = 0; r < g.height; ++r) {
    for (int c2 = 0; c2 < g.width; ++c2) {
      const double dr = g.goal.row - r, dc = g.goal.col - c2;
      dgoal[static_cast<std::int64_t>(r) * g.width + c2] = std::sqrt(dr * dr + dc * dc);
    }
  }
  Var outc = add(add(matmul(hid, pv[4]), pv[5]),
                 mul(broadcast_to(pv[6], Shape{n, 1}), t.constant(std::move(dgoal))));
  return reshape(softplus(outc), {hgt, wid});
}

HeuristicField HeuristicNet::field(const GridPlanInstance& g) const {
  Tape t;
  auto pv = params.bind(t);
  Var h = forward(t, pv, g);
  return HeuristicField{t.value(h)};
}

// ---- maze generation -------------------------------------------------------------

namespace {

void divide(std::vector<std::uint8_t>& occ, int width, int r0, int c0, int r1, int c1,
            CounterRng& rng) {
  const int h = r1 - r0, w = c1 - c0;
  if (h < 5 && w < 5) return;
  const bool horizontal = h == w ? rng.uniform_int(2) == 0 : h > w;
  if (horizontal) {
    // wall row strictly inside, passage column
    const int wall = r0 + 2 + static_cast<int>(rng.uniform_int(std::max(1, h - 4)));
    const int hole = c0 + static_cast<int>(rng.uniform_int(std::max(1, w)));
    for (int c = c0; c < c1; ++c) {
      if (c != hole) occ[static_cast<std::size_t>(wall) * width + c] = 1;
    }
    divide(occ, width, r0, c0, wall, c1, rng);
    divide(occ, width, wall + 1, c0, r1, c1, rng);
  } else {
    const int wall = c0 + 2 + static_cast<int>(rng.uniform_int(std::max(1, w - 4)));
    const int hole = r0 + static_cast<int>(rng.uniform_int(std::max(1, h)));
    for (int r = r0; r < r1; ++r) {
      if (r != hole) occ[static_cast<std::size_t>(r) * width + wall] = 1;
    }
    divide(occ, width, r0, c0, r1, wall, rng);
    divide(occ, width, r0, wall + 1, r1, c1, rng);
  }
}

bool bfs_reachable(const GridPlanInstance& g) {
  std::vector<std::uint8_t> seen(g.occupied.size(), 0);
  std::vector<int> stack = {g.start.row * g.width + g.start.col};
  seen[static_cast<std::size_t>(stack[0])] = 1;
  const int gid = g.goal.row * g.width + g.goal.col;
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    if (u == gid) return true;
    const int ur = u / g.width, uc = u % g.width;
    for (int d = 0; d < 8; ++d) {
      const int vr = ur + kDr[d], vc = uc + kDc[d];
      if (vr < 0 || vr >= g.height || vc < 0 || vc >= g.width) continue;
      if (g.blocked(vr, vc)) continue;
      const int v = vr * g.width + vc;
      if (!seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        stack.push_back(v);
      }
    }
  }
  return false;
}

}  // namespace

GridPlanInstance generate_maze(const MazeGenConfig& cfg, CounterRng& rng) {
  if (cfg.height < 8 || cfg.width < 8) throw SolveError("generate_maze: size too small");
  for (int attempt = 0; attempt < 64; ++attempt) {
    GridPlanInstance g;
    g.height = cfg.height;
    g.width = cfg.width;
    g.occupied.assign(static_cast<std::size_t>(cfg.height) * cfg.width, 0);
    divide(g.occupied, g.width, 0, 0, g.height, g.width, rng);
    for (auto& cell : g.occupied) {
      if (cell && rng.uniform() < cfg.perforation) cell = 0;
    }
    // sample start and goal on distinct free cells, reasonably far apart
    std::vector<int> free_ids;
    for (int i = 0; i < g.height * g.width; ++i) {
      if (!g.occupied[static_cast<std::size_t>(i)]) free_ids.push_back(i);
    }
    if (free_ids.size() < 4) continue;
    bool placed = false;
    for (int tries = 0; tries < 32 && !placed; ++tries) {
      const int a = free_ids[static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(free_ids.size())))];
      const int b = free_ids[static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(free_ids.size())))];
      const Cell ca{a / g.width, a % g.width}, cb{b / g.width, b % g.width};
      const int dist = std::max(std::abs(ca.row - cb.row), std::abs(ca.col - cb.col));
      if (a == b || dist < cfg.min_path_cells) continue;
      g.start = ca;
      g.goal = cb;
      if (bfs_reachable(g)) placed = true;
    }
    if (placed) return g;
  }
  throw SolveError("generate_maze: could not build a solvable instance");
}

// ---- training --------------------------------------------------------------------

AstarEvalSummary evaluate_heuristic(const HeuristicNet& net, const AstarTrainConfig& cfg,
                                    const std::vector<GridPlanInstance>& maps) {
  AstarEvalSummary sum;
  int within = 0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const GridPlanInstance& g = maps[k];
    SearchResult base = astar_classic(g, zero_heuristic(g));  // Dijkstra baseline
    if (!base.found) continue;

    HeuristicField h = net.field(g);
    SearchResult soft = diff_astar_forward(g, h, cfg.temperature);
    std::vector<std::uint8_t> allowed(g.occupied.size(), 0);
    for (std::int64_t i = 0; i < soft.explored.size(); ++i) {
      allowed[static_cast<std::size_t>(i)] = soft.explored[i] >= cfg.eval_mass_threshold ? 1 : 0;
    }
    SearchResult guided = astar_classic_masked(g, h, allowed);
    if (!guided.found) guided = astar_classic(g, h);  // mask disconnected the goal

    AstarEvalRow row;
    row.map_id = static_cast<int>(k);
    ExpRt er = metric_exp_rt(base.explored_count, guided.explored_count,
                             static_cast<double>(base.work), static_cast<double>(guided.work));
    row.exp_pct = er.exp_pct;
    row.rt_pct = er.rt_pct;
    row.cost_ratio = guided.path_cost / base.path_cost;
    if (row.cost_ratio <= 1.05) ++within;
    sum.mean_exp += row.exp_pct;
    sum.mean_rt += row.rt_pct;
    sum.rows.push_back(row);
  }
  if (!sum.rows.empty()) {
    sum.mean_exp /= static_cast<double>(sum.rows.size());
    sum.mean_rt /= static_cast<double>(sum.rows.size());
    sum.frac_within_1_05 = static_cast<double>(within) / static_cast<double>(sum.rows.size());
  }
  return sum;
}

AstarTrainResult train_astar(const AstarTrainConfig& cfg) {
  AstarTrainResult out;
  out.net = HeuristicNet::make(8, 8, cfg.seed);

  CounterRng gen_rng(cfg.seed, 101);
  std::vector<GridPlanInstance> train_maps, eval_maps;
  std::vector<double> opt_costs;
  for (int i = 0; i < cfg.train_maps; ++i) {
    train_maps.push_back(generate_maze(cfg.maze, gen_rng));
    opt_costs.push_back(astar_classic(train_maps.back(), zero_heuristic(train_maps.back())).path_cost);
  }
  CounterRng eval_rng(cfg.seed, 202);
  for (int i = 0; i < cfg.eval_maps; ++i) eval_maps.push_back(generate_maze(cfg.maze, eval_rng));

  AdamOptimizer opt(AdamConfig{.lr = cfg.lr});
  DiffAstarConfig dcfg;
  dcfg.temperature = cfg.temperature;

  const int batch = std::max(1, cfg.batch);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Tensor> acc;
    int in_batch = 0;
    for (std::size_t mi = 0; mi < train_maps.size(); ++mi) {
      const auto& g = train_maps[mi];
      Tape t;
      auto pv = out.net.params.bind(t);
      Var h = out.net.forward(t, pv, g);
      SoftSearchVars s = diff_astar(t, g, h, dcfg);
      // dimensionless area term plus a suboptimality hinge: the length cost
      // engages only when the guided path exceeds this map's optimal cost by
      // the slack factor, so it exerts no drag on healthy maps
      const double cells = static_cast<double>(g.height) * g.width;
      Var excess = relu(s.path_cost - cfg.cost_slack * opt_costs[mi]) * (1.0 / opt_costs[mi]);
      Var loss = add(s.offpath_mass * (cfg.w_a / cells), mul(excess, excess) * cfg.w_l);
      out.ul_history.push_back(t.value(loss).value());
      auto grads = gradient_values(loss, pv);
      if (acc.empty()) {
        acc = std::move(grads);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) vec_view(acc[i]) += vec_view(grads[i]);
      }
      if (++in_batch == batch) {
        for (auto& a : acc) vec_view(a) /= static_cast<double>(in_batch);
        opt.step(out.net.params, acc);
        acc.clear();
        in_batch = 0;
      }
    }
    if (in_batch > 0) {
      for (auto& a : acc) vec_view(a) /= static_cast<double>(in_batch);
      opt.step(out.net.params, acc);
      acc.clear();
    }
    AstarEvalSummary es = evaluate_heuristic(out.net, cfg, eval_maps);
    out.epoch_mean_exp.push_back(es.mean_exp);
  }
  return out;
}

}  // namespace blopt
