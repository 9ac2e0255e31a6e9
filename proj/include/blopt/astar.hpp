#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "blopt/params.hpp"
#include "blopt/rng.hpp"
#include "blopt/tape.hpp"

namespace blopt {

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

// Occupancy grid with one start and one goal, both on free cells.
struct GridPlanInstance {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> occupied;  // row-major, 1 = obstacle
  Cell start;
  Cell goal;

  bool blocked(int r, int c) const {
    return occupied[static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
                    static_cast<std::size_t>(c)] != 0;
  }
  void validate() const;  // throws on malformed instances
};

// map text: '.' free, '#' obstacle, 'S' start, 'G' goal
GridPlanInstance parse_map(const std::string& text);
std::string map_to_text(const GridPlanInstance& g);
GridPlanInstance load_map(const std::string& path);
void save_map(const GridPlanInstance& g, const std::string& path);

// Per-node nonnegative heuristic values.
struct HeuristicField {
  Tensor h;  // [H, W], h >= 0, finite
};

HeuristicField zero_heuristic(const GridPlanInstance& g);
HeuristicField euclidean_heuristic(const GridPlanInstance& g);

struct SearchResult {
  bool found = false;
  std::vector<Cell> path;  // start..goal through free 8-neighbors
  double path_cost = 0.0;  // 1 per straight step, sqrt(2) per diagonal
  Tensor explored;         // [H, W] hard indicator or soft mass
  double explored_count = 0.0;
  std::int64_t work = 0;   // deterministic work counter (pops + relaxations)
  bool budget_exhausted = false;  // soft search only: goal mass not reached
};

// Classic A* over the 8-connected grid; ties broken by (f, g, row-major id).
// With an admissible monotone heuristic the cost is Dijkstra-optimal.
SearchResult astar_classic(const GridPlanInstance& g, const HeuristicField& h);

// Hard A* restricted to a cell mask (used for evaluation with learned fields).
SearchResult astar_classic_masked(const GridPlanInstance& g, const HeuristicField& h,
                                  const std::vector<std::uint8_t>& allowed);

// Differentiable search with straight-through selection: the forward pass is
// exact A* (so thresholded outputs equal astar_classic at any temperature);
// each expansion is realized by the fixed 3x3 neighborhood aggregation and
// each selection contributes a temperature-tau softmax over the open set, so
// gradients flow from the accumulated masks into the heuristic field.
struct SoftSearchVars {
  Var explored;        // [H, W]; value = hard closed indicator, gradient soft
  Var soft_mass;       // [H, W] accumulated soft selection mass
  Var explored_count;  // scalar; value = closed-set size
  Var path_cost;       // scalar; value equals the hard cost under this field
  Var offpath_mass;    // scalar, soft explored mass off the returned path
  bool goal_reached = false;
  bool budget_exhausted = false;
  int iterations = 0;
  std::vector<Cell> path;
  double hard_cost = 0.0;
};

struct DiffAstarConfig {
  double temperature = 1.0;
  int max_iterations = 0;      // 0: defaults to 4 * H * W
  double goal_mass = 0.99;
};

SoftSearchVars diff_astar(Tape& t, const GridPlanInstance& g, Var h_field,
                          const DiffAstarConfig& cfg);

// value-level convenience wrapper
SearchResult diff_astar_forward(const GridPlanInstance& g, const HeuristicField& h,
                                double temperature, int max_iterations = 0);

// w_a * explored mass + w_l * path cost (the lower-level cost is the path
// length alone).
Var ul_cost(Tape& t, const SoftSearchVars& s, double w_a, double w_l);

struct ExpRt {
  double exp_pct = 0.0;
  double rt_pct = 0.0;
};

// Exp = 100 (S_base - S) / S_base, Rt likewise over the work counters.
ExpRt metric_exp_rt(double s_base, double s, double t_base, double t);

// Heuristic network: two 3x3 aggregation layers over the 3-channel encoding
// (map, one-hot start, one-hot goal) followed by a per-cell 2-layer
// perceptron with a softplus output head.
struct HeuristicNet {
  int channels = 8;
  int hidden = 8;
  ParameterStore params;

  static HeuristicNet make(int channels, int hidden, std::uint64_t seed);
  Var forward(Tape& t, const std::vector<Var>& param_vars, const GridPlanInstance& g) const;
  HeuristicField field(const GridPlanInstance& g) const;
};

// ---- maze generation -----------------------------------------------------------

struct MazeGenConfig {
  int height = 32;
  int width = 32;
  double perforation = 0.12;  // fraction of wall cells reopened
  int min_path_cells = 8;     // resample start/goal until far enough apart
};

// Recursive division maze with random perforation; start/goal sampled on free
// cells and verified connected.
GridPlanInstance generate_maze(const MazeGenConfig& cfg, CounterRng& rng);

// ---- training -------------------------------------------------------------------

struct AstarTrainConfig {
  int epochs = 4;
  int train_maps = 500;
  int eval_maps = 60;
  MazeGenConfig maze;
  double temperature = 1.5;
  double w_a = 1.0;
  double w_l = 60.0;        // weight on the squared suboptimality hinge
  double cost_slack = 1.06; // hinge threshold as a multiple of the optimal cost
  double lr = 2e-2;
  int batch = 8;  // maps per gradient update
  double eval_mass_threshold = 1e-3;  // soft-explored support for guided search
  std::uint64_t seed = 0;
};

struct AstarEvalRow {
  int map_id = 0;
  double exp_pct = 0.0;
  double rt_pct = 0.0;
  double cost_ratio = 0.0;  // guided cost / Dijkstra-optimal cost
};

struct AstarEvalSummary {
  std::vector<AstarEvalRow> rows;
  double mean_exp = 0.0;
  double mean_rt = 0.0;
  double frac_within_1_05 = 0.0;  // share of maps with cost ratio <= 1.05
};

struct AstarTrainResult {
  HeuristicNet net;
  std::vector<double> epoch_mean_exp;  // held-out Exp per epoch
  std::vector<double> ul_history;
};

AstarTrainResult train_astar(const AstarTrainConfig& cfg);

// Evaluation: hard A* guided by the learned field, restricted to cells whose
// soft explored mass exceeds the threshold (falls back to the full grid when
// the restricted region disconnects the goal). Baseline: h = 0.
AstarEvalSummary evaluate_heuristic(const HeuristicNet& net, const AstarTrainConfig& cfg,
                                    const std::vector<GridPlanInstance>& maps);

}  // namespace blopt
