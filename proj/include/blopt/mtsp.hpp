#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "blopt/estimators.hpp"
#include "blopt/params.hpp"
#include "blopt/rng.hpp"
#include "blopt/tape.hpp"

namespace blopt {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Depot plus N cities in the unit square, M >= 2 agents (except reductions).
struct MtspInstance {
  Point depot;
  std::vector<Point> cities;
  int agents = 2;

  void validate() const;
};

MtspInstance generate_mtsp(int cities, int agents, CounterRng& rng);

// structured text {depot:[x,y], cities:[[x,y],...], agents:M}
void save_mtsp(const MtspInstance& inst, const std::string& path);
MtspInstance load_mtsp(const std::string& path);

// City-to-agent assignment probabilities and one sample drawn per city row.
struct Allocation {
  Tensor probs;                   // [N, M], rows sum to 1
  std::vector<int> assignment;    // per-city agent index
  double logprob = 0.0;           // log probability of the sample
};

struct AgentTour {
  std::vector<int> cities;  // visiting order, depot-start/depot-end implied
  double length = 0.0;
};

// Nearest-neighbor construction from the depot followed by 2-opt improvement;
// deterministic given the input order (ties resolved by city index).
AgentTour tsp_solve(const std::vector<Point>& points, const Point& depot);

double tour_length(const std::vector<Point>& points, const Point& depot,
                   const std::vector<int>& order);

double minmax_cost(const std::vector<AgentTour>& tours);

// Per-agent tours for one sampled allocation.
std::vector<AgentTour> decode_tours(const MtspInstance& inst, const std::vector<int>& assignment);

// Allocation network: per-city features -> two 64-wide hidden layers -> M
// logits -> row softmax.
struct AllocationNet {
  int agents = 2;
  int hidden = 64;
  ParameterStore params;

  static AllocationNet make(int agents, int hidden, std::uint64_t seed);
  Var forward(Tape& t, const std::vector<Var>& param_vars, const MtspInstance& inst) const;
  Tensor probabilities(const MtspInstance& inst) const;
};

// Surrogate network: flattened allocation probabilities plus instance summary
// -> 256-wide tanh MLP (3 layers) -> scalar cost estimate.
struct SurrogateNet {
  int max_cities = 50;
  int agents = 2;
  int hidden = 256;
  ParameterStore params;

  static SurrogateNet make(int max_cities, int agents, int hidden, std::uint64_t seed);
  // input: [N, M] allocation (probabilities or a one-hot sample)
  Var forward(Tape& t, const std::vector<Var>& param_vars, const MtspInstance& inst,
              Var allocation) const;
};

struct MtspGradients {
  std::vector<Tensor> theta_grad;       // per allocation-net parameter
  std::vector<Tensor> gamma_grad;       // per surrogate parameter
  double mean_cost = 0.0;               // mean min-max cost over samples
  double mean_surrogate = 0.0;
  Tensor per_sample_theta_sq;           // diagnostic: mean of squared estimator
};

struct MtspGradConfig {
  int samples = 4;
  bool use_surrogate = true;   // false: pure score-function estimator
  double entropy_weight = 0.0; // exploration bonus on the allocation rows
};

// Control-variate hypergradient for one instance batch: per-sample surrogate
// values at the one-hot allocations, pathwise term through the probability
// matrix, and the single-sample variance objective for the surrogate.
MtspGradients mtsp_grad(const MtspInstance& inst, const AllocationNet& alloc,
                          const SurrogateNet& surrogate,
                          const MtspGradConfig& cfg, CounterRng& rng);

struct MtspTrainConfig {
  int iterations = 2000;
  int batch_instances = 8;
  int samples = 8;
  int cities_min = 20;
  int cities_max = 50;
  int agents = 5;
  double lr_theta = 3e-3;
  double lr_gamma = 1e-3;
  double entropy_weight = 5e-3;
  bool use_surrogate = true;
  int eval_instances = 16;
  int eval_draws = 16;  // best-of-K decode of the stochastic allocation
  std::uint64_t seed = 0;
};

struct MtspIterRecord {
  int iter = 0;
  double mean_minmax = 0.0;
  double log_grad_variance = 0.0;
};

struct MtspTrainResult {
  AllocationNet alloc;
  SurrogateNet surrogate;
  std::vector<MtspIterRecord> history;
  double eval_mean_minmax = 0.0;   // greedy-argmax allocation on held-out instances
  double eval_baseline = 0.0;      // angular-sector baseline on the same instances
};

MtspTrainResult mtsp_train(const MtspTrainConfig& cfg);

// Greedy angular-sector split: cities sorted by angle around the depot, one
// pass of contiguous count-balanced arcs, each arc toured by tsp_solve.
double angular_sector_baseline(const MtspInstance& inst);

// Best of `draws` sampled allocations (the stochastic policy's decode).
double sampled_allocation_cost(const MtspInstance& inst, const AllocationNet& alloc, int draws,
                               CounterRng& rng);

// Greedy allocation by argmax probabilities, solved per agent.
double argmax_allocation_cost(const MtspInstance& inst, const AllocationNet& alloc);

}  // namespace blopt
