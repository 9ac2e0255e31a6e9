#pragma once

#include <functional>
#include <vector>

#include "blopt/rng.hpp"
#include "blopt/tape.hpp"

namespace blopt {

// Discrete sampling distribution: softmax of logits, rows independent.
struct CategoricalDistribution {
  Tensor logits;
  Tensor probabilities;

  static CategoricalDistribution from_logits(Tensor logits);

  std::int64_t rows() const;
  std::int64_t cols() const;
  // inverse-cdf draw from one row
  std::int64_t sample_row(std::int64_t row, CounterRng& rng) const;
};

// One mini-batch of estimator inputs. All arrays share the sample count; the
// surrogate arrays are either empty or complete.
struct GradientSampleBatch {
  std::vector<double> costs;               // L(z_i)
  std::vector<Tensor> logprob_grads;       // d/dtheta log f(z_i | theta)
  std::vector<double> surrogate_values;    // L'(z_i), optional
  std::vector<Tensor> surrogate_pathwise;  // d/dtheta s(f(theta)) per sample, optional

  std::size_t size() const { return costs.size(); }
  bool has_surrogate() const { return !surrogate_values.empty(); }
};

// (1/S) sum g(z_i) * dlog f(z_i)/dtheta; unbiased for d E[g] / dtheta.
Tensor score_function_grad(const GradientSampleBatch& batch);

// (1/S) sum [L(z_i) - L'(z_i)] * dlog f /dtheta + pathwise surrogate term,
// the control-variate coefficient fixed at gamma = -1.
Tensor control_variate_grad(const GradientSampleBatch& batch);

// (1/S) sum dg/dT * dT/dtheta over the provided noise draws.
Tensor reparam_grad(const std::function<Var(Tape&, Var theta, double eps)>& transform,
                    const std::function<Var(Tape&, Var z)>& g, const Tensor& theta,
                    const std::vector<double>& eps_samples);

double optimal_gamma(double cov_xy, double var_y);  // -cov/var
double variance_reduction_factor(double rho);       // 1 - rho^2

// Accumulates per-component running mean and mean-of-squares of gradients
// across the mini-batches of one iteration; emits a per-iteration
// mean-log-variance series for the CSV emitter.
class VarianceTracker {
 public:
  struct Report {
    std::int64_t iteration = 0;
    Tensor component_variance;  // population variance per component, clamped at 0
    double mean_variance = 0.0;
    double mean_log_variance = 0.0;  // ln of mean variance, floored at 1e-300
  };

  const std::vector<Report>& series() const { return series_; }
  std::int64_t iteration() const { return iteration_; }

 private:
  friend VarianceTracker::Report track_variance(VarianceTracker&, const std::vector<Tensor>&);
  std::vector<Report> series_;
  std::int64_t iteration_ = 0;
};

// Consumes one iteration's mini-batch gradients (at least two).
VarianceTracker::Report track_variance(VarianceTracker& tracker,
                                       const std::vector<Tensor>& minibatch_grads);

}  // namespace blopt
