#include "blopt/estimators.hpp"

#include <cmath>
#include <stdexcept>

#include "blopt/autodiff.hpp"

namespace blopt {

CategoricalDistribution CategoricalDistribution::from_logits(Tensor lg) {
  Tape t;
  Var p = softmax(t.constant(lg));
  return CategoricalDistribution{std::move(lg), t.value(p)};
}

std::int64_t CategoricalDistribution::rows() const {
  return logits.rank() == 2 ? logits.dim(0) : 1;
}

std::int64_t CategoricalDistribution::cols() const {
  return logits.rank() == 2 ? logits.dim(1) : logits.size();
}

std::int64_t CategoricalDistribution::sample_row(std::int64_t row, CounterRng& rng) const {
  const std::int64_t n = cols();
  const double* p = probabilities.data() + row * n;
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return n - 1;
}

namespace {

void check_batch(const GradientSampleBatch& b, const char* op, bool need_surrogate) {
  if (b.costs.empty()) throw std::invalid_argument(std::string(op) + ": empty batch");
  if (b.logprob_grads.size() != b.costs.size()) {
    throw std::invalid_argument(std::string(op) + ": sample count mismatch");
  }
  if (need_surrogate) {
    if (b.surrogate_values.size() != b.costs.size() ||
        b.surrogate_pathwise.size() != b.costs.size()) {
      throw std::invalid_argument(std::string(op) + ": surrogate data missing or incomplete");
    }
  }
}

}  // namespace

Tensor score_function_grad(const GradientSampleBatch& batch) {
  check_batch(batch, "score_function_grad", false);
  Tensor acc = Tensor::zeros(batch.logprob_grads[0].shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    vec_view(acc) += batch.costs[i] * vec_view(batch.logprob_grads[i]);
  }
  vec_view(acc) /= static_cast<double>(batch.size());
  return acc;
}

Tensor control_variate_grad(const GradientSampleBatch& batch) {
  check_batch(batch, "control_variate_grad", true);
  Tensor acc = Tensor::zeros(batch.logprob_grads[0].shape());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    vec_view(acc) +=
        (batch.costs[i] - batch.surrogate_values[i]) * vec_view(batch.logprob_grads[i]);
    vec_view(acc) += vec_view(batch.surrogate_pathwise[i]);
  }
  vec_view(acc) /= static_cast<double>(batch.size());
  return acc;
}

Tensor reparam_grad(const std::function<Var(Tape&, Var theta, double eps)>& transform,
                    const std::function<Var(Tape&, Var z)>& g, const Tensor& theta,
                    const std::vector<double>& eps_samples) {
  if (eps_samples.empty()) throw std::invalid_argument("reparam_grad: no samples");
  Tensor acc = Tensor::zeros(theta.shape());
  for (double eps : eps_samples) {
    Tape t;
    Var th = t.input(theta);
    Var z = transform(t, th, eps);
    Var y = g(t, z);
    Tensor grad = gradient_value(y, th);
    vec_view(acc) += vec_view(grad);
  }
  vec_view(acc) /= static_cast<double>(eps_samples.size());
  return acc;
}

double optimal_gamma(double cov_xy, double var_y) {
  if (var_y <= 0.0) throw std::invalid_argument("optimal_gamma: var_y must be positive");
  return -cov_xy / var_y;
}

double variance_reduction_factor(double rho) {
  if (rho < -1.0 || rho > 1.0) throw std::invalid_argument("variance_reduction_factor: |rho| > 1");
  return 1.0 - rho * rho;
}

VarianceTracker::Report track_variance(VarianceTracker& tracker,
                                       const std::vector<Tensor>& minibatch_grads) {
  if (minibatch_grads.size() < 2) {
    throw std::invalid_argument("track_variance: need at least 2 mini-batches");
  }
  const Shape shape = minibatch_grads[0].shape();
  Tensor mean = Tensor::zeros(shape);
  Tensor mean_sq = Tensor::zeros(shape);
  for (const Tensor& g : minibatch_grads) {
    if (!(g.shape() == shape)) throw ShapeError("track_variance: inconsistent gradient shapes");
    vec_view(mean) += vec_view(g);
    vec_view(mean_sq) += vec_view(g).cwiseAbs2();
  }
  const double inv = 1.0 / static_cast<double>(minibatch_grads.size());
  vec_view(mean) *= inv;
  vec_view(mean_sq) *= inv;

  VarianceTracker::Report rep;
  rep.iteration = tracker.iteration_;
  rep.component_variance = Tensor::zeros(shape);
  double total = 0.0;
  for (std::int64_t k = 0; k < mean.size(); ++k) {
    double v = mean_sq[k] - mean[k] * mean[k];
    if (v < 0.0) v = 0.0;  // clamp tiny negative rounding
    rep.component_variance[k] = v;
    total += v;
  }
  rep.mean_variance = total / static_cast<double>(mean.size());
  rep.mean_log_variance = std::log(std::max(rep.mean_variance, 1e-300));
  tracker.series_.push_back(rep);
  ++tracker.iteration_;
  return rep;
}

}  // namespace blopt
