#pragma once

#include <string>
#include <vector>

#include "blopt/tape.hpp"

namespace blopt {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Named parameters with stable ordering. Names are unique.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool has(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Emits every parameter as a tape input, in store order.
  std::vector<Var> bind(Tape& t) const;

  std::int64_t total_elements() const;

 private:
  std::vector<Parameter> params_;
};

// Lossless structured-text persistence: parameter name -> {shape, flat data},
// decimals printed with 17 significant digits.
void save_weights(const ParameterStore& store, const std::string& path);
void load_weights(ParameterStore& store, const std::string& path);
std::string weights_to_string(const ParameterStore& store);

struct GdConfig {
  double lr = 1e-2;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Both optimizers replace parameter values with fresh tensors; recorded tape
// values are never mutated in place.
class GdOptimizer {
 public:
  explicit GdOptimizer(GdConfig cfg) : cfg_(cfg) {}
  void step(ParameterStore& store, const std::vector<Tensor>& grads);

 private:
  GdConfig cfg_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}
  void step(ParameterStore& store, const std::vector<Tensor>& grads);

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace blopt
