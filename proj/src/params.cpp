#include "blopt/params.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace blopt {

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (has(name)) throw std::invalid_argument("parameter '" + name + "' already exists");
  params_.push_back(Parameter{std::move(name), std::move(value), trainable});
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::invalid_argument("unknown parameter '" + name + "'");
}

const Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::invalid_argument("unknown parameter '" + name + "'");
}

bool ParameterStore::has(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

std::vector<Var> ParameterStore::bind(Tape& t) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(t.input(p.value));
  return vars;
}

std::int64_t ParameterStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

std::string weights_to_string(const ParameterStore& store) {
  std::string out = "{\n";
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    out += "  \"" + p.name + "\": {\"shape\": [";
    const Shape& s = p.value.shape();
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d) out += ",";
      out += std::to_string(s[d]);
    }
    out += "], \"data\": [";
    for (std::int64_t k = 0; k < p.value.size(); ++k) {
      if (k) out += ",";
      append_double(out, p.value[k]);
    }
    out += "]}";
    if (i + 1 < store.size()) out += ",";
    out += "\n";
  }
  out += "}\n";
  return out;
}

void save_weights(const ParameterStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << weights_to_string(store);
}

void load_weights(ParameterStore& store, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
  nlohmann::json doc = nlohmann::json::parse(f);
  for (auto& p : store) {
    if (!doc.contains(p.name)) throw std::runtime_error("weights file missing '" + p.name + "'");
    const auto& entry = doc.at(p.name);
    Shape shape;
    for (const auto& d : entry.at("shape")) shape.push_back(d.get<std::int64_t>());
    std::vector<double> data;
    data.reserve(entry.at("data").size());
    for (const auto& v : entry.at("data")) data.push_back(v.get<double>());
    p.value = Tensor(std::move(shape), std::move(data));
  }
}

void GdOptimizer::step(ParameterStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size()) throw std::invalid_argument("gd: gradient count mismatch");
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (!p.trainable) continue;
    Tensor next = p.value;
    for (std::int64_t k = 0; k < next.size(); ++k) next[k] -= cfg_.lr * grads[i][k];
    p.value = std::move(next);
  }
}

void AdamOptimizer::step(ParameterStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size()) throw std::invalid_argument("adam: gradient count mismatch");
  if (m_.empty()) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.push_back(Tensor::zeros(store[i].value.shape()));
      v_.push_back(Tensor::zeros(store[i].value.shape()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (!p.trainable) continue;
    Tensor next = p.value;
    for (std::int64_t k = 0; k < next.size(); ++k) {
      const double g = grads[i][k];
      m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
      v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      next[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    p.value = std::move(next);
  }
}

}  // namespace blopt
