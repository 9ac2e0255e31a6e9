#include "blopt/tensor.hpp"

#include <cmath>

namespace blopt {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d < 0) throw ShapeError("tensor: negative extent in shape " + shape_str(shape_));
  }
  if (numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match data length " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::zeros(Shape shape) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> vals) {
  return Tensor(std::move(shape), std::vector<double>(vals));
}

double& Tensor::at(std::int64_t r, std::int64_t c) {
  return data_[static_cast<std::size_t>(r * shape_[1] + c)];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
  return data_[static_cast<std::size_t>(r * shape_[1] + c)];
}

double Tensor::value() const {
  if (data_.size() != 1) {
    throw ShapeError("value: tensor with shape " + shape_str(shape_) + " is not a scalar");
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

std::pair<std::int64_t, std::int64_t> matrix_dims(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 1) return {t.dim(0), 1};
  if (t.rank() == 0) return {1, 1};
  throw ShapeError("matrix view: rank-" + std::to_string(t.rank()) + " tensor " + shape_str(t.shape()));
}

}  // namespace

Eigen::Map<const RowMat> mat_view(const Tensor& t) {
  auto [r, c] = matrix_dims(t);
  return Eigen::Map<const RowMat>(t.data(), r, c);
}

Eigen::Map<RowMat> mat_view(Tensor& t) {
  auto [r, c] = matrix_dims(t);
  return Eigen::Map<RowMat>(t.data(), r, c);
}

Eigen::Map<const Eigen::VectorXd> vec_view(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), t.size());
}

Eigen::Map<Eigen::VectorXd> vec_view(Tensor& t) {
  return Eigen::Map<Eigen::VectorXd>(t.data(), t.size());
}

Tensor tensor_from_vec(const Eigen::VectorXd& v) {
  Tensor t = Tensor::zeros({v.size()});
  vec_view(t) = v;
  return t;
}

Tensor tensor_from_mat(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros({m.rows(), m.cols()});
  mat_view(t) = m;
  return t;
}

}  // namespace blopt
