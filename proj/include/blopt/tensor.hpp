#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace blopt {

using Shape = std::vector<std::int64_t>;

// Shape mismatch between operands; message carries op name and offending shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input outside an op's documented domain (log of nonpositive, division by zero).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Numerical failure inside an iterative routine (non-finite cost, singular system).
struct SolveError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::int64_t numel(const Shape& s);

// Dense row-major tensor of 64-bit floats. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::initializer_list<double> vals);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(std::int64_t r, std::int64_t c);
  double at(std::int64_t r, std::int64_t c) const;

  bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }
  double value() const;  // throws unless exactly one element

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Matrix view of a rank-1 (as column) or rank-2 tensor.
Eigen::Map<const RowMat> mat_view(const Tensor& t);
Eigen::Map<RowMat> mat_view(Tensor& t);

// Flat vector view over all elements.
Eigen::Map<const Eigen::VectorXd> vec_view(const Tensor& t);
Eigen::Map<Eigen::VectorXd> vec_view(Tensor& t);

Tensor tensor_from_vec(const Eigen::VectorXd& v);
Tensor tensor_from_mat(const Eigen::MatrixXd& m);

}  // namespace blopt
