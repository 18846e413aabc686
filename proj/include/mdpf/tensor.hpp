#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace mdpf {

// Dense row-major tensor of doubles.  Rank 0 means a scalar (numel 1).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, double fill);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor from_vector(const std::vector<double>& v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-2 element access.
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

  // Value of a tensor with exactly one element, independent of rank.
  double item() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(double s);

  // Elementwise map into a new tensor.
  Tensor map(const std::function<double(double)>& f) const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int>& s);
std::int64_t shape_numel(const std::vector<int>& s);

// Numpy-style broadcast of two shapes; throws std::invalid_argument on mismatch.
std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b);

// Elementwise binary op with broadcasting.
Tensor bcast_binary(const Tensor& a, const Tensor& b,
                    const std::function<double(double, double)>& f);

// Sum `g` down to `target` shape (adjoint of broadcasting).
Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& target);

// Rank-2 matrix product, Eigen-backed.
Tensor matmul_vals(const Tensor& a, const Tensor& b);
// Rank-2 products with one side transposed (used by matmul backward).
Tensor matmul_t_left(const Tensor& a, const Tensor& b);   // a^T * b
Tensor matmul_t_right(const Tensor& a, const Tensor& b);  // a * b^T

}  // namespace mdpf
