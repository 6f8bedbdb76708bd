#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fedst/errors.hpp"

namespace fedst::num {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major tensor of 64-bit floats. Parameters additionally carry an
// optional gradient buffer of identical shape; reverse-mode backward
// accumulates into it.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors (row-major).
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (!flag) grad_.reset();
    return *this;
  }

  bool has_grad() const { return grad_.has_value(); }

  std::vector<double>& grad() {
    if (!grad_) {
      throw ContractError("tensor has no gradient buffer; call ensure_grad() "
                          "or run backward first");
    }
    return *grad_;
  }
  const std::vector<double>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  void ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

}  // namespace fedst::num
