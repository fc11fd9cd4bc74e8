// Dense row-major 64-bit array with shape metadata, backed by Eigen.
#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <vector>

#include "deltamil/common.hpp"

namespace deltamil {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

class Tensor {
 public:
  Tensor() : shape_{0}, data_(0) {}
  Tensor(std::vector<Index> shape, Eigen::ArrayXd data);

  static Tensor zeros(std::vector<Index> shape);
  static Tensor full(std::vector<Index> shape, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<Index> shape, std::vector<double> values);
  static Tensor identity(Index n);

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  // 2-D view helpers; rank-1 tensors are treated as a single row.
  Index rows() const;
  Index cols() const;
  MatMap mat();
  ConstMatMap mat() const;

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }
  double& at(Index r, Index c) { return data_[r * cols() + c]; }
  double at(Index r, Index c) const { return data_[r * cols() + c]; }
  double value() const;  // scalar contents; throws if size() != 1

  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }

  Tensor reshaped(std::vector<Index> shape) const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const { return data_.isFinite().all(); }

  void set_zero() { data_.setZero(); }

 private:
  std::vector<Index> shape_;
  Eigen::ArrayXd data_;
};

// Value-level math used by oracles, metrics and initialization.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

}  // namespace deltamil
