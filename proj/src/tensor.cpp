#include "deltamil/tensor.hpp"

namespace deltamil {

Tensor::Tensor(std::vector<Index> shape, Eigen::ArrayXd data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size())
    throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match data length " +
                     std::to_string(data_.size()));
}

Tensor Tensor::zeros(std::vector<Index> shape) {
  Index n = numel(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Zero(n));
}

Tensor Tensor::full(std::vector<Index> shape, double v) {
  Index n = numel(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Constant(n, v));
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(std::vector<Index> shape, std::vector<double> values) {
  Eigen::ArrayXd d = Eigen::Map<const Eigen::ArrayXd>(values.data(), values.size());
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::identity(Index n) {
  Tensor t = zeros({n, n});
  for (Index i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Index Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() == 2) return shape_[0];
  throw ShapeError("rows(): tensor of rank " + std::to_string(shape_.size()) +
                   " has no 2-D view");
}

Index Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() == 2) return shape_[1];
  throw ShapeError("cols(): tensor of rank " + std::to_string(shape_.size()) +
                   " has no 2-D view");
}

MatMap Tensor::mat() { return MatMap(data_.data(), rows(), cols()); }
ConstMatMap Tensor::mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

double Tensor::value() const {
  if (data_.size() != 1)
    throw ShapeError("value(): tensor " + shape_string(shape_) + " is not a scalar");
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<Index> shape) const {
  if (numel(shape) != data_.size())
    throw ShapeError("reshape: cannot view " + shape_string(shape_) + " as " +
                     shape_string(shape));
  return Tensor(std::move(shape), data_);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_string(a.shape()));
  Tensor out = Tensor::zeros({a.cols(), a.rows()});
  out.mat() = a.mat().transpose();
  return out;
}

}  // namespace deltamil
