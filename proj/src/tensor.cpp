#include "ferl/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ferl/errors.hpp"

namespace ferl {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

RealArray::RealArray(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

RealArray::RealArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw ValidationError("RealArray: shape " + shape_string(shape_) + " needs " +
                          std::to_string(shape_size(shape_)) + " values, got " +
                          std::to_string(values_.size()));
  }
}

RealArray RealArray::scalar(double v) { return RealArray({}, {v}); }

RealArray RealArray::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return RealArray({n}, std::move(values));
}

RealArray RealArray::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return RealArray({rows, cols}, std::move(values));
}

RealArray RealArray::filled(Shape shape, double v) {
  const std::size_t n = shape_size(shape);
  return RealArray(std::move(shape), std::vector<double>(n, v));
}

std::size_t RealArray::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t RealArray::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double RealArray::item() const {
  if (values_.size() != 1) {
    throw ValidationError("RealArray::item on array of shape " + shape_string(shape_));
  }
  return values_[0];
}

bool RealArray::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

}  // namespace ferl
