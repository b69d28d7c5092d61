#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ferl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Rank 0 is a scalar.
class RealArray {
 public:
  RealArray() = default;
  explicit RealArray(Shape shape);
  RealArray(Shape shape, std::vector<double> values);

  static RealArray scalar(double v);
  static RealArray vector(std::vector<double> values);
  static RealArray matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static RealArray filled(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool is_scalar() const { return values_.size() == 1 && shape_.size() <= 1; }

  /// Rows of a rank-2 array; 1 for a vector.
  std::size_t rows() const;
  /// Trailing dimension (1 for scalars).
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }

  bool all_finite() const;

  friend bool operator==(const RealArray&, const RealArray&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// A named, trainable array. Graphs reference parameters by address.
struct Parameter {
  std::string name;
  RealArray value;
};

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);

}  // namespace ferl
