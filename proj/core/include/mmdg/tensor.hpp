#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdg {

using Shape = std::vector<std::size_t>;

/// Raised for malformed shapes and incompatible operands. The message names the
/// operation and the offending shapes.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major float64 array. A rank-0 shape ({}) holds one scalar.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }

  /// Size of the last axis (1 for scalars).
  std::size_t last_dim() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  /// Number of rows when viewed as [size / last_dim, last_dim].
  std::size_t row_count() const noexcept { return size() / last_dim(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const;

  /// Value of a single-element tensor.
  double item() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Rows [begin, end) of a tensor viewed as [rows, last_dim].
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
/// Rows picked by index, in the given order.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

}  // namespace mmdg
