#include "mmdg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace mmdg {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor() : values_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw TensorError("tensor: zero-sized dimension in shape " + to_string(shape_));
  }
  if (element_count(shape_) != values_.size()) {
    throw TensorError("tensor: shape " + to_string(shape_) + " needs " +
                      std::to_string(element_count(shape_)) + " values, got " +
                      std::to_string(values_.size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(values_).subspan(r * last_dim(), last_dim());
}

std::span<double> Tensor::row(std::size_t r) {
  return std::span<double>(values_).subspan(r * last_dim(), last_dim());
}

double Tensor::at(std::size_t r, std::size_t c) const { return values_[r * last_dim() + c]; }

double Tensor::item() const {
  if (values_.size() != 1) {
    throw TensorError("item: expected a single element, shape is " + to_string(shape_));
  }
  return values_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() != 2 || begin >= end || end > t.shape()[0]) {
    throw TensorError("slice_rows: invalid range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") for shape " + to_string(t.shape()));
  }
  const std::size_t cols = t.shape()[1];
  auto first = t.values().begin() + static_cast<std::ptrdiff_t>(begin * cols);
  auto last = t.values().begin() + static_cast<std::ptrdiff_t>(end * cols);
  return Tensor({end - begin, cols}, std::vector<double>(first, last));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (t.rank() != 2 || rows.empty()) {
    throw TensorError("gather_rows: needs a matrix and at least one row, shape " +
                      to_string(t.shape()));
  }
  const std::size_t cols = t.shape()[1];
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  for (std::size_t r : rows) {
    if (r >= t.shape()[0]) throw TensorError("gather_rows: row index out of range");
    auto src = t.row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor({rows.size(), cols}, std::move(out));
}

}  // namespace mmdg
