#pragma once

#include <functional>

#include "mmdg/tensor.hpp"

namespace mmdg {

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// (f(p + h e_i) - f(p - h e_i)) / 2h.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& at, double h);

/// Largest elementwise |a - b| / max(|a|, |b|, floor).
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace mmdg
