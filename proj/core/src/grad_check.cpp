#include "mmdg/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mmdg {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& at, double h) {
  if (!(h > 0.0)) throw TensorError("finite_difference_gradient: step must be positive");
  Tensor probe = at;
  Tensor grad = Tensor::zeros(at.shape());
  for (std::size_t i = 0; i < at.size(); ++i) {
    probe[i] = at[i] + h;
    const double up = f(probe);
    probe[i] = at[i] - h;
    const double down = f(probe);
    probe[i] = at[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) {
    throw TensorError("max_relative_error: shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace mmdg
