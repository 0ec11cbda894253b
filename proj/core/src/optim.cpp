#include "mmdg/optim.hpp"

#include <cmath>

namespace mmdg {

AdamState AdamState::for_params(std::span<const Tensor* const> params, AdamConfig config) {
  AdamState state;
  state.config = config;
  for (const Tensor* p : params) {
    state.first_moment.push_back(Tensor::zeros(p->shape()));
    state.second_moment.push_back(Tensor::zeros(p->shape()));
  }
  return state;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               std::span<const std::string> names) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw OptimizerError("adam_step: parameter, gradient and moment counts differ");
  }
  auto label = [&](std::size_t i) {
    return i < names.size() ? names[i] : "#" + std::to_string(i);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() ||
        params[i]->shape() != state.first_moment[i].shape()) {
      throw OptimizerError("adam_step: shape mismatch for parameter " + label(i) + ": " +
                           to_string(params[i]->shape()) + " vs gradient " +
                           to_string(grads[i].shape()));
    }
    if (!grads[i].all_finite()) {
      throw OptimizerError("adam_step: non-finite gradient for parameter " + label(i));
    }
  }

  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      p[j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace mmdg
