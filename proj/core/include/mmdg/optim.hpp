#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators for a fixed, ordered list of parameters.
struct AdamState {
  AdamConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;

  /// Zero moments shaped like `params`.
  static AdamState for_params(std::span<const Tensor* const> params, AdamConfig config = {});
};

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update, in place. `names` (optional, same length as
/// `params`) is used only for error messages. Throws OptimizerError on a
/// non-finite gradient before touching any parameter.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
               std::span<const std::string> names = {});

}  // namespace mmdg
