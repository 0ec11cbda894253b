#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

struct FlatnessCurve {
  std::vector<double> radii;
  std::vector<double> mean_loss_increase;
  /// Directions whose perturbed loss was NaN at that radius (counted as +Inf).
  std::vector<std::size_t> nan_directions;
  std::size_t n_directions = 0;
  std::uint64_t seed = 0;
};

/// 0, 0.05, ..., 0.5
std::vector<double> default_radii();

/// Unit-norm Gaussian direction over the concatenation of all tensors in `shapes_of`.
std::vector<Tensor> random_direction(std::span<const Tensor* const> shapes_of, std::uint64_t seed);

/// For each radius g and each direction d (unit norm over all of `params`),
/// records loss(params + g d) - loss(params), then averages over directions in
/// index order. `params` is modified during the probe and restored bit-for-bit.
FlatnessCurve probe(std::span<Tensor* const> params, const std::function<double()>& loss,
                    std::span<const double> radii, std::size_t n_directions, std::uint64_t seed);

/// Columns: radius,mean_loss_increase,n_nan_directions
void write_curve_csv(const FlatnessCurve& curve, std::ostream& out);

}  // namespace mmdg
