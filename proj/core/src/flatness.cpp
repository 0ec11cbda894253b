#include "mmdg/flatness.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "mmdg/format.hpp"
#include "mmdg/rng.hpp"

namespace mmdg {

std::vector<double> default_radii() {
  std::vector<double> r;
  for (int i = 0; i <= 10; ++i) r.push_back(0.05 * i);
  return r;
}

std::vector<Tensor> random_direction(std::span<const Tensor* const> shapes_of, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> dir;
  double norm2 = 0.0;
  for (const Tensor* t : shapes_of) {
    Tensor d = Tensor::zeros(t->shape());
    for (double& v : d.values()) {
      v = rng.normal();
      norm2 += v * v;
    }
    dir.push_back(std::move(d));
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (Tensor& d : dir) {
    for (double& v : d.values()) v *= inv;
  }
  return dir;
}

FlatnessCurve probe(std::span<Tensor* const> params, const std::function<double()>& loss,
                    std::span<const double> radii, std::size_t n_directions, std::uint64_t seed) {
  if (n_directions < 1) throw std::invalid_argument("probe: n_directions must be >= 1");
  if (radii.empty()) throw std::invalid_argument("probe: no radii");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    if (!(radii[i] >= 0.0) || (i > 0 && radii[i] < radii[i - 1])) {
      throw std::invalid_argument("probe: radii must be non-negative and ascending");
    }
  }

  std::vector<Tensor> base;
  std::vector<const Tensor*> views;
  for (Tensor* p : params) {
    base.push_back(*p);
    views.push_back(p);
  }
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = base[i];
  };

  const double base_loss = loss();
  FlatnessCurve curve;
  curve.radii.assign(radii.begin(), radii.end());
  curve.n_directions = n_directions;
  curve.seed = seed;
  curve.nan_directions.assign(radii.size(), 0);
  // increases[r][d], summed afterwards in direction order.
  std::vector<std::vector<double>> increases(radii.size(), std::vector<double>(n_directions, 0.0));

  try {
    for (std::size_t d = 0; d < n_directions; ++d) {
      const std::vector<Tensor> dir = random_direction(views, derive_seed(seed, d));
      for (std::size_t r = 0; r < radii.size(); ++r) {
        if (radii[r] == 0.0) continue;
        for (std::size_t i = 0; i < params.size(); ++i) {
          Tensor& p = *params[i];
          for (std::size_t j = 0; j < p.size(); ++j) p[j] = base[i][j] + radii[r] * dir[i][j];
        }
        const double value = loss();
        if (std::isnan(value)) {
          increases[r][d] = std::numeric_limits<double>::infinity();
          curve.nan_directions[r] += 1;
        } else {
          increases[r][d] = value - base_loss;
        }
      }
      restore();
    }
  } catch (...) {
    restore();
    throw;
  }

  for (std::size_t r = 0; r < radii.size(); ++r) {
    double sum = 0.0;
    for (double v : increases[r]) sum += v;
    curve.mean_loss_increase.push_back(sum / static_cast<double>(n_directions));
  }
  return curve;
}

void write_curve_csv(const FlatnessCurve& curve, std::ostream& out) {
  out << "radius,mean_loss_increase,n_nan_directions\n";
  for (std::size_t i = 0; i < curve.radii.size(); ++i) {
    out << format_double(curve.radii[i]) << ',' << format_double(curve.mean_loss_increase[i]) << ','
        << curve.nan_directions[i] << '\n';
  }
}

}  // namespace mmdg
