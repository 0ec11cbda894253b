#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "mmdg/flatness.hpp"
#include "test_support.hpp"

using namespace mmdg;
using mmdg::testing::random_tensor;

namespace {

struct Quadratic {
  std::vector<Tensor> params;
  std::vector<Tensor> curvature;  // diagonal Hessian, same layout as params

  double operator()() const {
    double v = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        v += 0.5 * curvature[i][j] * params[i][j] * params[i][j];
      }
    }
    return v;
  }

  std::vector<Tensor*> pointers() {
    std::vector<Tensor*> out;
    for (Tensor& t : params) out.push_back(&t);
    return out;
  }
};

Quadratic unit_quadratic() {
  Quadratic q;
  q.params = {Tensor::zeros({6, 5}), Tensor::zeros({1, 5}), Tensor::zeros({4})};
  for (const Tensor& t : q.params) q.curvature.push_back(Tensor::filled(t.shape(), 1.0));
  return q;
}

}  // namespace

TEST_CASE("default radii") {
  const auto r = default_radii();
  REQUIRE(r.size() == 11);
  CHECK(r.front() == 0.0);
  CHECK(r.back() == doctest::Approx(0.5));
}

TEST_CASE("directions have unit global norm") {
  Rng rng(1);
  const Tensor a = random_tensor(rng, {7, 3});
  const Tensor b = random_tensor(rng, {1, 3});
  const std::vector<const Tensor*> shapes{&a, &b};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto d = random_direction(shapes, seed);
    double n2 = 0.0;
    for (const Tensor& t : d) {
      for (double v : t.values()) n2 += v * v;
    }
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-12);
    CHECK(d[0].shape() == a.shape());
  }
}

TEST_CASE("radius 0 gives exactly 0") {
  Quadratic q = unit_quadratic();
  for (Tensor& t : q.params) t = Tensor::filled(t.shape(), 0.3);
  const auto ptrs = q.pointers();
  const std::vector<double> radii{0.0, 0.1};
  const FlatnessCurve c = probe(ptrs, std::cref(q), radii, 4, 1);
  CHECK(c.mean_loss_increase[0] == 0.0);
  CHECK(c.mean_loss_increase[1] > 0.0);
}

TEST_CASE("isotropic quadratic gives g^2 / 2") {
  Quadratic q = unit_quadratic();
  const auto ptrs = q.pointers();
  const std::vector<double> radii = default_radii();
  const std::size_t n = 16;
  const FlatnessCurve c = probe(ptrs, std::cref(q), radii, n, 3);
  for (std::size_t i = 0; i < radii.size(); ++i) {
    const double g = radii[i];
    CHECK(std::abs(c.mean_loss_increase[i] - g * g / 2.0) <= 3.0 / std::sqrt(double(n)) * g * g);
  }
}

TEST_CASE("anisotropic quadratic gives g^2 times mean curvature over 2") {
  Quadratic q = unit_quadratic();
  Rng rng(7);
  double total = 0.0, count = 0.0;
  for (Tensor& h : q.curvature) {
    for (double& v : h.values()) {
      v = rng.uniform(0.0, 4.0);
      total += v;
      count += 1.0;
    }
  }
  const double mean_h = total / count;
  const auto ptrs = q.pointers();
  const std::vector<double> radii{0.0, 0.2, 0.5};
  const std::size_t n = 64;
  const FlatnessCurve c = probe(ptrs, std::cref(q), radii, n, 5);
  for (std::size_t i = 0; i < radii.size(); ++i) {
    const double g = radii[i];
    CHECK(std::abs(c.mean_loss_increase[i] - g * g * mean_h / 2.0) <=
          3.0 / std::sqrt(double(n)) * g * g * mean_h);
  }
}

TEST_CASE("probe is deterministic and restores parameters") {
  Quadratic q = unit_quadratic();
  Rng rng(2);
  for (Tensor& t : q.params) t = random_tensor(rng, t.shape());
  const std::vector<Tensor> before = q.params;
  const auto ptrs = q.pointers();
  const std::vector<double> radii = default_radii();
  const FlatnessCurve a = probe(ptrs, std::cref(q), radii, 8, 11);
  CHECK(q.params == before);
  const FlatnessCurve b = probe(ptrs, std::cref(q), radii, 8, 11);
  CHECK(a.mean_loss_increase == b.mean_loss_increase);
  const FlatnessCurve c = probe(ptrs, std::cref(q), radii, 8, 12);
  CHECK(a.mean_loss_increase != c.mean_loss_increase);
}

TEST_CASE("NaN losses count as +Inf and are flagged") {
  Quadratic q = unit_quadratic();
  const auto ptrs = q.pointers();
  auto loss = [&] {
    const double v = q();
    return v > 0.01 ? std::numeric_limits<double>::quiet_NaN() : v;
  };
  const std::vector<double> radii{0.0, 0.1, 0.3};
  const FlatnessCurve c = probe(ptrs, loss, radii, 5, 1);
  CHECK(c.nan_directions == std::vector<std::size_t>{0, 0, 5});
  CHECK(std::isinf(c.mean_loss_increase[2]));
  CHECK(c.mean_loss_increase[1] == doctest::Approx(0.005));
  for (const Tensor& t : q.params) CHECK(t == Tensor::zeros(t.shape()));
}

TEST_CASE("probe argument validation") {
  Quadratic q = unit_quadratic();
  const auto ptrs = q.pointers();
  CHECK_THROWS(probe(ptrs, std::cref(q), std::vector<double>{0.2, 0.1}, 4, 1));
  CHECK_THROWS(probe(ptrs, std::cref(q), std::vector<double>{0.1}, 0, 1));
  CHECK_THROWS(probe(ptrs, std::cref(q), std::vector<double>{}, 4, 1));
}

TEST_CASE("curve csv") {
  FlatnessCurve c;
  c.radii = {0.0, 0.25};
  c.mean_loss_increase = {0.0, 0.125};
  c.nan_directions = {0, 2};
  c.n_directions = 4;
  std::ostringstream out;
  write_curve_csv(c, out);
  CHECK(out.str() == "radius,mean_loss_increase,n_nan_directions\n0,0,0\n0.25,0.125,2\n");
}
