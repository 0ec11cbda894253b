#include <doctest.h>

#include <cmath>
#include <limits>

#include "mmdg/optim.hpp"
#include "mmdg/rng.hpp"

using namespace mmdg;

TEST_CASE("first Adam step on a unit gradient moves by the learning rate") {
  Tensor x = Tensor::vector({0.0});
  std::vector<Tensor*> params{&x};
  AdamState state = AdamState::for_params(std::vector<const Tensor*>{&x}, AdamConfig{0.1});
  const std::vector<Tensor> grads{Tensor::vector({1.0})};
  adam_step(params, grads, state);
  // m_hat = 1, v_hat = 1, step = lr * 1 / (1 + eps)
  CHECK(x[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(state.step == 1);
}

TEST_CASE("Adam matches a scalar reference over several steps") {
  Tensor x = Tensor::vector({1.0, -2.0});
  std::vector<Tensor*> params{&x};
  AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
  AdamState state = AdamState::for_params(std::vector<const Tensor*>{&x}, cfg);
  double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 20; ++t) {
    const std::vector<Tensor> grads{Tensor::vector({2 * x[0], std::cos(x[1])})};
    double g[2] = {2 * ref[0], std::cos(ref[1])};
    adam_step(params, grads, state);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    CHECK(std::abs(x[0] - ref[0]) < 1e-12);
    CHECK(std::abs(x[1] - ref[1]) < 1e-12);
  }
}

TEST_CASE("non-finite gradient names the parameter and leaves params untouched") {
  Tensor a = Tensor::vector({1.0});
  Tensor b = Tensor::vector({2.0});
  std::vector<Tensor*> params{&a, &b};
  AdamState state = AdamState::for_params(std::vector<const Tensor*>{&a, &b});
  const std::vector<Tensor> grads{Tensor::vector({1.0}),
                                  Tensor::vector({std::numeric_limits<double>::quiet_NaN()})};
  const std::vector<std::string> names{"alpha", "beta"};
  try {
    adam_step(params, grads, state, names);
    FAIL("expected OptimizerError");
  } catch (const OptimizerError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  CHECK(a[0] == 1.0);
  CHECK(b[0] == 2.0);
  CHECK(state.step == 0);
}

TEST_CASE("Adam rejects mismatched shapes") {
  Tensor a = Tensor::vector({1.0, 2.0});
  std::vector<Tensor*> params{&a};
  AdamState state = AdamState::for_params(std::vector<const Tensor*>{&a});
  const std::vector<Tensor> grads{Tensor::vector({1.0})};
  CHECK_THROWS_AS(adam_step(params, grads, state), OptimizerError);
}

TEST_CASE("rng is reproducible and derived streams are independent of each other") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  CHECK(derive_seed(7, 0) != derive_seed(7, 1));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
  CHECK(derive_seed(7, 0) != derive_seed(8, 0));
}

TEST_CASE("rng state round trip") {
  Rng a(9);
  a.normal();
  const std::string s = a.state();
  const double x = a.uniform();
  Rng b;
  b.restore(s);
  CHECK(b.uniform() == x);
  CHECK_THROWS(b.restore("garbage"));
}

TEST_CASE("normal draws have mean 0 and variance 1") {
  Rng rng(1);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  const double mean = s / n;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(n));
  CHECK(std::abs(s2 / n - mean * mean - 1.0) < 0.02);
}

TEST_CASE("index is uniform and in range") {
  Rng rng(2);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) ++counts[rng.index(5)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 400);
  CHECK_THROWS(rng.index(0));
}

TEST_CASE("shuffle is a permutation") {
  Rng rng(3);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}
