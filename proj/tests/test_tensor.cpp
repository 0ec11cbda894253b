#include <doctest.h>

#include <cmath>

#include "mmdg/grad_check.hpp"
#include "mmdg/tape.hpp"
#include "test_support.hpp"

using namespace mmdg;
using mmdg::testing::gradient_error;
using mmdg::testing::random_tensor;

TEST_CASE("tensor construction and access") {
  const Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t.shape() == Shape{2, 3});
  CHECK(t.at(1, 2) == 6.0);
  CHECK(t.row(1)[0] == 4.0);
  CHECK(t.row_count() == 2);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK(Tensor().rank() == 0);
  CHECK_THROWS_AS(Tensor({2, 0}, {}), TensorError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), TensorError);
  CHECK_THROWS_AS(t.item(), TensorError);
}

TEST_CASE("slice and gather rows") {
  const Tensor t = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  CHECK(slice_rows(t, 1, 3) == Tensor::matrix(2, 2, {3, 4, 5, 6}));
  const std::vector<std::size_t> idx{2, 0};
  CHECK(gather_rows(t, idx) == Tensor::matrix(2, 2, {5, 6, 1, 2}));
  const std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(gather_rows(t, bad), TensorError);
  CHECK_THROWS_AS(slice_rows(t, 2, 1), TensorError);
}

TEST_CASE("finite difference gradient of a quadratic is exact") {
  auto f = [](const Tensor& x) { return x[0] * x[0]; };
  const Tensor g = finite_difference_gradient(f, Tensor::vector({3.0}), 1e-4);
  CHECK(std::abs(g[0] - 6.0) < 1e-7);
  CHECK_THROWS(finite_difference_gradient(f, Tensor::vector({3.0}), 0.0));
}

TEST_CASE("matmul forward") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var b = tape.constant(Tensor::matrix(2, 1, {5, 6}));
  CHECK(matmul(a, b).value() == Tensor::matrix(2, 1, {17, 39}));
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape tape;
  Var a = tape.leaf(Tensor::zeros({2, 3}));
  Var b = tape.leaf(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const TensorError& e) {
    CHECK(std::string(e.what()) == "matmul: shape mismatch [2,3] vs [2,3]");
  }
  CHECK_THROWS_AS(add(a, tape.leaf(Tensor::zeros({3, 2}))), TensorError);
  CHECK_THROWS_AS(tape.backward(a), TensorError);
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  Tape tape;
  Var p = softmax_last_axis(tape.constant(Tensor::zeros({2, 4})));
  for (double v : p.value().values()) CHECK(v == doctest::Approx(0.25));
  Rng rng(3);
  Var q = softmax_last_axis(tape.constant(random_tensor(rng, {5, 7}, -30, 30)));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (double v : q.value().row(r)) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("log_softmax is stable for large logits") {
  Tape tape;
  Var l = log_softmax_last_axis(tape.constant(Tensor::matrix(1, 2, {1000.0, 0.0})));
  CHECK(l.value()[0] == doctest::Approx(0.0));
  CHECK(l.value()[1] == doctest::Approx(-1000.0));
  CHECK(l.value().all_finite());
}

TEST_CASE("layer norm output variance follows var / (var + eps)") {
  Rng rng(11);
  for (double scale : {1e-2, 1.0, 10.0, 1e3}) {
    const Tensor x = random_tensor(rng, {4, 16}, -scale, scale);
    Tape tape;
    const Tensor y = layer_norm_last_axis(tape.constant(x)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double mi = 0, vi = 0, mo = 0, vo = 0;
      for (double v : x.row(r)) mi += v / 16;
      for (double v : x.row(r)) vi += (v - mi) * (v - mi) / 16;
      for (double v : y.row(r)) mo += v / 16;
      for (double v : y.row(r)) vo += (v - mo) * (v - mo) / 16;
      CHECK(std::abs(mo) < 1e-9);
      CHECK(std::abs(vo * (vi + kLayerNormEpsilon) / vi - 1.0) < 1e-9);
      if (vi > 1e6 * kLayerNormEpsilon) CHECK(std::abs(vo - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("cross entropy value and label checks") {
  Tape tape;
  const std::vector<int> labels{0, 1};
  Var ce = cross_entropy(tape.constant(Tensor::zeros({2, 4})), labels);
  CHECK(ce.value().item() == doctest::Approx(std::log(4.0)));
  const std::vector<int> bad{0, 4};
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor::zeros({2, 4})), bad), TensorError);
  const std::vector<int> short_labels{0};
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor::zeros({2, 4})), short_labels), TensorError);
}

TEST_CASE("kl divergence edge values") {
  const std::vector<double> p{1.0, 0.0}, q{0.5, 0.5};
  CHECK(kl_divergence_value(p, q) == doctest::Approx(std::log(2.0)));
  CHECK(kl_divergence_value(q, q) == 0.0);
  // q = 0 where p > 0 is floored, so the value stays finite.
  const std::vector<double> z{0.0, 1.0};
  CHECK(std::isfinite(kl_divergence_value(p, z)));
}

TEST_CASE("max_last_axis routes gradient to the first maximum") {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 3, {2.0, 2.0, 1.0}));
  const Gradients g = tape.backward(reduce_sum(max_last_axis(x)));
  CHECK(g[x] == Tensor::matrix(1, 3, {1.0, 0.0, 0.0}));
}

TEST_CASE("masked_scale accepts only 0 or 1") {
  Tape tape;
  Var x = tape.leaf(Tensor::filled({2, 2}, 3.0));
  CHECK_THROWS_AS(masked_scale(x, 0.5), TensorError);
  const Gradients g = tape.backward(reduce_sum(masked_scale(x, 0.0)));
  CHECK(g[x] == Tensor::zeros({2, 2}));
}

TEST_CASE("unreachable leaves get zero gradients and constants get none") {
  Tape tape;
  Var a = tape.leaf(Tensor::filled({2}, 1.0));
  Var b = tape.leaf(Tensor::filled({3}, 1.0));
  Var c = tape.constant(Tensor::filled({2}, 2.0));
  const Gradients g = tape.backward(reduce_sum(add(a, c)));
  CHECK(g[b] == Tensor::zeros({3}));
  CHECK_FALSE(g.contains(c.id()));
}

TEST_CASE("a var reused twice accumulates its gradient") {
  Tape tape;
  Var x = tape.leaf(Tensor::filled({3}, 2.0));
  const Gradients g = tape.backward(reduce_sum(add(x, x)));
  CHECK(g[x] == Tensor::filled({3}, 2.0));
}

TEST_CASE("every primitive matches finite differences on randomized inputs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : mmdg::testing::primitive_cases(seed)) {
      CAPTURE(c.name);
      CAPTURE(seed);
      CHECK(gradient_error(c.build, c.inputs) < 1e-4);
    }
  }
}

TEST_CASE("composite graph gradient matches finite differences") {
  Rng rng(5);
  const std::vector<int> labels{0, 2, 1};
  auto build = [&](Tape&, const std::vector<Var>& v) {
    Var h = relu(matmul(v[0], v[1]));
    Var z = layer_norm_last_axis(h);
    return add(cross_entropy(matmul(z, v[2]), labels), scalar_mul(reduce_mean(h), 0.1));
  };
  CHECK(gradient_error(build, {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 6}),
                               random_tensor(rng, {6, 3})}) < 1e-4);
}
