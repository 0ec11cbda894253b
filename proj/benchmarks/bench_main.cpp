#include <benchmark/benchmark.h>

#include <numeric>

#include "mmdg/experiment.hpp"
#include "mmdg/mbcd.hpp"
#include "mmdg/tape.hpp"

using namespace mmdg;

namespace {

Tensor filled_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = filled_tensor(16, n, 1);
  const Tensor b = filled_tensor(n, n, 2);
  for (auto _ : state) {
    Tape tape;
    Var x = tape.leaf(a), w = tape.leaf(b);
    Gradients g = tape.backward(reduce_sum(matmul(x, w)));
    benchmark::DoNotOptimize(g[w]);
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(32)->Arg(64);

void BM_LayerNormSoftmax(benchmark::State& state) {
  const Tensor a = filled_tensor(16, 32, 3);
  for (auto _ : state) {
    Tape tape;
    Var x = tape.leaf(a);
    Gradients g = tape.backward(reduce_sum(softmax_last_axis(layer_norm_last_axis(x))));
    benchmark::DoNotOptimize(g[x]);
  }
}
BENCHMARK(BM_LayerNormSoftmax);

struct StepFixture {
  ExperimentConfig config = ExperimentConfig::defaults();
  SplitData batch;
  ModelParams params;

  StepFixture() {
    const ProtocolSplits splits = seed_splits(config, 0);
    std::vector<std::size_t> rows(config.train.batch_size);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    batch = take_rows(splits.train, rows);
    params = init_params(config.model);
  }
};

void BM_TrainStepErm(benchmark::State& state) {
  StepFixture f;
  TrainerState s = TrainerState::create(f.params, 1e-3, 0);
  for (auto _ : state) benchmark::DoNotOptimize(train_step_erm(s, f.batch).loss_total);
}
BENCHMARK(BM_TrainStepErm);

void BM_TrainStepMbcd(benchmark::State& state) {
  StepFixture f;
  TrainerState s = TrainerState::create(f.params, 1e-3, 0);
  MbcdConfig cfg = f.config.train;
  for (auto _ : state) benchmark::DoNotOptimize(train_step_mbcd(s, f.batch, cfg).loss_total);
}
BENCHMARK(BM_TrainStepMbcd);

void BM_EvaluateTarget(benchmark::State& state) {
  StepFixture f;
  const ProtocolSplits splits = seed_splits(f.config, 0);
  const FusedParams p = fused_part(f.params);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(p, splits.tests.front().data).accuracy_fused);
}
BENCHMARK(BM_EvaluateTarget);

}  // namespace

BENCHMARK_MAIN();
