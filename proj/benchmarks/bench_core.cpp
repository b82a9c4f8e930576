#include <benchmark/benchmark.h>

#include <random>

#include "dtlab/dt_model.hpp"
#include "dtlab/tensor.hpp"

namespace {

using namespace dtlab;

void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(1);
  Tensor a = Tensor::randn({n, n}, rng, 1.0);
  Tensor b = Tensor::randn({n, n}, rng, 1.0);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

DTModel make_model(int64_t K, int64_t d, int64_t layers, int64_t state_dim, bool returns) {
  DTConfig cfg;
  cfg.context_k = K;
  cfg.max_episode_len = K;
  cfg.state_dim = state_dim;
  cfg.action_space = ActionSpace::discrete(4);
  cfg.gpt.d_model = d;
  cfg.gpt.n_layers = layers;
  cfg.gpt.n_heads = 1;
  cfg.gpt.max_tokens = 3 * K + 1;
  cfg.gpt.dropout_rate = 0.1;
  cfg.predict_returns = returns;
  if (returns) cfg.return_bins = {0.0, 1.0};
  return DTModel(cfg, 7);
}

WindowBatch make_batch(const DTConfig& cfg, int64_t B, uint64_t seed) {
  std::mt19937_64 rng(seed);
  WindowBatch wb;
  wb.batch = B;
  wb.context = cfg.context_k;
  wb.state_dim = cfg.state_dim;
  const int64_t n = B * cfg.context_k;
  wb.returns_to_go.assign(n, 1.0);
  wb.states.assign(n * cfg.state_dim, 0.0);
  std::uniform_int_distribution<int64_t> cell(0, cfg.state_dim - 1);
  for (int64_t i = 0; i < n; ++i) wb.states[i * cfg.state_dim + cell(rng)] = 1.0;
  wb.actions.assign(n, 0);
  std::uniform_int_distribution<int64_t> act(0, 3);
  for (auto& a : wb.actions) a = act(rng);
  wb.timesteps.resize(n);
  wb.valid.assign(n, 1);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < cfg.context_k; ++i) wb.timesteps[b * cfg.context_k + i] = i;
  return wb;
}

void BM_ForwardBatched(benchmark::State& state) {
  DTModel model = make_model(32, state.range(0), state.range(1), 80, true);
  WindowBatch wb = make_batch(model.config(), 32, 3);
  for (auto _ : state) {
    DTOutput out = model.forward(wb);
    benchmark::DoNotOptimize(out.action_out.data().data());
  }
}
BENCHMARK(BM_ForwardBatched)->Args({64, 2})->Args({64, 3})->Args({128, 3});

void BM_TrainStep(benchmark::State& state) {
  DTModel model = make_model(32, state.range(0), state.range(1), 80, true);
  WindowBatch wb = make_batch(model.config(), state.range(2), 3);
  uint64_t step = 0;
  for (auto _ : state) {
    ComputationRecord rec;
    RecordScope scope(rec);
    DTForwardOptions opts;
    opts.dropout_seed = split_seed(1, step++);
    DTOutput out = model.forward(wb, opts);
    Tensor loss = add(model.action_loss(out, wb), model.return_loss(out, wb));
    model.params().zero_grads();
    rec.backward(loss);
    benchmark::DoNotOptimize(loss.value());
  }
}
BENCHMARK(BM_TrainStep)->Args({64, 2, 32})->Args({64, 3, 32})->Args({128, 3, 64})->Unit(benchmark::kMillisecond);

void BM_RolloutForward(benchmark::State& state) {
  // single-window forward with growing context, as the eval loop sees it
  DTModel model = make_model(32, 64, 2, 80, true);
  for (auto _ : state) {
    for (int64_t ctx = 1; ctx <= 32; ctx += 8) {
      WindowBatch wb = make_batch(model.config(), 1, 5);
      wb.context = ctx;
      wb.batch = 1;
      wb.returns_to_go.resize(ctx);
      wb.states.resize(ctx * 80);
      wb.actions.resize(ctx);
      wb.timesteps.resize(ctx);
      wb.valid.assign(ctx, 1);
      DTOutput out = model.forward(wb);
      benchmark::DoNotOptimize(out.action_out.data().data());
    }
  }
  state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_RolloutForward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
