// Full optimizer-step throughput, sparse executor vs masked-dense, at a
// desk-scale model. Tokens/s is the headline number.

#include <benchmark/benchmark.h>

#include "skiplayer/data.hpp"
#include "skiplayer/train.hpp"

using namespace skiplayer;

namespace {

void run_train(benchmark::State& state, Engine engine, double p_target) {
  ModelConfig cfg;
  cfg.dim = 128;
  cfg.layers = 8;
  cfg.heads = 4;
  cfg.head_dim = 32;
  cfg.ffn_mult = 2;
  cfg.time = 64;
  cfg.vocab = kByteVocab;
  cfg.variant = Variant::skiplayer;
  cfg.p_target = p_target;

  TrainSettings ts;
  ts.batch = 8;
  ts.time = 64;
  ts.warmup = 100;
  ts.lr_peak = 0.01;

  Corpus corpus = Corpus::from_text(synthetic_text(1 << 18, 17), 0.1);
  TrainState<float> st(ModelParams<float>::init(cfg, 5), ts.opt);
  ForwardOptions<float> opt;
  opt.engine = engine;
  for (auto _ : state) {
    TrainMetrics m = train_step(st, corpus.train, ts, 21, opt);
    benchmark::DoNotOptimize(m.total);
  }
  state.SetItemsProcessed(state.iterations() * ts.batch * ts.time);
}

void BM_sparse(benchmark::State& state) {
  run_train(state, Engine::sparse, 0.5);
}
void BM_masked_dense(benchmark::State& state) {
  run_train(state, Engine::masked_dense, 0.5);
}

}  // namespace

BENCHMARK(BM_sparse)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_masked_dense)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
