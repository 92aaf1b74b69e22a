// Incremental decoding throughput: skipping half the layers should cut
// per-step cost roughly in half once the cache warms up.

#include <benchmark/benchmark.h>

#include "skiplayer/decode.hpp"

using namespace skiplayer;

namespace {

ModelConfig bench_cfg(Variant v, double p_target) {
  ModelConfig cfg;
  cfg.dim = 128;
  cfg.layers = 8;
  cfg.heads = 4;
  cfg.head_dim = 32;
  cfg.ffn_mult = 2;
  cfg.time = 256;
  cfg.vocab = 258;
  cfg.variant = v;
  cfg.p_target = p_target;
  if (v == Variant::random) cfg.router = RouterMode::random;
  return cfg;
}

void run_decode(benchmark::State& state, Variant v, double p_target) {
  auto params = ModelParams<float>::init(bench_cfg(v, p_target), 7);
  RngStream rng(3, "bench.decode");
  DecodeSession<float> session(params, 11);
  int32_t token = 1;
  for (auto _ : state) {
    if (session.position() >= 256) {
      state.PauseTiming();
      session.reset();
      state.ResumeTiming();
    }
    auto logits = session.step(token);
    benchmark::DoNotOptimize(logits.data());
    token = static_cast<int32_t>(rng.below(256));
  }
  state.counters["macs/step"] = static_cast<double>(session.macs()) /
                                std::max<int64_t>(1, session.position());
  state.SetItemsProcessed(state.iterations());
}

void BM_standard(benchmark::State& state) {
  run_decode(state, Variant::standard, 1.0);
}
void BM_skip_half(benchmark::State& state) {
  run_decode(state, Variant::random, 0.5);
}
void BM_skip_quarter(benchmark::State& state) {
  run_decode(state, Variant::random, 0.25);
}

}  // namespace

BENCHMARK(BM_standard);
BENCHMARK(BM_skip_half);
BENCHMARK(BM_skip_quarter);

BENCHMARK_MAIN();
