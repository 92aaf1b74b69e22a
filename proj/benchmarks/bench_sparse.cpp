// Sparse executor throughput against the masked-dense path at several
// densities. The gathered path should track density; the dense path pays
// full price and then discards the skipped rows.

#include <benchmark/benchmark.h>

#include "skiplayer/sparse.hpp"

using namespace skiplayer;

namespace {

using T32 = Tensor<float>;

Mask mask_with_density(int64_t batch, int64_t time, double density,
                       uint64_t seed) {
  RngStream rng(seed, "bench.mask");
  Mask m = Mask::all_off(batch, time);
  for (auto& b : m.on) b = rng.bernoulli(density) ? 1 : 0;
  return m;
}

void run_ffn(benchmark::State& state, bool sparse) {
  const int64_t batch = 8, time = 128, d = 256, h = 1024;
  const double density = static_cast<double>(state.range(0)) / 8.0;
  RngStream rng(1, "bench.sparse");
  T32 x = T32::randn({batch, time, d}, rng, 1.0);
  T32 w1 = T32::randn({d, h}, rng, 0.05);
  T32 w2 = T32::randn({h, d}, rng, 0.05);
  Mask mask = mask_with_density(batch, time, density, 2);
  GroupFn<float> f = [&](Tape<float>& t, const T32& rows) {
    return t.matmul(t.relu(t.matmul(rows, w1)), w2);
  };
  for (auto _ : state) {
    Tape<float> tape;
    if (sparse) {
      benchmark::DoNotOptimize(execute_sparse(tape, x, mask, f, 32, true));
    } else {
      T32 y = f(tape, x);
      benchmark::DoNotOptimize(tape.select_rows(y, x, mask));
    }
  }
  state.counters["density"] = density;
  state.SetItemsProcessed(state.iterations() * batch * time);
}

void BM_gathered(benchmark::State& state) { run_ffn(state, true); }
void BM_masked_dense(benchmark::State& state) { run_ffn(state, false); }

}  // namespace

BENCHMARK(BM_gathered)->Arg(1)->Arg(2)->Arg(4)->Arg(8);
BENCHMARK(BM_masked_dense)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

BENCHMARK_MAIN();
