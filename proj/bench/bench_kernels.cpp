#include <benchmark/benchmark.h>

#include "softtpl/kernels.hpp"

namespace {

using namespace softtpl;

struct Fixture {
  std::vector<CorpusPair> corpus;
  Model<double> model;
  std::vector<TrainingTriple> triples;

  Fixture() {
    SyntheticSpec spec = SyntheticSpec::restaurant();
    spec.pairs = 256;
    corpus = generate_synthetic(spec);
    TrainConfig c;
    model = init_model<double>(corpus, corpus, c);
    const ExemplarIndex index(corpus);
    triples = build_triples(corpus, index, {c.max_distance, true, c.seed}, 0);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_BatchGradientSerial(benchmark::State& state) {
  const auto& f = fixture();
  const std::span<const TrainingTriple> batch(f.triples.data(), static_cast<std::size_t>(state.range(0)));
  const LossOptions opts{0.2, 1.0, 1e-12, CoverageMode::both};
  for (auto _ : state) benchmark::DoNotOptimize(batch_gradient_serial(f.model, batch, opts));
}

void BM_BatchGradientParallel(benchmark::State& state) {
  const auto& f = fixture();
  const std::span<const TrainingTriple> batch(f.triples.data(), static_cast<std::size_t>(state.range(0)));
  const LossOptions opts{0.2, 1.0, 1e-12, CoverageMode::both};
  for (auto _ : state) benchmark::DoNotOptimize(batch_gradient_parallel(f.model, batch, opts));
}

void BM_GenerateSerial(benchmark::State& state) {
  const auto& f = fixture();
  const std::span<const TrainingTriple> batch(f.triples.data(), 16);
  for (auto _ : state) benchmark::DoNotOptimize(generate_serial(f.model, batch, 5, 20));
}

void BM_GenerateParallel(benchmark::State& state) {
  const auto& f = fixture();
  const std::span<const TrainingTriple> batch(f.triples.data(), 16);
  for (auto _ : state) benchmark::DoNotOptimize(generate_parallel(f.model, batch, 5, 20));
}

}  // namespace

BENCHMARK(BM_BatchGradientSerial)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchGradientParallel)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
