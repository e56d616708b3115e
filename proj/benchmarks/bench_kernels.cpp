#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "clipn/metric.hpp"
#include "clipn/numkernel.hpp"

namespace {

clipn::Matrix random_unit_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  clipn::Matrix m(rows, cols);
  for (double& x : m.data()) x = g(rng);
  return clipn::normalize_rows(m);
}

void BM_SimilarityMatrix(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const clipn::Matrix a = random_unit_rows(n, 64, 1);
  const clipn::Matrix b = random_unit_rows(n, 64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(clipn::similarity_matrix(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_SimilarityMatrix)->Arg(16)->Arg(64)->Arg(256);

void BM_StableSoftmax(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 10.0);
  std::vector<double> logits(static_cast<std::size_t>(state.range(0)));
  for (double& x : logits) x = g(rng);
  for (auto _ : state) benchmark::DoNotOptimize(clipn::stable_softmax(logits, 0.07));
}
BENCHMARK(BM_StableSoftmax)->Arg(10)->Arg(100)->Arg(1000);

void BM_Auroc(benchmark::State& state) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::vector<double> id(static_cast<std::size_t>(state.range(0)));
  std::vector<double> ood(id.size());
  for (double& x : id) x = g(rng) + 1.0;
  for (double& x : ood) x = g(rng);
  for (auto _ : state) benchmark::DoNotOptimize(clipn::auroc(id, ood));
}
BENCHMARK(BM_Auroc)->Arg(200)->Arg(2000)->Arg(20000);

}  // namespace
