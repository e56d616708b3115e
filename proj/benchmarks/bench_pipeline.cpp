#include <benchmark/benchmark.h>

#include "clipn/detect.hpp"
#include "clipn/losses.hpp"
#include "clipn/store.hpp"

namespace {

void BM_LossAndGradient(benchmark::State& state) {
  clipn::FixtureShape shape;
  shape.batch = static_cast<std::size_t>(state.range(0));
  shape.dim = 16;
  const clipn::TrainingFixture fx = clipn::random_fixture(7, shape);
  for (auto _ : state) {
    benchmark::DoNotOptimize(clipn::loss_and_gradient(fx.batch, fx.std_params, fx.no_params));
  }
}
BENCHMARK(BM_LossAndGradient)->Arg(8)->Arg(32);

// Scores the synthetic ID test split with every method.
void BM_ScoreBatch(benchmark::State& state) {
  const clipn::SynthData data = clipn::synth_generate({});
  const clipn::EncoderParams no_params =
      clipn::init_no_encoder(data.text_encoder, clipn::negative_keyword_tokens(data.vocab));
  clipn::BankSpec spec;
  spec.class_names = data.id_class_names;
  const clipn::ClassTextBank bank = clipn::build_bank(spec, data.vocab, data.text_encoder, no_params);
  const std::vector<clipn::Method> methods = clipn::all_methods();
  const auto threads = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(clipn::score_batch(data.id_test.features, bank, methods, {}, threads));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.id_test.features.rows()));
}
BENCHMARK(BM_ScoreBatch)->Arg(1)->Arg(2);

}  // namespace
