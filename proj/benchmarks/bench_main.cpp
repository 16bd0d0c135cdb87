#include <benchmark/benchmark.h>

#include "barcodemae/evalsuite.hpp"
#include "barcodemae/masking.hpp"
#include "barcodemae/model.hpp"
#include "barcodemae/random.hpp"
#include "barcodemae/seqdata.hpp"
#include "barcodemae/tokenizer.hpp"
#include "barcodemae/train.hpp"

using namespace barcodemae;

namespace {

std::string random_barcode(std::uint64_t seed, std::size_t len = 658) {
  Rng rng(seed);
  std::string s(len, 'A');
  for (char& c : s) c = "ACGT"[rng.uniform_index(4)];
  return s;
}

Matrix<double> random_points(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<double> m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  return m;
}

void BM_Tokenize(benchmark::State& state) {
  const std::string s = random_barcode(1);
  const TokenizerConfig cfg{static_cast<int>(state.range(0)), 512};
  for (auto _ : state) benchmark::DoNotOptimize(tokenize(s, cfg, 1));
}
BENCHMARK(BM_Tokenize)->Arg(4)->Arg(6);

void BM_EncoderForward(benchmark::State& state) {
  const ModelConfig cfg;
  const auto params = init_params<float>(cfg, 2);
  const TokenSequence ts = tokenize(random_barcode(3), cfg.tokenizer(), 0);
  Rng rng(4);
  const MaskPlan plan = sample_mask(static_cast<int>(ts.size()), state.range(0) / 100.0, MaskMode::mae, rng);
  const EncoderInput in = build_encoder_input(ts, plan, params.vocab());
  for (auto _ : state) benchmark::DoNotOptimize(encoder_forward(params, in));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.size()));
}
BENCHMARK(BM_EncoderForward)->Arg(0)->Arg(50);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.variant = static_cast<Variant>(state.range(0));
  if (cfg.variant == Variant::encoder_only) cfg.dec_layers = 0;
  const auto params = init_params<float>(cfg, 5);
  const TokenSequence ts = tokenize(random_barcode(6), cfg.tokenizer(), 0);
  Rng rng(7);
  const MaskPlan plan = sample_mask(static_cast<int>(ts.size()), 0.5, cfg.mask_mode(), rng);
  const PretrainExample ex = make_pretrain_example(ts, plan, params.vocab(), rng);
  std::vector<float> grads(params.parameter_count());
  for (auto _ : state) benchmark::DoNotOptimize(forward_backward<float>(params, ex, grads, 1.0f, &rng));
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 2);

void BM_KnnProbe(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  EmbeddingMatrix ref, query;
  ref.vectors = random_points(n, 64, 8);
  query.vectors = random_points(n / 4, 64, 9);
  for (int i = 0; i < n; ++i) {
    ref.record_ids.push_back("r" + std::to_string(i));
    ref.genus.push_back("g" + std::to_string(i % 10));
  }
  for (int i = 0; i < n / 4; ++i) {
    query.record_ids.push_back("q" + std::to_string(i));
    query.genus.push_back("g" + std::to_string(i % 10));
  }
  ref.species = ref.bin_id = std::vector<std::string>(static_cast<std::size_t>(n));
  query.species = query.bin_id = std::vector<std::string>(static_cast<std::size_t>(n / 4));
  for (auto _ : state) benchmark::DoNotOptimize(knn_probe(ref, query));
}
BENCHMARK(BM_KnnProbe)->Arg(1000)->Arg(4000);

void BM_WardCluster(benchmark::State& state) {
  const Matrix<double> data = random_points(static_cast<int>(state.range(0)), 50, 10);
  for (auto _ : state) benchmark::DoNotOptimize(agglomerative_cluster(data, 10));
}
BENCHMARK(BM_WardCluster)->Arg(250)->Arg(1000);

void BM_Pca(benchmark::State& state) {
  const Matrix<double> data = random_points(static_cast<int>(state.range(0)), 64, 11);
  for (auto _ : state) benchmark::DoNotOptimize(reduce_dims(data, 50));
}
BENCHMARK(BM_Pca)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
