#include <benchmark/benchmark.h>

#include <vector>

#include "tscnet/confounder.hpp"
#include "tscnet/counterfactual.hpp"
#include "tscnet/train.hpp"

using namespace tscnet;

namespace {

Image random_image(int size, uint64_t seed) {
  Rng rng(seed);
  Image img(size, size, 3);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

// Default backbone: 32x32 input, 4x4 patches, width 64, depth 4.
VisionTransformer<float> default_model() {
  BackboneConfig b;
  auto m = initial_model(model_spec_for(b, Toggles{}, 0), 1);
  m.mark_ready();
  return m;
}

void BM_VitForward(benchmark::State& state) {
  const auto model = default_model();
  const auto img = random_image(32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_inference(img));
}
BENCHMARK(BM_VitForward)->Unit(benchmark::kMicrosecond);

void BM_VitForwardBackward(benchmark::State& state) {
  const auto model = default_model();
  const int batch = static_cast<int>(state.range(0));
  std::vector<Image> images;
  for (int i = 0; i < batch; ++i) images.push_back(random_image(32, 10 + i));
  std::vector<GradientItem> items;
  for (int i = 0; i < batch; ++i) items.push_back({&images[i], nullptr, i % 10, static_cast<uint64_t>(i)});
  ParameterBuffer<float> grad(model.parameter_count(), 0.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(accumulate_gradient(model, std::span<const GradientItem>(items), nullptr, 0, 0.0, false, grad));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_VitForwardBackward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_FftDecompose(benchmark::State& state) {
  const auto img = random_image(32, 3);
  for (auto _ : state) benchmark::DoNotOptimize(fft_decompose(img));
}
BENCHMARK(BM_FftDecompose);

void BM_AmplitudeSwap(benchmark::State& state) {
  const auto x = random_image(32, 4);
  const auto y = random_image(32, 5);
  for (auto _ : state) benchmark::DoNotOptimize(amplitude_swap(x, y, 0.5));
}
BENCHMARK(BM_AmplitudeSwap);

void BM_KMeansPlusPlus(benchmark::State& state) {
  Rng rng(6);
  MatrixD points(500, 64);
  for (Eigen::Index i = 0; i < points.size(); ++i) points.data()[i] = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_plus_plus(points, 8, 100, 1e-6, 7));
}
BENCHMARK(BM_KMeansPlusPlus)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
