#include <benchmark/benchmark.h>

#include "attrib/explainers.hpp"
#include "attrib/metrics.hpp"
#include "attrib/model.hpp"
#include "attrib/model_io.hpp"
#include "attrib/rng.hpp"
#include "attrib/shapley.hpp"

namespace {

using namespace attrib;

Tensor noise_image(const Shape& shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

struct Fixture {
  ModelGraph model = build_reference_model("MiniCNN-32", 42);
  Tensor image = noise_image(model.input_shape(), 1);
  Baseline baseline = constant_baseline({0.5, 0.5, 0.5});
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_Forward(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(forward(f.model, f.image).logits()[0]);
}
BENCHMARK(BM_Forward);

void BM_ForwardBackward(benchmark::State& state) {
  const auto& f = fixture();
  for (auto _ : state) {
    const auto trace = forward(f.model, f.image);
    benchmark::DoNotOptimize(grad_input(trace, 0)[0]);
  }
}
BENCHMARK(BM_ForwardBackward);

// One full permutation walk: pixel_count incremental steps.
void BM_IncrementalWalk(benchmark::State& state) {
  const auto& f = fixture();
  const ModelValueFunction v(f.model, f.image, f.baseline, 0);
  const auto perm = random_permutation(v.players(), 3);
  auto walker = v.walker();
  for (auto _ : state) {
    double acc = walker->start();
    for (std::size_t p : perm) acc += walker->add(p);
    benchmark::DoNotOptimize(acc);
  }
  state.counters["steps/s"] =
      benchmark::Counter(static_cast<double>(state.iterations() * perm.size()),
                         benchmark::Counter::kIsRate);
}
BENCHMARK(BM_IncrementalWalk)->Unit(benchmark::kMillisecond);

void BM_SampledShapley(benchmark::State& state) {
  const auto& f = fixture();
  const ModelValueFunction v(f.model, f.image, f.baseline, 0);
  SamplingOptions opts;
  opts.permutations = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(sampled_shapley(v, opts).values[0]);
}
BENCHMARK(BM_SampledShapley)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_TinyExact(benchmark::State& state) {
  const ModelGraph model = build_reference_model("TinyMLP-9", 7);
  const Tensor image = noise_image(model.input_shape(), 2);
  const ModelValueFunction v(model, image, constant_baseline({0.0}), 1);
  for (auto _ : state) benchmark::DoNotOptimize(exact_shapley(v).values[0]);
}
BENCHMARK(BM_TinyExact);

void BM_Explainer(benchmark::State& state) {
  const auto& f = fixture();
  const auto method = static_cast<Method>(state.range(0));
  ExplainerConfig cfg;
  cfg.shapley.permutations = 2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(explain(method, f.model, f.image, f.baseline, 0, cfg).values[0]);
  }
  state.SetLabel(std::string(method_name(method)));
}
BENCHMARK(BM_Explainer)
    ->DenseRange(0, static_cast<int>(Method::kSampledShapley))
    ->Unit(benchmark::kMillisecond);

void BM_NonRobustGrad(benchmark::State& state) {
  const auto& f = fixture();
  const Explainer e = bind_explainer(Method::kGrad, f.model, f.baseline);
  for (auto _ : state) {
    benchmark::DoNotOptimize(metric_non_robustness(e, f.model, f.image, f.baseline, 0));
  }
}
BENCHMARK(BM_NonRobustGrad)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
