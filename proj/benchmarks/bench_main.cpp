#include <benchmark/benchmark.h>

#include "hdrfuse/autograd.hpp"
#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/metrics.hpp"
#include "hdrfuse/params.hpp"
#include "hdrfuse/segmentation.hpp"
#include "hdrfuse/stack_io.hpp"

namespace {

using namespace hdrfuse;

Tensor filled(std::vector<int> shape, std::uint64_t seed) { return glorot_init(shape, seed); }

void BM_Conv3x3(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const Tensor x = filled({32, size, size}, 1), w = filled({32, 32, 3, 3}, 2);
  for (auto _ : state) {
    ag::Tape tape(false);
    benchmark::DoNotOptimize(ag::conv2d(tape.constant(x), tape.constant(w), ag::Var{}, {1, 1, 1}).value());
  }
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_Conv3x3)->Arg(32)->Arg(64)->Arg(128);

void BM_ForwardStack(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const SynthScene s = synth_scene(1, size, size, 3, {-2, 0, 2});
  const auto masks = diff_segment_stack(s.stack, 0.1);
  const FusionModel model(ModelConfig{}, 0);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, s.stack, masks));
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_ForwardStack)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const Tensor a = filled({3, size, size}, 3), b = filled({3, size, size}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_Ssim)->Arg(128)->Arg(512);

void BM_DiffSegment(benchmark::State& state) {
  const SynthScene s = synth_scene(2, 256, 256, 3, {-2, 0, 2});
  for (auto _ : state) benchmark::DoNotOptimize(diff_segment_stack(s.stack, 0.1));
}
BENCHMARK(BM_DiffSegment)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
