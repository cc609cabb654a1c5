// Microbenchmarks for the hot paths: convolution, full forward passes per
// task subset, and the post-processing decoders.

#include <benchmark/benchmark.h>

#include "mdsp/network.hpp"
#include "mdsp/postprocess.hpp"
#include "mdsp/synthdata.hpp"
#include "mdsp/tensor.hpp"

namespace {

using namespace mdsp;

NetworkSpec bench_spec(TaskMask mask) {
  NetworkSpec spec = default_spec();
  spec.width_mult = 0.25f;
  spec.input_size = 128;
  spec.anchors = default_anchors(spec.input_size);
  spec.task_mask = mask;
  return spec;
}

Tensor<float> bench_image(int size) {
  GenSpec gen;
  gen.image_size = size;
  const Sample s = generate_scene(gen, 42);
  Tensor<float> input = Tensor<float>::zeros({1, 3, size, size});
  std::copy(s.image.values().begin(), s.image.values().end(), input.values().begin());
  return input;
}

void BM_Conv3x3(benchmark::State& state) {
  Rng rng(1);
  Tensor<float> x = Tensor<float>::randn({1, 32, 64, 64}, rng);
  Tensor<float> w = Tensor<float>::randn({32, 32, 3, 3}, rng, 0.05f);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Tensor<float>(), 1, 1));
}
BENCHMARK(BM_Conv3x3);

void BM_ForwardByMask(benchmark::State& state) {
  const std::array<TaskMask, 4> masks = {TaskMask{true, false, false}, TaskMask{false, true, false},
                                         TaskMask{false, false, true}, TaskMask::all()};
  const TaskMask mask = masks[static_cast<size_t>(state.range(0))];
  Network<float> net(bench_spec(mask), 7);
  Tensor<float> img = bench_image(128);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(img, false));
  state.SetLabel(mask.str());
}
BENCHMARK(BM_ForwardByMask)->DenseRange(0, 3);

void BM_DecodeBoxes(benchmark::State& state) {
  NetworkSpec spec = bench_spec(TaskMask{true, false, false});
  Network<float> net(spec, 7);
  Tensor<float> img = bench_image(128);
  NoGradGuard guard;
  auto out = net.forward(img, false);
  for (auto _ : state)
    benchmark::DoNotOptimize(nms(decode_boxes(*out.detect, spec, 0.25f), 0.45f));
}
BENCHMARK(BM_DecodeBoxes);

void BM_SegDecode(benchmark::State& state) {
  NetworkSpec spec = bench_spec(TaskMask{false, true, false});
  Network<float> net(spec, 7);
  Tensor<float> img = bench_image(128);
  NoGradGuard guard;
  auto out = net.forward(img, false);
  for (auto _ : state) benchmark::DoNotOptimize(seg_decode(*out.seg_logits));
}
BENCHMARK(BM_SegDecode);

void BM_DecodeSkeletons(benchmark::State& state) {
  NetworkSpec spec = bench_spec(TaskMask{false, false, true});
  Network<float> net(spec, 7);
  Tensor<float> img = bench_image(128);
  NoGradGuard guard;
  auto out = net.forward(img, false);
  for (auto _ : state) benchmark::DoNotOptimize(decode_skeletons(*out.pose, spec, 0.1f));
}
BENCHMARK(BM_DecodeSkeletons);

void BM_GenerateScene(benchmark::State& state) {
  GenSpec gen;
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_scene(gen, seed++));
}
BENCHMARK(BM_GenerateScene);

}  // namespace

BENCHMARK_MAIN();
