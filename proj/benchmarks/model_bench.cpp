#include <benchmark/benchmark.h>

#include "scoregrade/model.hpp"
#include "scoregrade/optim.hpp"

using namespace scoregrade;

namespace {

std::vector<LmWindow> windows(EncoderKind kind, std::size_t n, std::size_t len) {
  Rng rng(21);
  std::vector<LmWindow> out(n);
  for (auto& w : out) {
    if (kind == EncoderKind::kEmb) {
      for (std::size_t i = 0; i < len; ++i) w.tokens.push_back(static_cast<std::uint8_t>(rng.below(256)));
    } else {
      w.columns.resize(len);
      for (auto& c : w.columns) {
        for (std::size_t i = 0; i < kStaffPositions; ++i) c[i] = rng.bernoulli(0.1);
      }
    }
  }
  return out;
}

}  // namespace

// One desk pretraining step: forward, backward and Adam.
static void BM_PretrainStep(benchmark::State& state) {
  const auto kind = static_cast<EncoderKind>(state.range(0));
  auto model = build_model<float>(GptConfig::desk(kind), {}, 1);
  model.set_trainable(TrainableSet::kPretrain);
  auto params = model.pretrain_parameters();
  AdamState<float> adam(params, AdamHyper{});
  const auto batch = windows(kind, 8, 64);
  for (auto _ : state) {
    auto loss = forward_lm(model, batch);
    backward(loss);
    adam_step(std::span<Tensor<float>>(params), adam);
    for (auto& p : params) p.zero_grad();
  }
}
BENCHMARK(BM_PretrainStep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

static void BM_ClassifyFullVsTail(benchmark::State& state) {
  auto model = build_model<float>(GptConfig::desk(EncoderKind::kFc), {{"d", 9}}, 1);
  BootlegScore s;
  s.columns = windows(EncoderKind::kFc, 1, 60).front().columns;
  const bool cached = state.range(0) != 0;
  const auto ctx = prepare_context(model, s);
  for (auto _ : state) {
    if (cached) {
      benchmark::DoNotOptimize(forward_tail(model, {&ctx}, "d").logits.data().data());
    } else {
      benchmark::DoNotOptimize(forward_classify(model, s, "d").logits.data().data());
    }
  }
}
BENCHMARK(BM_ClassifyFullVsTail)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
