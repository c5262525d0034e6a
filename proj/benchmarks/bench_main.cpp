#include <benchmark/benchmark.h>

#include "aegis/desdn.hpp"
#include "aegis/desk.hpp"
#include "aegis/loss.hpp"
#include "aegis/multiexit.hpp"
#include "aegis/quant.hpp"

namespace {

using namespace aegis;

MultiExitModel desk(bool ics) {
  nn::Network net = make_desk_backbone(DeskArch{});
  Rng rng(1);
  net.init_he(rng);
  MultiExitModel m = MultiExitModel::from_backbone(std::move(net));
  if (!ics) return m;
  return attach_ics(m, m.backbone().exit_points(), rng);
}

nn::Tensor image(std::uint64_t seed) {
  Rng rng(seed);
  nn::Tensor x({3, 16, 16});
  for (double& v : x.values()) v = rng.uniform();
  return x;
}

void BM_Forward(benchmark::State& state) {
  const MultiExitModel m = desk(false);
  const nn::Tensor x = image(2);
  for (auto _ : state) benchmark::DoNotOptimize(nn::forward(m.backbone(), x).logits);
}
BENCHMARK(BM_Forward);

void BM_DynamicInfer(benchmark::State& state) {
  const MultiExitModel m = desk(true);
  const nn::Tensor x = image(3);
  const ExitPolicy pol{0.9, static_cast<std::size_t>(state.range(0)), 7, {}};
  std::uint64_t k = 0;
  for (auto _ : state) {
    Rng rng = query_rng(pol, k++);
    benchmark::DoNotOptimize(dynamic_infer(m, x, pol, rng));
  }
}
BENCHMARK(BM_DynamicInfer)->Arg(1)->Arg(3)->Arg(7);

void BM_RankBits(benchmark::State& state) {
  const MultiExitModel m = desk(false);
  std::vector<nn::Tensor> xs{image(4), image(5)};
  const std::vector<std::size_t> ys{1, 2};
  const auto g = nn::grad_params(m.backbone(), xs, nn::cross_entropy_fn(ys));
  std::vector<quant::GradView> views;
  const auto layers = m.backbone().param_layers();
  for (std::size_t id = 0; id < layers.size(); ++id) views.push_back({id, &m.codes(id), &g.grads.weight[layers[id]]});
  for (auto _ : state) benchmark::DoNotOptimize(quant::rank_bits(views, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_RankBits)->Arg(1)->Arg(100);

}  // namespace
BENCHMARK_MAIN();
