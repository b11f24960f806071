#include <benchmark/benchmark.h>

#include <algorithm>
#include <vector>

#include "flowdiff/dataset.hpp"
#include "flowdiff/diffusion.hpp"
#include "flowdiff/dps.hpp"
#include "flowdiff/flow.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/metrics.hpp"
#include "flowdiff/rng.hpp"
#include "flowdiff/score_network.hpp"
#include "flowdiff/train.hpp"

using namespace flowdiff;

namespace {

Tensor randn(std::vector<std::int64_t> shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.next_normal();
  return t;
}

Tensor rand01(std::vector<std::int64_t> shape, RngStream& rng) {
  Tensor t = randn(std::move(shape), rng);
  for (auto& v : t.vec()) v = 0.5 + 0.2 * std::tanh(v);
  return t;
}

FlowConfig toy_flow_config() {
  FlowConfig cfg;
  cfg.channels = 1;
  cfg.height = 8;
  cfg.width = 8;
  return cfg;
}

ScoreNetworkConfig toy_score_config() {
  ScoreNetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = 8;
  cfg.width = 8;
  return cfg;
}

ImageBatch toy_batch(std::int64_t B, RngStream& rng) {
  ImageBatch batch;
  batch.observations = rand01({B, 1, 8, 8}, rng);
  for (std::int64_t i = 0; i < B; ++i) batch.ids.push_back("b" + std::to_string(i));
  return batch;
}

}  // namespace

static void BM_Convolve2d(benchmark::State& state) {
  const std::int64_t hw = state.range(0);
  RngStream rng(1, 0);
  const Tensor x = randn({16, 1, hw, hw}, rng);
  const Tensor kernel = make_gaussian_kernel(5, 1.2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(convolve2d(x, kernel));
  }
}
BENCHMARK(BM_Convolve2d)->Arg(8)->Arg(32);

static void BM_FlowForward(benchmark::State& state) {
  ConditionalFlow flow(toy_flow_config());
  RngStream rng(2, 0);
  flow.init_params(rng);
  const Tensor z = randn({16, 1, 8, 8}, rng);
  const Tensor y = rand01({16, 1, 8, 8}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(flow.forward(z, y));
  }
}
BENCHMARK(BM_FlowForward);

static void BM_FlowBackward(benchmark::State& state) {
  ConditionalFlow flow(toy_flow_config());
  RngStream rng(3, 0);
  flow.init_params(rng);
  const Tensor z = randn({16, 1, 8, 8}, rng);
  const Tensor y = rand01({16, 1, 8, 8}, rng);
  Tensor gx(z.shape());
  for (auto& v : gx.vec()) v = 1.0 / static_cast<double>(gx.numel());
  const std::vector<double> glogdet(16, -1.0 / 16.0);
  for (auto _ : state) {
    FlowActs acts;
    flow.forward(z, y, &acts);
    benchmark::DoNotOptimize(flow.backward(acts, gx, glogdet));
  }
}
BENCHMARK(BM_FlowBackward);

static void BM_ScoreForward(benchmark::State& state) {
  ScoreNetwork net(toy_score_config());
  RngStream rng(4, 0);
  net.init_params(rng);
  const Tensor x = randn({16, 1, 8, 8}, rng);
  const std::vector<double> t(16, 0.5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.eps_forward(x, t));
  }
}
BENCHMARK(BM_ScoreForward);

static void BM_DsmLossGrad(benchmark::State& state) {
  ScoreNetwork net(toy_score_config());
  RngStream rng(5, 0);
  net.init_params(rng);
  const Tensor x0 = rand01({16, 1, 8, 8}, rng);
  DiffusionSpec spec;
  RngStream loop_rng(5, 1);
  auto ps = net.params();
  for (auto _ : state) {
    nn::zero_grads(ps);
    benchmark::DoNotOptimize(
        dsm_loss_grad(net, spec, x0, SMWeighting::unweighted, loop_rng));
  }
}
BENCHMARK(BM_DsmLossGrad);

static void BM_FlowUpdate(benchmark::State& state) {
  TrainConfig tc;
  tc.batch_size = 16;
  TrainState st(toy_flow_config(), toy_score_config(), tc);
  RngStream rng(6, 0);
  const ImageBatch batch = toy_batch(16, rng);
  const ForwardModel fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  for (auto _ : state) {
    benchmark::DoNotOptimize(flow_update(st, batch, fm, spec, tc));
  }
}
BENCHMARK(BM_FlowUpdate);

static void BM_DiffusionUpdate(benchmark::State& state) {
  TrainConfig tc;
  tc.batch_size = 16;
  TrainState st(toy_flow_config(), toy_score_config(), tc);
  RngStream rng(7, 0);
  const ImageBatch batch = toy_batch(16, rng);
  const ForwardModel fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  for (auto _ : state) {
    benchmark::DoNotOptimize(diffusion_update(st, batch, fm, spec, tc));
  }
}
BENCHMARK(BM_DiffusionUpdate);

static void BM_DpsSample(benchmark::State& state) {
  ScoreNetwork net(toy_score_config());
  RngStream rng(8, 0);
  net.init_params(rng);
  NetworkScoreModel model(net);
  DiffusionSpec spec;
  const ForwardModel fm = ForwardModel::noise_only(0.3);
  const Tensor y01 = rand01({1, 1, 8, 8}, rng);
  DPSConfig dc;
  dc.n_steps = 10;
  RngStream chain_rng(8, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(dps_sample(model, spec, y01, fm, dc, chain_rng));
  }
  state.SetItemsProcessed(state.iterations() * dc.n_steps);
}
BENCHMARK(BM_DpsSample);

static void BM_FrechetGaussian(benchmark::State& state) {
  RngStream rng(9, 0);
  std::vector<Tensor> a, b;
  for (int i = 0; i < 256; ++i) {
    a.push_back(rand01({1, 8, 8}, rng));
    b.push_back(rand01({1, 8, 8}, rng));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(frechet_gaussian(a, b));
  }
}
BENCHMARK(BM_FrechetGaussian);

BENCHMARK_MAIN();
