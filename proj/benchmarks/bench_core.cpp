#include <benchmark/benchmark.h>

#include "pani/autodiff.hpp"
#include "pani/graph.hpp"
#include "pani/interpolation.hpp"
#include "pani/patches.hpp"
#include "pani/rng.hpp"
#include "pani/tensor.hpp"
#include "pani/vat.hpp"

namespace {

using namespace pani;

Tensor random_tensor(std::vector<long> shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal();
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  RngStream rng(1);
  Tensor input = random_tensor({32, 1, 28, 28}, rng);
  Tensor kernel = random_tensor({32, 1, 3, 3}, rng);
  Tensor bias = random_tensor({32}, rng);
  for (auto _ : state) {
    Tape tape;
    NodeId out = tape.conv2d(tape.constant(input), tape.constant(kernel),
                             tape.constant(bias), 1, 1);
    benchmark::DoNotOptimize(tape.value(out).data.data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_ConvBackward(benchmark::State& state) {
  RngStream rng(2);
  Tensor input = random_tensor({32, 1, 28, 28}, rng);
  Tensor kernel = random_tensor({32, 1, 3, 3}, rng);
  Tensor bias = random_tensor({32}, rng);
  Tensor targets({32, 10});
  for (long i = 0; i < 32; ++i) targets.data[i * 10 + (i % 10)] = 1.0;
  Tensor dense_w = random_tensor({10, 32}, rng);
  Tensor dense_b = random_tensor({10}, rng);
  for (auto _ : state) {
    Tape tape;
    NodeId k = tape.leaf(kernel);
    NodeId h = tape.relu(tape.conv2d(tape.constant(input), k,
                                     tape.constant(bias), 1, 1));
    NodeId logits = tape.dense(tape.global_avg_pool(h), tape.constant(dense_w),
                               tape.constant(dense_b));
    NodeId loss = tape.soft_cross_entropy(logits, targets);
    Gradients g = tape.backward(loss);
    benchmark::DoNotOptimize(g.at(k).data.data());
  }
}
BENCHMARK(BM_ConvBackward);

void BM_PatchRoundtrip(benchmark::State& state) {
  RngStream rng(3);
  Tensor map = random_tensor({32, 8, 28, 28}, rng);
  for (auto _ : state) {
    PatchSet ps = extract_patches(map, 4);
    Tensor back = reconstruct(ps);
    benchmark::DoNotOptimize(back.data.data());
  }
}
BENCHMARK(BM_PatchRoundtrip);

void BM_KnnPatches(benchmark::State& state) {
  long n = state.range(0);
  RngStream rng(4);
  Tensor map = random_tensor({n, 1, 28, 28}, rng);
  PatchSet ps = extract_patches(map, 7);
  RngStream peer_rng(5);
  PeerSet peers = filter_peers_random(n, std::min<long>(10, n - 1), peer_rng);
  for (auto _ : state) {
    NeighborIndex g = knn_patches(ps, peers, 10);
    benchmark::DoNotOptimize(g.image.data());
  }
}
BENCHMARK(BM_KnnPatches)->Arg(16)->Arg(32);

void BM_TransformLayer(benchmark::State& state) {
  RngStream rng(6);
  long n = 32, p = 49, k2 = 10;
  Tensor map = random_tensor({n, 1, 28, 28}, rng);
  PatchSet ps = extract_patches(map, 4);
  RngStream peer_rng(7);
  PeerSet peers = filter_peers_random(n, 10, peer_rng);
  NeighborIndex g = knn_patches(ps, peers, k2);
  Tensor eta({n, p, k2});
  for (double& v : eta.data) v = 0.01 * rng.uniform();
  for (auto _ : state) {
    Tensor out = transform_layer(map, g, eta, 4);
    benchmark::DoNotOptimize(out.data.data());
  }
}
BENCHMARK(BM_TransformLayer);

void BM_VatPerturbation(benchmark::State& state) {
  RngStream rng(8);
  ModelConfig mcfg;
  mcfg.in_channels = 1;
  mcfg.height = 16;
  mcfg.width = 16;
  mcfg.num_classes = 10;
  RngStream prng = RngStream::derive(9, "params-init");
  ParamSet params = init_params(mcfg, prng);
  Tensor inputs = random_tensor({16, 1, 16, 16}, rng);

  VatConfig vcfg;
  vcfg.eps = 2.0;
  vcfg.k1 = 10;
  vcfg.layers = {{0, 2, 1.0, 10}};
  VatGraphs ctx = build_vat_graphs(mcfg, params, inputs, vcfg, 1);
  for (auto _ : state) {
    RngStream irng = RngStream::derive(10, "power-init");
    VatPerturbation pert =
        compute_pani_vat_perturbation(mcfg, params, inputs, vcfg, ctx, irng, 1);
    benchmark::DoNotOptimize(pert.eta.layers[0].data.data());
  }
}
BENCHMARK(BM_VatPerturbation);

}  // namespace

BENCHMARK_MAIN();
