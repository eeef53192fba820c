// Micro benchmarks of the hot loops: 3D convolution, the Mattes MI metric with its gradient, and
// B-spline evaluation.

#include <benchmark/benchmark.h>

#include "lmreg/deform_sim.hpp"
#include "lmreg/registration.hpp"
#include "lmreg/tensor_ops.hpp"

namespace {

using namespace lmreg;

void BM_Conv3dForwardBackward(benchmark::State &state) {
    const auto n = state.range(0);
    SeededRng rng(1);
    auto input = tensor::Tensor<float>::from({1, 8, n, n, n}, std::vector<float>(static_cast<std::size_t>(8 * n * n * n)));
    for (auto &v : input.values()) v = static_cast<float>(rng.normal());
    auto weight = tensor::he_init<float>({8, 8, 3, 3, 3}, 8 * 27, rng);
    auto bias = tensor::Tensor<float>::zeros({8});
    for (auto _ : state) {
        weight.zero_grad();
        const auto out = tensor::sum(tensor::conv3d(input, weight, bias));
        tensor::backward(out);
        benchmark::DoNotOptimize(weight.grad().data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Conv3dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_MattesMiGradient(benchmark::State &state) {
    SeededRng rng(2);
    const Grid3 grid{{64, 64, 64}, {2, 2, 2}, {}};
    const auto target = make_phantom(rng, grid);
    const auto source = add_noise(target, rng, 0.03);
    const reg::MattesMutualInformation metric(target, source, 32);
    const auto transform = reg::BSplineTransform::covering(grid, {16, 16, 16});
    const auto samples = reg::random_coordinates(rng, grid, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        const auto r = reg::mattes_mi(metric, transform, samples, true);
        benchmark::DoNotOptimize(r.value);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MattesMiGradient)->Arg(5000)->Unit(benchmark::kMillisecond);

void BM_BSplineDisplacement(benchmark::State &state) {
    SeededRng rng(3);
    const Grid3 grid{{64, 64, 64}, {2, 2, 2}, {}};
    auto transform = reg::BSplineTransform::covering(grid, {8, 8, 8});
    for (auto &c : transform.coefficients()) c = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const auto points = reg::random_coordinates(rng, grid, 10000);
    for (auto _ : state) {
        Vec3 acc{};
        for (const auto &p : points) acc += transform.displacement(p);
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(points.size()));
}
BENCHMARK(BM_BSplineDisplacement)->Unit(benchmark::kMillisecond);

} // namespace
BENCHMARK_MAIN();
