#include <benchmark/benchmark.h>

#include "canon/layers.hpp"

using namespace canon;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = rng.gaussian();
    return Tensor::from_data(std::move(shape), std::move(data));
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = random_tensor({n, n}, rng);
    Tensor b = random_tensor({n, n}, rng);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv2dForward(benchmark::State& state) {
    Rng rng(2);
    Tensor x = random_tensor({32, 8, 28, 28}, rng);
    Tensor w = random_tensor({16, 8, 3, 3}, rng);
    Tensor b = random_tensor({16}, rng);
    NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, PadMode::Zero));
}
BENCHMARK(BM_Conv2dForward);

void BM_ConvTrainStep(benchmark::State& state) {
    Rng rng(3);
    Tensor x = random_tensor({16, 1, 28, 28}, rng);
    ParameterStore ps;
    Tensor w = ps.add("w", random_tensor({8, 1, 3, 3}, rng));
    Tensor b = ps.add("b", random_tensor({8}, rng));
    for (auto _ : state) {
        Tensor loss = mean_all(relu(conv2d(x, w, b, 2, PadMode::Zero)));
        ps.zero_grads();
        backward(loss, ps);
        benchmark::DoNotOptimize(w.grad().data());
    }
}
BENCHMARK(BM_ConvTrainStep);

}  // namespace
