#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "qedit/kernels.hpp"

using namespace qedit::kernels;

namespace {

struct Operands {
    std::vector<double> x, w, y, dy, dx, dw;
    Dims d;
};

Operands make(benchmark::State& state) {
    Operands o;
    o.d = {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
           static_cast<std::size_t>(state.range(2))};
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    auto fill = [&](std::vector<double>& v, std::size_t size) {
        v.resize(size);
        for (auto& e : v) e = n(rng);
    };
    fill(o.x, o.d.m * o.d.k);
    fill(o.w, o.d.n * o.d.k);
    fill(o.dy, o.d.m * o.d.n);
    o.y.assign(o.d.m * o.d.n, 0.0);
    o.dx.assign(o.d.m * o.d.k, 0.0);
    o.dw.assign(o.d.n * o.d.k, 0.0);
    return o;
}

void flops(benchmark::State& state, const Dims& d) {
    state.counters["GFLOP/s"] = benchmark::Counter(2.0 * static_cast<double>(d.m * d.n * d.k),
                                                   benchmark::Counter::kIsIterationInvariantRate,
                                                   benchmark::Counter::kIs1000);
}

void BM_linear_serial(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        serial::linear(o.d, o.x, o.w, o.y);
        benchmark::DoNotOptimize(o.y.data());
    }
    flops(state, o.d);
}

void BM_linear_parallel(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        linear(o.d, o.x, o.w, o.y);
        benchmark::DoNotOptimize(o.y.data());
    }
    flops(state, o.d);
}

void BM_grad_input_serial(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        serial::linear_grad_input(o.d, o.dy, o.w, o.dx);
        benchmark::DoNotOptimize(o.dx.data());
    }
    flops(state, o.d);
}

void BM_grad_input_parallel(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        linear_grad_input(o.d, o.dy, o.w, o.dx);
        benchmark::DoNotOptimize(o.dx.data());
    }
    flops(state, o.d);
}

void BM_grad_weight_serial(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        serial::linear_grad_weight(o.d, o.dy, o.x, o.dw);
        benchmark::DoNotOptimize(o.dw.data());
    }
    flops(state, o.d);
}

void BM_grad_weight_parallel(benchmark::State& state) {
    auto o = make(state);
    for (auto _ : state) {
        linear_grad_weight(o.d, o.dy, o.x, o.dw);
        benchmark::DoNotOptimize(o.dw.data());
    }
    flops(state, o.d);
}

// Shapes of the desk model: a training batch through the attention
// projections and both FFN matrices, and a single edit prompt.
void shapes(benchmark::internal::Benchmark* b) {
    b->Args({112, 128, 128})->Args({112, 512, 128})->Args({112, 128, 512})->Args({4, 512, 128})->Args({256, 512, 128});
}

}  // namespace

BENCHMARK(BM_linear_serial)->Apply(shapes);
BENCHMARK(BM_linear_parallel)->Apply(shapes);
BENCHMARK(BM_grad_input_serial)->Apply(shapes);
BENCHMARK(BM_grad_input_parallel)->Apply(shapes);
BENCHMARK(BM_grad_weight_serial)->Apply(shapes);
BENCHMARK(BM_grad_weight_parallel)->Apply(shapes);

BENCHMARK_MAIN();
