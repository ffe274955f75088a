// Parallel kernels against their serial references at the shapes the models use.
#include <benchmark/benchmark.h>

#include <vector>

#include "cgp/kernels.hpp"
#include "cgp/rng.hpp"

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
    cgp::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

// ViT token projection: (batch·tokens) × D times D × 3D.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const std::size_t n = 192, k = 64;
    auto a = random_values(m * k, 1);
    auto b = random_values(n * k, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            cgp::kernels::gemm<float>(false, true, m, n, k, a.data(), b.data(), c.data());
        else
            cgp::kernels::serial::gemm<float>(false, true, m, n, k, a.data(), b.data(), c.data());
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * k));
}

cgp::kernels::ConvGeometry conv_geometry(std::size_t in, std::size_t out, std::size_t size) {
    cgp::kernels::ConvGeometry g;
    g.batch = 32;
    g.in_channels = in;
    g.out_channels = out;
    g.height = g.width = size;
    g.kernel_h = g.kernel_w = 3;
    g.padding = 1;
    return g;
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                                 static_cast<std::size_t>(state.range(2)));
    auto x = random_values(g.batch * g.in_channels * g.height * g.width, 3);
    auto w = random_values(g.out_channels * g.patch_size(), 4);
    auto bias = random_values(g.out_channels, 5);
    std::vector<float> y(g.batch * g.out_channels * g.out_h() * g.out_w());
    for (auto _ : state) {
        if constexpr (Parallel)
            cgp::kernels::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
        else
            cgp::kernels::serial::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                                 static_cast<std::size_t>(state.range(2)));
    auto x = random_values(g.batch * g.in_channels * g.height * g.width, 3);
    auto w = random_values(g.out_channels * g.patch_size(), 4);
    auto dy = random_values(g.batch * g.out_channels * g.out_h() * g.out_w(), 6);
    std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
    for (auto _ : state) {
        if constexpr (Parallel)
            cgp::kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
        else
            cgp::kernels::serial::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
        benchmark::DoNotOptimize(dx.data());
    }
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Arg(65)->Arg(2080);
BENCHMARK(BM_Gemm<false>)->Arg(65)->Arg(2080);
BENCHMARK(BM_ConvForward<true>)->Args({3, 16, 32})->Args({16, 32, 16});
BENCHMARK(BM_ConvForward<false>)->Args({3, 16, 32})->Args({16, 32, 16});
BENCHMARK(BM_ConvBackward<true>)->Args({3, 16, 32})->Args({16, 32, 16});
BENCHMARK(BM_ConvBackward<false>)->Args({3, 16, 32})->Args({16, 32, 16});

BENCHMARK_MAIN();
