#include <vector>

#include "cgp/kernels.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cgp;

namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return v;
}

}  // namespace

TEST_CASE_TEMPLATE("parallel gemm matches serial reference for every transpose case", T, float, double) {
    Rng rng(1);
    const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb)
            for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 13, 5}, {64, 40, 33}, {3, 65, 17}}) {
                auto a = random_values<T>(m * k, rng);
                auto b = random_values<T>(k * n, rng);
                std::vector<T> c(m * n, T(0.5)), ref(m * n, T(0.5));
                kernels::gemm<T>(ta, tb, m, n, k, a.data(), b.data(), c.data(), true);
                kernels::serial::gemm<T>(ta, tb, m, n, k, a.data(), b.data(), ref.data(), true);
                for (std::size_t i = 0; i < c.size(); ++i)
                    CHECK(std::abs(double(c[i]) - double(ref[i])) <= tol * std::max(1.0, std::abs(double(ref[i]))));
            }
}

TEST_CASE_TEMPLATE("im2col convolution matches direct convolution", T, float, double) {
    Rng rng(2);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
    for (auto [stride, pad, k] : {std::array<std::size_t, 3>{1, 1, 3}, {1, 0, 3}, {2, 1, 3}, {1, 0, 1}, {2, 2, 5}}) {
        kernels::ConvGeometry g;
        g.batch = 3;
        g.in_channels = 2;
        g.height = 9;
        g.width = 7;
        g.out_channels = 4;
        g.kernel_h = g.kernel_w = k;
        g.stride = stride;
        g.padding = pad;
        const std::size_t out_n = g.batch * g.out_channels * g.out_h() * g.out_w();
        auto x = random_values<T>(g.batch * g.in_channels * g.height * g.width, rng);
        auto w = random_values<T>(g.out_channels * g.patch_size(), rng);
        auto bias = random_values<T>(g.out_channels, rng);
        std::vector<T> y(out_n), yref(out_n);
        kernels::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
        kernels::serial::conv2d_forward(g, x.data(), w.data(), bias.data(), yref.data());
        for (std::size_t i = 0; i < out_n; ++i) CHECK(std::abs(double(y[i]) - double(yref[i])) <= tol * 10);

        auto dy = random_values<T>(out_n, rng);
        std::vector<T> dx(x.size()), dw(w.size()), db(bias.size());
        std::vector<T> dxr(x.size()), dwr(w.size()), dbr(bias.size());
        kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
        kernels::serial::conv2d_backward(g, x.data(), w.data(), dy.data(), dxr.data(), dwr.data(), dbr.data());
        for (std::size_t i = 0; i < dx.size(); ++i) CHECK(std::abs(double(dx[i]) - double(dxr[i])) <= tol * 10);
        for (std::size_t i = 0; i < dw.size(); ++i) CHECK(std::abs(double(dw[i]) - double(dwr[i])) <= tol * 50);
        for (std::size_t i = 0; i < db.size(); ++i) CHECK(std::abs(double(db[i]) - double(dbr[i])) <= tol * 50);
    }
}

TEST_CASE("parallel kernels are bit-reproducible") {
    Rng rng(3);
    auto a = random_values<float>(50 * 70, rng);
    auto b = random_values<float>(70 * 90, rng);
    std::vector<float> c1(50 * 90), c2(50 * 90);
    kernels::gemm<float>(false, true, 50, 90, 70, a.data(), b.data(), c1.data());
    kernels::gemm<float>(false, true, 50, 90, 70, a.data(), b.data(), c2.data());
    CHECK(c1 == c2);
}
