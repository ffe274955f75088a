#include <cmath>
#include <filesystem>
#include <vector>

#include "cgp/binary_io.hpp"
#include "cgp/gradcheck.hpp"
#include "cgp/nn.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cgp;
using cgp::testing::random_tensor;

namespace {

// Six nested loops, zero padding by bounds check.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                               std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
    std::vector<double> y(n * o * oh * ow);
    auto xv = x.values();
    auto wv = w.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t yy = 0; yy < oh; ++yy)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    double acc = b.values()[oc];
                    for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long sy = long(yy * stride + ky) - long(pad);
                                const long sx = long(xx * stride + kx) - long(pad);
                                if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(wd)) continue;
                                acc += xv[((i * c + ic) * h + sy) * wd + sx] * wv[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                    y[((i * o + oc) * oh + yy) * ow + xx] = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("linear_forward") {
    Rng rng(1);
    SUBCASE("zero weights give the bias") {
        nn::Linear<double> l(3, 2, rng);
        for (auto& v : l.weight.data()) v = 0;
        l.bias.data()[0] = 1.5;
        l.bias.data()[1] = -2;
        auto y = l(Tensor<double>({4, 3}, std::vector<double>(12, 7.0)));
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(y.values()[i * 2] == 1.5);
            CHECK(y.values()[i * 2 + 1] == -2);
        }
    }
    SUBCASE("identity weight") {
        nn::Linear<double> l(3, 3, rng);
        for (std::size_t i = 0; i < 9; ++i) l.weight.data()[i] = i % 4 == 0 ? 1 : 0;
        auto x = random_tensor<double>({2, 5, 3}, rng);
        auto y = l(x);
        CHECK(y.shape() == Shape{2, 5, 3});
        CHECK(testing::max_abs_diff(y.values(), x.values()) == 0.0);
    }
    SUBCASE("matches matmul + bias") {
        nn::Linear<double> l(4, 3, rng, 1.0);
        for (auto& v : l.bias.data()) v = rng.normal();
        auto x = random_tensor<double>({5, 4}, rng);
        auto y = l(x);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t o = 0; o < 3; ++o) {
                double acc = l.bias.values()[o];
                for (std::size_t k = 0; k < 4; ++k) acc += x.values()[i * 4 + k] * l.weight.values()[o * 4 + k];
                CHECK(y.values()[i * 3 + o] == doctest::Approx(acc).epsilon(1e-12));
            }
    }
    SUBCASE("shape mismatch") {
        nn::Linear<double> l(4, 3, rng);
        CHECK_THROWS_AS(l(Tensor<double>::zeros({2, 5})), DimensionError);
    }
}

TEST_CASE("conv2d_forward") {
    Rng rng(2);
    SUBCASE("1x1 unit kernel is the identity") {
        Tensor<double> k({1, 1, 1, 1}, {1.0});
        auto x = random_tensor<double>({2, 1, 4, 5}, rng);
        auto y = nn::conv2d_forward(x, k, Tensor<double>::zeros({1}), 1, 0);
        CHECK(testing::max_abs_diff(y.values(), x.values()) == 0.0);
    }
    SUBCASE("all-ones 3x3 on a constant image") {
        Tensor<double> k({1, 1, 3, 3}, std::vector<double>(9, 1.0));
        auto y = nn::conv2d_forward(Tensor<double>::full({1, 1, 6, 6}, 0.7), k, Tensor<double>::zeros({1}), 1, 0);
        CHECK(y.shape() == Shape{1, 1, 4, 4});
        for (double v : y.values()) CHECK(v == doctest::Approx(6.3).epsilon(1e-12));
    }
    SUBCASE("random case matches the direct oracle") {
        auto x = random_tensor<double>({1, 2, 5, 5}, rng);
        auto w = random_tensor<double>({3, 2, 3, 3}, rng);
        auto b = random_tensor<double>({3}, rng);
        for (std::size_t pad : {0u, 1u})
            for (std::size_t stride : {1u, 2u}) {
                auto y = nn::conv2d_forward(x, w, b, stride, pad);
                auto ref = naive_conv(x, w, b, stride, pad);
                REQUIRE(y.numel() == ref.size());
                CHECK(testing::max_abs_diff(y.values(), ref) < 1e-12);
            }
    }
    SUBCASE("float path within 1e-5 of the oracle") {
        auto x = random_tensor<double>({2, 2, 5, 5}, rng);
        auto w = random_tensor<double>({3, 2, 3, 3}, rng);
        auto b = random_tensor<double>({3}, rng);
        auto to_f = [](const Tensor<double>& t) {
            return Tensor<float>(t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
        };
        auto y = nn::conv2d_forward(to_f(x), to_f(w), to_f(b), 1, 1);
        auto ref = naive_conv(x, w, b, 1, 1);
        double m = 0;
        for (std::size_t i = 0; i < ref.size(); ++i) m = std::max(m, std::abs(double(y.values()[i]) - ref[i]));
        CHECK(m < 1e-5);
    }
    SUBCASE("output dims follow floor((in + 2p - k)/s) + 1") {
        for (std::size_t h = 3; h <= 9; ++h)
            for (std::size_t k = 1; k <= 3; k += 2)
                for (std::size_t s = 1; s <= 3; ++s)
                    for (std::size_t p = 0; p <= 2; ++p) {
                        if (k > h + 2 * p) continue;
                        auto y = nn::conv2d_forward(Tensor<double>::zeros({1, 1, h, h + 1}),
                                                    Tensor<double>::zeros({2, 1, k, k}), Tensor<double>::zeros({2}), s, p);
                        CHECK(y.dim(2) == (h + 2 * p - k) / s + 1);
                        CHECK(y.dim(3) == (h + 1 + 2 * p - k) / s + 1);
                    }
    }
    SUBCASE("same padding keeps spatial size for odd kernels") {
        for (std::size_t k : {1u, 3u, 5u}) {
            nn::Conv2d<double> c(2, 3, k, 1, (k - 1) / 2, rng);
            auto y = c(Tensor<double>::zeros({1, 2, 7, 6}));
            CHECK(y.dim(2) == 7);
            CHECK(y.dim(3) == 6);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(nn::conv2d_forward(Tensor<double>::zeros({1, 1, 2, 2}), Tensor<double>::zeros({1, 1, 3, 3}),
                                           Tensor<double>::zeros({1}), 1, 0),
                        DimensionError);
        CHECK_THROWS_AS(nn::conv2d_forward(Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 1, 3, 3}),
                                           Tensor<double>::zeros({1}), 1, 0),
                        DimensionError);
    }
}

TEST_CASE("layer_norm_forward") {
    Rng rng(3);
    nn::LayerNorm<double> ln(4);
    SUBCASE("constant vector -> zeros") {
        auto y = ln(Tensor<double>::full({1, 4}, 3.0));
        for (double v : y.values()) CHECK(v == 0.0);
    }
    SUBCASE("already normalised") {
        nn::LayerNorm<double> ln2(2);
        ln2.epsilon = 0;
        auto y = ln2(Tensor<double>({1, 2}, {1.0, -1.0}));
        CHECK(y.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(y.values()[1] == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("random rows are standardised") {
        nn::LayerNorm<double> big(64);
        auto x = random_tensor<double>({5, 64}, rng, false, 3.0);
        auto y = big(x);
        for (std::size_t r = 0; r < 5; ++r) {
            double m = 0, v = 0;
            for (std::size_t j = 0; j < 64; ++j) m += y.values()[r * 64 + j];
            m /= 64;
            for (std::size_t j = 0; j < 64; ++j) v += std::pow(y.values()[r * 64 + j] - m, 2);
            v /= 64;
            CHECK(std::abs(m) < 1e-6);
            CHECK(std::abs(v - 1.0) < 1e-4);
        }
    }
}

TEST_CASE("cross_entropy") {
    SUBCASE("uniform logits give ln K") {
        for (int label : {0, 1}) {
            auto l = nn::cross_entropy(Tensor<double>({1, 2}, {0.0, 0.0}), {label});
            CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
        }
        auto l5 = nn::cross_entropy(Tensor<double>::full({3, 5}, 2.5), {0, 3, 4});
        CHECK(l5.item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
    }
    SUBCASE("saturated margin") {
        auto l = nn::cross_entropy(Tensor<double>({1, 2}, {0.0, 1000.0}), {1});
        CHECK(l.item() < 1e-12);
        CHECK(std::isfinite(nn::cross_entropy(Tensor<double>({1, 2}, {1000.0, 0.0}), {1}).item()));
    }
    SUBCASE("high-precision value") {
        // -log(e^2 / (e + e^2)) evaluated at 50 digits
        auto l = nn::cross_entropy(Tensor<double>({1, 2}, {1.0, 2.0}), {1});
        CHECK(l.item() == doctest::Approx(0.313261687518223).epsilon(1e-13));
    }
    SUBCASE("non-negative on random logits") {
        Rng rng(9);
        auto x = random_tensor<double>({50, 4}, rng, false, 5.0);
        std::vector<int> y(50);
        for (auto& v : y) v = static_cast<int>(rng.uniform_int(4));
        auto per = nn::cross_entropy_per_sample(x, y);
        for (double v : per.values()) CHECK(v >= 0.0);
    }
    SUBCASE("out-of-range label") {
        CHECK_THROWS_AS(nn::cross_entropy(Tensor<double>::zeros({1, 2}), {2}), ContractError);
        CHECK_THROWS_AS(nn::cross_entropy(Tensor<double>::zeros({1, 2}), {-1}), ContractError);
    }
}

TEST_CASE("pooling") {
    SUBCASE("global average pool") {
        CHECK(nn::global_avg_pool(Tensor<double>::full({1, 1, 3, 3}, 0.25)).item() == 0.25);
        CHECK(nn::global_avg_pool(Tensor<double>({1, 1, 2, 2}, {1, 3, 5, 7})).item() == 4.0);
        Rng rng(4);
        auto x = random_tensor<double>({2, 3, 4, 5}, rng);
        auto y = nn::global_avg_pool(x);
        CHECK(y.shape() == Shape{2, 3});
        for (std::size_t p = 0; p < 6; ++p) {
            double s = 0;
            for (std::size_t j = 0; j < 20; ++j) s += x.values()[p * 20 + j];
            CHECK(y.values()[p] == doctest::Approx(s / 20).epsilon(1e-14));
        }
    }
    SUBCASE("2x2 average pool") {
        auto y = nn::avg_pool2d(Tensor<double>({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}), 2);
        CHECK(y.shape() == Shape{1, 1, 1, 2});
        CHECK(y.values()[0] == 3.5);
        CHECK(y.values()[1] == 5.5);
    }
}

TEST_CASE("layer gradients pass grad_check") {
    Rng rng(5);
    SUBCASE("linear") {
        nn::Linear<double> l(4, 3, rng, 0.5);
        auto x = random_tensor<double>({2, 4}, rng, true);
        auto r = grad_check([&] { return sum(square(l(x))); }, {x, l.weight, l.bias});
        CHECK(r.max_relative_error < 1e-5);
    }
    SUBCASE("conv2d") {
        nn::Conv2d<double> c(2, 3, 3, 1, 1, rng);
        for (auto& v : c.bias.data()) v = rng.normal();
        auto x = random_tensor<double>({2, 2, 4, 4}, rng, true);
        auto w = random_tensor<double>({2, 3, 4, 4}, rng);
        auto r = grad_check([&] { return sum(mul(c(x), w)); }, {x, c.kernel, c.bias});
        CHECK(r.max_relative_error < 1e-5);
    }
    SUBCASE("strided conv2d") {
        nn::Conv2d<double> c(1, 2, 3, 2, 1, rng);
        auto x = random_tensor<double>({1, 1, 5, 5}, rng, true);
        auto r = grad_check([&] { return sum(square(c(x))); }, {x, c.kernel, c.bias});
        CHECK(r.max_relative_error < 1e-5);
    }
    SUBCASE("layer norm") {
        nn::LayerNorm<double> ln(5);
        for (auto& v : ln.gamma.data()) v = rng.normal();
        for (auto& v : ln.beta.data()) v = rng.normal();
        auto x = random_tensor<double>({3, 5}, rng, true);
        auto w = random_tensor<double>({3, 5}, rng);
        auto r = grad_check([&] { return sum(mul(ln(x), w)); }, {x, ln.gamma, ln.beta});
        CHECK(r.max_relative_error < 1e-5);
    }
    SUBCASE("cross entropy") {
        auto x = random_tensor<double>({4, 3}, rng, true);
        auto r = grad_check([&] { return nn::cross_entropy(x, {0, 2, 1, 2}); }, {x});
        CHECK(r.max_relative_error < 1e-5);
    }
    SUBCASE("pooling") {
        auto x = random_tensor<double>({1, 2, 4, 4}, rng, true);
        auto w = random_tensor<double>({1, 2, 2, 2}, rng);
        auto r = grad_check([&] { return add(sum(mul(nn::avg_pool2d(x, 2), w)), sum(square(nn::global_avg_pool(x)))); },
                            {x});
        CHECK(r.max_relative_error < 1e-5);
    }
}

TEST_CASE("sgd with momentum") {
    Tensor<double> p({1}, {1.0}, true);
    nn::Sgd<double> opt({p}, 0.1, 0.9);
    // f = p², grad 2p
    backward(sum(square(p)));
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(0.8));
    opt.zero_grad();
    backward(sum(square(p)));
    opt.step();
    // v = 0.9·2 + 1.6 = 3.4
    CHECK(p.values()[0] == doctest::Approx(0.8 - 0.34));
}

TEST_CASE("checkpoint round trip") {
    Rng rng(6);
    nn::Linear<float> a(3, 2, rng, 1.0);
    nn::Conv2d<float> c(1, 2, 3, 1, 1, rng);
    nn::NamedParams<float> params;
    a.collect(params, "fc");
    c.collect(params, "conv");
    const auto path = (std::filesystem::temp_directory_path() / "cgp_test_ckpt.bin").string();
    nn::write_checkpoint(path, nn::to_records(params));

    nn::Linear<float> a2(3, 2, rng, 1.0);
    nn::Conv2d<float> c2(1, 2, 3, 1, 1, rng);
    nn::NamedParams<float> params2;
    a2.collect(params2, "fc");
    c2.collect(params2, "conv");
    auto records = nn::read_checkpoint(path);
    REQUIRE(records.size() == 4);
    CHECK(records[0].name == "fc.weight");
    CHECK(records[2].dims == std::vector<std::uint32_t>{2, 1, 3, 3});
    nn::assign_records(params2, records);
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(testing::max_abs_diff(params[i].second.values(), params2[i].second.values()) == 0.0);

    SUBCASE("shape mismatch") {
        nn::Linear<float> wrong(4, 2, rng);
        nn::NamedParams<float> p3;
        wrong.collect(p3, "fc");
        CHECK_THROWS_AS(nn::assign_records(p3, records), LoadError);
    }
    SUBCASE("missing parameter") {
        nn::NamedParams<float> p4;
        a.collect(p4, "other");
        CHECK_THROWS_AS(nn::assign_records(p4, records), LoadError);
    }
    SUBCASE("truncated file") {
        auto bytes = io::read_file(path);
        bytes.resize(bytes.size() - 3);
        io::write_file(path, bytes);
        CHECK_THROWS_AS(nn::read_checkpoint(path), LoadError);
    }
    SUBCASE("bad magic") {
        auto bytes = io::read_file(path);
        bytes[0] = 'X';
        io::write_file(path, bytes);
        CHECK_THROWS_AS(nn::read_checkpoint(path), LoadError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(nn::read_checkpoint(path + ".nope"), LoadError); }
    std::filesystem::remove(path);
}
