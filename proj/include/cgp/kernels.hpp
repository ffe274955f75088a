#pragma once

#include <cstddef>

// Dense compute kernels. Every parallel kernel assigns each output element to
// exactly one thread and keeps a fixed summation order, so results are
// bit-identical for any thread count. The serial:: versions are the direct
// reference implementations used by the tests and the benchmark.
namespace cgp::kernels {

// C (m×n) = op(A) · op(B), with op(A) m×k and op(B) k×n, all row-major.
// When accumulate is true the product is added to C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate = false);

struct ConvGeometry {
    std::size_t batch = 1;
    std::size_t in_channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t out_channels = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
    std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
};

// Cross-correlation with zero padding. x: N×C×H×W, w: C'×C×kh×kw, bias: C' (nullable).
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

// Accumulates into whichever of dx, dw, db are non-null.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db);

int max_threads();

namespace serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate = false);

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db);

}  // namespace serial
}  // namespace cgp::kernels
