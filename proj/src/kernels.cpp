#include "cgp/kernels.hpp"

#include <algorithm>
#include <array>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cgp::kernels {
namespace {

constexpr std::size_t kParallelWork = 1 << 15;

// Eight independent lane accumulators, combined in a fixed order. The lane
// layout vectorizes without reassociating a single running sum.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    std::array<T, 8> acc{};
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
    }
    T tail = 0;
    for (; j < n; ++j) tail += a[j] * b[j];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) +
           tail;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

template <typename T>
void gemm_rows(bool trans_a, bool trans_b, std::size_t i, std::size_t m, std::size_t n,
               std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    if (!trans_b) {
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = trans_a ? a[p * m + i] : a[i * k + p];
            axpy(aip, b + p * n, crow, n);
        }
    } else if (!trans_a) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
    } else {
        std::vector<T> arow(k);
        for (std::size_t p = 0; p < k; ++p) arow[p] = a[p * m + i];
        for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow.data(), b + j * k, k);
    }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                T* out = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.padding);
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 &&
                                            iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        out[oy * ow + ox] =
                            inside ? image[(c * g.height + iy) * g.width + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* in = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        image[(c * g.height + iy) * g.width + ix] += in[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    const bool parallel = m > 1 && m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        gemm_rows(trans_a, trans_b, static_cast<std::size_t>(i), m, n, k, a, b, c, accumulate);
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const std::size_t spatial = g.out_h() * g.out_w();
    const std::size_t image_size = g.in_channels * g.height * g.width;
    const std::size_t patch = g.patch_size();
#pragma omp parallel
    {
        std::vector<T> col(patch * spatial);
#pragma omp for schedule(static)
        for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
            im2col(g, x + n * image_size, col.data());
            T* out = y + n * g.out_channels * spatial;
            for (std::size_t o = 0; o < g.out_channels; ++o) {
                gemm_rows(false, false, o, g.out_channels, spatial, patch, w, col.data(), out,
                          false);
                if (bias != nullptr) {
                    T* row = out + o * spatial;
                    for (std::size_t j = 0; j < spatial; ++j) row[j] += bias[o];
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db) {
    const std::size_t spatial = g.out_h() * g.out_w();
    const std::size_t image_size = g.in_channels * g.height * g.width;
    const std::size_t patch = g.patch_size();
    const std::size_t out_size = g.out_channels * spatial;

    if (db != nullptr) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
            T acc = 0;
            for (std::size_t n = 0; n < g.batch; ++n) {
                const T* row = dy + n * out_size + o * spatial;
                for (std::size_t j = 0; j < spatial; ++j) acc += row[j];
            }
            db[o] += acc;
        }
    }

    std::vector<T> cols;
    if (dw != nullptr) {
        cols.resize(g.batch * patch * spatial);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
            im2col(g, x + n * image_size, cols.data() + n * patch * spatial);
        }
        // Each dw row is owned by one thread; images are summed in index order.
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(g.out_channels); ++o) {
            T* dwrow = dw + o * patch;
            for (std::size_t n = 0; n < g.batch; ++n) {
                const T* dyrow = dy + n * out_size + o * spatial;
                const T* col = cols.data() + n * patch * spatial;
                for (std::size_t q = 0; q < patch; ++q) dwrow[q] += dot(dyrow, col + q * spatial, spatial);
            }
        }
    }

    if (dx != nullptr) {
#pragma omp parallel
        {
            std::vector<T> dcol(patch * spatial);
#pragma omp for schedule(static)
            for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(g.batch); ++n) {
                for (std::size_t q = 0; q < patch; ++q) {
                    gemm_rows(true, false, q, patch, spatial, g.out_channels, w,
                              dy + n * out_size, dcol.data(), false);
                }
                col2im(g, dcol.data(), dx + n * image_size);
            }
        }
    }
}

namespace serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = trans_a ? a[p * m + i] : a[i * k + p];
                const T bv = trans_b ? b[j * k + p] : b[p * n + j];
                acc += av * bv;
            }
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T acc = bias != nullptr ? bias[o] : T(0);
                    for (std::size_t c = 0; c < g.in_channels; ++c) {
                        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                                    ix >= static_cast<std::ptrdiff_t>(g.width))
                                    continue;
                                acc += x[((n * g.in_channels + c) * g.height + iy) * g.width + ix] *
                                       w[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                            }
                        }
                    }
                    y[((n * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                     T* db) {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const T grad = dy[((n * g.out_channels + o) * oh + oy) * ow + ox];
                    if (db != nullptr) db[o] += grad;
                    for (std::size_t c = 0; c < g.in_channels; ++c) {
                        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                                    ix >= static_cast<std::ptrdiff_t>(g.width))
                                    continue;
                                const std::size_t xi =
                                    ((n * g.in_channels + c) * g.height + iy) * g.width + ix;
                                const std::size_t wi =
                                    ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                                if (dx != nullptr) dx[xi] += grad * w[wi];
                                if (dw != nullptr) dw[wi] += grad * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace serial

#define CGP_INSTANTIATE_KERNELS(T)                                                              \
    template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, \
                          T*, bool);                                                            \
    template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);     \
    template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, \
                                     T*);                                                       \
    template void serial::gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*,  \
                                  const T*, T*, bool);                                          \
    template void serial::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*,  \
                                            T*);                                                \
    template void serial::conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, \
                                             T*, T*, T*);

CGP_INSTANTIATE_KERNELS(float)
CGP_INSTANTIATE_KERNELS(double)

}  // namespace cgp::kernels
