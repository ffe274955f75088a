#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "cgp/kernels.hpp"
#include "cgp/tensor.hpp"

// Differentiable tensor operations. Binary elementwise operations accept two
// tensors of equal shape or a one-element tensor on either side; add_bias
// broadcasts a vector over the last axis. No other broadcasting exists.
namespace cgp {

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " differ");
    }
}

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, std::string_view op, F f, D dfdx) {
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor<T>::from_op(x.shape(), std::move(out), op, {x.node()}, [dfdx](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& gx = px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            gx[i] += self.grad[i] * dfdx(px.data[i], self.data[i]);
    });
}

// Index of a broadcast operand: 0 for one-element tensors.
inline std::size_t bidx(std::size_t n, std::size_t i) { return n == 1 ? 0 : i; }

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, std::string_view op, F f, DA dfda, DB dfdb) {
    const std::size_t na = a.numel(), nb = b.numel();
    Shape shape;
    if (a.shape() == b.shape()) {
        shape = a.shape();
    } else if (nb == 1) {
        shape = a.shape();
    } else if (na == 1) {
        shape = b.shape();
    } else {
        throw DimensionError(std::string(op) + ": cannot combine shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::size_t n = shape_numel(shape);
    std::vector<T> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bidx(na, i)], bv[bidx(nb, i)]);
    return Tensor<T>::from_op(
        std::move(shape), std::move(out), op, {a.node(), b.node()}, [dfda, dfdb](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const std::size_t na = pa.data.size(), nb = pb.data.size();
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    ga[bidx(na, i)] += self.grad[i] * dfda(pa.data[bidx(na, i)], pb.data[bidx(nb, i)]);
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    gb[bidx(nb, i)] += self.grad[i] * dfdb(pa.data[bidx(na, i)], pb.data[bidx(nb, i)]);
            }
        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary(
        x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary(
        x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
T sigmoid_value(T v) {
    return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        x, "sigmoid", [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(
        x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    return detail::unary(
        x, "gelu",
        [](T v) { return T(0.5) * v * (T(1) + std::erf(v * (std::numbers::sqrt2_v<T> / T(2)))); },
        [](T v, T) {
            const T cdf = T(0.5) * (T(1) + std::erf(v * (std::numbers::sqrt2_v<T> / T(2))));
            const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> *
                          (std::numbers::sqrt2_v<T> / T(2));
            return cdf + v * pdf;
        });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(
        x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// x[..., n] + b[n]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.rank() == 0 || b.rank() != 1 || b.dim(0) != x.shape().back()) {
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " +
                             shape_str(x.shape()));
    }
    const std::size_t n = b.numel();
    std::vector<T> out(x.values());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
    return Tensor<T>::from_op(x.shape(), std::move(out), "add_bias", {x.node(), b.node()},
                              [n](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (px.requires_grad) {
                                      auto& gx = px.ensure_grad();
                                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                      auto& gb = pb.ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          gb[i % n] += self.grad[i];
                                  }
                              });
}

// a[m×k] · b[k×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    kernels::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
    return Tensor<T>::from_op(Shape{m, n}, std::move(out), "matmul", {a.node(), b.node()},
                              [m, n, k](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad)
                                      kernels::gemm(false, true, m, k, n, self.grad.data(),
                                                    pb.data.data(), pa.ensure_grad().data(), true);
                                  if (pb.requires_grad)
                                      kernels::gemm(true, false, k, n, m, pa.data.data(),
                                                    self.grad.data(), pb.ensure_grad().data(), true);
                              });
}

// Batched a[B×m×k] · b[B×k×n], or a · bᵀ with b[B×n×k] when trans_b.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != (trans_b ? b.dim(2) : b.dim(1))) {
        throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                             shape_str(b.shape()) + (trans_b ? "^T" : ""));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        kernels::gemm(false, trans_b, m, n, k, a.data().data() + i * m * k,
                      b.data().data() + i * k * n, out.data() + i * m * n);
    }
    return Tensor<T>::from_op(
        Shape{batch, m, n}, std::move(out), "bmm", {a.node(), b.node()},
        [batch, m, n, k, trans_b](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::size_t i = 0; i < batch; ++i) {
                const T* g = self.grad.data() + i * m * n;
                const T* av = pa.data.data() + i * m * k;
                const T* bv = pb.data.data() + i * k * n;
                if (pa.requires_grad) {
                    // dA = dC · op(B)ᵀ
                    kernels::gemm(false, !trans_b, m, k, n, g, bv, pa.ensure_grad().data() + i * m * k,
                                  true);
                }
                if (pb.requires_grad) {
                    T* gb = pb.ensure_grad().data() + i * k * n;
                    if (trans_b) {
                        kernels::gemm(true, false, n, k, m, g, av, gb, true);  // dB = dCᵀ · A
                    } else {
                        kernels::gemm(true, false, k, n, m, av, g, gb, true);  // dB = Aᵀ · dC
                    }
                }
            }
        });
}

namespace detail {

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtraction).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, in[base + j * sp.inner]);
            T total = 0;
            for (std::size_t j = 0; j < sp.len; ++j) {
                const T e = std::exp(in[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= total;
        }
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), "softmax", {x.node()}, [sp](Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                T dot = 0;
                for (std::size_t j = 0; j < sp.len; ++j)
                    dot += self.grad[base + j * sp.inner] * self.data[base + j * sp.inner];
                for (std::size_t j = 0; j < sp.len; ++j) {
                    const std::size_t idx = base + j * sp.inner;
                    gx[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    return Tensor<T>::from_op(Shape{1}, {total}, "sum", {x.node()}, [](Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (auto& g : gx) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ContractError("mean of empty tensor");
    T total = 0;
    for (T v : x.data()) total += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    return Tensor<T>::from_op(Shape{1}, {total * inv}, "mean", {x.node()}, [inv](Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (auto& g : gx) g += self.grad[0] * inv;
    });
}

// Sum over the last axis: [..., n] -> [...]
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("sum_last needs rank >= 2, got " + shape_str(x.shape()));
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<T> out(rows, T(0));
    const auto in = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r] += in[r * n + j];
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    return Tensor<T>::from_op(std::move(shape), std::move(out), "sum_last", {x.node()},
                              [n](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i / n];
                              });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    return Tensor<T>::from_op(std::move(shape), x.values(), "reshape", {x.node()}, [](Node<T>& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// For each output element of a permutation, the flat index of its source.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
    const auto in_strides = strides_of(in);
    Shape out(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out[i] = in[perm[i]];
    const std::size_t n = shape_numel(in);
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> coord(perm.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t s = 0;
        for (std::size_t d = 0; d < perm.size(); ++d) s += coord[d] * in_strides[perm[d]];
        src[flat] = s;
        for (std::size_t d = perm.size(); d-- > 0;) {
            if (++coord[d] < out[d]) break;
            coord[d] = 0;
        }
    }
    return src;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) {
        throw DimensionError("permute: " + std::to_string(perm.size()) + " axes for " + shape_str(x.shape()));
    }
    std::vector<bool> used(perm.size(), false);
    for (auto p : perm) {
        if (p >= perm.size() || used[p]) throw DimensionError("permute: invalid axis order");
        used[p] = true;
    }
    Shape shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) shape[i] = x.dim(perm[i]);
    auto src = std::make_shared<std::vector<std::size_t>>(detail::permute_index(x.shape(), perm));
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*src)[i]];
    return Tensor<T>::from_op(std::move(shape), std::move(out), "permute", {x.node()},
                              [src](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      gx[(*src)[i]] += self.grad[i];
                              });
}

// Concatenate along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
    if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < a.rank(); ++d) {
        if (d != axis && a.dim(d) != b.dim(d)) {
            throw DimensionError("concat: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                 " along axis " + std::to_string(axis));
        }
    }
    const auto sa = detail::split_axis(a.shape(), axis);
    const auto sb = detail::split_axis(b.shape(), axis);
    Shape shape = a.shape();
    shape[axis] += b.dim(axis);
    const std::size_t chunk_a = sa.len * sa.inner, chunk_b = sb.len * sb.inner;
    std::vector<T> out;
    out.reserve(a.numel() + b.numel());
    for (std::size_t o = 0; o < sa.outer; ++o) {
        out.insert(out.end(), a.data().begin() + o * chunk_a, a.data().begin() + (o + 1) * chunk_a);
        out.insert(out.end(), b.data().begin() + o * chunk_b, b.data().begin() + (o + 1) * chunk_b);
    }
    const std::size_t outer = sa.outer;
    return Tensor<T>::from_op(std::move(shape), std::move(out), "concat", {a.node(), b.node()},
                              [outer, chunk_a, chunk_b](Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  for (std::size_t o = 0; o < outer; ++o) {
                                      const T* g = self.grad.data() + o * (chunk_a + chunk_b);
                                      if (pa.requires_grad) {
                                          T* ga = pa.ensure_grad().data() + o * chunk_a;
                                          for (std::size_t i = 0; i < chunk_a; ++i) ga[i] += g[i];
                                      }
                                      if (pb.requires_grad) {
                                          T* gb = pb.ensure_grad().data() + o * chunk_b;
                                          for (std::size_t i = 0; i < chunk_b; ++i) gb[i] += g[chunk_a + i];
                                      }
                                  }
                              });
}

// Sub-range [start, start+len) of `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const auto sp = detail::split_axis(x.shape(), axis);
    if (start + len > sp.len) {
        throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") exceeds axis of " + shape_str(x.shape()));
    }
    Shape shape = x.shape();
    shape[axis] = len;
    std::vector<T> out;
    out.reserve(sp.outer * len * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        auto begin = x.data().begin() + (o * sp.len + start) * sp.inner;
        out.insert(out.end(), begin, begin + len * sp.inner);
    }
    return Tensor<T>::from_op(std::move(shape), std::move(out), "narrow", {x.node()},
                              [sp, start, len](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t o = 0; o < sp.outer; ++o) {
                                      T* dst = gx.data() + (o * sp.len + start) * sp.inner;
                                      const T* g = self.grad.data() + o * len * sp.inner;
                                      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += g[i];
                                  }
                              });
}

// Repeat a size-1 axis n times.
template <typename T>
Tensor<T> expand(const Tensor<T>& x, std::size_t axis, std::size_t n) {
    const auto sp = detail::split_axis(x.shape(), axis);
    if (sp.len != 1) throw DimensionError("expand: axis " + std::to_string(axis) + " of " +
                                          shape_str(x.shape()) + " is not 1");
    Shape shape = x.shape();
    shape[axis] = n;
    std::vector<T> out;
    out.reserve(sp.outer * n * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        auto begin = x.data().begin() + o * sp.inner;
        for (std::size_t r = 0; r < n; ++r) out.insert(out.end(), begin, begin + sp.inner);
    }
    return Tensor<T>::from_op(std::move(shape), std::move(out), "expand", {x.node()},
                              [sp, n](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                      for (std::size_t r = 0; r < n; ++r)
                                          for (std::size_t i = 0; i < sp.inner; ++i)
                                              gx[o * sp.inner + i] +=
                                                  self.grad[(o * n + r) * sp.inner + i];
                              });
}

// Rows of axis 0 selected by index (duplicates allowed).
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
    if (x.rank() == 0) throw DimensionError("take_rows on rank-0 tensor");
    const std::size_t row = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<T> out;
    out.reserve(rows.size() * row);
    for (auto r : rows) {
        if (r >= x.dim(0)) throw DimensionError("take_rows: row " + std::to_string(r) + " out of range");
        out.insert(out.end(), x.data().begin() + r * row, x.data().begin() + (r + 1) * row);
    }
    return Tensor<T>::from_op(std::move(shape), std::move(out), "take_rows", {x.node()},
                              [rows, row](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < rows.size(); ++i)
                                      for (std::size_t j = 0; j < row; ++j)
                                          gx[rows[i] * row + j] += self.grad[i * row + j];
                              });
}

}  // namespace cgp
