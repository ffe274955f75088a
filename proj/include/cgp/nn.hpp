#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cgp/kernels.hpp"
#include "cgp/ops.hpp"
#include "cgp/rng.hpp"
#include "cgp/tensor.hpp"

namespace cgp::nn {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

// y = x·Wᵀ + b over the last axis.
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    const std::size_t in = weight.dim(1), out = weight.dim(0);
    if (x.rank() == 0 || x.shape().back() != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != out) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    }
    const std::size_t rows = x.numel() / in;
    Shape shape = x.shape();
    shape.back() = out;
    std::vector<T> y(rows * out);
    kernels::gemm(false, true, rows, out, in, x.data().data(), weight.data().data(), y.data());
    const auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) y[r * out + j] += b[j];
    return Tensor<T>::from_op(
        std::move(shape), std::move(y), "linear", {x.node(), weight.node(), bias.node()},
        [rows, in, out](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* g = self.grad.data();
            if (px.requires_grad)
                kernels::gemm(false, false, rows, in, out, g, pw.data.data(), px.ensure_grad().data(), true);
            if (pw.requires_grad)
                kernels::gemm(true, false, out, in, rows, g, px.data.data(), pw.ensure_grad().data(), true);
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < out; ++j) gb[j] += g[r * out + j];
            }
        });
}

template <typename T>
struct Linear {
    Tensor<T> weight;  // out × in
    Tensor<T> bias;    // out

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02)
        : weight(normal_init<T>({out, in}, stddev, rng)), bias(Tensor<T>::zeros({out}, true)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return linear_forward(x, weight, bias); }

    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }

    void collect(NamedParams<T>& params, const std::string& prefix) const {
        params.emplace_back(prefix + ".weight", weight);
        params.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding) {
    if (x.rank() != 4 || kernel.rank() != 4 || x.dim(1) != kernel.dim(1)) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                             shape_str(kernel.shape()));
    }
    kernels::ConvGeometry g;
    g.batch = x.dim(0);
    g.in_channels = x.dim(1);
    g.height = x.dim(2);
    g.width = x.dim(3);
    g.out_channels = kernel.dim(0);
    g.kernel_h = kernel.dim(2);
    g.kernel_w = kernel.dim(3);
    g.stride = stride;
    g.padding = padding;
    if (stride == 0 || g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != g.out_channels) {
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs kernel " +
                             shape_str(kernel.shape()));
    }
    std::vector<T> y(g.batch * g.out_channels * g.out_h() * g.out_w());
    kernels::conv2d_forward(g, x.data().data(), kernel.data().data(), bias.data().data(), y.data());
    return Tensor<T>::from_op(
        Shape{g.batch, g.out_channels, g.out_h(), g.out_w()}, std::move(y), "conv2d",
        {x.node(), kernel.node(), bias.node()}, [g](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            kernels::conv2d_backward(g, px.data.data(), pw.data.data(), self.grad.data(),
                                     px.requires_grad ? px.ensure_grad().data() : nullptr,
                                     pw.requires_grad ? pw.ensure_grad().data() : nullptr,
                                     pb.requires_grad ? pb.ensure_grad().data() : nullptr);
        });
}

template <typename T>
struct Conv2d {
    Tensor<T> kernel;  // out × in × kh × kw
    Tensor<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv2d() = default;
    // Kaiming-uniform over fan-in, zero bias.
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t padding_, Rng& rng)
        : kernel(uniform_init<T>({out, in, k, k}, std::sqrt(6.0 / static_cast<double>(in * k * k)), rng)),
          bias(Tensor<T>::zeros({out}, true)),
          stride(stride_),
          padding(padding_) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d_forward(x, kernel, bias, stride, padding); }

    void collect(NamedParams<T>& params, const std::string& prefix) const {
        params.emplace_back(prefix + ".weight", kernel);
        params.emplace_back(prefix + ".bias", bias);
    }
};

// (x - mean) / sqrt(var + eps) * gamma + beta over the last axis.
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const std::size_t d = gamma.numel();
    if (x.rank() == 0 || x.shape().back() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs dim " + std::to_string(d));
    }
    const std::size_t rows = x.numel() / d;
    std::vector<T> y(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    const auto in = x.data();
    const auto ga = gamma.data();
    const auto be = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            y[r * d + j] = xhat[r * d + j] * ga[j] + be[j];
        }
    }
    return Tensor<T>::from_op(
        x.shape(), std::move(y), "layer_norm", {x.node(), gamma.node(), beta.node()},
        [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const T* g = self.grad.data();
            if (pg.requires_grad || pb.requires_grad) {
                auto& gg = pg.ensure_grad();
                auto& gb = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
            }
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                std::vector<T> dxhat(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = g[r * d + j] * pg.data[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[r * d + j];
                    }
                    mean_d /= static_cast<T>(d);
                    mean_dx /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                }
            }
        });
}

template <typename T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    T epsilon = T(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim)
        : gamma(Tensor<T>::full({dim}, T(1), true)), beta(Tensor<T>::zeros({dim}, true)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_forward(x, gamma, beta, epsilon); }

    void collect(NamedParams<T>& params, const std::string& prefix) const {
        params.emplace_back(prefix + ".gamma", gamma);
        params.emplace_back(prefix + ".beta", beta);
    }
};

// Per-sample -log softmax(logits)[label], computed with log-sum-exp.
template <typename T>
Tensor<T> cross_entropy_per_sample(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                std::to_string(k) + ")");
        }
    }
    std::vector<T> loss(n);
    std::vector<T> probs(n * k);
    const auto z = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.data() + i * k;
        T mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T total = 0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[i * k + j] = std::exp(row[j] - mx);
            total += probs[i * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= total;
        loss[i] = mx + std::log(total) - row[labels[i]];
    }
    return Tensor<T>::from_op(Shape{n}, std::move(loss), "cross_entropy", {logits.node()},
                              [n, k, labels, probs = std::move(probs)](Node<T>& self) {
                                  auto& gz = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < k; ++j) {
                                          const T onehot = static_cast<int>(j) == labels[i] ? T(1) : T(0);
                                          gz[i * k + j] += self.grad[i] * (probs[i * k + j] - onehot);
                                      }
                              });
}

// Batch mean of the per-sample cross-entropy.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    return mean(cross_entropy_per_sample(logits, labels));
}

// N×C×H×W -> N×C×(H/k)×(W/k), non-overlapping k×k means.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
    if (x.rank() != 4 || k == 0 || x.dim(2) < k || x.dim(3) < k) {
        throw DimensionError("avg_pool2d: window " + std::to_string(k) + " on " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / k, ow = w / k;
    const T inv = T(1) / static_cast<T>(k * k);
    std::vector<T> y(n * oh * ow, T(0));
    const auto in = x.data();
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = 0;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx)
                        acc += in[(c * h + oy * k + dy) * w + ox * k + dx];
                y[(c * oh + oy) * ow + ox] = acc * inv;
            }
    return Tensor<T>::from_op(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(y), "avg_pool2d", {x.node()},
                              [n, h, w, oh, ow, k, inv](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t c = 0; c < n; ++c)
                                      for (std::size_t oy = 0; oy < oh; ++oy)
                                          for (std::size_t ox = 0; ox < ow; ++ox) {
                                              const T g = self.grad[(c * oh + oy) * ow + ox] * inv;
                                              for (std::size_t dy = 0; dy < k; ++dy)
                                                  for (std::size_t dx = 0; dx < k; ++dx)
                                                      gx[(c * h + oy * k + dy) * w + ox * k + dx] += g;
                                          }
                              });
}

// N×C×H×W -> N×C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(2) == 0 || x.dim(3) == 0) {
        throw DimensionError("global_avg_pool: input " + shape_str(x.shape()));
    }
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    const T inv = T(1) / static_cast<T>(hw);
    std::vector<T> y(nc);
    const auto in = x.data();
    for (std::size_t c = 0; c < nc; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += in[c * hw + i];
        y[c] = acc * inv;
    }
    return Tensor<T>::from_op(Shape{x.dim(0), x.dim(1)}, std::move(y), "global_avg_pool", {x.node()},
                              [nc, hw, inv](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t c = 0; c < nc; ++c)
                                      for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += self.grad[c] * inv;
                              });
}

// Momentum SGD: v <- m·v + g; p <- p - lr·v.
template <typename T>
class Sgd {
public:
    Sgd(std::vector<Tensor<T>> params, double learning_rate, double momentum)
        : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        const T lr = static_cast<T>(lr_), mom = static_cast<T>(momentum_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto values = p.data();
            const auto g = p.grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < values.size(); ++j) {
                v[j] = mom * v[j] + g[j];
                values[j] -= lr * v[j];
            }
        }
    }

    std::size_t size() const { return params_.size(); }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    double lr_;
    double momentum_;
};

template <typename T>
std::vector<Tensor<T>> tensors_of(const NamedParams<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

// ---- Checkpoint file ("CGPW") ----
// magic "CGPW", version u32, count u32, then per parameter: name length u16,
// UTF-8 name, rank u8, dims u32[rank], f32 values. All little-endian.

struct CheckpointRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_checkpoint(const std::string& path);

template <typename T>
std::vector<CheckpointRecord> to_records(const NamedParams<T>& params) {
    std::vector<CheckpointRecord> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) {
        CheckpointRecord r;
        r.name = name;
        for (auto d : t.shape()) r.dims.push_back(static_cast<std::uint32_t>(d));
        r.values.assign(t.data().begin(), t.data().end());
        out.push_back(std::move(r));
    }
    return out;
}

// Copies checkpoint values into matching parameters. Every parameter must be
// present with an identical shape.
template <typename T>
void assign_records(const NamedParams<T>& params, const std::vector<CheckpointRecord>& records) {
    for (const auto& [name, t] : params) {
        const CheckpointRecord* rec = nullptr;
        for (const auto& r : records)
            if (r.name == name) rec = &r;
        if (rec == nullptr) throw LoadError("checkpoint has no parameter '" + name + "'");
        Shape dims(rec->dims.begin(), rec->dims.end());
        if (dims != t.shape()) {
            throw LoadError("checkpoint parameter '" + name + "' has shape " + shape_str(dims) +
                            ", model expects " + shape_str(t.shape()));
        }
        Tensor<T> handle = t;
        auto dst = handle.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec->values[i]);
    }
}

}  // namespace cgp::nn
