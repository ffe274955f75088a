#include "cgp/vit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "cgp/ops.hpp"

namespace cgp::vit {

namespace {

std::atomic<std::uint64_t> g_invocations{0};

void count_invocation() { g_invocations.fetch_add(1, std::memory_order_relaxed); }

// Two source taps and the weight of the upper one for each output index.
struct Taps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

Taps half_pixel_taps(std::size_t in, std::size_t out) {
    Taps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
        double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        t.lo[d] = i0;
        t.hi[d] = std::min(i0 + 1, in - 1);
        t.frac[d] = s - static_cast<double>(i0);
    }
    return t;
}

}  // namespace

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("vit: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
        throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                          std::to_string(heads));
    }
    if (channels == 0 || mlp_ratio == 0 || num_classes < 2) {
        throw ConfigError("vit: channels, mlp_ratio must be positive and num_classes >= 2");
    }
}

std::uint64_t invocation_count() { return g_invocations.load(std::memory_order_relaxed); }
void reset_invocation_count() { g_invocations.store(0, std::memory_order_relaxed); }

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::size_t patch) {
    if (image.rank() != 4 || patch == 0 || image.dim(2) % patch != 0 || image.dim(3) % patch != 0) {
        throw DimensionError("extract_patches: patch " + std::to_string(patch) + " does not tile " +
                             shape_str(image.shape()));
    }
    const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    const std::size_t gh = h / patch, gw = w / patch;
    const std::size_t pdim = c * patch * patch;
    // src[i] = flat image index feeding output element i
    std::vector<std::size_t> src(n * gh * gw * pdim);
    std::size_t i = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t py = 0; py < gh; ++py)
            for (std::size_t px = 0; px < gw; ++px)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t y = 0; y < patch; ++y)
                        for (std::size_t x = 0; x < patch; ++x)
                            src[i++] = ((b * c + ch) * h + py * patch + y) * w + px * patch + x;
    std::vector<T> out(src.size());
    const auto in = image.data();
    for (std::size_t j = 0; j < src.size(); ++j) out[j] = in[src[j]];
    return Tensor<T>::from_op(Shape{n, gh * gw, pdim}, std::move(out), "extract_patches", {image.node()},
                              [src = std::move(src)](Node<T>& self) {
                                  auto& gx = self.parents[0]->ensure_grad();
                                  for (std::size_t j = 0; j < src.size(); ++j) gx[src[j]] += self.grad[j];
                              });
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& scores, std::size_t height, std::size_t width) {
    count_invocation();
    if (scores.rank() != 2) throw DimensionError("bilinear_upsample: scores " + shape_str(scores.shape()));
    const std::size_t n = scores.dim(0), p = scores.dim(1);
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p))));
    if (g * g != p || g == 0) {
        throw DimensionError("bilinear_upsample: " + std::to_string(p) + " scores do not form a square grid");
    }
    if (height < g || width < g) {
        throw DimensionError("bilinear_upsample: target " + std::to_string(height) + "x" + std::to_string(width) +
                             " smaller than grid " + std::to_string(g));
    }
    const Taps ty = half_pixel_taps(g, height);
    const Taps tx = half_pixel_taps(g, width);
    std::vector<T> out(n * height * width);
    const auto in = scores.data();
    for (std::size_t b = 0; b < n; ++b) {
        const T* grid = in.data() + b * p;
        for (std::size_t y = 0; y < height; ++y) {
            const T fy = static_cast<T>(ty.frac[y]);
            const T* r0 = grid + ty.lo[y] * g;
            const T* r1 = grid + ty.hi[y] * g;
            for (std::size_t x = 0; x < width; ++x) {
                const T fx = static_cast<T>(tx.frac[x]);
                const T top = r0[tx.lo[x]] * (T(1) - fx) + r0[tx.hi[x]] * fx;
                const T bottom = r1[tx.lo[x]] * (T(1) - fx) + r1[tx.hi[x]] * fx;
                out[(b * height + y) * width + x] = top * (T(1) - fy) + bottom * fy;
            }
        }
    }
    return Tensor<T>::from_op(Shape{n, 1, height, width}, std::move(out), "bilinear_upsample", {scores.node()},
                              [n, p, g, height, width, ty, tx](Node<T>& self) {
                                  auto& gs = self.parents[0]->ensure_grad();
                                  for (std::size_t b = 0; b < n; ++b) {
                                      T* grid = gs.data() + b * p;
                                      for (std::size_t y = 0; y < height; ++y) {
                                          const T fy = static_cast<T>(ty.frac[y]);
                                          for (std::size_t x = 0; x < width; ++x) {
                                              const T fx = static_cast<T>(tx.frac[x]);
                                              const T d = self.grad[(b * height + y) * width + x];
                                              grid[ty.lo[y] * g + tx.lo[x]] += d * (T(1) - fy) * (T(1) - fx);
                                              grid[ty.lo[y] * g + tx.hi[x]] += d * (T(1) - fy) * fx;
                                              grid[ty.hi[y] * g + tx.lo[x]] += d * fy * (T(1) - fx);
                                              grid[ty.hi[y] * g + tx.hi[x]] += d * fy * fx;
                                          }
                                      }
                                  }
                              });
}

template <typename T>
Tensor<T> mask_scores(const Tensor<T>& tokens, const nn::Linear<T>& head) {
    count_invocation();
    if (head.out_features() != 1) {
        throw DimensionError("mask_scores: head must have one output, has " + std::to_string(head.out_features()));
    }
    if (tokens.rank() != 3) throw DimensionError("mask_scores: tokens " + shape_str(tokens.shape()));
    auto logits = head(tokens);  // N × P × 1
    return sigmoid(reshape(logits, {tokens.dim(0), tokens.dim(1)}));
}

template <typename T>
Confidence<T> vit_confidence(const Tensor<T>& cls, const nn::Linear<T>& head) {
    count_invocation();
    Confidence<T> out;
    out.logits = head(cls);
    const std::size_t n = out.logits.dim(0), k = out.logits.dim(1);
    out.c.resize(n);
    const auto z = out.logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T total = 0;
        for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
        out.c[i] = T(1) / total;  // exp(mx - mx) / total
    }
    return out;
}

template <typename T>
EncoderBlock<T>::EncoderBlock(std::size_t dim, std::size_t heads_, std::size_t hidden, Rng& rng)
    : ln1(dim),
      query(dim, dim, rng),
      key(dim, dim, rng),
      value(dim, dim, rng),
      proj(dim, dim, rng),
      ln2(dim),
      fc1(dim, hidden, rng),
      fc2(hidden, dim, rng),
      heads(heads_) {
    // A key bias only shifts every score of a query by the same amount, which
    // softmax ignores; it is kept fixed at zero rather than trained.
    key.bias.set_requires_grad(false);
}

template <typename T>
Tensor<T> EncoderBlock<T>::attention(const Tensor<T>& x) const {
    const std::size_t n = x.dim(0), s = x.dim(1), d = x.dim(2);
    const std::size_t dh = d / heads;
    auto split = [&](const Tensor<T>& t) {
        return reshape(permute(reshape(t, {n, s, heads, dh}), {0, 2, 1, 3}), {n * heads, s, dh});
    };
    auto q = split(query(x));
    auto k = split(key(x));
    auto v = split(value(x));
    auto scores = scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
    auto attn = softmax(scores, 2);
    auto ctx = bmm(attn, v);  // (N·H) × S × dh
    auto merged = reshape(permute(reshape(ctx, {n, heads, s, dh}), {0, 2, 1, 3}), {n, s, d});
    return proj(merged);
}

template <typename T>
Tensor<T> EncoderBlock<T>::operator()(const Tensor<T>& x) const {
    auto h = add(x, attention(ln1(x)));
    return add(h, fc2(gelu(fc1(ln2(h)))));
}

template <typename T>
void EncoderBlock<T>::collect(nn::NamedParams<T>& params, const std::string& prefix) const {
    ln1.collect(params, prefix + ".ln1");
    query.collect(params, prefix + ".query");
    params.emplace_back(prefix + ".key.weight", key.weight);
    value.collect(params, prefix + ".value");
    proj.collect(params, prefix + ".proj");
    ln2.collect(params, prefix + ".ln2");
    fc1.collect(params, prefix + ".fc1");
    fc2.collect(params, prefix + ".fc2");
}

template <typename T>
VisionTransformer<T>::VisionTransformer(const ViTConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.embed_dim;
    patch_embed_ = nn::Linear<T>(cfg_.patch_dim(), d, rng);
    cls_token_ = nn::normal_init<T>({1, 1, d}, 0.02, rng);
    pos_embed_ = nn::normal_init<T>({1, cfg_.num_patches() + 1, d}, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(d, cfg_.heads, d * cfg_.mlp_ratio, rng);
    // Zero mask head: the initial mask is exactly sigmoid(0) = 0.5 everywhere.
    mask_head_ = nn::Linear<T>(d, 1, rng, 0.0);
    cls_head_ = nn::Linear<T>(d, cfg_.num_classes, rng);
}

template <typename T>
PatchTokens<T> VisionTransformer<T>::patchify(const Tensor<T>& image) const {
    count_invocation();
    if (image.rank() != 4 || image.dim(1) != cfg_.channels || image.dim(2) != cfg_.image_size ||
        image.dim(3) != cfg_.image_size) {
        throw DimensionError("vit patchify: expected N×" + std::to_string(cfg_.channels) + "×" +
                             std::to_string(cfg_.image_size) + "×" + std::to_string(cfg_.image_size) + ", got " +
                             shape_str(image.shape()));
    }
    const std::size_t n = image.dim(0), p = cfg_.num_patches(), d = cfg_.embed_dim;
    auto embedded = patch_embed_(extract_patches(image, cfg_.patch_size));
    PatchTokens<T> out;
    out.tokens = add(embedded, expand(narrow(pos_embed_, 1, 1, p), 0, n));
    out.cls = reshape(expand(add(cls_token_, narrow(pos_embed_, 1, 0, 1)), 0, n), {n, d});
    return out;
}

template <typename T>
Encoded<T> VisionTransformer<T>::encode(const PatchTokens<T>& tokens) const {
    count_invocation();
    const std::size_t n = tokens.tokens.dim(0), p = tokens.tokens.dim(1), d = tokens.tokens.dim(2);
    auto seq = concat(reshape(tokens.cls, {n, 1, d}), tokens.tokens, 1);
    for (const auto& block : blocks_) seq = block(seq);
    Encoded<T> out;
    out.cls = reshape(narrow(seq, 1, 0, 1), {n, d});
    out.patches = narrow(seq, 1, 1, p);
    return out;
}

template <typename T>
Tensor<T> VisionTransformer<T>::mask_scores(const Tensor<T>& patches) const {
    return vit::mask_scores(patches, mask_head_);
}

template <typename T>
Confidence<T> VisionTransformer<T>::confidence(const Tensor<T>& cls) const {
    return vit_confidence(cls, cls_head_);
}

template <typename T>
MaskOutput<T> VisionTransformer<T>::forward(const Tensor<T>& image) const {
    auto encoded = encode(patchify(image));
    MaskOutput<T> out;
    out.mask = bilinear_upsample(mask_scores(encoded.patches), image.dim(2), image.dim(3));
    out.confidence = confidence(encoded.cls);
    return out;
}

template <typename T>
nn::NamedParams<T> VisionTransformer<T>::params() const {
    nn::NamedParams<T> out;
    patch_embed_.collect(out, "vit.patch_embed");
    out.emplace_back("vit.cls_token", cls_token_);
    out.emplace_back("vit.pos_embed", pos_embed_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "vit.blocks." + std::to_string(i));
    mask_head_.collect(out, "vit.mask_head");
    cls_head_.collect(out, "vit.head");
    return out;
}

ViTConfig infer_config(const std::vector<nn::CheckpointRecord>& records, std::size_t heads) {
    auto find = [&](const std::string& name) -> const nn::CheckpointRecord& {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw LoadError("not a ViT checkpoint: missing '" + name + "'");
    };
    ViTConfig cfg;
    const auto& embed = find("vit.patch_embed.weight");
    const auto& pos = find("vit.pos_embed");
    const auto& head = find("vit.head.weight");
    if (embed.dims.size() != 2 || pos.dims.size() != 3 || head.dims.size() != 2) {
        throw LoadError("ViT checkpoint has malformed embedding shapes");
    }
    cfg.embed_dim = embed.dims[0];
    cfg.num_classes = head.dims[0];
    const std::size_t patches = pos.dims[1] - 1;
    const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    cfg.depth = 0;
    while (std::any_of(records.begin(), records.end(), [&](const auto& r) {
        return r.name == "vit.blocks." + std::to_string(cfg.depth) + ".fc1.weight";
    }))
        ++cfg.depth;
    if (cfg.depth > 0) {
        const auto& fc1 = find("vit.blocks.0.fc1.weight");
        cfg.mlp_ratio = fc1.dims[0] / cfg.embed_dim;
    }
    cfg.heads = heads;
    // patch_dim = C·p²; the default three channels fixes p.
    cfg.channels = 3;
    const std::size_t p2 = embed.dims[1] / cfg.channels;
    cfg.patch_size = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(p2))));
    cfg.image_size = grid * cfg.patch_size;
    if (grid * grid != patches || cfg.patch_size * cfg.patch_size * cfg.channels != embed.dims[1]) {
        throw LoadError("ViT checkpoint shapes do not describe a square 3-channel image grid");
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("ViT checkpoint: ") + e.what());
    }
    return cfg;
}

#define CGP_INSTANTIATE_VIT(T)                                                                  \
    template Tensor<T> extract_patches<T>(const Tensor<T>&, std::size_t);                       \
    template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, std::size_t, std::size_t);        \
    template Tensor<T> mask_scores<T>(const Tensor<T>&, const nn::Linear<T>&);                  \
    template Confidence<T> vit_confidence<T>(const Tensor<T>&, const nn::Linear<T>&);           \
    template struct EncoderBlock<T>;                                                            \
    template class VisionTransformer<T>;

CGP_INSTANTIATE_VIT(float)
CGP_INSTANTIATE_VIT(double)

}  // namespace cgp::vit
