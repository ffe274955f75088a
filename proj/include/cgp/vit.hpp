#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cgp/nn.hpp"
#include "cgp/rng.hpp"
#include "cgp/tensor.hpp"

// Tiny Vision Transformer that produces the soft causal mask
// M = Upsample(sigmoid(W_mask · T)) over its patch tokens T and the
// confidence c(x) = max softmax of its CLS classification head.
namespace cgp::vit {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t num_classes = 2;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }

    // Throws ConfigError on indivisible sizes or zero extents.
    void validate() const;
};

// Number of vit-mask operations executed since the last reset. Evaluation and
// stage-2 fine-tuning must leave this untouched.
std::uint64_t invocation_count();
void reset_invocation_count();

template <typename T>
struct PatchTokens {
    Tensor<T> tokens;  // N × P × D, row-major over the patch grid
    Tensor<T> cls;     // N × D
};

template <typename T>
struct Encoded {
    Tensor<T> cls;      // N × D
    Tensor<T> patches;  // N × P × D
};

template <typename T>
struct Confidence {
    Tensor<T> logits;     // N × K
    std::vector<T> c;     // max softmax probability per sample
};

// image N×C×H×W -> N×P×(C·p·p); patch features ordered (channel, row, col).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::size_t patch);

// Scores N×P on a √P×√P grid -> N×1×H×W, half-pixel-centre bilinear
// interpolation with edge clamping.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& scores, std::size_t height, std::size_t width);

// sigmoid(head(T)) per patch: N×P×D -> N×P.
template <typename T>
Tensor<T> mask_scores(const Tensor<T>& tokens, const nn::Linear<T>& head);

template <typename T>
Confidence<T> vit_confidence(const Tensor<T>& cls, const nn::Linear<T>& head);

template <typename T>
struct EncoderBlock {
    nn::LayerNorm<T> ln1;
    nn::Linear<T> query, key, value, proj;
    nn::LayerNorm<T> ln2;
    nn::Linear<T> fc1, fc2;
    std::size_t heads = 1;

    EncoderBlock() = default;
    EncoderBlock(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng);

    Tensor<T> attention(const Tensor<T>& x) const;
    // Pre-norm: x + attn(ln1(x)), then + mlp(ln2(.)).
    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(nn::NamedParams<T>& params, const std::string& prefix) const;
};

template <typename T>
struct MaskOutput {
    Tensor<T> mask;          // N × 1 × H × W soft causal mask
    Confidence<T> confidence;
};

template <typename T>
class VisionTransformer {
public:
    VisionTransformer() = default;
    VisionTransformer(const ViTConfig& cfg, Rng& rng);

    PatchTokens<T> patchify(const Tensor<T>& image) const;
    Encoded<T> encode(const PatchTokens<T>& tokens) const;
    Tensor<T> mask_scores(const Tensor<T>& patches) const;
    Confidence<T> confidence(const Tensor<T>& cls) const;

    // patchify -> encode -> mask head -> upsample, plus the CLS confidence.
    MaskOutput<T> forward(const Tensor<T>& image) const;

    const ViTConfig& config() const { return cfg_; }
    nn::Linear<T>& mask_head() { return mask_head_; }
    nn::Linear<T>& cls_head() { return cls_head_; }
    const std::vector<EncoderBlock<T>>& blocks() const { return blocks_; }

    nn::NamedParams<T> params() const;

private:
    ViTConfig cfg_;
    nn::Linear<T> patch_embed_;
    Tensor<T> cls_token_;  // 1 × 1 × D
    Tensor<T> pos_embed_;  // 1 × (P+1) × D
    std::vector<EncoderBlock<T>> blocks_;
    nn::Linear<T> mask_head_;
    nn::Linear<T> cls_head_;
};

// Recovers the architecture from checkpoint shapes; the head count is not
// recoverable from shapes and must be supplied.
ViTConfig infer_config(const std::vector<nn::CheckpointRecord>& records, std::size_t heads);

}  // namespace cgp::vit
