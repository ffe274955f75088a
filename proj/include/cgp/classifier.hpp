#pragma once

#include <vector>

#include "cgp/nn.hpp"
#include "cgp/rng.hpp"
#include "cgp/tensor.hpp"

// The deployed CNN: feature extractor f (conv -> relu -> avg-pool blocks) and
// head h (global average pool -> linear). Nothing here touches the ViT.
namespace cgp::classifier {

struct CnnConfig {
    std::size_t in_channels = 3;
    std::vector<std::size_t> channels{16, 32};
    std::size_t kernel = 3;
    std::size_t pool = 2;
    std::size_t num_classes = 2;
    std::size_t image_size = 32;

    // Throws ConfigError when the blocks would shrink the map below 1×1.
    void validate() const;
    std::size_t feature_size() const;
};

// Index of the largest value; ties go to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

template <typename T>
class CnnClassifier {
public:
    CnnClassifier() = default;
    CnnClassifier(const CnnConfig& cfg, Rng& rng);

    Tensor<T> features(const Tensor<T>& x) const;
    Tensor<T> head(const Tensor<T>& features) const;
    Tensor<T> logits(const Tensor<T>& x) const { return head(features(x)); }
    std::vector<int> predict(const Tensor<T>& x) const;

    const CnnConfig& config() const { return cfg_; }
    std::vector<nn::Conv2d<T>>& convs() { return convs_; }
    nn::Linear<T>& fc() { return fc_; }
    const nn::Linear<T>& fc() const { return fc_; }

    nn::NamedParams<T> params() const;

private:
    CnnConfig cfg_;
    std::vector<nn::Conv2d<T>> convs_;
    nn::Linear<T> fc_;
};

// Rebuilds the architecture from checkpoint shapes.
CnnConfig infer_config(const std::vector<nn::CheckpointRecord>& records, std::size_t image_size = 32);

}  // namespace cgp::classifier
