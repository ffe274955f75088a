#include "cgp/classifier.hpp"

#include <algorithm>

#include "cgp/ops.hpp"

namespace cgp::classifier {

void CnnConfig::validate() const {
    if (channels.empty()) throw ConfigError("cnn: at least one conv block is required");
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("cnn: kernel must be odd");
    if (pool == 0) throw ConfigError("cnn: pool must be positive");
    if (num_classes < 2) throw ConfigError("cnn: num_classes must be >= 2");
    std::size_t size = image_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] == 0) throw ConfigError("cnn: zero-width conv block");
        if (size < pool) {
            throw ConfigError("cnn: block " + std::to_string(i) + " collapses the " + std::to_string(size) +
                              "-pixel map below 1x1");
        }
        size /= pool;
    }
}

std::size_t CnnConfig::feature_size() const {
    std::size_t size = image_size;
    for (std::size_t i = 0; i < channels.size(); ++i) size /= pool;
    return size;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    const auto z = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.data() + i * k;
        out[i] = static_cast<int>(std::max_element(row, row + k) - row);  // first maximum
    }
    return out;
}

template <typename T>
CnnClassifier<T>::CnnClassifier(const CnnConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = cfg_.in_channels;
    for (auto out : cfg_.channels) {
        convs_.emplace_back(in, out, cfg_.kernel, 1, (cfg_.kernel - 1) / 2, rng);
        in = out;
    }
    fc_ = nn::Linear<T>(in, cfg_.num_classes, rng);
}

template <typename T>
Tensor<T> CnnClassifier<T>::features(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(2) < 1) throw DimensionError("cnn features: input " + shape_str(x.shape()));
    Tensor<T> h = x;
    for (const auto& conv : convs_) {
        if (h.dim(2) < cfg_.pool || h.dim(3) < cfg_.pool) {
            throw ConfigError("cnn features: map " + shape_str(h.shape()) + " collapses below 1x1");
        }
        h = nn::avg_pool2d(relu(conv(h)), cfg_.pool);
    }
    return h;
}

template <typename T>
Tensor<T> CnnClassifier<T>::head(const Tensor<T>& features) const {
    return fc_(nn::global_avg_pool(features));
}

template <typename T>
std::vector<int> CnnClassifier<T>::predict(const Tensor<T>& x) const {
    NoGradGuard no_grad;
    return argmax_rows(logits(x));
}

template <typename T>
nn::NamedParams<T> CnnClassifier<T>::params() const {
    nn::NamedParams<T> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "cnn.conv" + std::to_string(i));
    fc_.collect(out, "cnn.fc");
    return out;
}

CnnConfig infer_config(const std::vector<nn::CheckpointRecord>& records, std::size_t image_size) {
    CnnConfig cfg;
    cfg.image_size = image_size;
    cfg.channels.clear();
    for (std::size_t i = 0;; ++i) {
        auto it = std::find_if(records.begin(), records.end(),
                               [&](const auto& r) { return r.name == "cnn.conv" + std::to_string(i) + ".weight"; });
        if (it == records.end()) break;
        if (it->dims.size() != 4) throw LoadError("cnn checkpoint: conv kernel of rank " + std::to_string(it->dims.size()));
        if (i == 0) cfg.in_channels = it->dims[1];
        cfg.kernel = it->dims[2];
        cfg.channels.push_back(it->dims[0]);
    }
    auto fc = std::find_if(records.begin(), records.end(), [](const auto& r) { return r.name == "cnn.fc.weight"; });
    if (cfg.channels.empty() || fc == records.end() || fc->dims.size() != 2) {
        throw LoadError("not a classifier checkpoint (missing cnn.conv0/cnn.fc parameters)");
    }
    cfg.num_classes = fc->dims[0];
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("classifier checkpoint: ") + e.what());
    }
    return cfg;
}

template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);
template class CnnClassifier<float>;
template class CnnClassifier<double>;

}  // namespace cgp::classifier
