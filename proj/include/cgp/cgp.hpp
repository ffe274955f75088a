#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cgp/classifier.hpp"
#include "cgp/data.hpp"
#include "cgp/objectives.hpp"
#include "cgp/rng.hpp"
#include "cgp/tensor.hpp"
#include "cgp/vit.hpp"

// Causally guided perturbation training: the masked-noise perturbation, the
// confidence-dependent adversarial weight, the composite loss and the
// two-stage workflow (joint CNN+ViT training, then ViT-free fine-tuning).
namespace cgp::train {

struct CgpHyper {
    double sigma_noise = 0.5;  // std of the injected noise, normalised-pixel units
    double tau = 0.75;
    double steepness = 8.0;
    double lambda_vit = 0.1;
    std::size_t stage1_epochs = 20;
    std::size_t stage2_epochs = 5;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    // Throws ConfigError naming the first field outside its range.
    void validate() const;
};

// λ(c) = τ + (1-τ)·(2·logistic(k·(c-τ)) - 1)
double adaptive_weight(double c, double tau, double k);
double adaptive_weight_derivative(double c, double tau, double k);

// Differentiable elementwise version, used by the gradient checker.
template <typename T>
Tensor<T> adaptive_weight(const Tensor<T>& c, double tau, double k);

// N(0, σ²) per element via Box–Muller from `rng`.
template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, double sigma, Rng& rng);

// x·M + (1-M)·ε with M (N×1×H×W) broadcast over channels; ε is a constant.
// Gradients flow into x and M.
template <typename T>
Tensor<T> perturb(const Tensor<T>& x, const Tensor<T>& mask, const Tensor<T>& noise);

template <typename T>
Tensor<T> perturb(const Tensor<T>& x, const Tensor<T>& mask, double sigma, Rng& rng) {
    return perturb(x, mask, gaussian_noise<T>(x.shape(), sigma, rng));
}

struct LossBreakdown {
    double l_orig = 0;
    double l_vit = 0;
    double l_adv = 0;  // unweighted mean adversarial cross-entropy
    double lambda_adv_mean = 0;
    double l_total = 0;
    std::vector<double> lambda_adv;  // per sample
    std::vector<double> adv_loss;    // per-sample adversarial cross-entropy

    // l_orig + λ_vit·l_vit + mean_i(λ_i · adv_i)
    double reconstruct(double lambda_vit) const;
    std::string describe() const;
};

template <typename T>
struct WeightedLoss {
    Tensor<T> loss;
    LossBreakdown breakdown;
};

// Composite loss. `adv_per_sample` holds one adversarial cross-entropy per
// sample and `lambda_adv` the matching weights, applied before the batch
// mean. Throws ContractError on a negative component.
template <typename T>
WeightedLoss<T> total_loss(const Tensor<T>& l_orig, const Tensor<T>& l_vit, const Tensor<T>& adv_per_sample,
                           double lambda_vit, const std::vector<double>& lambda_adv);

struct ModelConfig {
    vit::ViTConfig vit;
    classifier::CnnConfig cnn;
};

template <typename T>
struct Models {
    classifier::CnnClassifier<T> cnn;
    vit::VisionTransformer<T> vit;

    // CNN from the "init.cnn" stream and ViT from "init.vit", so the CNN
    // starts identically with or without CGP.
    static Models create(const ModelConfig& cfg, std::uint64_t seed);
    nn::NamedParams<T> params(bool with_vit) const;
};

// The CGP loss on an already-normalised batch with explicit noise. L_orig is
// the configured objective on clean logits; L_vit is the masked-input
// cross-entropy plus the ViT head's own cross-entropy; λ_adv per sample
// comes from the ViT confidence on the clean input and is held constant.
template <typename T>
WeightedLoss<T> cgp_loss(const Models<T>& models, const Tensor<T>& x, const std::vector<int>& labels,
                         const std::vector<int>& domains, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, const Tensor<T>& noise);

// Same loss with λ_adv supplied by the caller instead of read from the ViT
// confidence. The gradient checker uses it to hold the stop-gradient
// weights fixed while finite differences move the ViT.
template <typename T>
WeightedLoss<T> cgp_loss(const Models<T>& models, const Tensor<T>& x, const std::vector<int>& labels,
                         const std::vector<int>& domains, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, const Tensor<T>& noise,
                         const std::vector<double>& lambda_adv);

// The objective alone on clean logits; breakdown has only l_orig = l_total.
template <typename T>
WeightedLoss<T> baseline_loss(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x,
                              const std::vector<int>& labels, const std::vector<int>& domains,
                              objectives::ObjectiveState& objective);

// One optimiser update. `batch` must already be normalised. Throws
// NumericError carrying the breakdown if the loss is not finite.
template <typename T>
LossBreakdown train_step(Models<T>& models, nn::Sgd<T>& optimizer, const data::Batch& batch, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, Rng& noise_rng, bool use_cgp);

struct EpochRecord {
    std::size_t epoch = 0;
    double l_orig = 0, l_vit = 0, l_adv = 0, lambda_adv_mean = 0, l_total = 0;
    double id_val_acc = 0;
};

using Trace = std::vector<EpochRecord>;

std::string trace_csv(const Trace& trace);
void write_trace_csv(const std::string& path, const Trace& trace);

struct TrainOptions {
    CgpHyper hyper;
    objectives::ObjectiveConfig objective;
    bool use_cgp = true;
    bool augment = true;
    std::function<void(const EpochRecord&)> on_epoch;
};

// Stage 1. With CGP, runs stage1_epochs of joint CNN+ViT training. Without
// CGP, the objective trains the CNN alone for stage1_epochs + stage2_epochs
// so that both arms see the same number of epochs.
template <typename T>
Trace train_stage1(const data::Dataset& ds, Models<T>& models, const TrainOptions& options);

// Stage 2: plain cross-entropy on clean inputs, CNN parameters only. Never
// touches the ViT.
template <typename T>
Trace fine_tune_stage2(const data::Dataset& ds, classifier::CnnClassifier<T>& cnn, const TrainOptions& options);

// Full workflow for one seed: stage 1, then stage 2 when CGP is on.
struct TrainResult {
    Trace stage1;
    Trace stage2;
};

template <typename T>
TrainResult train(const data::Dataset& ds, Models<T>& models, const TrainOptions& options);

// Normalised, optionally augmented batch for the given indices.
data::Batch prepare_batch(const data::Dataset& ds, std::span<const std::size_t> indices, Rng* augment_rng);

}  // namespace cgp::train
