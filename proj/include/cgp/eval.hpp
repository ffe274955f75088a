#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cgp/cgp.hpp"
#include "cgp/classifier.hpp"
#include "cgp/data.hpp"
#include "cgp/tensor.hpp"

// Accuracy, seed aggregation, run reports and saliency maps. Nothing in this
// module runs the ViT; the mask passed to export_saliency is computed by the
// caller.
namespace cgp::eval {

// Fraction of equal entries. Throws ContractError on N = 0 or unequal lengths.
double accuracy(std::span<const int> preds, std::span<const int> labels);

// Normalised, un-augmented predictions in chunks of `batch`; the result does
// not depend on the chunk size.
template <typename T>
std::vector<int> predict_dataset(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds,
                                 std::span<const std::size_t> indices, std::size_t batch = 250);

template <typename T>
double dataset_accuracy(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds,
                        std::span<const std::size_t> indices, std::size_t batch = 250);

struct RunReport {
    std::string label;  // e.g. "erm+cgp"
    std::uint64_t seed = 0;
    double train_acc = 0;
    double id_val_acc = 0;
    double ood_test_acc = 0;
    std::string config_fingerprint;
    train::Trace trace;

    static std::string csv_header();
    std::string csv_row() const;
    // One JSON object on a single line, trace included.
    std::string jsonl() const;
};

// Accuracies on domains 0-2, 3 and 4. A split with no samples reports 0.
template <typename T>
RunReport evaluate(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds);

struct MetricSummary {
    double mean = 0;
    double std = 0;  // sample standard deviation, 0 when n = 1
};

struct SeedAggregate {
    std::size_t count = 0;
    bool single_run = false;  // std is undefined for n = 1 and reported as 0
    MetricSummary train_acc, id_val_acc, ood_test_acc;

    std::string describe() const;
};

MetricSummary summarize(std::span<const double> values);
// Throws ContractError on an empty list. Independent of run order.
SeedAggregate aggregate(std::span<const RunReport> runs);

// One row of the comparison table: method ("ERM" or "CGP"), the objective
// used for training, and the seed aggregate.
struct TableRow {
    std::string method;
    std::string objective;
    SeedAggregate result;
};

// Method | Objective | ID | OOD, accuracies as "mean(±std)%" in percent.
std::string results_table(const std::vector<TableRow>& rows);

struct Heatmap {
    std::size_t height = 0, width = 0;
    std::vector<double> values;  // row-major, in [0,1]
    bool warning = false;        // the raw map was flat, so values are all zero
};

// Per-image min-max normalisation; a flat map becomes zeros with the warning set.
Heatmap normalize_heatmap(std::vector<double> raw, std::size_t height, std::size_t width);

// Half-pixel-centre bilinear resize with edge clamping.
Heatmap resize_heatmap(const Heatmap& map, std::size_t height, std::size_t width);

// CAM for one image (1×C×H×W, already normalised): relu(Σ_k w_target,k · A_k)
// over the final feature map A, using the head weights directly.
template <typename T>
Heatmap cam(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x, int target_class);

// Grad-CAM: channel weights are the spatial mean of d logit_target / d A_k.
// Model parameters receive no gradient.
template <typename T>
Heatmap grad_cam(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x, int target_class);

struct SaliencyFiles {
    std::string original, cam, grad_cam, mask, montage;
};

// `original` is planar RGB in [0,1]; maps are resized to the image size.
// Writes <prefix>_original.ppm, _cam.pgm, _gradcam.pgm, _mask.pgm and a
// side-by-side _montage.ppm. I/O errors name the failing path.
SaliencyFiles export_saliency(std::span<const float> original, std::size_t height, std::size_t width,
                              const Heatmap& cam_map, const Heatmap& grad_cam_map, const Heatmap& vit_mask,
                              const std::string& path_prefix);

}  // namespace cgp::eval
