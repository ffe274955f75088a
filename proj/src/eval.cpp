#include "cgp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cgp/errors.hpp"
#include "cgp/image_io.hpp"
#include "cgp/ops.hpp"

namespace cgp::eval {

double accuracy(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) {
        throw ContractError("accuracy: " + std::to_string(preds.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw ContractError("accuracy: no samples");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

template <typename T>
std::vector<int> predict_dataset(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds,
                                 std::span<const std::size_t> indices, std::size_t batch) {
    if (batch == 0) throw ConfigError("predict_dataset: batch size must be positive");
    NoGradGuard no_grad;
    std::vector<int> preds;
    preds.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += batch) {
        auto b = data::make_batch(ds, indices.subspan(start, std::min(batch, indices.size() - start)));
        data::normalize(b);
        const auto p = cnn.predict(data::to_tensor<T>(b));
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return preds;
}

template <typename T>
double dataset_accuracy(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds,
                        std::span<const std::size_t> indices, std::size_t batch) {
    const auto preds = predict_dataset(cnn, ds, indices, batch);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (auto i : indices) labels.push_back(ds.labels[i]);
    return accuracy(preds, labels);
}

// ---- Reports ----

namespace {

std::string fixed(double v, int digits = 6) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

double split_accuracy(const auto& cnn, const data::Dataset& ds, const std::vector<std::size_t>& idx) {
    return idx.empty() ? 0.0 : dataset_accuracy(cnn, ds, idx);
}

}  // namespace

std::string RunReport::csv_header() {
    return "label,seed,train_acc,id_val_acc,ood_test_acc,config_fingerprint";
}

std::string RunReport::csv_row() const {
    return label + "," + std::to_string(seed) + "," + fixed(train_acc) + "," + fixed(id_val_acc) + "," +
           fixed(ood_test_acc) + "," + config_fingerprint;
}

std::string RunReport::jsonl() const {
    nlohmann::ordered_json j;
    j["label"] = label;
    j["seed"] = seed;
    j["train_acc"] = train_acc;
    j["id_val_acc"] = id_val_acc;
    j["ood_test_acc"] = ood_test_acc;
    j["config_fingerprint"] = config_fingerprint;
    auto& tr = j["trace"] = nlohmann::ordered_json::array();
    for (const auto& r : trace) {
        tr.push_back({{"epoch", r.epoch},
                      {"l_orig", r.l_orig},
                      {"l_vit", r.l_vit},
                      {"l_adv", r.l_adv},
                      {"lambda_adv_mean", r.lambda_adv_mean},
                      {"l_total", r.l_total},
                      {"id_val_acc", r.id_val_acc}});
    }
    return j.dump();
}

template <typename T>
RunReport evaluate(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds) {
    RunReport r;
    r.train_acc = split_accuracy(cnn, ds, ds.train_indices());
    r.id_val_acc = split_accuracy(cnn, ds, ds.indices_of_domain(data::kIdValidationDomain));
    r.ood_test_acc = split_accuracy(cnn, ds, ds.indices_of_domain(data::kOodTestDomain));
    return r;
}

MetricSummary summarize(std::span<const double> values) {
    if (values.empty()) throw ContractError("summarize: no values");
    const double n = static_cast<double>(values.size());
    MetricSummary s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() > 1) {
        double ss = 0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / (n - 1));
    }
    return s;
}

SeedAggregate aggregate(std::span<const RunReport> runs) {
    if (runs.empty()) throw ContractError("aggregate: no runs");
    // Sorting by seed makes the floating-point sums independent of run order.
    std::vector<const RunReport*> sorted;
    for (const auto& r : runs) sorted.push_back(&r);
    std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->seed < b->seed; });
    std::vector<double> tr, id, ood;
    for (const auto* r : sorted) {
        tr.push_back(r->train_acc);
        id.push_back(r->id_val_acc);
        ood.push_back(r->ood_test_acc);
    }
    SeedAggregate a;
    a.count = runs.size();
    a.single_run = runs.size() == 1;
    a.train_acc = summarize(tr);
    a.id_val_acc = summarize(id);
    a.ood_test_acc = summarize(ood);
    return a;
}

std::string SeedAggregate::describe() const {
    auto pct = [](const MetricSummary& m) { return fixed(100 * m.mean, 2) + " ± " + fixed(100 * m.std, 2); };
    std::string s = "ID " + pct(id_val_acc) + "  OOD " + pct(ood_test_acc) + "  train " + pct(train_acc) +
                    "  (n=" + std::to_string(count) + ")";
    if (single_run) s += " [n=1: std undefined, reported as 0]";
    return s;
}

std::string results_table(const std::vector<TableRow>& rows) {
    auto cell = [](const MetricSummary& m) {
        return fixed(100 * m.mean, 2) + "(±" + fixed(100 * m.std, 1) + ")%";
    };
    std::ostringstream os;
    os << "| Method | Objective | ID | OOD | n |\n|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        os << "| " << r.method << " | " << r.objective << " | " << cell(r.result.id_val_acc) << " | "
           << cell(r.result.ood_test_acc) << " | " << r.result.count << " |\n";
    }
    return os.str();
}

// ---- Saliency ----

Heatmap normalize_heatmap(std::vector<double> raw, std::size_t height, std::size_t width) {
    if (raw.size() != height * width) {
        throw DimensionError("heatmap: " + std::to_string(raw.size()) + " values for " + std::to_string(height) +
                             "x" + std::to_string(width));
    }
    Heatmap h{height, width, std::move(raw), false};
    if (h.values.empty()) return h;
    const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
    const double mn = *lo, range = *hi - *lo;
    if (!(range > 0) || !std::isfinite(range)) {
        std::fill(h.values.begin(), h.values.end(), 0.0);
        h.warning = true;
        return h;
    }
    for (auto& v : h.values) v = (v - mn) / range;
    return h;
}

Heatmap resize_heatmap(const Heatmap& map, std::size_t height, std::size_t width) {
    if (map.height == 0 || map.width == 0) throw DimensionError("resize_heatmap: empty map");
    auto taps = [](std::size_t in, std::size_t out, std::size_t d) {
        double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(s));
        return std::tuple{lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
    };
    Heatmap out{height, width, std::vector<double>(height * width), map.warning};
    for (std::size_t y = 0; y < height; ++y) {
        const auto [y0, y1, fy] = taps(map.height, height, y);
        for (std::size_t x = 0; x < width; ++x) {
            const auto [x0, x1, fx] = taps(map.width, width, x);
            auto at = [&](std::size_t r, std::size_t c) { return map.values[r * map.width + c]; };
            const double top = (1 - fx) * at(y0, x0) + fx * at(y0, x1);
            const double bot = (1 - fx) * at(y1, x0) + fx * at(y1, x1);
            out.values[y * width + x] = (1 - fy) * top + fy * bot;
        }
    }
    return out;
}

namespace {

template <typename T>
void check_saliency_input(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x, int target) {
    if (x.rank() != 4 || x.dim(0) != 1) throw DimensionError("saliency: expected 1xCxHxW, got " + shape_str(x.shape()));
    if (target < 0 || static_cast<std::size_t>(target) >= cnn.config().num_classes) {
        throw ContractError("saliency: target class " + std::to_string(target) + " outside [0, " +
                            std::to_string(cnn.config().num_classes) + ")");
    }
}

// relu(Σ_k w_k · A_k) for a 1×K×h×w map.
template <typename T>
Heatmap weighted_map(const Tensor<T>& a, const std::vector<double>& w) {
    const std::size_t k = a.dim(1), h = a.dim(2), wd = a.dim(3), plane = h * wd;
    std::vector<double> raw(plane, 0.0);
    const auto v = a.data();
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t p = 0; p < plane; ++p) raw[p] += w[c] * static_cast<double>(v[c * plane + p]);
    for (auto& r : raw) r = std::max(r, 0.0);
    return normalize_heatmap(std::move(raw), h, wd);
}

}  // namespace

template <typename T>
Heatmap cam(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x, int target_class) {
    check_saliency_input(cnn, x, target_class);
    NoGradGuard no_grad;
    const auto a = cnn.features(x);
    const auto wt = cnn.fc().weight.data();
    const std::size_t k = a.dim(1);
    std::vector<double> w(k);
    for (std::size_t c = 0; c < k; ++c) w[c] = wt[static_cast<std::size_t>(target_class) * k + c];
    return weighted_map(a, w);
}

template <typename T>
Heatmap grad_cam(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x, int target_class) {
    check_saliency_input(cnn, x, target_class);
    Tensor<T> a;
    {
        NoGradGuard no_grad;
        a = cnn.features(x);
    }
    // A as a fresh leaf and a detached head, so only A collects gradient.
    Tensor<T> leaf(a.shape(), a.values(), true);
    const auto logits =
        nn::linear_forward(nn::global_avg_pool(leaf), cnn.fc().weight.detach(), cnn.fc().bias.detach());
    const auto k_classes = logits.dim(1);
    std::vector<T> pick(k_classes, T(0));
    pick[static_cast<std::size_t>(target_class)] = T(1);
    backward(sum(mul(logits, Tensor<T>({1, k_classes}, std::move(pick)))));

    const std::size_t k = a.dim(1), plane = a.dim(2) * a.dim(3);
    const auto g = leaf.grad();
    std::vector<double> w(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t p = 0; p < plane; ++p) w[c] += static_cast<double>(g[c * plane + p]);
        w[c] /= static_cast<double>(plane);
    }
    return weighted_map(a, w);
}

SaliencyFiles export_saliency(std::span<const float> original, std::size_t height, std::size_t width,
                              const Heatmap& cam_map, const Heatmap& grad_cam_map, const Heatmap& vit_mask,
                              const std::string& path_prefix) {
    const std::vector<float> rgb(original.begin(), original.end());
    const auto orig_img = io::rgb_image(rgb, height, width);
    const Heatmap* maps[] = {&cam_map, &grad_cam_map, &vit_mask};
    std::vector<io::Image> gray;
    for (const auto* m : maps) {
        const auto sized = (m->height == height && m->width == width) ? *m : resize_heatmap(*m, height, width);
        gray.push_back(io::gray_image(sized.values, height, width));
    }

    // Panels left to right: original, CAM, Grad-CAM, ViT mask; grey maps are
    // replicated across the three channels.
    io::Image montage{4 * width, height, 3, std::vector<std::uint8_t>(4 * width * height * 3)};
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                montage.pixels[(y * 4 * width + x) * 3 + c] = orig_img.pixels[(y * width + x) * 3 + c];
                for (std::size_t p = 0; p < 3; ++p)
                    montage.pixels[(y * 4 * width + (p + 1) * width + x) * 3 + c] = gray[p].pixels[y * width + x];
            }
        }

    SaliencyFiles f{path_prefix + "_original.ppm", path_prefix + "_cam.pgm", path_prefix + "_gradcam.pgm",
                    path_prefix + "_mask.pgm", path_prefix + "_montage.ppm"};
    io::write_pnm(f.original, orig_img);
    io::write_pnm(f.cam, gray[0]);
    io::write_pnm(f.grad_cam, gray[1]);
    io::write_pnm(f.mask, gray[2]);
    io::write_pnm(f.montage, montage);
    return f;
}

#define CGP_INSTANTIATE_EVAL(T)                                                                                  \
    template std::vector<int> predict_dataset<T>(const classifier::CnnClassifier<T>&, const data::Dataset&,     \
                                                 std::span<const std::size_t>, std::size_t);                    \
    template double dataset_accuracy<T>(const classifier::CnnClassifier<T>&, const data::Dataset&,              \
                                        std::span<const std::size_t>, std::size_t);                             \
    template RunReport evaluate<T>(const classifier::CnnClassifier<T>&, const data::Dataset&);                  \
    template Heatmap cam<T>(const classifier::CnnClassifier<T>&, const Tensor<T>&, int);                       \
    template Heatmap grad_cam<T>(const classifier::CnnClassifier<T>&, const Tensor<T>&, int);

CGP_INSTANTIATE_EVAL(float)
CGP_INSTANTIATE_EVAL(double)

}  // namespace cgp::eval
