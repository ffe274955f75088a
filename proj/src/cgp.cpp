#include "cgp/cgp.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cgp/errors.hpp"
#include "cgp/eval.hpp"
#include "cgp/nn.hpp"
#include "cgp/ops.hpp"

namespace cgp::train {

void CgpHyper::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("cgp: " + what); };
    if (!(sigma_noise >= 0.0) || !std::isfinite(sigma_noise)) fail("sigma_noise must be >= 0");
    if (!(tau > 0.0 && tau < 1.0)) fail("tau must lie in (0, 1)");
    if (!(steepness > 0.0) || !std::isfinite(steepness)) fail("steepness must be > 0");
    if (!(lambda_vit >= 0.0) || !std::isfinite(lambda_vit)) fail("lambda_vit must be >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (batch_size == 0) fail("batch_size must be positive");
}

double adaptive_weight(double c, double tau, double k) {
    const double logistic = 1.0 / (1.0 + std::exp(-k * (c - tau)));
    return tau + (1.0 - tau) * (logistic - 0.5) * 2.0;
}

double adaptive_weight_derivative(double c, double tau, double k) {
    const double s = 1.0 / (1.0 + std::exp(-k * (c - tau)));
    return 2.0 * (1.0 - tau) * k * s * (1.0 - s);
}

template <typename T>
Tensor<T> adaptive_weight(const Tensor<T>& c, double tau, double k) {
    auto s = sigmoid(scale(add_scalar(c, static_cast<T>(-tau)), static_cast<T>(k)));
    return add_scalar(scale(s, static_cast<T>(2.0 * (1.0 - tau))), static_cast<T>(tau - (1.0 - tau)));
}

template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, double sigma, Rng& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& e : v) e = static_cast<T>(sigma * rng.normal());
    return Tensor<T>(shape, std::move(v));
}

template <typename T>
Tensor<T> perturb(const Tensor<T>& x, const Tensor<T>& mask, const Tensor<T>& noise) {
    if (x.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != x.dim(0) ||
        mask.dim(2) != x.dim(2) || mask.dim(3) != x.dim(3)) {
        throw DimensionError("perturb: mask " + shape_str(mask.shape()) + " does not match input " +
                             shape_str(x.shape()));
    }
    if (noise.shape() != x.shape()) {
        throw DimensionError("perturb: noise " + shape_str(noise.shape()) + " vs input " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<T> eps(noise.values().begin(), noise.values().end());
    std::vector<T> out(x.numel());
    const auto xv = x.data();
    const auto mv = mask.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t j = (i * c + ch) * plane + p;
                const T m = mv[i * plane + p];
                out[j] = xv[j] * m + (T(1) - m) * eps[j];
            }
    return Tensor<T>::from_op(x.shape(), std::move(out), "perturb", {x.node(), mask.node()},
                              [n, c, plane, eps = std::move(eps)](Node<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pm = *self.parents[1];
                                  const T* g = self.grad.data();
                                  if (px.requires_grad) {
                                      auto& gx = px.ensure_grad();
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t ch = 0; ch < c; ++ch)
                                              for (std::size_t p = 0; p < plane; ++p) {
                                                  const std::size_t j = (i * c + ch) * plane + p;
                                                  gx[j] += g[j] * pm.data[i * plane + p];
                                              }
                                  }
                                  if (pm.requires_grad) {
                                      auto& gm = pm.ensure_grad();
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t ch = 0; ch < c; ++ch)
                                              for (std::size_t p = 0; p < plane; ++p) {
                                                  const std::size_t j = (i * c + ch) * plane + p;
                                                  gm[i * plane + p] += g[j] * (px.data[j] - eps[j]);
                                              }
                                  }
                              });
}

double LossBreakdown::reconstruct(double lambda_vit) const {
    double adv = 0;
    for (std::size_t i = 0; i < adv_loss.size(); ++i) adv += lambda_adv[i] * adv_loss[i];
    if (!adv_loss.empty()) adv /= static_cast<double>(adv_loss.size());
    return l_orig + lambda_vit * l_vit + adv;
}

std::string LossBreakdown::describe() const {
    std::ostringstream os;
    os << std::setprecision(9) << "l_orig=" << l_orig << " l_vit=" << l_vit << " l_adv=" << l_adv
       << " lambda_adv_mean=" << lambda_adv_mean << " l_total=" << l_total;
    return os.str();
}

template <typename T>
WeightedLoss<T> total_loss(const Tensor<T>& l_orig, const Tensor<T>& l_vit, const Tensor<T>& adv_per_sample,
                           double lambda_vit, const std::vector<double>& lambda_adv) {
    if (adv_per_sample.rank() != 1 || adv_per_sample.numel() != lambda_adv.size()) {
        throw DimensionError("total_loss: " + std::to_string(lambda_adv.size()) + " weights for adversarial losses " +
                             shape_str(adv_per_sample.shape()));
    }
    if (lambda_vit < 0) throw ContractError("total_loss: lambda_vit is negative");
    WeightedLoss<T> out;
    auto& b = out.breakdown;
    b.l_orig = static_cast<double>(l_orig.item());
    b.l_vit = static_cast<double>(l_vit.item());
    if (b.l_orig < 0) throw ContractError("total_loss: negative l_orig " + std::to_string(b.l_orig));
    if (b.l_vit < 0) throw ContractError("total_loss: negative l_vit " + std::to_string(b.l_vit));
    const std::size_t n = lambda_adv.size();
    b.lambda_adv = lambda_adv;
    b.adv_loss.assign(adv_per_sample.values().begin(), adv_per_sample.values().end());
    for (std::size_t i = 0; i < n; ++i) {
        if (b.adv_loss[i] < 0) throw ContractError("total_loss: negative adversarial loss for sample " + std::to_string(i));
        if (lambda_adv[i] < 0) throw ContractError("total_loss: negative lambda_adv for sample " + std::to_string(i));
        b.l_adv += b.adv_loss[i];
        b.lambda_adv_mean += lambda_adv[i];
    }
    if (n > 0) {
        b.l_adv /= static_cast<double>(n);
        b.lambda_adv_mean /= static_cast<double>(n);
    }
    std::vector<T> w(lambda_adv.begin(), lambda_adv.end());
    auto adv_term = mean(mul(adv_per_sample, Tensor<T>({n}, std::move(w))));
    out.loss = add(add(l_orig, scale(l_vit, static_cast<T>(lambda_vit))), adv_term);
    b.l_total = static_cast<double>(out.loss.item());
    return out;
}

template <typename T>
Models<T> Models<T>::create(const ModelConfig& cfg, std::uint64_t seed) {
    Rng cnn_rng = Rng::stream(seed, "init.cnn");
    Rng vit_rng = Rng::stream(seed, "init.vit");
    return Models<T>{classifier::CnnClassifier<T>(cfg.cnn, cnn_rng), vit::VisionTransformer<T>(cfg.vit, vit_rng)};
}

template <typename T>
nn::NamedParams<T> Models<T>::params(bool with_vit) const {
    auto out = cnn.params();
    if (with_vit) {
        auto v = vit.params();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

namespace {

template <typename T>
WeightedLoss<T> cgp_loss_impl(const Models<T>& models, const Tensor<T>& x, const std::vector<int>& labels,
                              const std::vector<int>& domains, const CgpHyper& hyper,
                              objectives::ObjectiveState& objective, const Tensor<T>& noise,
                              const std::vector<double>* fixed_lambda) {
    const std::size_t n = x.dim(0), channels = x.dim(1);
    auto scm = models.vit.forward(x);
    std::vector<double> lambda(n);
    if (fixed_lambda != nullptr) {
        if (fixed_lambda->size() != n) {
            throw DimensionError("cgp_loss: " + std::to_string(fixed_lambda->size()) + " weights for " +
                                 std::to_string(n) + " samples");
        }
        lambda = *fixed_lambda;
    } else {
        for (std::size_t i = 0; i < n; ++i)
            lambda[i] = adaptive_weight(static_cast<double>(scm.confidence.c[i]), hyper.tau, hyper.steepness);
    }

    auto l_orig = objectives::objective_loss(models.cnn.logits(x), labels, domains, objective).loss;
    auto masked_logits = models.cnn.logits(mul(expand(scm.mask, 1, channels), x));
    auto l_vit = add(nn::cross_entropy(masked_logits, labels), nn::cross_entropy(scm.confidence.logits, labels));
    auto adv = nn::cross_entropy_per_sample(models.cnn.logits(perturb(x, scm.mask, noise)), labels);
    return total_loss(l_orig, l_vit, adv, hyper.lambda_vit, lambda);
}

}  // namespace

template <typename T>
WeightedLoss<T> cgp_loss(const Models<T>& models, const Tensor<T>& x, const std::vector<int>& labels,
                         const std::vector<int>& domains, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, const Tensor<T>& noise) {
    return cgp_loss_impl(models, x, labels, domains, hyper, objective, noise, nullptr);
}

template <typename T>
WeightedLoss<T> cgp_loss(const Models<T>& models, const Tensor<T>& x, const std::vector<int>& labels,
                         const std::vector<int>& domains, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, const Tensor<T>& noise,
                         const std::vector<double>& lambda_adv) {
    return cgp_loss_impl(models, x, labels, domains, hyper, objective, noise, &lambda_adv);
}

template <typename T>
WeightedLoss<T> baseline_loss(const classifier::CnnClassifier<T>& cnn, const Tensor<T>& x,
                              const std::vector<int>& labels, const std::vector<int>& domains,
                              objectives::ObjectiveState& objective) {
    WeightedLoss<T> out;
    out.loss = objectives::objective_loss(cnn.logits(x), labels, domains, objective).loss;
    out.breakdown.l_orig = out.breakdown.l_total = static_cast<double>(out.loss.item());
    return out;
}

template <typename T>
LossBreakdown train_step(Models<T>& models, nn::Sgd<T>& optimizer, const data::Batch& batch, const CgpHyper& hyper,
                         objectives::ObjectiveState& objective, Rng& noise_rng, bool use_cgp) {
    auto x = data::to_tensor<T>(batch);
    auto wl = use_cgp ? cgp_loss(models, x, batch.labels, batch.domains, hyper, objective,
                                 gaussian_noise<T>(x.shape(), hyper.sigma_noise, noise_rng))
                      : baseline_loss(models.cnn, x, batch.labels, batch.domains, objective);
    if (!std::isfinite(wl.breakdown.l_total)) {
        throw NumericError("non-finite training loss: " + wl.breakdown.describe());
    }
    optimizer.zero_grad();
    backward(wl.loss);
    optimizer.step();
    return wl.breakdown;
}

std::string trace_csv(const Trace& trace) {
    std::ostringstream os;
    os << "epoch,l_orig,l_vit,l_adv,lambda_adv_mean,l_total,id_val_acc\n";
    os << std::setprecision(9);
    for (const auto& r : trace) {
        os << r.epoch << ',' << r.l_orig << ',' << r.l_vit << ',' << r.l_adv << ',' << r.lambda_adv_mean << ','
           << r.l_total << ',' << r.id_val_acc << '\n';
    }
    return os.str();
}

void write_trace_csv(const std::string& path, const Trace& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << trace_csv(trace);
    if (!out) throw std::runtime_error("write failed: " + path);
}

data::Batch prepare_batch(const data::Dataset& ds, std::span<const std::size_t> indices, Rng* augment_rng) {
    auto batch = data::make_batch(ds, indices);
    if (augment_rng != nullptr) data::augment(batch, *augment_rng);
    data::normalize(batch);
    return batch;
}

namespace {

struct EpochSums {
    double l_orig = 0, l_vit = 0, l_adv = 0, lambda = 0, l_total = 0;
    std::size_t batches = 0;

    void add(const LossBreakdown& b) {
        l_orig += b.l_orig;
        l_vit += b.l_vit;
        l_adv += b.l_adv;
        lambda += b.lambda_adv_mean;
        l_total += b.l_total;
        ++batches;
    }

    EpochRecord record(std::size_t epoch) const {
        const double n = static_cast<double>(std::max<std::size_t>(batches, 1));
        return {epoch, l_orig / n, l_vit / n, l_adv / n, lambda / n, l_total / n, 0.0};
    }
};

template <typename T>
double id_val_accuracy(const classifier::CnnClassifier<T>& cnn, const data::Dataset& ds) {
    const auto idx = ds.indices_of_domain(data::kIdValidationDomain);
    return idx.empty() ? 0.0 : eval::dataset_accuracy(cnn, ds, idx);
}

std::vector<std::size_t> require_train_indices(const data::Dataset& ds) {
    auto idx = ds.train_indices();
    if (idx.empty()) throw ConfigError("training needs at least one sample from domains 0-2");
    return idx;
}

}  // namespace

template <typename T>
Trace train_stage1(const data::Dataset& ds, Models<T>& models, const TrainOptions& options) {
    const auto& hyper = options.hyper;
    hyper.validate();
    const auto train_idx = require_train_indices(ds);
    Rng shuffle = Rng::stream(hyper.seed, "shuffle");
    Rng augment = Rng::stream(hyper.seed, "augment");
    Rng noise = Rng::stream(hyper.seed, "noise");
    nn::Sgd<T> optimizer(nn::tensors_of(models.params(options.use_cgp)), hyper.learning_rate, hyper.momentum);
    objectives::ObjectiveState objective(options.objective);
    const std::size_t epochs = options.use_cgp ? hyper.stage1_epochs : hyper.stage1_epochs + hyper.stage2_epochs;

    Trace trace;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        objective.set_epoch(epoch);
        EpochSums sums;
        for (const auto& b : data::shuffled_batches(train_idx, hyper.batch_size, shuffle)) {
            auto batch = prepare_batch(ds, b, options.augment ? &augment : nullptr);
            sums.add(train_step(models, optimizer, batch, hyper, objective, noise, options.use_cgp));
        }
        auto rec = sums.record(epoch + 1);
        rec.id_val_acc = id_val_accuracy(models.cnn, ds);
        trace.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);
    }
    return trace;
}

template <typename T>
Trace fine_tune_stage2(const data::Dataset& ds, classifier::CnnClassifier<T>& cnn, const TrainOptions& options) {
    const auto& hyper = options.hyper;
    hyper.validate();
    const auto train_idx = require_train_indices(ds);
    Rng shuffle = Rng::stream(hyper.seed, "shuffle.stage2");
    Rng augment = Rng::stream(hyper.seed, "augment.stage2");
    nn::Sgd<T> optimizer(nn::tensors_of(cnn.params()), hyper.learning_rate, hyper.momentum);

    Trace trace;
    for (std::size_t epoch = 0; epoch < hyper.stage2_epochs; ++epoch) {
        EpochSums sums;
        for (const auto& b : data::shuffled_batches(train_idx, hyper.batch_size, shuffle)) {
            auto batch = prepare_batch(ds, b, options.augment ? &augment : nullptr);
            auto loss = nn::cross_entropy(cnn.logits(data::to_tensor<T>(batch)), batch.labels);
            LossBreakdown bd;
            bd.l_orig = bd.l_total = static_cast<double>(loss.item());
            if (!std::isfinite(bd.l_total)) throw NumericError("non-finite stage-2 loss: " + bd.describe());
            optimizer.zero_grad();
            backward(loss);
            optimizer.step();
            sums.add(bd);
        }
        auto rec = sums.record(epoch + 1);
        rec.id_val_acc = id_val_accuracy(cnn, ds);
        trace.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);
    }
    return trace;
}

template <typename T>
TrainResult train(const data::Dataset& ds, Models<T>& models, const TrainOptions& options) {
    TrainResult out;
    out.stage1 = train_stage1(ds, models, options);
    if (options.use_cgp) out.stage2 = fine_tune_stage2(ds, models.cnn, options);
    return out;
}

#define CGP_INSTANTIATE_TRAIN(T)                                                                                  \
    template Tensor<T> adaptive_weight<T>(const Tensor<T>&, double, double);                                      \
    template Tensor<T> gaussian_noise<T>(const Shape&, double, Rng&);                                             \
    template Tensor<T> perturb<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
    template WeightedLoss<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,          \
                                           const std::vector<double>&);                                           \
    template struct Models<T>;                                                                                    \
    template WeightedLoss<T> cgp_loss<T>(const Models<T>&, const Tensor<T>&, const std::vector<int>&,             \
                                         const std::vector<int>&, const CgpHyper&, objectives::ObjectiveState&,   \
                                         const Tensor<T>&);                                                       \
    template WeightedLoss<T> cgp_loss<T>(const Models<T>&, const Tensor<T>&, const std::vector<int>&,             \
                                         const std::vector<int>&, const CgpHyper&, objectives::ObjectiveState&,   \
                                         const Tensor<T>&, const std::vector<double>&);                           \
    template WeightedLoss<T> baseline_loss<T>(const classifier::CnnClassifier<T>&, const Tensor<T>&,              \
                                              const std::vector<int>&, const std::vector<int>&,                   \
                                              objectives::ObjectiveState&);                                       \
    template LossBreakdown train_step<T>(Models<T>&, nn::Sgd<T>&, const data::Batch&, const CgpHyper&,            \
                                         objectives::ObjectiveState&, Rng&, bool);                                \
    template Trace train_stage1<T>(const data::Dataset&, Models<T>&, const TrainOptions&);                        \
    template Trace fine_tune_stage2<T>(const data::Dataset&, classifier::CnnClassifier<T>&, const TrainOptions&); \
    template TrainResult train<T>(const data::Dataset&, Models<T>&, const TrainOptions&);

CGP_INSTANTIATE_TRAIN(float)
CGP_INSTANTIATE_TRAIN(double)

}  // namespace cgp::train
