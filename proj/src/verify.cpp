#include "cgp/verify.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "cgp/cgp.hpp"
#include "cgp/errors.hpp"
#include "cgp/nn.hpp"
#include "cgp/objectives.hpp"
#include "cgp/ops.hpp"
#include "cgp/vit.hpp"

namespace cgp::verify {
namespace {

using D = double;
using TensorD = Tensor<D>;

TensorD rand(Shape shape, Rng& rng, double scale = 1.0, double shift = 0.0) {
    std::vector<D> v(shape_numel(shape));
    for (auto& x : v) x = shift + scale * rng.normal();
    return TensorD(std::move(shape), std::move(v), true);
}

CheckOutcome outcome(std::string scope, std::string what, const GradCheckResult& r) {
    CheckOutcome c;
    c.scope = std::move(scope);
    c.name = c.scope + ":" + what;
    c.error = r.max_relative_error;
    c.coordinates = r.coordinates;
    c.passed = r.max_relative_error < kGradTolerance;
    std::ostringstream os;
    os << std::setprecision(3) << "worst at tensor " << r.worst_tensor << "[" << r.worst_index
       << "]: analytic " << r.worst_analytic << " vs numeric " << r.worst_numeric;
    c.detail = os.str();
    return c;
}

// Scalarises op(inputs) with a fixed random weighting so every output
// coordinate contributes a distinct amount.
CheckOutcome op_check(const std::string& op, std::vector<TensorD> inputs, Rng& rng,
                      const std::function<TensorD()>& fn, double eps = 1e-5) {
    TensorD w;
    {
        NoGradGuard ng;
        auto out = fn();
        w = rand(out.shape(), rng);
        w.set_requires_grad(false);
    }
    auto r = grad_check([&] { return sum(mul(fn(), w)); }, std::move(inputs), eps);
    return outcome("ops", op, r);
}

void op_checks(std::vector<CheckOutcome>& out, Rng& rng) {
    auto a = rand({3, 4}, rng), b = rand({3, 4}, rng);
    out.push_back(op_check("add", {a, b}, rng, [&] { return add(a, b); }));
    out.push_back(op_check("sub", {a, b}, rng, [&] { return sub(a, b); }));
    out.push_back(op_check("mul", {a, b}, rng, [&] { return mul(a, b); }));
    auto s1 = rand({1}, rng);
    out.push_back(op_check("mul_broadcast", {a, s1}, rng, [&] { return mul(a, s1); }));
    out.push_back(op_check("scale", {a}, rng, [&] { return scale(a, 1.7); }));
    out.push_back(op_check("add_scalar", {a}, rng, [&] { return add_scalar(a, -0.3); }));
    out.push_back(op_check("sigmoid", {a}, rng, [&] { return sigmoid(a); }));
    out.push_back(op_check("exp", {a}, rng, [&] { return exp(scale(a, 0.5)); }));
    out.push_back(op_check("relu", {a}, rng, [&] { return relu(a); }));
    out.push_back(op_check("gelu", {a}, rng, [&] { return gelu(a); }));
    out.push_back(op_check("square", {a}, rng, [&] { return square(a); }));
    auto bias = rand({4}, rng);
    out.push_back(op_check("add_bias", {a, bias}, rng, [&] { return add_bias(a, bias); }));
    auto m = rand({4, 5}, rng);
    out.push_back(op_check("matmul", {a, m}, rng, [&] { return matmul(a, m); }));
    auto ba = rand({2, 3, 4}, rng), bb = rand({2, 4, 5}, rng), bt = rand({2, 5, 4}, rng);
    out.push_back(op_check("bmm", {ba, bb}, rng, [&] { return bmm(ba, bb); }));
    out.push_back(op_check("bmm_trans", {ba, bt}, rng, [&] { return bmm(ba, bt, true); }));
    out.push_back(op_check("softmax", {a}, rng, [&] { return softmax(a, 1); }));
    out.push_back(op_check("softmax_axis0", {ba}, rng, [&] { return softmax(ba, 0); }));
    out.push_back(op_check("sum", {a}, rng, [&] { return sum(a); }));
    out.push_back(op_check("mean", {a}, rng, [&] { return mean(a); }));
    out.push_back(op_check("sum_last", {ba}, rng, [&] { return sum_last(ba); }));
    out.push_back(op_check("reshape", {a}, rng, [&] { return reshape(a, {4, 3}); }));
    out.push_back(op_check("permute", {ba}, rng, [&] { return permute(ba, {2, 0, 1}); }));
    auto c2 = rand({3, 2}, rng);
    out.push_back(op_check("concat", {a, c2}, rng, [&] { return concat(a, c2, 1); }));
    out.push_back(op_check("narrow", {a}, rng, [&] { return narrow(a, 1, 1, 2); }));
    auto e = rand({2, 1, 3}, rng);
    out.push_back(op_check("expand", {e}, rng, [&] { return expand(e, 1, 4); }));
    out.push_back(op_check("take_rows", {a}, rng, [&] { return take_rows(a, {2, 0, 2}); }));

    auto lw = rand({5, 4}, rng), lb = rand({5}, rng);
    out.push_back(op_check("linear", {a, lw, lb}, rng, [&] { return nn::linear_forward(a, lw, lb); }));
    auto img = rand({2, 2, 5, 5}, rng), ker = rand({3, 2, 3, 3}, rng), kb = rand({3}, rng);
    out.push_back(op_check("conv2d", {img, ker, kb}, rng, [&] { return nn::conv2d_forward(img, ker, kb, 1, 1); }));
    auto g = rand({4}, rng, 0.3, 1.0), be = rand({4}, rng);
    out.push_back(op_check("layer_norm", {a, g, be}, rng, [&] { return nn::layer_norm_forward(a, g, be, 1e-5); }));
    out.push_back(
        op_check("cross_entropy", {a}, rng, [&] { return nn::cross_entropy_per_sample(a, {0, 3, 1}); }));
    auto pool_in = rand({2, 2, 4, 4}, rng);
    out.push_back(op_check("avg_pool2d", {pool_in}, rng, [&] { return nn::avg_pool2d(pool_in, 2); }));
    out.push_back(op_check("global_avg_pool", {pool_in}, rng, [&] { return nn::global_avg_pool(pool_in); }));
    auto scores = rand({2, 4}, rng);
    out.push_back(
        op_check("bilinear_upsample", {scores}, rng, [&] { return vit::bilinear_upsample(scores, 5, 7); }));
    auto patches_in = rand({1, 2, 4, 4}, rng);
    out.push_back(
        op_check("extract_patches", {patches_in}, rng, [&] { return vit::extract_patches(patches_in, 2); }));
    auto px = rand({2, 3, 4, 4}, rng), pm = rand({2, 1, 4, 4}, rng, 0.2, 0.5);
    auto noise = rand({2, 3, 4, 4}, rng, 0.5);
    noise.set_requires_grad(false);
    out.push_back(op_check("perturb", {px, pm}, rng, [&] { return train::perturb(px, pm, noise); }));
}

classifier::CnnClassifier<D> small_cnn(Rng& rng) {
    classifier::CnnConfig cfg;
    cfg.channels = {4, 8};
    classifier::CnnClassifier<D> cnn(cfg, rng);
    // positive biases keep ReLUs mostly active, away from tiny gradients
    for (auto& conv : cnn.convs())
        for (auto& v : conv.bias.data()) v = 0.3 + 0.1 * rng.normal();
    return cnn;
}

vit::ViTConfig small_vit() {
    vit::ViTConfig v;
    v.patch_size = 8;
    v.embed_dim = 16;
    v.depth = 1;
    v.heads = 2;
    return v;
}

// Moves every parameter off its initialisation so no gradient is
// structurally tiny.
void jitter(const nn::NamedParams<D>& params, Rng& rng, double scale) {
    for (const auto& [name, t] : params) {
        Tensor<D> h = t;
        for (auto& v : h.data()) v += scale * rng.normal();
    }
}

void layer_checks(std::vector<CheckOutcome>& out, Rng& rng) {
    const std::vector<int> labels{1, 0, 2};
    {
        nn::Linear<D> lin(4, 3, rng, 0.5);
        auto x = rand({3, 4}, rng);
        auto r = grad_check([&] { return nn::cross_entropy(lin(x), labels); }, {x, lin.weight, lin.bias});
        out.push_back(outcome("layers", "linear", r));
    }
    {
        nn::Conv2d<D> conv(2, 3, 3, 1, 1, rng);
        auto x = rand({2, 2, 5, 5}, rng);
        auto w = rand({2, 3, 5, 5}, rng);
        w.set_requires_grad(false);
        auto r = grad_check([&] { return sum(mul(conv(x), w)); }, {x, conv.kernel, conv.bias});
        out.push_back(outcome("layers", "conv2d", r));
    }
    {
        nn::LayerNorm<D> ln(6);
        jitter({{"g", ln.gamma}, {"b", ln.beta}}, rng, 0.3);
        auto x = rand({3, 6}, rng);
        auto w = rand({3, 6}, rng);
        w.set_requires_grad(false);
        auto r = grad_check([&] { return sum(mul(ln(x), w)); }, {x, ln.gamma, ln.beta});
        out.push_back(outcome("layers", "layer_norm", r));
    }
    {
        auto cnn = small_cnn(rng);
        jitter({{"fc", cnn.fc().weight}}, rng, 0.5);
        auto x = rand({2, 3, 8, 8}, rng);
        x.set_requires_grad(false);
        auto r = grad_check([&] { return nn::cross_entropy(cnn.logits(x), {0, 1}); }, nn::tensors_of(cnn.params()),
                            1e-4);
        out.push_back(outcome("layers", "cnn_classifier", r));
    }
    {
        vit::EncoderBlock<D> block(8, 2, 16, rng);
        nn::NamedParams<D> params;
        block.collect(params, "block");
        jitter(params, rng, 0.2);
        auto x = rand({2, 3, 8}, rng);
        auto w = rand({2, 3, 8}, rng);
        w.set_requires_grad(false);
        auto inputs = nn::tensors_of(params);
        inputs.push_back(x);
        auto r = grad_check([&] { return sum(mul(block(x), w)); }, inputs);
        out.push_back(outcome("layers", "encoder_block", r));
    }
}

void vit_checks(std::vector<CheckOutcome>& out, Rng& rng) {
    auto cnn = small_cnn(rng);
    vit::VisionTransformer<D> model(small_vit(), rng);
    jitter(model.params(), rng, 0.3);
    auto x = rand({2, 3, 32, 32}, rng);
    x.set_requires_grad(false);
    const std::vector<int> labels{0, 1};
    {
        auto& head = model.mask_head();
        auto r = grad_check(
            [&] {
                auto mask = model.forward(x).mask;
                return nn::cross_entropy(cnn.logits(mul(expand(mask, 1, 3), x)), labels);
            },
            {head.weight, head.bias});
        out.push_back(outcome("vit", "mask_path", r));
    }
    {
        auto w = rand({2, 1, 32, 32}, rng);
        w.set_requires_grad(false);
        auto r = grad_check(
            [&] {
                auto o = model.forward(x);
                return add(sum(mul(o.mask, w)), nn::cross_entropy(o.confidence.logits, labels));
            },
            nn::tensors_of(model.params()), 1e-3, Stencil::five_point);
        out.push_back(outcome("vit", "encoder_and_heads", r));
    }
}

void objective_checks(std::vector<CheckOutcome>& out, Rng& rng) {
    auto z = rand({6, 2}, rng);
    const std::vector<int> y{0, 1, 1, 0, 1, 0};
    const std::vector<int> d{0, 0, 1, 1, 2, 2};
    for (auto kind : {objectives::Objective::erm, objectives::Objective::irm, objectives::Objective::vrex,
                      objectives::Objective::irmx, objectives::Objective::groupdro}) {
        objectives::ObjectiveConfig cfg;
        cfg.kind = kind;
        cfg.groupdro_eta = 0.0;  // q is a constant of each step
        auto r = grad_check(
            [&] {
                objectives::ObjectiveState s(cfg);
                s.set_epoch(cfg.irm_anneal_epochs);
                return objectives::objective_loss(z, y, d, s).loss;
            },
            {z});
        out.push_back(outcome("objectives", std::string(objectives::objective_name(kind)), r));
    }
}

void eq3_checks(std::vector<CheckOutcome>& out, Rng& rng) {
    auto c = TensorD({7}, {0.0, 0.1, 0.5, 0.74, 0.75, 0.9, 1.0}, true);
    auto w = rand({7}, rng);
    w.set_requires_grad(false);
    auto r = grad_check([&] { return sum(mul(train::adaptive_weight(c, 0.75, 8.0), w)); }, {c});
    out.push_back(outcome("eq3", "adaptive_weight", r));

    // closed-form derivative against central differences of the scalar form
    GradCheckResult s;
    for (double cv : c.values()) {
        const double h = 1e-6;
        const double fd =
            (train::adaptive_weight(cv + h, 0.75, 8.0) - train::adaptive_weight(cv - h, 0.75, 8.0)) / (2 * h);
        const double ad = train::adaptive_weight_derivative(cv, 0.75, 8.0);
        const double err = std::abs(ad - fd) / std::max(1e-12, std::abs(ad) + std::abs(fd));
        ++s.coordinates;
        if (err > s.max_relative_error) {
            s.max_relative_error = err;
            s.worst_analytic = ad;
            s.worst_numeric = fd;
        }
    }
    out.push_back(outcome("eq3", "adaptive_weight_derivative", s));
}

void eq4_checks(std::vector<CheckOutcome>& out, Rng& rng, std::uint64_t seed) {
    auto lo = TensorD::scalar(0.8, true), lv = TensorD::scalar(1.3, true);
    auto adv = TensorD({3}, {0.4, 1.1, 2.0}, true);
    const std::vector<double> lambda{0.55, 0.75, 0.93};
    auto r = grad_check([&] { return train::total_loss(lo, lv, adv, 0.1, lambda).loss; }, {lo, lv, adv});
    out.push_back(outcome("eq4", "total_loss", r));
    (void)rng;
    out.push_back(full_pipeline_check(seed));
}

}  // namespace

const std::vector<std::string>& scopes() {
    static const std::vector<std::string> s{"ops", "layers", "vit", "objectives", "eq3", "eq4", "all"};
    return s;
}

CheckOutcome full_pipeline_check(std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "gradcheck.pipeline");
    train::ModelConfig cfg;
    cfg.vit = small_vit();
    cfg.cnn.channels = {4, 8};
    auto models = train::Models<D>::create(cfg, seed);
    jitter(models.vit.params(), rng, 0.3);
    // Small kernels under large conv biases keep every ReLU far from its
    // kink, so the wide five-point step never straddles one.
    for (auto& conv : models.cnn.convs()) {
        for (auto& v : conv.kernel.data()) v *= 0.1;
        for (auto& v : conv.bias.data()) v = 4.0 + 0.1 * rng.normal();
    }
    // ...which inflates the features, so shrink the classifier to keep the
    // loss near O(1) where rounding in the FD quotient is smallest.
    for (auto& v : models.cnn.fc().weight.data()) v = 0.1 * v + 0.05 * rng.normal();

    auto ds = data::generate(data::default_domains(2), seed);
    const std::vector<std::size_t> idx{0, 3};
    auto batch = train::prepare_batch(ds, idx, nullptr);
    auto x = data::to_tensor<D>(batch);
    train::CgpHyper hyper;
    auto noise = train::gaussian_noise<D>(x.shape(), hyper.sigma_noise, rng);
    objectives::ObjectiveState objective;

    // λ_adv is a stop-gradient quantity: fix it at the base point.
    std::vector<double> lambda;
    {
        NoGradGuard ng;
        lambda = train::cgp_loss(models, x, batch.labels, batch.domains, hyper, objective, noise).breakdown.lambda_adv;
    }
    auto r = grad_check(
        [&] { return train::cgp_loss(models, x, batch.labels, batch.domains, hyper, objective, noise, lambda).loss; },
        nn::tensors_of(models.params(true)), 1e-3, Stencil::five_point);
    return outcome("eq4", "full_pipeline", r);
}

std::vector<CheckOutcome> run_gradchecks(std::string_view scope, std::uint64_t seed) {
    bool known = false;
    for (const auto& s : scopes()) known = known || s == scope;
    if (!known) throw ConfigError("unknown gradcheck scope '" + std::string(scope) + "'");
    const bool all = scope == "all";
    std::vector<CheckOutcome> out;
    Rng rng = Rng::stream(seed, "gradcheck");
    if (all || scope == "ops") op_checks(out, rng);
    if (all || scope == "layers") layer_checks(out, rng);
    if (all || scope == "vit") vit_checks(out, rng);
    if (all || scope == "objectives") objective_checks(out, rng);
    if (all || scope == "eq3") eq3_checks(out, rng);
    if (all || scope == "eq4") eq4_checks(out, rng, seed);
    return out;
}

std::string format(const CheckOutcome& c) {
    std::ostringstream os;
    os << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(36) << c.name << " max_rel_err=" << std::scientific
       << std::setprecision(2) << c.error << " (" << c.coordinates << " coords)";
    if (!c.passed) os << "  " << c.detail;
    return os.str();
}

}  // namespace cgp::verify
