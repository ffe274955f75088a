#include <cmath>
#include <numeric>
#include <vector>

#include "cgp/cgp.hpp"
#include "cgp/errors.hpp"
#include "cgp/gradcheck.hpp"
#include "cgp/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cgp;
using namespace cgp::train;

namespace {

ModelConfig tiny_models() {
    ModelConfig cfg;
    cfg.vit.patch_size = 8;
    cfg.vit.embed_dim = 16;
    cfg.vit.depth = 1;
    cfg.vit.heads = 2;
    cfg.cnn.channels = {4, 8};
    return cfg;
}

data::Batch batch_of(const data::Dataset& ds, std::vector<std::size_t> idx) {
    return prepare_batch(ds, idx, nullptr);
}

template <typename T>
void force_identity_mask(Models<T>& m) {
    // sigmoid(40) rounds to 1 in both precisions
    for (auto& v : m.vit.mask_head().weight.data()) v = T(0);
    for (auto& v : m.vit.mask_head().bias.data()) v = T(40);
}

template <typename T>
std::vector<std::vector<T>> snapshot(const nn::NamedParams<T>& params) {
    std::vector<std::vector<T>> out;
    for (const auto& [name, t] : params) out.emplace_back(t.values());
    return out;
}

TrainOptions quick_options(std::size_t s1, std::size_t s2, std::uint64_t seed) {
    TrainOptions o;
    o.hyper.stage1_epochs = s1;
    o.hyper.stage2_epochs = s2;
    o.hyper.batch_size = 8;
    o.hyper.seed = seed;
    return o;
}

}  // namespace

TEST_CASE("adaptive weight") {
    CHECK(adaptive_weight(0.75, 0.75, 8) == 0.75);
    CHECK(adaptive_weight(1.0, 0.75, 8) == doctest::Approx(0.940398538988941).epsilon(1e-12));
    CHECK(adaptive_weight(0.0, 0.75, 8) == doctest::Approx(0.501236311578317).epsilon(1e-12));

    SUBCASE("strictly increasing and bounded on [0,1]") {
        Rng rng(1);
        for (int i = 0; i < 2000; ++i) {
            double a = rng.uniform(), b = rng.uniform();
            const double k = rng.uniform(0.5, 20), tau = rng.uniform(0.05, 0.95);
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            const double la = adaptive_weight(a, tau, k), lb = adaptive_weight(b, tau, k);
            // differences below double resolution of the logistic are ties
            CHECK(lb >= la);
            if (b - a > 1e-3) CHECK(lb > la);
            CHECK(la > 2 * tau - 1);
            CHECK(lb < 1.0);
        }
        for (double tau : {0.1, 0.5, 0.75, 0.9}) CHECK(adaptive_weight(tau, tau, 3.0) == doctest::Approx(tau).epsilon(1e-15));
    }
    SUBCASE("derivative matches central differences") {
        for (double c : {0.0, 0.3, 0.75, 0.9, 1.0}) {
            const double h = 1e-6;
            const double fd = (adaptive_weight(c + h, 0.75, 8) - adaptive_weight(c - h, 0.75, 8)) / (2 * h);
            CHECK(adaptive_weight_derivative(c, 0.75, 8) == doctest::Approx(fd).epsilon(1e-7));
        }
    }
    SUBCASE("tensor form agrees with the scalar form and differentiates") {
        Tensor<double> c({5}, {0.0, 0.3, 0.75, 0.9, 1.0}, true);
        auto l = adaptive_weight(c, 0.75, 8.0);
        for (std::size_t i = 0; i < 5; ++i)
            CHECK(l.values()[i] == doctest::Approx(adaptive_weight(c.values()[i], 0.75, 8)).epsilon(1e-14));
        backward(sum(l));
        for (std::size_t i = 0; i < 5; ++i)
            CHECK(c.grad()[i] == doctest::Approx(adaptive_weight_derivative(c.values()[i], 0.75, 8)).epsilon(1e-12));
    }
}

TEST_CASE("perturb") {
    Rng rng(2);
    auto x = testing::random_tensor<double>({2, 3, 4, 4}, rng);

    SUBCASE("M = 1 is the identity, bitwise") {
        auto fx = testing::random_tensor<float>({2, 3, 4, 4}, rng);
        auto out = perturb(fx, Tensor<float>::full({2, 1, 4, 4}, 1.0f), 0.7, rng);
        CHECK(out.values() == fx.values());
    }
    SUBCASE("M = 0 with sigma = 0 is zero") {
        auto out = perturb(x, Tensor<double>::zeros({2, 1, 4, 4}), 0.0, rng);
        for (double v : out.values()) CHECK(v == 0.0);
    }
    SUBCASE("noise moments for M = 0, sigma = 0.5") {
        const std::size_t n = 1000000;
        Rng noise(3);
        auto out = perturb(Tensor<double>::zeros({1, 1, 1000, 1000}), Tensor<double>::zeros({1, 1, 1000, 1000}), 0.5,
                           noise);
        const auto& v = out.values();
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
        double var = 0;
        for (double e : v) var += (e - m) * (e - m);
        var /= n - 1;
        CHECK(std::abs(m) < 3 * 0.5 / std::sqrt(double(n)));
        CHECK(std::abs(var - 0.25) < 0.0025);
    }
    SUBCASE("expectation is x times M") {
        Rng noise(4);
        Tensor<double> x1({1, 1, 1, 1}, {1.5});
        Tensor<double> m1({1, 1, 1, 1}, {0.3});
        const int trials = 200000;
        double acc = 0;
        for (int i = 0; i < trials; ++i) acc += perturb(x1, m1, 1.0, noise).item();
        // the noise part has std 0.7 per draw
        CHECK(std::abs(acc / trials - 0.45) < 3 * 0.7 / std::sqrt(double(trials)));
    }
    SUBCASE("noise is per element, shared mask across channels") {
        Rng noise(5);
        auto eps = gaussian_noise<double>({1, 3, 2, 2}, 1.0, noise);
        Tensor<double> m({1, 1, 2, 2}, {0.0, 1.0, 0.5, 0.25});
        auto x3 = testing::random_tensor<double>({1, 3, 2, 2}, rng);
        auto out = perturb(x3, m, eps);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t p = 0; p < 4; ++p) {
                const std::size_t j = ch * 4 + p;
                const double mv = m.values()[p];
                CHECK(out.values()[j] ==
                      doctest::Approx(x3.values()[j] * mv + (1 - mv) * eps.values()[j]).epsilon(1e-14));
            }
        CHECK(eps.values()[0] != eps.values()[4]);
    }
    SUBCASE("gradients reach x and M, not the noise") {
        auto xg = x.clone();
        xg.set_requires_grad(true);
        Rng r2(6);
        auto m = testing::random_tensor<double>({2, 1, 4, 4}, r2, true);
        auto eps = gaussian_noise<double>({2, 3, 4, 4}, 0.5, r2);
        auto w = testing::random_tensor<double>({2, 3, 4, 4}, r2);
        auto res = grad_check([&] { return sum(mul(perturb(xg, m, eps), w)); }, {xg, m});
        CHECK(res.max_relative_error < 1e-8);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(perturb(x, Tensor<double>::zeros({2, 3, 4, 4}), 0.1, rng), DimensionError);
        CHECK_THROWS_AS(perturb(x, Tensor<double>::zeros({1, 1, 4, 4}), 0.1, rng), DimensionError);
        CHECK_THROWS_AS(perturb(x, Tensor<double>::zeros({2, 1, 4, 4}), Tensor<double>::zeros({2, 3, 4, 5})),
                        DimensionError);
    }
}

TEST_CASE("total loss") {
    auto s = [](double v) { return Tensor<double>::scalar(v); };
    SUBCASE("worked example") {
        auto wl = total_loss(s(1), s(2), Tensor<double>({1}, {3.0}), 0.1, {0.5});
        CHECK(wl.loss.item() == doctest::Approx(2.7).epsilon(1e-14));
        CHECK(wl.breakdown.l_adv == 3.0);
        CHECK(wl.breakdown.lambda_adv_mean == 0.5);
    }
    SUBCASE("zero weights leave l_orig") {
        auto wl = total_loss(s(1.25), s(2), Tensor<double>({3}, {3.0, 1.0, 4.0}), 0.0, {0, 0, 0});
        CHECK(wl.loss.item() == 1.25);
    }
    SUBCASE("per-sample weights are applied before the mean") {
        auto wl = total_loss(s(0.5), s(1), Tensor<double>({2}, {1.0, 3.0}), 0.1, {0.5, 0.9});
        // 0.5 + 0.1 + (0.5 + 2.7) / 2
        CHECK(wl.loss.item() == doctest::Approx(2.2).epsilon(1e-14));
        CHECK(wl.breakdown.reconstruct(0.1) == doctest::Approx(wl.breakdown.l_total).epsilon(1e-12));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(total_loss(s(-1), s(2), Tensor<double>({1}, {3.0}), 0.1, {0.5}), ContractError);
        CHECK_THROWS_AS(total_loss(s(1), s(-2), Tensor<double>({1}, {3.0}), 0.1, {0.5}), ContractError);
        CHECK_THROWS_AS(total_loss(s(1), s(2), Tensor<double>({1}, {-3.0}), 0.1, {0.5}), ContractError);
        CHECK_THROWS_AS(total_loss(s(1), s(2), Tensor<double>({1}, {3.0}), -0.1, {0.5}), ContractError);
        CHECK_THROWS_AS(total_loss(s(1), s(2), Tensor<double>({2}, {3.0, 1.0}), 0.1, {0.5}), DimensionError);
    }
}

TEST_CASE("hyper validation") {
    CgpHyper h;
    CHECK_NOTHROW(h.validate());
    auto bad = [&](auto mutate) {
        CgpHyper b;
        mutate(b);
        CHECK_THROWS_AS(b.validate(), ConfigError);
    };
    bad([](CgpHyper& b) { b.sigma_noise = -0.1; });
    bad([](CgpHyper& b) { b.tau = 1.0; });
    bad([](CgpHyper& b) { b.tau = 0.0; });
    bad([](CgpHyper& b) { b.steepness = 0.0; });
    bad([](CgpHyper& b) { b.lambda_vit = -1.0; });
    bad([](CgpHyper& b) { b.batch_size = 0; });
    bad([](CgpHyper& b) { b.momentum = 1.0; });
}

TEST_CASE("cgp loss") {
    const auto ds = data::generate(data::default_domains(4), 21);
    const auto batch = batch_of(ds, {0, 5, 9, 14});
    const auto x = data::to_tensor<double>(batch);
    auto models = Models<double>::create(tiny_models(), 3);
    objectives::ObjectiveState erm;

    SUBCASE("degenerate configuration reduces every CNN term to ERM") {
        force_identity_mask(models);
        CgpHyper h;
        h.sigma_noise = 0;
        h.lambda_vit = 0;
        Rng r(1);
        auto wl = cgp_loss(models, x, batch.labels, batch.domains, h, erm, gaussian_noise<double>(x.shape(), 0.0, r));
        const double erm_loss = nn::cross_entropy(models.cnn.logits(x), batch.labels).item();
        CHECK(std::abs(wl.breakdown.l_orig - erm_loss) < 1e-12);
        CHECK(std::abs(wl.breakdown.l_adv - erm_loss) < 1e-12);
        CHECK(std::abs(wl.breakdown.l_total - wl.breakdown.reconstruct(0.0)) < 1e-12);
    }
    SUBCASE("breakdown reconstructs the total") {
        CgpHyper h;
        Rng r(2);
        auto wl = cgp_loss(models, x, batch.labels, batch.domains, h, erm, gaussian_noise<double>(x.shape(), 0.5, r));
        CHECK(wl.breakdown.lambda_adv.size() == 4);
        for (double l : wl.breakdown.lambda_adv) {
            CHECK(l > 0.5);
            CHECK(l < 0.95);
        }
        CHECK(std::abs(wl.breakdown.reconstruct(h.lambda_vit) - wl.breakdown.l_total) < 1e-6);
    }
    SUBCASE("gradient with respect to the mask head matches finite differences") {
        Rng r(4);
        auto& head = models.vit.mask_head();
        for (auto& v : head.weight.data()) v = 0.3 * r.normal();
        for (auto& v : head.bias.data()) v = 0.1;
        const auto small = batch_of(ds, {1, 6});
        const auto x2 = data::to_tensor<double>(small);
        CgpHyper h;
        Rng nr(5);
        const auto eps = gaussian_noise<double>(x2.shape(), 0.5, nr);
        auto res = grad_check(
            [&] { return cgp_loss(models, x2, small.labels, small.domains, h, erm, eps).loss; },
            {head.weight, head.bias}, 1e-5);
        CHECK_MESSAGE(res.max_relative_error < 1e-5, res.worst_analytic << " vs " << res.worst_numeric);
    }
}

TEST_CASE("train step") {
    const auto ds = data::generate(data::default_domains(4), 22);
    const auto batch = batch_of(ds, {0, 1, 4, 8, 9, 12});
    CgpHyper h;

    SUBCASE("same batch from a fresh state is bit-identical") {
        std::vector<LossBreakdown> runs;
        std::vector<std::vector<std::vector<float>>> params;
        for (int rep = 0; rep < 2; ++rep) {
            auto m = Models<float>::create(tiny_models(), 9);
            nn::Sgd<float> sgd(nn::tensors_of(m.params(true)), 0.01, 0.9);
            objectives::ObjectiveState obj;
            Rng noise = Rng::stream(9, "noise");
            runs.push_back(train_step(m, sgd, batch, h, obj, noise, true));
            params.push_back(snapshot(m.params(true)));
        }
        CHECK(runs[0].l_total == runs[1].l_total);
        CHECK(runs[0].lambda_adv == runs[1].lambda_adv);
        CHECK(runs[0].adv_loss == runs[1].adv_loss);
        CHECK(params[0] == params[1]);
    }
    SUBCASE("CGP updates CNN and ViT parameters") {
        auto m = Models<float>::create(tiny_models(), 10);
        const auto before = snapshot(m.params(true));
        nn::Sgd<float> sgd(nn::tensors_of(m.params(true)), 0.01, 0.9);
        objectives::ObjectiveState obj;
        Rng noise(1);
        train_step(m, sgd, batch, h, obj, noise, true);
        const auto after = snapshot(m.params(true));
        const auto names = m.params(true);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK_MESSAGE(before[i] != after[i], names[i].first);
    }
    SUBCASE("baseline leaves the ViT alone") {
        auto m = Models<float>::create(tiny_models(), 10);
        const auto vit_before = snapshot(m.vit.params());
        nn::Sgd<float> sgd(nn::tensors_of(m.params(false)), 0.01, 0.9);
        objectives::ObjectiveState obj;
        Rng noise(1);
        vit::reset_invocation_count();
        auto bd = train_step(m, sgd, batch, h, obj, noise, false);
        CHECK(vit::invocation_count() == 0);
        CHECK(bd.l_total == bd.l_orig);
        CHECK(snapshot(m.vit.params()) == vit_before);
    }
    SUBCASE("non-finite loss aborts with the breakdown") {
        auto m = Models<float>::create(tiny_models(), 11);
        m.cnn.fc().bias.data()[0] = std::numeric_limits<float>::infinity();
        nn::Sgd<float> sgd(nn::tensors_of(m.params(true)), 0.01, 0.9);
        objectives::ObjectiveState obj;
        Rng noise(1);
        try {
            train_step(m, sgd, batch, h, obj, noise, true);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("l_orig=") != std::string::npos);
        }
    }
}

TEST_CASE("two-stage workflow") {
    const auto ds = data::generate(data::default_domains(8), 23);

    SUBCASE("trace lengths, determinism and a silent ViT in stage 2") {
        auto opts = quick_options(2, 1, 4);
        auto a = Models<float>::create(tiny_models(), 4);
        auto b = Models<float>::create(tiny_models(), 4);
        std::uint64_t counter_in_stage2 = 1;
        auto r1 = train::train(ds, a, opts);
        auto s1 = train_stage1(ds, b, opts);
        vit::reset_invocation_count();
        auto s2 = fine_tune_stage2(ds, b.cnn, opts);
        counter_in_stage2 = vit::invocation_count();
        CHECK(r1.stage1.size() == 2);
        CHECK(r1.stage2.size() == 1);
        CHECK(trace_csv(r1.stage1) == trace_csv(s1));
        CHECK(trace_csv(r1.stage2) == trace_csv(s2));
        CHECK(counter_in_stage2 == 0);
        CHECK(snapshot(a.params(true)) == snapshot(b.params(true)));
        CHECK(r1.stage1[0].l_vit > 0);
        CHECK(r1.stage2[0].l_vit == 0);
        for (const auto& rec : r1.stage1) {
            CHECK(rec.id_val_acc >= 0);
            CHECK(rec.id_val_acc <= 1);
        }
    }
    SUBCASE("baseline trains for both stage budgets") {
        auto opts = quick_options(2, 1, 4);
        opts.use_cgp = false;
        auto m = Models<float>::create(tiny_models(), 4);
        vit::reset_invocation_count();
        auto r = train::train(ds, m, opts);
        CHECK(r.stage1.size() == 3);
        CHECK(r.stage2.empty());
        CHECK(vit::invocation_count() == 0);
    }
    SUBCASE("zero stage-2 epochs keep the stage-1 model") {
        auto opts = quick_options(1, 0, 5);
        auto m = Models<float>::create(tiny_models(), 5);
        train_stage1(ds, m, opts);
        const auto before = snapshot(m.cnn.params());
        CHECK(fine_tune_stage2(ds, m.cnn, opts).empty());
        CHECK(snapshot(m.cnn.params()) == before);
    }
    SUBCASE("empty training split") {
        data::Dataset empty;
        auto m = Models<float>::create(tiny_models(), 5);
        CHECK_THROWS_AS(train_stage1(empty, m, quick_options(1, 1, 1)), ConfigError);
    }
    SUBCASE("trace csv") {
        Trace t{{1, 0.5, 0.25, 0.125, 0.75, 1.0, 0.5}};
        CHECK(trace_csv(t) == "epoch,l_orig,l_vit,l_adv,lambda_adv_mean,l_total,id_val_acc\n1,0.5,0.25,0.125,0.75,1,0.5\n");
    }
}

TEST_CASE("training makes progress") {
    SUBCASE("one epoch on 32 samples lowers the clean loss (majority of 5 seeds)") {
        auto specs = data::default_domains(8);
        for (auto& s : specs) s.sample_count = s.domain_id <= 2 ? 11 : 4;
        int improved = 0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const auto ds = data::generate(specs, 100 + seed);
            auto idx = ds.train_indices();
            idx.resize(32);
            auto toy = ds;  // keep the first 32 training samples only
            toy.labels.clear();
            toy.domains.clear();
            toy.pixels.clear();
            for (auto i : idx) {
                toy.labels.push_back(ds.labels[i]);
                toy.domains.push_back(ds.domains[i]);
                auto img = ds.image(i);
                toy.pixels.insert(toy.pixels.end(), img.begin(), img.end());
            }
            std::vector<std::size_t> all(32);
            std::iota(all.begin(), all.end(), 0);
            const auto full = batch_of(toy, all);
            auto clean = [&](const Models<float>& m) {
                NoGradGuard ng;
                return nn::cross_entropy(m.cnn.logits(data::to_tensor<float>(full)), full.labels).item();
            };
            auto m = Models<float>::create(tiny_models(), seed);
            const double before = clean(m);
            auto opts = quick_options(1, 0, seed);
            opts.augment = false;
            train_stage1(toy, m, opts);
            improved += clean(m) < before;
        }
        CHECK(improved >= 3);
    }
    SUBCASE("stage 2 loss is non-increasing on separable data") {
        // rho = 1: both the shape and the background separate the classes
        const auto ds = data::generate(data::default_domains(16, 1.0, 1.0), 24);
        auto m = Models<float>::create(tiny_models(), 6);
        auto opts = quick_options(0, 6, 6);
        opts.augment = false;
        opts.hyper.stage1_epochs = 1;
        opts.hyper.learning_rate = 0.005;
        auto trace = fine_tune_stage2(ds, m.cnn, opts);
        REQUIRE(trace.size() == 6);
        for (std::size_t i = 1; i < trace.size(); ++i)
            CHECK_MESSAGE(trace[i].l_total <= trace[i - 1].l_total + 1e-9, "epoch " << i + 1);
    }
}
