// Acceptance runner: `acceptance [N ...]` checks the listed criteria (all
// when none are given) and prints one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cgp/binary_io.hpp"
#include "cgp/config.hpp"
#include "cgp/experiment.hpp"
#include "cgp/verify.hpp"

namespace fs = std::filesystem;
using namespace cgp;

namespace {

struct Verdict {
    bool passed = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("cgp_acceptance_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// ---- 1: adaptive weight ----

Verdict adaptive_weight_exactness() {
    using train::adaptive_weight;
    const double at_tau = adaptive_weight(0.75, 0.75, 8);
    const double at_one = adaptive_weight(1.0, 0.75, 8);
    const double at_zero = adaptive_weight(0.0, 0.75, 8);
    Rng rng(2024);
    std::size_t violations = 0;
    for (int i = 0; i < 10000; ++i) {
        double a = rng.uniform(), b = rng.uniform();
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        if (!(adaptive_weight(a, 0.75, 8) < adaptive_weight(b, 0.75, 8))) ++violations;
    }
    const bool ok = std::abs(at_tau - 0.75) <= 1e-12 && std::abs(at_one - 0.940399) <= 1e-5 &&
                    std::abs(at_zero - 0.501236) <= 1e-5 && violations == 0;
    return {ok, fmt("w(0.75)=%.15f w(1)=%.8f w(0)=%.8f, %zu monotonicity violations in 1e4 pairs", at_tau, at_one,
                    at_zero, violations)};
}

// ---- 2: perturbation ----

Verdict perturbation_contracts() {
    Rng rng(7);
    std::vector<float> xv(4 * 3 * 32 * 32);
    for (auto& v : xv) v = static_cast<float>(rng.normal(0.0, 2.0));
    Tensor<float> x({4, 3, 32, 32}, xv);
    auto ones = Tensor<float>::full({4, 1, 32, 32}, 1.0f);
    Rng noise_rng(8);
    auto same = train::perturb(x, ones, 0.5, noise_rng);
    const bool identity = std::equal(same.values().begin(), same.values().end(), x.values().begin());

    // 10^6 samples of perturb(x, 0, 0.5)
    Tensor<double> xd = Tensor<double>::full({1000, 1, 1, 1000}, 3.0);
    auto zeros = Tensor<double>::zeros({1000, 1, 1, 1000});
    Rng mc(9);
    auto out = train::perturb(xd, zeros, 0.5, mc);
    double mean = 0, sq = 0;
    for (double v : out.values()) mean += v;
    mean /= static_cast<double>(out.numel());
    for (double v : out.values()) sq += (v - mean) * (v - mean);
    const double var = sq / static_cast<double>(out.numel() - 1);
    // 1% of the variance 0.25 as the scale for both moments
    const bool moments = std::abs(mean) <= 0.0025 && std::abs(var - 0.25) <= 0.0025;
    return {identity && moments,
            fmt("M=1 bitwise identity: %s; M=0 moments over 1e6: mean %.5f, var %.5f (target 0, 0.25 +- 0.0025)",
                identity ? "yes" : "no", mean, var)};
}

// ---- 3: mask ----

double oracle_bilinear(const std::vector<double>& grid, std::size_t in, std::size_t out, std::size_t y,
                       std::size_t x) {
    auto coord = [&](std::size_t d) {
        double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(in - 1));
    };
    const double sy = coord(y), sx = coord(x);
    const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
    const auto y1 = std::min(y0 + 1, in - 1), x1 = std::min(x0 + 1, in - 1);
    const double fy = sy - y0, fx = sx - x0;
    auto g = [&](std::size_t r, std::size_t c) { return grid[r * in + c]; };
    return (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1 - fx) * g(y1, x0) + fx * g(y1, x1));
}

Verdict mask_contracts() {
    std::size_t outside = 0, checked = 0;
    for (std::uint64_t m = 0; m < 10; ++m) {
        Rng init = Rng::stream(m, "init.vit");
        vit::VisionTransformer<float> model(vit::ViTConfig{}, init);
        Rng rng(100 + m);
        for (auto& v : model.mask_head().weight.data()) v = static_cast<float>(rng.normal(0.0, 2.0));
        std::vector<float> xv(100 * 3 * 32 * 32);
        for (auto& v : xv) v = static_cast<float>(rng.normal(0.0, 3.0));
        NoGradGuard ng;
        auto out = model.forward(Tensor<float>({100, 3, 32, 32}, xv));
        for (float v : out.mask.values()) outside += (v < 0.0f || v > 1.0f) ? 1 : 0;
        checked += 100;
    }

    bool constant_exact = true;
    for (std::size_t size : {8u, 20u, 32u}) {
        auto up = vit::bilinear_upsample(Tensor<double>::full({1, 64}, 0.3), size, size);
        for (double v : up.values()) constant_exact = constant_exact && v == 0.3;
    }

    const std::vector<double> grid{0.1, 0.9, 0.4, 0.7};
    auto up = vit::bilinear_upsample(Tensor<double>({1, 4}, grid), 4, 4);
    double worst = 0;
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            worst = std::max(worst, std::abs(up.values()[y * 4 + x] - oracle_bilinear(grid, 2, 4, y, x)));
    return {outside == 0 && constant_exact && worst <= 1e-6,
            fmt("%zu inputs, %zu mask values outside [0,1]; constant upsampling exact: %s; 2x2->4x4 max error %.2e",
                checked, outside, constant_exact ? "yes" : "no", worst)};
}

// ---- 4: degeneracy ----

Verdict degeneracy() {
    auto ds = data::generate(data::default_domains(16), 5);
    train::ModelConfig mc;
    mc.vit.patch_size = 8;
    mc.vit.embed_dim = 32;
    mc.vit.depth = 1;
    const std::vector<std::size_t> idx{0, 5, 17, 30, 33, 41, 2, 47};
    auto batch = train::prepare_batch(ds, idx, nullptr);

    train::CgpHyper h;
    h.sigma_noise = 0;
    h.lambda_vit = 0;
    h.seed = 4;

    auto cgp = train::Models<float>::create(mc, 4);
    for (auto& v : cgp.vit.mask_head().weight.data()) v = 0;
    for (auto& v : cgp.vit.mask_head().bias.data()) v = 40;  // sigmoid rounds to 1: M = 1
    auto erm = train::Models<float>::create(mc, 4);

    nn::Sgd<float> opt_cgp(nn::tensors_of(cgp.params(true)), h.learning_rate, h.momentum);
    nn::Sgd<float> opt_erm(nn::tensors_of(erm.params(false)), h.learning_rate, h.momentum);
    objectives::ObjectiveState obj_cgp, obj_erm;
    Rng noise_cgp = Rng::stream(4, "noise"), noise_erm = Rng::stream(4, "noise");
    auto b_cgp = train::train_step(cgp, opt_cgp, batch, h, obj_cgp, noise_cgp, true);
    auto b_erm = train::train_step(erm, opt_erm, batch, h, obj_erm, noise_erm, false);

    const double d_orig = std::abs(b_cgp.l_orig - b_erm.l_total);
    const double d_adv = std::abs(b_cgp.l_adv - b_erm.l_total);
    const double d_total = std::abs(b_cgp.l_total - b_cgp.reconstruct(0.0));
    return {d_orig <= 1e-6 && d_adv <= 1e-6 && d_total <= 1e-6,
            fmt("ERM step loss %.7f; CGP step l_orig diff %.1e, l_adv diff %.1e, total = l_orig + mean(lambda*adv) "
                "diff %.1e",
                b_erm.l_total, d_orig, d_adv, d_total)};
}

// ---- 5: full-pipeline gradient check ----

Verdict gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = verify::full_pipeline_check(1);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {c.passed && c.error < 1e-5 && secs < 120,
            fmt("%zu parameters, max relative error %.2e, %.1f s", c.coordinates, c.error, secs)};
}

// ---- 6: ViT-free stage 2 and evaluation ----

Verdict two_stage() {
    auto ds = data::generate(data::default_domains(24), 6);
    train::ModelConfig mc;
    mc.vit.patch_size = 8;
    mc.vit.embed_dim = 32;
    mc.vit.depth = 1;
    auto models = train::Models<float>::create(mc, 6);
    train::TrainOptions o;
    o.hyper.stage1_epochs = 2;
    o.hyper.stage2_epochs = 2;
    o.hyper.seed = 6;
    vit::reset_invocation_count();
    train::train_stage1(ds, models, o);
    const auto during_stage1 = vit::invocation_count();
    vit::reset_invocation_count();
    train::fine_tune_stage2(ds, models.cnn, o);
    const auto after_stage2 = vit::invocation_count();
    auto report = eval::evaluate(models.cnn, ds);
    const auto after_eval = vit::invocation_count();
    return {during_stage1 > 0 && after_stage2 == 0 && after_eval == 0,
            fmt("ViT calls: stage 1 %llu, stage 2 %llu, evaluation %llu (OOD acc %.3f)",
                static_cast<unsigned long long>(during_stage1), static_cast<unsigned long long>(after_stage2),
                static_cast<unsigned long long>(after_eval), report.ood_test_acc)};
}

// ---- 7: determinism of `train` ----

int run_cli(const std::string& args) {
    const std::string cmd = "'" CGP_CLI_PATH "' " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict determinism() {
    const auto dir = scratch_dir("determinism");
    const std::string common =
        "train --quiet --seeds 3 --set per_domain=60 --set stage1_epochs=2 --set stage2_epochs=1 "
        "--set vit.patch_size=8 --set vit.embed_dim=32 --set vit.depth=1 --output-dir ";
    const auto t0 = std::chrono::steady_clock::now();
    const int a = run_cli(common + "'" + (dir / "a").string() + "'");
    const int b = run_cli(common + "'" + (dir / "b").string() + "'");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (a != 0 || b != 0) return {false, fmt("train exited with %d and %d", a, b)};
    std::size_t same = 0, files = 0;
    for (const char* f : {"trace.csv", "cnn.ckpt", "vit.ckpt", "report.jsonl"}) {
        ++files;
        const auto rel = fs::path("erm+cgp") / "seed_3" / f;
        if (io::read_file((dir / "a" / rel).string()) == io::read_file((dir / "b" / rel).string())) ++same;
    }
    fs::remove_all(dir);
    return {same == files, fmt("%zu/%zu output files byte-identical across two runs (%.1f s for both)", same, files,
                               secs)};
}

// ---- 8, 9: desk-scale experiments ----

// Desk-scale ViT: one encoder block over 16 patches of 8x8. The default
// (patch 4, D 64, depth 2) needs ~31 min for criterion 8 on one core.
config::ExperimentConfig desk_config(objectives::Objective objective, bool cgp) {
    config::ExperimentConfig cfg;
    cfg.objective.kind = objective;
    cfg.cgp = cgp;
    cfg.vit.patch_size = 8;
    cfg.vit.embed_dim = 32;
    cfg.vit.depth = 1;
    cfg.vit.heads = 4;
    config::validate(cfg);
    return cfg;
}

// Each seed gets its own draw of the default recipe.
data::Dataset desk_dataset(std::uint64_t seed) {
    return data::generate(data::default_domains(500, 0.9, 0.1), 1000 + seed);
}

eval::RunReport desk_run(const config::ExperimentConfig& cfg, std::uint64_t seed) {
    return experiment::run_seed(cfg, desk_dataset(seed), seed).report;
}

Verdict ood_experiment() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<eval::RunReport> erm, cgp;
    std::size_t improved = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        erm.push_back(desk_run(desk_config(objectives::Objective::erm, false), seed));
        cgp.push_back(desk_run(desk_config(objectives::Objective::erm, true), seed));
        if (cgp.back().ood_test_acc > erm.back().ood_test_acc) ++improved;
        std::printf("  seed %llu: ERM id %.3f ood %.3f | ERM+CGP id %.3f ood %.3f\n",
                    static_cast<unsigned long long>(seed), erm.back().id_val_acc, erm.back().ood_test_acc,
                    cgp.back().id_val_acc, cgp.back().ood_test_acc);
        std::fflush(stdout);
    }
    const auto e = eval::aggregate(erm), c = eval::aggregate(cgp);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool spurious = e.ood_test_acc.mean < e.id_val_acc.mean - 0.10;
    const bool better = c.ood_test_acc.mean > e.ood_test_acc.mean && improved >= 4;
    const bool id_close = std::abs(c.id_val_acc.mean - e.id_val_acc.mean) <= 0.05;
    return {spurious && better && id_close && secs < 1800,
            fmt("ERM id %.3f ood %.3f (gap %.3f); ERM+CGP id %.3f ood %.3f; OOD improved in %zu/5 seeds; %.0f s",
                e.id_val_acc.mean, e.ood_test_acc.mean, e.id_val_acc.mean - e.ood_test_acc.mean,
                c.id_val_acc.mean, c.ood_test_acc.mean, improved, secs)};
}

Verdict degenerate_objective_values() {
    using namespace objectives;
    auto risk = [](int d, double r) { return EnvRisk<double>{d, Tensor<double>::scalar(r), 4}; };
    const double vrex = vrex_penalty<double>({risk(0, 0.42), risk(1, 0.42), risk(2, 0.42)}).item();

    auto w = GroupWeights::uniform({0, 1, 2}, 0.01);
    w.q = {0.2, 0.3, 0.5};
    const auto before = w.q;
    groupdro_step<double>({risk(0, 0.6), risk(1, 0.6), risk(2, 0.6)}, w);
    double drift = 0;
    for (std::size_t i = 0; i < 3; ++i) drift = std::max(drift, std::abs(w.q[i] - before[i]));

    // zero logits: CE(w·0) does not depend on w
    EnvBatch<double> flat{0, Tensor<double>::zeros({4, 2}), {0, 1, 1, 0}};
    const double irm = irm_penalty<double>({flat}).item();
    return {vrex == 0.0 && drift <= 1e-15 && irm == 0.0,
            fmt("vrex(equal risks) = %g, groupdro weight drift %.1e, irm(stationary) = %g", vrex, drift, irm)};
}

Verdict objective_grid() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::pair<std::string, objectives::Objective>> objectives_{
        {"ERM", objectives::Objective::erm},
        {"IRM", objectives::Objective::irm},
        {"IRMX", objectives::Objective::irmx},
        {"GroupDRO", objectives::Objective::groupdro},
        {"VREx", objectives::Objective::vrex},
    };
    std::vector<eval::TableRow> rows;
    std::size_t completed = 0, cells = 0;
    for (bool cgp : {false, true}) {
        for (const auto& [name, kind] : objectives_) {
            ++cells;
            std::vector<eval::RunReport> runs;
            try {
                for (std::uint64_t seed = 1; seed <= 3; ++seed) runs.push_back(desk_run(desk_config(kind, cgp), seed));
                ++completed;
                rows.push_back({cgp ? "CGP" : "ERM", name, eval::aggregate(runs)});
            } catch (const std::exception& e) {
                std::printf("  cell %s/%s failed: %s\n", cgp ? "CGP" : "ERM", name.c_str(), e.what());
            }
            std::fflush(stdout);
        }
    }
    std::printf("%s", eval::results_table(rows).c_str());
    auto analytic = degenerate_objective_values();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {completed == cells && analytic.passed && secs < 7200,
            fmt("%zu/%zu cells completed over 3 seeds; %s; %.0f s", completed, cells, analytic.detail.c_str(), secs)};
}

// ---- 10: CAM == Grad-CAM ----

Verdict saliency_crosscheck() {
    double worst = 0;
    std::size_t maps = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng init = Rng::stream(seed, "init.cnn");
        classifier::CnnClassifier<double> cnn(classifier::CnnConfig{}, init);
        Rng rng(seed);
        for (auto& conv : cnn.convs())
            for (auto& v : conv.bias.data()) v = 0.1 * rng.normal();
        for (int k = 0; k < 4; ++k) {
            std::vector<double> xv(3 * 32 * 32);
            for (auto& v : xv) v = rng.normal();
            Tensor<double> x({1, 3, 32, 32}, xv);
            for (int target : {0, 1}) {
                auto a = eval::cam(cnn, x, target);
                auto b = eval::grad_cam(cnn, x, target);
                for (std::size_t i = 0; i < a.values.size(); ++i)
                    worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
                ++maps;
            }
        }
    }
    return {worst <= 1e-5, fmt("%zu map pairs, max elementwise difference after normalisation %.2e", maps, worst)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "adaptive weight exactness", adaptive_weight_exactness},
        {2, "perturbation contracts", perturbation_contracts},
        {3, "soft mask contracts", mask_contracts},
        {4, "degenerate CGP step equals ERM", degeneracy},
        {5, "full-pipeline gradient integrity", gradient_integrity},
        {6, "ViT-free stage 2 and evaluation", two_stage},
        {7, "train determinism", determinism},
        {8, "desk-scale OOD experiment", ood_experiment},
        {9, "objective grid", objective_grid},
        {10, "CAM / Grad-CAM equivalence", saliency_crosscheck},
    };
    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s criterion %d (%s): %s [%.1f s]\n", v.passed ? "PASS" : "FAIL", c.id, c.name,
                    v.detail.c_str(), secs);
        std::fflush(stdout);
        if (!v.passed) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
