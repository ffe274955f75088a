// cgp_cli: generate-data | train | evaluate | visualize | gradcheck
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// Relative output paths are placed under $CGP_OUTPUT_ROOT when it is set.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgp/config.hpp"
#include "cgp/errors.hpp"
#include "cgp/experiment.hpp"
#include "cgp/verify.hpp"

namespace fs = std::filesystem;
using namespace cgp;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

fs::path output_path(const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) {
        if (const char* root = std::getenv("CGP_OUTPUT_ROOT"); root != nullptr && *root != '\0')
            return fs::path(root) / path;
    }
    return path;
}

// ---- generate-data ----

struct GenerateArgs {
    std::string out;
    std::uint64_t seed = 0;
    std::size_t per_domain = 500;
    double rho_train = 0.9;
    double rho_ood = 0.1;
};

int generate_data(const GenerateArgs& a) {
    if (!(a.rho_train >= 0 && a.rho_train <= 1)) throw ConfigError("--rho-train must lie in [0, 1]");
    if (!(a.rho_ood >= 0 && a.rho_ood <= 1)) throw ConfigError("--rho-ood must lie in [0, 1]");
    if (a.per_domain == 0) throw ConfigError("--per-domain must be positive");
    auto ds = data::generate(data::default_domains(a.per_domain, a.rho_train, a.rho_ood), a.seed);
    const auto path = output_path(a.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    data::write_dataset(ds, path.string());
    std::printf("wrote %zu samples to %s\n", ds.size(), path.string().c_str());
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string objective, cgp, seeds, dataset, output_dir;
    bool quiet = false;
};

std::vector<config::Override> overrides_of(const TrainArgs& a) {
    std::vector<config::Override> out;
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    // dedicated flags apply last
    if (!a.objective.empty()) out.emplace_back("objective", a.objective);
    if (!a.cgp.empty()) out.emplace_back("cgp", a.cgp);
    if (!a.seeds.empty()) out.emplace_back("seeds", a.seeds);
    if (!a.dataset.empty()) out.emplace_back("dataset", a.dataset);
    if (!a.output_dir.empty()) out.emplace_back("output_dir", a.output_dir);
    return out;
}

int train_cmd(const TrainArgs& a) {
    const auto cfg = config::resolve(a.config_path, overrides_of(a));
    const auto run_dir = output_path(cfg.output_dir) / cfg.label();
    fs::create_directories(run_dir);
    const auto resolved = experiment::resolved_config_file(cfg);
    experiment::write_text(run_dir / "config.resolved", resolved);

    const auto ds = config::load_dataset(cfg);
    std::vector<eval::RunReport> reports;
    for (auto seed : cfg.seeds) {
        const auto seed_dir = run_dir / ("seed_" + std::to_string(seed));
        fs::create_directories(seed_dir);
        experiment::write_text(seed_dir / "config.resolved", resolved);
        std::size_t epoch = 0;
        auto run = experiment::run_seed(cfg, ds, seed, [&](const train::EpochRecord& r) {
            ++epoch;
            if (!a.quiet)
                std::printf("[%s seed %llu] epoch %zu  loss %.4f  lambda_adv %.3f  id_val %.3f\n",
                            cfg.label().c_str(), static_cast<unsigned long long>(seed), epoch, r.l_total,
                            r.lambda_adv_mean, r.id_val_acc);
            std::fflush(stdout);
        });
        experiment::write_seed_outputs(run, cfg.cgp, seed_dir);
        std::printf("%s\n", run.report.csv_row().c_str());
        reports.push_back(std::move(run.report));
    }

    std::string csv = eval::RunReport::csv_header() + "\n", jsonl;
    for (const auto& r : reports) {
        csv += r.csv_row() + "\n";
        jsonl += r.jsonl() + "\n";
    }
    experiment::write_text(run_dir / "reports.csv", csv);
    experiment::write_text(run_dir / "reports.jsonl", jsonl);
    const auto summary = cfg.label() + ": " + eval::aggregate(reports).describe() + "\n";
    experiment::write_text(run_dir / "aggregate.txt", summary);
    std::printf("%s", summary.c_str());
    return 0;
}

// ---- evaluate ----

struct EvaluateArgs {
    std::string checkpoint, dataset, out, label = "eval";
};

int evaluate_cmd(const EvaluateArgs& a) {
    auto cnn = experiment::load_cnn(a.checkpoint);
    auto ds = data::read_dataset(a.dataset);
    vit::reset_invocation_count();
    auto report = eval::evaluate(cnn, ds);
    if (vit::invocation_count() != 0) throw ContractError("evaluation invoked the ViT");
    report.label = a.label;
    std::printf("%s\n%s\n", eval::RunReport::csv_header().c_str(), report.csv_row().c_str());
    if (!a.out.empty()) {
        const auto dir = output_path(a.out);
        fs::create_directories(dir);
        experiment::write_text(dir / "report.csv", eval::RunReport::csv_header() + "\n" + report.csv_row() + "\n");
        experiment::write_text(dir / "report.jsonl", report.jsonl() + "\n");
    }
    return 0;
}

// ---- visualize ----

struct VisualizeArgs {
    std::string checkpoint, vit_checkpoint, dataset, out = "saliency";
    std::size_t n = 1;
    std::size_t heads = 4;
};

int visualize_cmd(const VisualizeArgs& a) {
    auto cnn = experiment::load_cnn(a.checkpoint);
    auto model = experiment::load_vit(a.vit_checkpoint, a.heads);
    auto ds = data::read_dataset(a.dataset);
    if (a.n == 0) return 0;
    const auto dir = output_path(a.out);
    fs::create_directories(dir);

    const std::vector<std::pair<std::string, std::vector<std::size_t>>> splits{
        {"train", ds.train_indices()},
        {"id", ds.indices_of_domain(data::kIdValidationDomain)},
        {"ood", ds.indices_of_domain(data::kOodTestDomain)},
    };
    std::size_t written = 0;
    for (const auto& [split, indices] : splits) {
        for (std::size_t k = 0; k < std::min(a.n, indices.size()); ++k) {
            const std::size_t i = indices[k];
            const std::vector<std::size_t> one{i};
            auto batch = data::make_batch(ds, one);
            data::normalize(batch);
            auto x = data::to_tensor<float>(batch);
            std::vector<double> mask_values;
            int target = 0;
            {
                NoGradGuard ng;
                target = cnn.predict(x).front();
                const auto out = model.forward(x);
                for (float v : out.mask.values()) mask_values.push_back(v);
            }
            eval::Heatmap mask{ds.height, ds.width, std::move(mask_values), false};
            const auto prefix = (dir / (split + "_" + std::to_string(i))).string();
            auto files = eval::export_saliency(ds.image(i), ds.height, ds.width, eval::cam(cnn, x, target),
                                               eval::grad_cam(cnn, x, target), mask, prefix);
            std::printf("%s\n", files.montage.c_str());
            ++written;
        }
    }
    std::printf("%zu montages in %s\n", written, dir.string().c_str());
    return 0;
}

// ---- gradcheck ----

struct GradcheckArgs {
    std::string scope = "all";
    std::string fault;
    std::uint64_t seed = 1;
};

int gradcheck_cmd(const GradcheckArgs& a) {
    if (!a.fault.empty()) set_backward_fault(a.fault);
    auto results = verify::run_gradchecks(a.scope, a.seed);
    clear_backward_fault();
    std::size_t failed = 0;
    for (const auto& c : results) {
        std::printf("%s\n", verify::format(c).c_str());
        if (!c.passed) ++failed;
    }
    std::printf("%zu checks, %zu failed (tolerance %.0e)\n", results.size(), failed, verify::kGradTolerance);
    return failed == 0 ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Causally guided perturbation training for OOD generalisation"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate-data", "Write a synthetic multi-domain dataset");
    g->add_option("--out", gen.out, "Output file")->required();
    g->add_option("--seed", gen.seed, "Generator seed");
    g->add_option("--per-domain", gen.per_domain, "Samples per domain");
    g->add_option("--rho-train", gen.rho_train, "Label/palette correlation in domains 0-3");
    g->add_option("--rho-ood", gen.rho_ood, "Label/palette correlation in domain 4");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train one configuration over its seeds");
    t->add_option("--config", tr.config_path, "key = value config file")->check(CLI::ExistingFile);
    t->add_option("--set", tr.sets, "Override a config key (key=value); repeatable");
    t->add_option("--objective", tr.objective, "erm | irm | vrex | irmx | groupdro");
    t->add_option("--cgp", tr.cgp, "on | off");
    t->add_option("--seeds", tr.seeds, "e.g. 1,2,3 or 1..5");
    t->add_option("--dataset", tr.dataset, "Dataset file, or 'synthetic'");
    t->add_option("--output-dir", tr.output_dir, "Run directory root");
    t->add_flag("--quiet", tr.quiet, "No per-epoch lines");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Accuracy of a CNN checkpoint on the train, ID and OOD splits");
    e->add_option("--checkpoint", ev.checkpoint, "cnn.ckpt")->required();
    e->add_option("--dataset", ev.dataset, "Dataset file")->required();
    e->add_option("--out", ev.out, "Directory for report.csv / report.jsonl");
    e->add_option("--label", ev.label, "Label written into the report");

    VisualizeArgs vis;
    auto* v = app.add_subcommand("visualize", "CAM, Grad-CAM and ViT mask montages");
    v->add_option("--checkpoint", vis.checkpoint, "cnn.ckpt")->required();
    v->add_option("--vit-checkpoint", vis.vit_checkpoint, "vit.ckpt")->required();
    v->add_option("--dataset", vis.dataset, "Dataset file")->required();
    v->add_option("--n", vis.n, "Samples per split");
    v->add_option("--heads", vis.heads, "ViT attention heads (not stored in checkpoints)");
    v->add_option("--out", vis.out, "Output directory");

    GradcheckArgs gc;
    auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
    c->add_option("--scope", gc.scope, "ops | layers | vit | objectives | eq3 | eq4 | all");
    c->add_option("--fault", gc.fault, "Flip the sign of one op's backward (harness self-test)");
    c->add_option("--seed", gc.seed, "Seed for the random test points");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (g->parsed()) return generate_data(gen);
        if (t->parsed()) return train_cmd(tr);
        if (e->parsed()) return evaluate_cmd(ev);
        if (v->parsed()) return visualize_cmd(vis);
        if (c->parsed()) return gradcheck_cmd(gc);
    } catch (const ConfigError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kUsageError;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kRuntimeError;
    }
    return kUsageError;
}
