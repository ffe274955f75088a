#include "cgp/experiment.hpp"

#include "cgp/binary_io.hpp"

namespace cgp::experiment {

train::Trace combined_trace(const train::TrainResult& result) {
    train::Trace out = result.stage1;
    for (auto rec : result.stage2) {
        rec.epoch += result.stage1.size();
        out.push_back(rec);
    }
    return out;
}

SeedRun run_seed(const config::ExperimentConfig& cfg, const data::Dataset& ds, std::uint64_t seed,
                 const std::function<void(const train::EpochRecord&)>& on_epoch) {
    auto options = cfg.train_options(seed);
    options.on_epoch = on_epoch;
    SeedRun run{train::Models<float>::create(cfg.model_config(), seed), {}};
    auto result = train::train(ds, run.models, options);
    run.report = eval::evaluate(run.models.cnn, ds);
    run.report.label = cfg.label();
    run.report.seed = seed;
    run.report.config_fingerprint = config::fingerprint(cfg);
    run.report.trace = combined_trace(result);
    return run;
}

std::string resolved_config_file(const config::ExperimentConfig& cfg) {
    return "# fingerprint " + config::fingerprint(cfg) + "\n# version " + CGP_VERSION + "\n" +
           config::resolved_text(cfg);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    io::write_file(path.string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

classifier::CnnClassifier<float> load_cnn(const std::string& path) {
    auto records = nn::read_checkpoint(path);
    Rng rng = Rng::stream(0, "init.cnn");
    classifier::CnnClassifier<float> cnn(classifier::infer_config(records), rng);
    nn::assign_records(cnn.params(), records);
    return cnn;
}

vit::VisionTransformer<float> load_vit(const std::string& path, std::size_t heads) {
    auto records = nn::read_checkpoint(path);
    Rng rng = Rng::stream(0, "init.vit");
    vit::VisionTransformer<float> model(vit::infer_config(records, heads), rng);
    nn::assign_records(model.params(), records);
    return model;
}

void write_seed_outputs(const SeedRun& run, bool with_vit, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nn::write_checkpoint((dir / "cnn.ckpt").string(), nn::to_records(run.models.cnn.params()));
    if (with_vit) nn::write_checkpoint((dir / "vit.ckpt").string(), nn::to_records(run.models.vit.params()));
    write_text(dir / "trace.csv", train::trace_csv(run.report.trace));
    write_text(dir / "report.csv", eval::RunReport::csv_header() + "\n" + run.report.csv_row() + "\n");
    write_text(dir / "report.jsonl", run.report.jsonl() + "\n");
}

}  // namespace cgp::experiment
