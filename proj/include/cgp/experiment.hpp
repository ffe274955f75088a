#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "cgp/config.hpp"
#include "cgp/eval.hpp"

// One training run per seed, shared by the `train` subcommand and the
// acceptance experiments.
namespace cgp::experiment {

struct SeedRun {
    train::Models<float> models;
    eval::RunReport report;  // trace holds stage 1 then stage 2, epochs numbered on
};

SeedRun run_seed(const config::ExperimentConfig& cfg, const data::Dataset& ds, std::uint64_t seed,
                 const std::function<void(const train::EpochRecord&)>& on_epoch = {});

// Stage-2 epochs renumbered to follow stage 1.
train::Trace combined_trace(const train::TrainResult& result);

// Resolved config preceded by fingerprint and version comment lines.
std::string resolved_config_file(const config::ExperimentConfig& cfg);

// cnn.ckpt, vit.ckpt (CGP runs only), trace.csv, report.csv, report.jsonl.
void write_seed_outputs(const SeedRun& run, bool with_vit, const std::filesystem::path& dir);

// Architecture rebuilt from the checkpoint shapes. Throws LoadError.
classifier::CnnClassifier<float> load_cnn(const std::string& path);
vit::VisionTransformer<float> load_vit(const std::string& path, std::size_t heads);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace cgp::experiment
