#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cgp/cgp.hpp"

// Flat `key = value` experiment configuration. Lines starting with '#' and
// blank lines are ignored. Values given later override earlier ones only
// through apply(); a file may set each key once.
namespace cgp::config {

struct ExperimentConfig {
    // "synthetic" generates the dataset from the recipe below; anything else
    // is a path to a CGPD file.
    std::string dataset = "synthetic";
    std::size_t per_domain = 500;
    double rho_train = 0.9;
    double rho_ood = 0.1;
    std::uint64_t data_seed = 0;

    bool cgp = true;
    bool augment = true;
    train::CgpHyper hyper;
    objectives::ObjectiveConfig objective;
    vit::ViTConfig vit;
    classifier::CnnConfig cnn;

    std::vector<std::uint64_t> seeds{1};
    std::string output_dir = "runs";

    // "erm", "irm+cgp", ...
    std::string label() const;
    train::TrainOptions train_options(std::uint64_t seed) const;
    train::ModelConfig model_config() const;
};

using Override = std::pair<std::string, std::string>;

// Every key accepted by apply(), in the order resolved_text() writes them.
const std::vector<std::string>& keys();

// Sets one key. Throws ConfigError for an unknown key or a malformed value.
void apply(ExperimentConfig& cfg, std::string_view key, std::string_view value);

// Range checks across all fields. Throws ConfigError naming the key.
void validate(const ExperimentConfig& cfg);

// Defaults, then `text`, then validation. `source` prefixes error messages.
ExperimentConfig parse(std::string_view text, std::string_view source = "config");
ExperimentConfig load(const std::string& path);

// Defaults < file (when `path` is non-empty) < overrides, validated once at
// the end.
ExperimentConfig resolve(const std::string& path, const std::vector<Override>& overrides);

// Every key with its effective value; parse(resolved_text(c)) == c.
std::string resolved_text(const ExperimentConfig& cfg);

// 16 hex digits over the resolved text (output_dir excluded) and the
// library version.
std::string fingerprint(const ExperimentConfig& cfg);

// "1,2,3", "1..5" or "[1..5]".
std::vector<std::uint64_t> parse_seeds(std::string_view text);

data::Dataset load_dataset(const ExperimentConfig& cfg);

}  // namespace cgp::config
