#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cgp/gradcheck.hpp"

// Finite-difference verification of every backward rule, the layers, the
// ViT mask path, the adaptive weight and the composite loss, all in double
// precision. Shared by the `gradcheck` subcommand and the acceptance tests.
namespace cgp::verify {

inline constexpr double kGradTolerance = 1e-5;

struct CheckOutcome {
    std::string name;   // "<scope>:<what>", e.g. "ops:softmax"
    std::string scope;
    double error = 0;   // max relative error
    std::size_t coordinates = 0;
    bool passed = false;
    std::string detail;
};

// "ops", "layers", "vit", "objectives", "eq3", "eq4" and "all".
const std::vector<std::string>& scopes();

// Throws ConfigError for an unknown scope.
std::vector<CheckOutcome> run_gradchecks(std::string_view scope, std::uint64_t seed = 1);

// All parameters of ViT, mask head, ViT head and CNN through L_total on a
// two-sample batch. λ_adv and the noise are held at their base-point values.
CheckOutcome full_pipeline_check(std::uint64_t seed = 1);

std::string format(const CheckOutcome& c);

}  // namespace cgp::verify
