#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cgp/errors.hpp"
#include "cgp/tensor.hpp"

namespace cgp {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central-difference stencils. The five-point form cancels the eps^2 term,
// which lets a deep graph use a step wide enough to rise above rounding in
// the loss without its curvature showing through.
enum class Stencil { three_point, five_point };

// Compares reverse-mode gradients of the scalar `f()` with respect to every
// tensor in `inputs` against central differences of step `eps`. Per
// coordinate the error is |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
// `f` must rebuild its graph from the current values of `inputs` each call.
template <typename F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<double>> inputs, double eps = 1e-5,
                           Stencil stencil = Stencil::three_point) {
    for (auto& x : inputs) x.zero_grad();
    {
        Tensor<double> loss = f();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite at the base point");
        backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& x : inputs) {
        analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                           : std::vector<double>(x.numel(), 0.0));
        x.zero_grad();
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        auto values = inputs[t].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            auto at = [&](double step) {
                values[i] = saved + step;
                const double v = f().item();
                values[i] = saved;
                if (!std::isfinite(v)) {
                    throw NumericError("grad_check: non-finite loss when perturbing tensor " + std::to_string(t) +
                                       " coordinate " + std::to_string(i));
                }
                return v;
            };
            const double d1 = at(eps) - at(-eps);
            const double fd = stencil == Stencil::three_point
                                  ? d1 / (2.0 * eps)
                                  : (8.0 * d1 - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            const double ad = analytic[t][i];
            const double err = std::abs(ad - fd) / std::max(1e-12, std::abs(ad) + std::abs(fd));
            ++result.coordinates;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_tensor = t;
                result.worst_index = i;
                result.worst_analytic = ad;
                result.worst_numeric = fd;
            }
        }
    }
    return result;
}

}  // namespace cgp
