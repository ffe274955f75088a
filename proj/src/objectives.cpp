#include "cgp/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cgp/nn.hpp"
#include "cgp/ops.hpp"

namespace cgp::objectives {

Objective parse_objective(std::string_view key) {
    if (key == "erm") return Objective::erm;
    if (key == "irm") return Objective::irm;
    if (key == "vrex") return Objective::vrex;
    if (key == "irmx") return Objective::irmx;
    if (key == "groupdro") return Objective::groupdro;
    throw ConfigError("unknown objective '" + std::string(key) + "' (expected erm, irm, vrex, irmx or groupdro)");
}

std::string_view objective_name(Objective o) {
    switch (o) {
        case Objective::erm: return "erm";
        case Objective::irm: return "irm";
        case Objective::vrex: return "vrex";
        case Objective::irmx: return "irmx";
        case Objective::groupdro: return "groupdro";
    }
    return "?";
}

template <typename T>
std::vector<EnvBatch<T>> split_by_domain(const Tensor<T>& logits, const std::vector<int>& labels,
                                         const std::vector<int>& domains) {
    if (labels.size() != domains.size() || logits.dim(0) != labels.size()) {
        throw DimensionError("split_by_domain: " + std::to_string(logits.dim(0)) + " logits rows, " +
                             std::to_string(labels.size()) + " labels, " + std::to_string(domains.size()) +
                             " domains");
    }
    std::map<int, std::vector<std::size_t>> rows;
    for (std::size_t i = 0; i < domains.size(); ++i) rows[domains[i]].push_back(i);
    std::vector<EnvBatch<T>> out;
    for (const auto& [domain, idx] : rows) {
        EnvBatch<T> e;
        e.domain = domain;
        e.logits = take_rows(logits, idx);
        for (auto i : idx) e.labels.push_back(labels[i]);
        out.push_back(std::move(e));
    }
    return out;
}

template <typename T>
EnvRisks<T> env_risks(const std::vector<EnvBatch<T>>& envs) {
    EnvRisks<T> out;
    for (const auto& e : envs) out.push_back({e.domain, nn::cross_entropy(e.logits, e.labels), e.labels.size()});
    return out;
}

template <typename T>
Tensor<T> erm_risk(const Tensor<T>& logits, const std::vector<int>& labels) {
    return nn::cross_entropy(logits, labels);
}

template <typename T>
Tensor<T> irm_risk_gradient(const EnvBatch<T>& env) {
    const std::size_t n = env.logits.dim(0), k = env.logits.dim(1);
    if (n == 0) throw ContractError("irm: empty environment " + std::to_string(env.domain));
    std::vector<T> onehot(n * k, T(0));
    for (std::size_t i = 0; i < n; ++i) onehot[i * k + static_cast<std::size_t>(env.labels[i])] = T(1);
    // dR/dw = mean_i Σ_k (softmax(w z_i)_k - y_ik) z_ik at w = 1
    auto residual = sub(softmax(env.logits, 1), Tensor<T>({n, k}, std::move(onehot)));
    return mean(sum_last(mul(residual, env.logits)));
}

template <typename T>
Tensor<T> irm_penalty(const std::vector<EnvBatch<T>>& envs) {
    if (envs.empty()) throw ContractError("irm_penalty: no environments");
    Tensor<T> total;
    for (const auto& e : envs) {
        auto term = square(irm_risk_gradient(e));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

template <typename T>
Tensor<T> vrex_penalty(const EnvRisks<T>& risks) {
    if (risks.size() < 2) {
        throw ContractError("vrex_penalty: needs at least 2 environments, got " + std::to_string(risks.size()));
    }
    // mean(R²) - mean(R)², built as mean((R - mean R)²) for non-negativity
    Tensor<T> total;
    for (const auto& r : risks) total = total.defined() ? add(total, r.risk) : r.risk;
    auto mu = scale(total, T(1) / static_cast<T>(risks.size()));
    Tensor<T> var;
    for (const auto& r : risks) {
        auto d = square(sub(r.risk, mu));
        var = var.defined() ? add(var, d) : d;
    }
    return scale(var, T(1) / static_cast<T>(risks.size()));
}

template <typename T>
Tensor<T> irmx_penalty(const std::vector<EnvBatch<T>>& envs, const EnvRisks<T>& risks, double alpha, double beta) {
    return add(scale(irm_penalty(envs), static_cast<T>(alpha)), scale(vrex_penalty(risks), static_cast<T>(beta)));
}

GroupWeights GroupWeights::uniform(std::vector<int> domains, double eta) {
    GroupWeights w;
    w.q.assign(domains.size(), domains.empty() ? 0.0 : 1.0 / static_cast<double>(domains.size()));
    w.domains = std::move(domains);
    w.eta = eta;
    return w;
}

double GroupWeights::weight_of(int domain) const {
    for (std::size_t i = 0; i < domains.size(); ++i)
        if (domains[i] == domain) return q[i];
    throw ContractError("GroupWeights: unknown domain " + std::to_string(domain));
}

template <typename T>
Tensor<T> groupdro_step(const EnvRisks<T>& risks, GroupWeights& weights) {
    if (risks.empty()) throw ContractError("groupdro_step: no environments");
    std::vector<double> q = weights.q;
    for (const auto& r : risks) {
        auto it = std::find(weights.domains.begin(), weights.domains.end(), r.domain);
        if (it == weights.domains.end()) throw ContractError("groupdro_step: unknown domain " + std::to_string(r.domain));
        const auto i = static_cast<std::size_t>(it - weights.domains.begin());
        q[i] *= std::exp(weights.eta * static_cast<double>(r.risk.item()));
    }
    double z = 0;
    for (double v : q) z += v;
    for (auto& v : q) v /= z;
    weights.q = q;

    Tensor<T> loss;
    for (const auto& r : risks) {
        auto term = scale(r.risk, static_cast<T>(weights.weight_of(r.domain)));
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

ObjectiveState::ObjectiveState(ObjectiveConfig cfg, std::vector<int> train_domains)
    : cfg_(cfg), weights_(GroupWeights::uniform(std::move(train_domains), cfg.groupdro_eta)) {}

double ObjectiveState::irm_coefficient() const { return epoch_ < cfg_.irm_anneal_epochs ? 0.0 : cfg_.irm_weight; }

template <typename T>
ObjectiveValue<T> objective_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                                 const std::vector<int>& domains, ObjectiveState& state) {
    ObjectiveValue<T> out;
    const auto& cfg = state.config();
    auto risk = erm_risk(logits, labels);
    out.risk = static_cast<double>(risk.item());
    if (cfg.kind == Objective::erm) {
        out.loss = risk;
        return out;
    }
    auto envs = split_by_domain(logits, labels, domains);
    auto risks = env_risks(envs);
    if (cfg.kind == Objective::groupdro) {
        out.loss = groupdro_step(risks, state.group_weights());
        return out;
    }

    // Penalised objectives. V-REx needs two environments in the batch; with
    // fewer, its term is dropped for that batch.
    const bool has_variance = risks.size() >= 2;
    Tensor<T> penalty;
    double weight = 0;
    double rescale = 1;
    switch (cfg.kind) {
        case Objective::irm:
            penalty = irm_penalty(envs);
            weight = state.irm_coefficient();
            rescale = std::max(1.0, weight);
            break;
        case Objective::vrex:
            if (has_variance) penalty = vrex_penalty(risks);
            weight = cfg.vrex_weight;
            break;
        case Objective::irmx: {
            const double irm_w = state.irm_coefficient();
            auto irm_part = scale(irm_penalty(envs), static_cast<T>(cfg.irmx_alpha * irm_w));
            penalty = has_variance ? add(irm_part, scale(vrex_penalty(risks), static_cast<T>(cfg.irmx_beta * cfg.vrex_weight)))
                                   : irm_part;
            weight = 1.0;
            rescale = std::max(1.0, irm_w);
            break;
        }
        default: break;
    }
    if (!penalty.defined()) {
        out.loss = risk;
        return out;
    }
    out.penalty = static_cast<double>(penalty.item());
    auto total = add(risk, scale(penalty, static_cast<T>(weight)));
    out.loss = rescale > 1.0 ? scale(total, static_cast<T>(1.0 / rescale)) : total;
    return out;
}

#define CGP_INSTANTIATE_OBJECTIVES(T)                                                                      \
    template std::vector<EnvBatch<T>> split_by_domain<T>(const Tensor<T>&, const std::vector<int>&,        \
                                                         const std::vector<int>&);                         \
    template EnvRisks<T> env_risks<T>(const std::vector<EnvBatch<T>>&);                                    \
    template Tensor<T> erm_risk<T>(const Tensor<T>&, const std::vector<int>&);                             \
    template Tensor<T> irm_risk_gradient<T>(const EnvBatch<T>&);                                           \
    template Tensor<T> irm_penalty<T>(const std::vector<EnvBatch<T>>&);                                    \
    template Tensor<T> vrex_penalty<T>(const EnvRisks<T>&);                                                \
    template Tensor<T> irmx_penalty<T>(const std::vector<EnvBatch<T>>&, const EnvRisks<T>&, double, double); \
    template Tensor<T> groupdro_step<T>(const EnvRisks<T>&, GroupWeights&);                                \
    template ObjectiveValue<T> objective_loss<T>(const Tensor<T>&, const std::vector<int>&,                \
                                                 const std::vector<int>&, ObjectiveState&);

CGP_INSTANTIATE_OBJECTIVES(float)
CGP_INSTANTIATE_OBJECTIVES(double)

}  // namespace cgp::objectives
