#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "cgp/tensor.hpp"

// Invariance objectives over training environments (= domain ids): ERM,
// IRMv1, V-REx, IRMX (alpha·IRM + beta·V-REx) and GroupDRO.
namespace cgp::objectives {

enum class Objective { erm, irm, vrex, irmx, groupdro };

// Throws ConfigError for anything outside {erm, irm, vrex, irmx, groupdro}.
Objective parse_objective(std::string_view key);
std::string_view objective_name(Objective o);

template <typename T>
struct EnvBatch {
    int domain = 0;
    Tensor<T> logits;  // n_e × K
    std::vector<int> labels;
};

template <typename T>
struct EnvRisk {
    int domain = 0;
    Tensor<T> risk;  // scalar mean cross-entropy
    std::size_t count = 0;
};

template <typename T>
using EnvRisks = std::vector<EnvRisk<T>>;

// Rows of `logits` grouped by domain id, in ascending domain order.
template <typename T>
std::vector<EnvBatch<T>> split_by_domain(const Tensor<T>& logits, const std::vector<int>& labels,
                                         const std::vector<int>& domains);

template <typename T>
EnvRisks<T> env_risks(const std::vector<EnvBatch<T>>& envs);

template <typename T>
Tensor<T> erm_risk(const Tensor<T>& logits, const std::vector<int>& labels);

// d/dw R_e(w · logits) at w = 1, in closed form so that the squared penalty
// stays first-order differentiable in the model parameters.
template <typename T>
Tensor<T> irm_risk_gradient(const EnvBatch<T>& env);

// Σ_e (d/dw R_e(w·logits)|_{w=1})²
template <typename T>
Tensor<T> irm_penalty(const std::vector<EnvBatch<T>>& envs);

// Population variance of the environment risks; needs >= 2 environments.
template <typename T>
Tensor<T> vrex_penalty(const EnvRisks<T>& risks);

template <typename T>
Tensor<T> irmx_penalty(const std::vector<EnvBatch<T>>& envs, const EnvRisks<T>& risks, double alpha = 1.0,
                       double beta = 1.0);

struct GroupWeights {
    std::vector<int> domains;
    std::vector<double> q;  // on the simplex
    double eta = 0.01;

    static GroupWeights uniform(std::vector<int> domains, double eta);
    double weight_of(int domain) const;
};

// q_e <- q_e · exp(eta · R_e), renormalised; returns Σ_e q_e · R_e with the
// updated weights. Groups absent from `risks` keep their unnormalised weight.
template <typename T>
Tensor<T> groupdro_step(const EnvRisks<T>& risks, GroupWeights& weights);

struct ObjectiveConfig {
    Objective kind = Objective::erm;
    double irm_weight = 100.0;
    std::size_t irm_anneal_epochs = 5;
    double vrex_weight = 10.0;
    double irmx_alpha = 1.0;
    double irmx_beta = 1.0;
    double groupdro_eta = 0.01;
};

// Mutable per-run state: current epoch (for the IRM annealing schedule) and
// the GroupDRO weights.
class ObjectiveState {
public:
    explicit ObjectiveState(ObjectiveConfig cfg = {}, std::vector<int> train_domains = {0, 1, 2});

    const ObjectiveConfig& config() const { return cfg_; }
    void set_epoch(std::size_t epoch) { epoch_ = epoch; }
    std::size_t epoch() const { return epoch_; }
    double irm_coefficient() const;
    GroupWeights& group_weights() { return weights_; }
    const GroupWeights& group_weights() const { return weights_; }

private:
    ObjectiveConfig cfg_;
    std::size_t epoch_ = 0;
    GroupWeights weights_;
};

template <typename T>
struct ObjectiveValue {
    Tensor<T> loss;
    double risk = 0;     // plain mean cross-entropy of the batch
    double penalty = 0;  // unweighted invariance penalty (0 for ERM / GroupDRO)
};

// The configured objective on one batch of logits.
template <typename T>
ObjectiveValue<T> objective_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                                 const std::vector<int>& domains, ObjectiveState& state);

}  // namespace cgp::objectives
