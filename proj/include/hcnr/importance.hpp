#pragma once

// Intra-layer neuron importance: diagonal-Fisher scores per hidden neuron,
// the honesty-vs-task priority, and per-layer candidate sets. Also hosts a
// Monte-Carlo check that the expected loss increase of an isotropic
// perturbation around an optimum tracks the Fisher/Hessian diagonal.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hcnr/core_math.hpp"
#include "hcnr/model.hpp"

namespace hcnr {

using LayerScores = std::vector<Vector>;  // [layer][neuron]
using LayerIndexSets = std::vector<std::vector<std::size_t>>;

inline constexpr double kScoreFloor = 1e-12;

// s[j][k] = mean_n sum_c (dL_n / dW_{j,k,c})^2, from exact per-example
// gradients. `chunk` only controls memory; the result does not depend on it
// beyond floating-point summation order.
inline LayerScores fisher_scores(const ModelCheckpoint& m, std::span<const QaExample> data, std::size_t chunk = 64) {
    if (data.empty()) throw ContractViolation("fisher_scores: empty dataset");
    if (chunk == 0) chunk = 1;
    LayerScores s(m.arch.num_layers, Vector(m.arch.hidden_dim, 0.0));
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const auto part = data.subspan(start, std::min(chunk, data.size() - start));
        const BatchGradients g = backward(m, part);
        const double w = static_cast<double>(part.size());
        for (std::size_t j = 0; j < s.size(); ++j)
            for (std::size_t k = 0; k < s[j].size(); ++k) s[j][k] += w * g.sq_row_grads[j][k];
    }
    for (auto& layer : s)
        for (double& v : layer) v /= static_cast<double>(data.size());
    return s;
}

// r = s_hon * ln(s_hon / s_task), both floored at kScoreFloor.
inline double priority_value(double s_hon, double s_task) noexcept {
    const double h = std::max(s_hon, kScoreFloor);
    const double t = std::max(s_task, kScoreFloor);
    return h * std::log(h / t);
}

inline LayerScores priority(const LayerScores& s_hon, const LayerScores& s_task) {
    if (s_hon.size() != s_task.size()) throw ContractViolation("priority: layer count mismatch");
    LayerScores r(s_hon.size());
    for (std::size_t j = 0; j < s_hon.size(); ++j) {
        if (s_hon[j].size() != s_task[j].size()) throw ContractViolation("priority: neuron count mismatch");
        r[j].resize(s_hon[j].size());
        for (std::size_t k = 0; k < s_hon[j].size(); ++k) r[j][k] = priority_value(s_hon[j][k], s_task[j][k]);
    }
    return r;
}

inline std::size_t ratio_count(std::size_t n, double ratio) {
    // Small epsilon keeps e.g. 128 * 0.3 from flooring to 38 on rounding.
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
}

// Top floor(d' * R_IW) neurons per layer by priority (descending score,
// ascending index on ties).
inline LayerIndexSets candidate_neurons(const LayerScores& r, double r_iw,
                                        std::vector<std::string>* warnings = nullptr) {
    if (!(r_iw > 0.0 && r_iw <= 1.0)) throw ContractViolation("candidate_neurons: R_IW must lie in (0, 1]");
    LayerIndexSets out(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) {
        const std::size_t k = ratio_count(r[j].size(), r_iw);
        if (k == 0 && warnings)
            warnings->push_back("layer " + std::to_string(j) + ": R_IW selects zero neurons");
        out[j] = stable_topk(r[j], k);
    }
    return out;
}

enum class PriorityRule {
    honesty_over_task,  // r = s_hon * ln(s_hon / s_task)
    honesty_only,       // r = s_hon (ablation without task scores)
};

struct ImportanceTable {
    LayerScores s_hon;
    LayerScores s_task;
    LayerScores priority;
    LayerIndexSets candidates;
    double r_iw = 0.5;
    PriorityRule rule = PriorityRule::honesty_over_task;
    std::vector<std::string> warnings;
};

// s_hon is measured on `hon_model` and s_task on `task_model`; the pipeline
// passes the checkpoint at which each objective was optimized.
inline ImportanceTable build_importance(const ModelCheckpoint& hon_model, const ModelCheckpoint& task_model,
                                        std::span<const QaExample> d_hon, std::span<const QaExample> d_task,
                                        double r_iw, PriorityRule rule = PriorityRule::honesty_over_task) {
    if (!(hon_model.arch == task_model.arch)) throw ContractViolation("build_importance: architecture mismatch");
    ImportanceTable t;
    t.r_iw = r_iw;
    t.rule = rule;
    t.s_hon = fisher_scores(hon_model, d_hon);
    t.s_task = fisher_scores(task_model, d_task);
    t.priority = rule == PriorityRule::honesty_over_task ? priority(t.s_hon, t.s_task) : t.s_hon;
    t.candidates = candidate_neurons(t.priority, r_iw, &t.warnings);
    return t;
}

inline nlohmann::json to_json(const ImportanceTable& t, const std::string& config_hash) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t j = 0; j < t.s_hon.size(); ++j)
        layers.push_back({{"layer", j},
                          {"s_hon", t.s_hon[j]},
                          {"s_task", t.s_task[j]},
                          {"priority", t.priority[j]},
                          {"candidates", t.candidates[j]}});
    return {{"schema", "hcnr-importance/1"},
            {"config_hash", config_hash},
            {"r_iw", t.r_iw},
            {"rule", t.rule == PriorityRule::honesty_over_task ? "honesty_over_task" : "honesty_only"},
            {"layers", layers},
            {"warnings", t.warnings}};
}

// Samples theta ~ N(0, sigma^2 I) around the optimum of L = 1/2 theta^T A
// theta and returns |mean dL - 1/2 sigma^2 tr(A)| / (1/2 sigma^2 tr(A)).
inline double fisher_unbiasedness_check(const Matrix& a, double sigma, std::size_t n_samples, std::uint64_t seed,
                                        double* empirical_mean = nullptr) {
    if (a.rows() != a.cols() || a.rows() == 0) throw ContractViolation("fisher_unbiasedness_check: A must be square");
    if (!(sigma > 0.0)) throw ContractViolation("fisher_unbiasedness_check: sigma must be positive");
    if (n_samples == 0) throw ContractViolation("fisher_unbiasedness_check: need at least one sample");
    const std::size_t d = a.rows();
    RngStream rng = RngStream(seed).split("fisher-unbiasedness");
    Vector theta(d);
    double sum = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (double& v : theta) v = sigma * rng.normal();
        const Vector at = matvec(a, theta);
        double q = 0.0;
        for (std::size_t i = 0; i < d; ++i) q += theta[i] * at[i];
        sum += 0.5 * q;
    }
    const double mean = sum / static_cast<double>(n_samples);
    if (empirical_mean) *empirical_mean = mean;
    const double expected = 0.5 * sigma * sigma * trace(a);
    return std::abs(mean - expected) / expected;
}

}  // namespace hcnr
