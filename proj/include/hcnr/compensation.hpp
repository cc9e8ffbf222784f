#pragma once

// Hessian-guided compensation of restored honesty-critical rows.
//
// For a selected layer j with SFT deviation Delta = W_sft - W_orig, the task
// rows keep their deviated values. Each task row k contributes, column by
// column, the single-coordinate OBS response
//     c_k = (Delta[k, c] / [H^-1]_kk) * H^-1[:, k]
// and the restored honesty-critical rows receive the sum over task rows:
//     C = H^-1 * S * Delta,  S = diag(1/[H^-1]_kk) on task rows, 0 elsewhere.
//
// H is a d' x d' operator over the layer's neurons. The default surrogate is
// the damped output Gram matrix (2/n) Y Y^T + lambda I with Y = W_orig X_hon.
// The exact Hessian of the layer's activation gap is block-diagonal across
// rows (rows never interact), under which cross-row compensation vanishes;
// the Gram surrogate is what couples neurons. Builders are pluggable.

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hcnr/core_math.hpp"
#include "hcnr/model.hpp"
#include "hcnr/surgery.hpp"

namespace hcnr {

enum class HessianStrategy {
    output_gram,  // (2/n) Y Y^T, Y = W_orig X_hon
    identity,     // I: neurons decoupled, compensation on A_hc rows is zero
};

inline std::string to_string(HessianStrategy s) {
    return s == HessianStrategy::output_gram ? "output_gram" : "identity";
}

inline HessianStrategy hessian_strategy_from_string(const std::string& s) {
    if (s == "output_gram") return HessianStrategy::output_gram;
    if (s == "identity") return HessianStrategy::identity;
    throw ConfigError("unknown Hessian strategy '" + s + "'");
}

// Layer-j inputs X (d x n) of `m` on `batch`.
inline Matrix layer_inputs(const ModelCheckpoint& m, std::span<const QaExample> batch, std::size_t layer) {
    if (layer >= m.arch.num_layers) throw ContractViolation("layer index out of range");
    return std::move(forward(m, batch).trace.inputs[layer]);
}

// (2/n) Y Y^T for a d' x n matrix of layer outputs.
inline Matrix output_gram(const Matrix& y) {
    if (y.cols() == 0) throw ContractViolation("output_gram: no samples");
    Matrix h = matmul_nt(y, y);
    const double s = 2.0 / static_cast<double>(y.cols());
    for (double& v : h.data()) v *= s;
    return h;
}

struct HessianSurrogate {
    Matrix h;      // damped
    Matrix h_inv;  // (raw + lambda I)^-1
    double lambda = 0.0;
};

inline HessianSurrogate damp_and_invert(const Matrix& raw, double lambda_frac, std::string_view label) {
    if (!(lambda_frac >= 0.0)) throw ContractViolation("hessian_surrogate: lambda_frac must be nonnegative");
    HessianSurrogate s;
    s.lambda = lambda_frac * mean_diagonal(raw);
    s.h_inv = damped_spd_inverse(raw, s.lambda, label);
    s.h = raw;
    for (std::size_t i = 0; i < s.h.rows(); ++i) s.h(i, i) += s.lambda;
    return s;
}

inline HessianSurrogate hessian_surrogate(const ModelCheckpoint& orig, std::span<const QaExample> d_hon,
                                          std::size_t layer, double lambda_frac,
                                          HessianStrategy strategy = HessianStrategy::output_gram) {
    if (d_hon.empty()) throw ContractViolation("hessian_surrogate: empty D_hon batch");
    const std::string label = "hidden layer " + std::to_string(layer);
    switch (strategy) {
        case HessianStrategy::identity:
            return damp_and_invert(Matrix::identity(orig.arch.hidden_dim), lambda_frac, label);
        case HessianStrategy::output_gram: {
            const Matrix x = layer_inputs(orig, d_hon, layer);
            return damp_and_invert(output_gram(matmul(orig.hidden[layer].weight, x)), lambda_frac, label);
        }
    }
    throw ContractViolation("unknown Hessian strategy");
}

// C = H^-1 S Delta with S[k,k] = 1/[H^-1]_kk for k in task_rows.
inline Matrix compensation_matrix(const Matrix& h_inv, const Matrix& delta, std::span<const std::size_t> task_rows) {
    const std::size_t n = h_inv.rows();
    if (h_inv.cols() != n || delta.rows() != n) throw ContractViolation("compensation_matrix: dimension mismatch");
    Matrix scaled(n, delta.cols());
    for (std::size_t k : task_rows) {
        if (k >= n) throw ContractViolation("compensation_matrix: task row out of range");
        const double pivot = h_inv(k, k);
        if (!(pivot > 0.0))
            throw NumericalError("compensation_matrix: [H^-1]_kk <= 0 at row " + std::to_string(k));
        const auto src = delta.row(k);
        auto dst = scaled.row(k);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] / pivot;
    }
    return matmul(h_inv, scaled);
}

// ||(W_a x + b_a) - (W_b x + b_b)||_F^2 over the batch at layer j, where the
// layer inputs x come from model_b's own trace (model_b is the reference).
inline double activation_gap(const ModelCheckpoint& a, const ModelCheckpoint& b, std::span<const QaExample> batch,
                             std::size_t layer) {
    require_same_architecture(a, b);
    if (batch.empty()) throw ContractViolation("activation_gap: empty batch");
    const Matrix x = layer_inputs(b, batch, layer);
    return frobenius_sq(subtract(affine(a.hidden[layer], x), affine(b.hidden[layer], x)));
}

// tr(V^T H V) with V = W - W_orig: the quadratic objective the compensation
// minimizes column by column.
inline double surrogate_objective(const Matrix& h, const Matrix& w, const Matrix& w_orig) {
    const Matrix v = subtract(w, w_orig);
    const Matrix hv = matmul(h, v);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v.data()[i] * hv.data()[i];
    return s;
}

struct LayerCompensation {
    std::size_t layer = 0;
    HessianSurrogate hessian;
    Matrix delta;  // W_sft - W_orig
    Matrix c;      // d' x d
    double condition_estimate = 0.0;
    // Layer activation gap to the pretrained model on the fitting batch.
    double gap_restored = 0.0;
    double gap_hcnr = 0.0;
    // Quadratic surrogate objective before/after compensation.
    double surrogate_restored = 0.0;
    double surrogate_hcnr = 0.0;
};

struct CompensationContext {
    HessianStrategy strategy = HessianStrategy::output_gram;
    double lambda_frac = 0.01;
    bool enabled = true;
    std::map<std::size_t, LayerCompensation> layers;
};

// ||H||_1 * ||H^-1||_1.
inline double condition_estimate(const Matrix& h, const Matrix& h_inv) {
    auto norm1 = [](const Matrix& m) {
        double best = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < m.rows(); ++r) s += std::abs(m(r, c));
            best = std::max(best, s);
        }
        return best;
    };
    return norm1(h) * norm1(h_inv);
}

inline ModelCheckpoint apply_hcnr(const ModelCheckpoint& orig, const ModelCheckpoint& sft, const SurgeryPlan& plan,
                           const CompensationContext& ctx);

// Builds one context per selected layer. With `enabled == false` the
// compensation matrices are zero (the no-compensation ablation).
inline CompensationContext build_compensation(const ModelCheckpoint& orig, const ModelCheckpoint& sft,
                                              const SurgeryPlan& plan, std::span<const QaExample> d_hon,
                                              double lambda_frac, HessianStrategy strategy, bool enabled = true) {
    require_same_architecture(orig, sft);
    CompensationContext ctx;
    ctx.strategy = strategy;
    ctx.lambda_frac = lambda_frac;
    ctx.enabled = enabled;
    for (std::size_t j : plan.selected_layers) {
        LayerCompensation lc;
        lc.layer = j;
        lc.hessian = hessian_surrogate(orig, d_hon, j, lambda_frac, strategy);
        lc.delta = subtract(sft.hidden[j].weight, orig.hidden[j].weight);
        lc.c = enabled ? compensation_matrix(lc.hessian.h_inv, lc.delta, plan.task[j])
                       : Matrix(lc.delta.rows(), lc.delta.cols());
        lc.condition_estimate = condition_estimate(lc.hessian.h, lc.hessian.h_inv);
        ctx.layers.emplace(j, std::move(lc));
    }

    const ModelCheckpoint restored = restore(sft, orig, plan);
    const ModelCheckpoint compensated = apply_hcnr(orig, sft, plan, ctx);
    for (auto& [j, lc] : ctx.layers) {
        lc.gap_restored = activation_gap(restored, orig, d_hon, j);
        lc.gap_hcnr = activation_gap(compensated, orig, d_hon, j);
        lc.surrogate_restored = surrogate_objective(lc.hessian.h, restored.hidden[j].weight, orig.hidden[j].weight);
        lc.surrogate_hcnr = surrogate_objective(lc.hessian.h, compensated.hidden[j].weight, orig.hidden[j].weight);
    }
    return ctx;
}

// Rows i in A_hc: W_orig[i] + C[i]; bias from orig. Rows in A_task and every
// other parameter keep SFT values.
inline ModelCheckpoint apply_hcnr(const ModelCheckpoint& orig, const ModelCheckpoint& sft, const SurgeryPlan& plan,
                                  const CompensationContext& ctx) {
    require_same_architecture(orig, sft);
    ModelCheckpoint out = sft;
    for (std::size_t j : plan.selected_layers) {
        const auto it = ctx.layers.find(j);
        if (it == ctx.layers.end())
            throw Error("apply_hcnr: missing compensation context for selected layer " + std::to_string(j));
        const Matrix& c = it->second.c;
        for (std::size_t r : plan.hc[j]) {
            const auto o = orig.hidden[j].weight.row(r);
            const auto cr = c.row(r);
            auto dst = out.hidden[j].weight.row(r);
            for (std::size_t col = 0; col < dst.size(); ++col) dst[col] = o[col] + cr[col];
            out.hidden[j].bias[r] = orig.hidden[j].bias[r];
        }
    }
    out.meta.provenance = Provenance::hcnr;
    out.meta.stage = "compensate";
    return out;
}

inline nlohmann::json summary_json(const CompensationContext& ctx) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& [j, lc] : ctx.layers)
        layers.push_back({{"layer", j},
                          {"lambda", lc.hessian.lambda},
                          {"condition_estimate", lc.condition_estimate},
                          {"d_hon_before", lc.gap_restored},
                          {"d_hon_after", lc.gap_hcnr},
                          {"surrogate_before", lc.surrogate_restored},
                          {"surrogate_after", lc.surrogate_hcnr}});
    return {{"strategy", to_string(ctx.strategy)},
            {"lambda_frac", ctx.lambda_frac},
            {"enabled", ctx.enabled},
            {"layers", layers}};
}

}  // namespace hcnr
