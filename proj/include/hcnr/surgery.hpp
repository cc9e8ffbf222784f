#pragma once

// Cross-layer analysis and neuron restoration.
//
// Per layer, the candidate rows' relative displacement
//   d_j = ||(W_orig - W_sft) .* M_j||_F / ||W_orig .* M_j||_F
// ranks layers; the top floor(L * R_CW) layers form the selected set and
// their candidate rows become the honesty-critical set A_hc. Restoration
// copies those rows (weights and bias) back from the pretrained model.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hcnr/core_math.hpp"
#include "hcnr/importance.hpp"
#include "hcnr/model.hpp"

namespace hcnr {

inline double layer_displacement(const Matrix& w_orig, const Matrix& w_sft, std::span<const std::size_t> rows) {
    require_same_shape(w_orig, w_sft, "layer_displacement");
    if (rows.empty()) throw ContractViolation("layer_displacement: candidate row set is empty");
    double num = 0.0, den = 0.0;
    for (std::size_t r : rows) {
        if (r >= w_orig.rows()) throw ContractViolation("layer_displacement: row index out of range");
        const auto o = w_orig.row(r);
        const auto s = w_sft.row(r);
        for (std::size_t c = 0; c < o.size(); ++c) {
            const double diff = o[c] - s[c];
            num += diff * diff;
            den += o[c] * o[c];
        }
    }
    if (den == 0.0) throw DegenerateLayerError("degenerate layer: masked original weights are all zero");
    return std::sqrt(num) / std::sqrt(den);
}

inline std::vector<std::size_t> select_layers(std::span<const double> displacement, double r_cw,
                                              std::vector<std::string>* warnings = nullptr) {
    if (!(r_cw > 0.0 && r_cw <= 1.0)) throw ContractViolation("select_layers: R_CW must lie in (0, 1]");
    const std::size_t k = ratio_count(displacement.size(), r_cw);
    if (k == 0 && warnings) warnings->push_back("R_CW selects zero layers; surgery is the identity");
    return stable_topk(displacement, k);
}

struct SurgeryPlan {
    double r_iw = 0.0;
    double r_cw = 0.0;
    std::vector<double> displacement;           // per layer; NaN when the layer had no candidates
    std::vector<std::size_t> selected_layers;   // rank order
    LayerIndexSets candidates;                  // per layer, ascending
    LayerIndexSets hc;                          // per layer, ascending; empty outside selected layers
    LayerIndexSets task;                        // complement of hc
    std::vector<std::size_t> row_sizes;         // input dim per layer
    double modification_ratio = 0.0;
    std::vector<std::string> warnings;

    std::size_t num_layers() const noexcept { return hc.size(); }
    std::size_t hc_rows() const noexcept {
        std::size_t n = 0;
        for (const auto& s : hc) n += s.size();
        return n;
    }

    // Binary d' x d mask with ones on candidate rows of layer j.
    Matrix mask(std::size_t j) const {
        Matrix m(hc[j].size() + task[j].size(), row_sizes[j]);
        for (std::size_t r : candidates[j]) std::fill(m.row(r).begin(), m.row(r).end(), 1.0);
        return m;
    }
};

inline void require_same_architecture(const ModelCheckpoint& a, const ModelCheckpoint& b) {
    if (a.arch.num_layers != b.arch.num_layers)
        throw ContractViolation("architecture mismatch: layer counts differ (" + std::to_string(a.arch.num_layers) +
                                " vs " + std::to_string(b.arch.num_layers) + ")");
    for (std::size_t j = 0; j < a.arch.num_layers; ++j) {
        const auto& wa = a.hidden[j].weight;
        const auto& wb = b.hidden[j].weight;
        if (wa.rows() != wb.rows() || wa.cols() != wb.cols())
            throw ContractViolation("architecture mismatch at hidden layer " + std::to_string(j));
    }
    if (!(a.arch == b.arch)) throw ContractViolation("architecture mismatch outside hidden layers");
}

namespace detail {

// Candidate sets, displacement and row sizes; layer selection left to the caller.
inline SurgeryPlan plan_skeleton(LayerIndexSets candidates, const ModelCheckpoint& orig, const ModelCheckpoint& sft,
                                 double r_iw, double r_cw) {
    require_same_architecture(orig, sft);
    const std::size_t L = orig.arch.num_layers;
    if (candidates.size() != L) throw ContractViolation("build_plan: candidate sets do not cover every layer");
    SurgeryPlan p;
    p.r_iw = r_iw;
    p.r_cw = r_cw;
    p.candidates = std::move(candidates);
    for (auto& c : p.candidates) std::sort(c.begin(), c.end());
    p.displacement.assign(L, 0.0);
    for (std::size_t j = 0; j < L; ++j) {
        p.row_sizes.push_back(orig.hidden[j].weight.cols());
        p.displacement[j] = p.candidates[j].empty()
                                ? std::nan("")
                                : layer_displacement(orig.hidden[j].weight, sft.hidden[j].weight, p.candidates[j]);
    }
    return p;
}

// A_hc = candidates of the selected layers; A_task = complement; ratio.
inline void assemble_sets(SurgeryPlan& p, std::size_t dprime) {
    const std::size_t L = p.candidates.size();
    p.hc.assign(L, {});
    p.task.assign(L, {});
    for (std::size_t j : p.selected_layers) p.hc[j] = p.candidates[j];
    double modified = 0.0, total = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
        std::vector<bool> in_hc(dprime, false);
        for (std::size_t r : p.hc[j]) in_hc[r] = true;
        for (std::size_t r = 0; r < dprime; ++r)
            if (!in_hc[r]) p.task[j].push_back(r);
        modified += static_cast<double>(p.hc[j].size() * p.row_sizes[j]);
        total += static_cast<double>(dprime * p.row_sizes[j]);
    }
    p.modification_ratio = modified / total;
}

}  // namespace detail

// Builds the plan from explicit per-layer candidate sets.
inline SurgeryPlan plan_from_candidates(LayerIndexSets candidates, const ModelCheckpoint& orig,
                                        const ModelCheckpoint& sft, double r_iw, double r_cw) {
    SurgeryPlan p = detail::plan_skeleton(std::move(candidates), orig, sft, r_iw, r_cw);
    std::vector<double> ranking(p.displacement.size(), -1.0);
    for (std::size_t j = 0; j < ranking.size(); ++j)
        if (!p.candidates[j].empty()) ranking[j] = p.displacement[j];
    p.selected_layers = select_layers(ranking, r_cw, &p.warnings);
    // Layers without candidates never enter A_hc.
    std::erase_if(p.selected_layers, [&](std::size_t j) { return p.candidates[j].empty(); });
    detail::assemble_sets(p, orig.arch.hidden_dim);
    return p;
}

// Plan with an explicit layer selection (no displacement ranking); used by
// ablations that must touch exactly the same layers as a reference plan.
inline SurgeryPlan plan_with_layers(LayerIndexSets candidates, std::vector<std::size_t> selected_layers,
                                    const ModelCheckpoint& orig, const ModelCheckpoint& sft, double r_iw,
                                    double r_cw) {
    SurgeryPlan p = detail::plan_skeleton(std::move(candidates), orig, sft, r_iw, r_cw);
    for (std::size_t j : selected_layers)
        if (j >= p.candidates.size()) throw ContractViolation("plan_with_layers: layer index out of range");
    p.selected_layers = std::move(selected_layers);
    detail::assemble_sets(p, orig.arch.hidden_dim);
    return p;
}

inline SurgeryPlan build_plan(const ImportanceTable& table, const ModelCheckpoint& orig, const ModelCheckpoint& sft,
                              double r_iw, double r_cw) {
    std::vector<std::string> warnings;
    LayerIndexSets cand = std::abs(r_iw - table.r_iw) < 1e-15 ? table.candidates
                                                              : candidate_neurons(table.priority, r_iw, &warnings);
    SurgeryPlan p = plan_from_candidates(std::move(cand), orig, sft, r_iw, r_cw);
    p.warnings.insert(p.warnings.begin(), warnings.begin(), warnings.end());
    return p;
}

// Rows in A_hc (weights and bias) come from `orig`; everything else from `sft`.
inline ModelCheckpoint restore(const ModelCheckpoint& sft, const ModelCheckpoint& orig, const SurgeryPlan& plan) {
    require_same_architecture(orig, sft);
    if (plan.num_layers() != sft.arch.num_layers) throw ContractViolation("restore: plan does not match model depth");
    ModelCheckpoint out = sft;
    for (std::size_t j = 0; j < plan.num_layers(); ++j)
        for (std::size_t r : plan.hc[j]) {
            const auto src = orig.hidden[j].weight.row(r);
            std::copy(src.begin(), src.end(), out.hidden[j].weight.row(r).begin());
            out.hidden[j].bias[r] = orig.hidden[j].bias[r];
        }
    out.meta.provenance = Provenance::restored;
    out.meta.stage = "restore";
    return out;
}

inline nlohmann::json to_json(const SurgeryPlan& p, const std::string& config_hash) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t j = 0; j < p.num_layers(); ++j) {
        nlohmann::json d = std::isnan(p.displacement[j]) ? nlohmann::json(nullptr) : nlohmann::json(p.displacement[j]);
        layers.push_back({{"layer", j},
                          {"displacement", d},
                          {"candidates", p.candidates[j]},
                          {"honesty_critical", p.hc[j]},
                          {"selected", std::find(p.selected_layers.begin(), p.selected_layers.end(), j) !=
                                           p.selected_layers.end()}});
    }
    return {{"schema", "hcnr-plan/1"},
            {"config_hash", config_hash},
            {"r_iw", p.r_iw},
            {"r_cw", p.r_cw},
            {"selected_layers", p.selected_layers},
            {"modification_ratio", p.modification_ratio},
            {"honesty_critical_rows", p.hc_rows()},
            {"layers", layers},
            {"warnings", p.warnings}};
}

}  // namespace hcnr
