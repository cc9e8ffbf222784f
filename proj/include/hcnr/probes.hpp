#pragma once

// Linear probes on hidden states: feature extraction, L2-regularized logistic
// regression trained by full-batch gradient descent, rank-statistic AUROC,
// and the cross-model transfer grid (probe trained on one checkpoint, scored
// on another checkpoint's features at the same layer).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hcnr/core_math.hpp"
#include "hcnr/model.hpp"

namespace hcnr {

// Binary labels, one byte each (1 = answerable).
using Labels = std::vector<std::uint8_t>;

struct ProbeFeatures {
    Matrix x;       // d' x n post-activation states
    Labels labels;  // answerable flag per column
};

inline ProbeFeatures extract_features(const ModelCheckpoint& m, std::span<const QaExample> data, std::size_t layer) {
    if (layer >= m.arch.num_layers) throw ContractViolation("extract_features: layer index out of range");
    ProbeFeatures f;
    if (data.empty()) {
        f.x = Matrix(m.arch.hidden_dim, 0);
        return f;
    }
    f.x = std::move(forward(m, data).trace.outputs[layer]);
    for (const auto& e : data) f.labels.push_back(e.answerable ? 1 : 0);
    return f;
}

inline void require_both_classes(std::span<const std::uint8_t> labels, std::string_view who) {
    const auto pos = std::count_if(labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; });
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
        throw ContractViolation(std::string(who) + ": both classes must be present");
}

// Probability that a random positive outranks a random negative; ties count
// one half. Computed from average ranks (Mann-Whitney U).
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ContractViolation("auroc: score/label length mismatch");
    require_both_classes(labels, "auroc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (labels[idx[t]] != 0) {
                pos_rank_sum += avg_rank;
                ++n_pos;
            }
        i = j;
    }
    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n - n_pos);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct ProbeOptions {
    double reg = 1e-3;
    std::size_t iters = 500;
    double learning_rate = 0.1;
};

struct ProbeModel {
    Vector weights;  // d'
    double bias = 0.0;
    Vector mean;     // standardization from the training split
    Vector scale;    // 1 / std (1 for constant dimensions)
    std::string checkpoint_id;
    std::size_t layer = 0;
    double reg = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> loss_history;  // objective before each update and after the last

    // Logit for each column of raw (unstandardized) features.
    Vector score(const Matrix& x) const {
        if (x.rows() != weights.size()) throw ContractViolation("probe score: feature dimension mismatch");
        Vector s(x.cols(), bias);
        for (std::size_t k = 0; k < x.rows(); ++k) {
            const double wk = weights[k] * scale[k];
            const double mk = mean[k];
            const auto row = x.row(k);
            for (std::size_t i = 0; i < x.cols(); ++i) s[i] += wk * (row[i] - mk);
        }
        return s;
    }
};

namespace detail {

inline double log1p_exp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace detail

// Full-batch gradient descent from zero on
//   mean_i log(1 + exp(-y_i f_i)) + reg/2 ||w||^2,   y in {-1, +1},
// over standardized features. `seed` is recorded for provenance; the
// optimization itself is deterministic and seed-free.
inline ProbeModel train_probe(const Matrix& x, std::span<const std::uint8_t> labels, const ProbeOptions& opt = {},
                              std::uint64_t seed = 0) {
    if (x.cols() != labels.size()) throw ContractViolation("train_probe: feature/label count mismatch");
    require_both_classes(labels, "train_probe");
    const std::size_t d = x.rows();
    const std::size_t n = x.cols();

    ProbeModel p;
    p.reg = opt.reg;
    p.seed = seed;
    p.mean.assign(d, 0.0);
    p.scale.assign(d, 1.0);
    Matrix z(d, n);
    for (std::size_t k = 0; k < d; ++k) {
        const auto row = x.row(k);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        p.mean[k] = mu;
        p.scale[k] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
        auto zr = z.row(k);
        for (std::size_t i = 0; i < n; ++i) zr[i] = (row[i] - mu) * p.scale[k];
    }

    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = labels[i] != 0 ? 1.0 : -1.0;
    p.weights.assign(d, 0.0);

    Vector f(n), coef(n), gw(d);
    auto objective = [&]() {
        std::fill(f.begin(), f.end(), p.bias);
        for (std::size_t k = 0; k < d; ++k) {
            const auto zr = z.row(k);
            for (std::size_t i = 0; i < n; ++i) f[i] += p.weights[k] * zr[i];
        }
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) loss += detail::log1p_exp(-y[i] * f[i]);
        double wsq = 0.0;
        for (double w : p.weights) wsq += w * w;
        return loss / static_cast<double>(n) + 0.5 * opt.reg * wsq;
    };

    for (std::size_t it = 0; it < opt.iters; ++it) {
        p.loss_history.push_back(objective());  // also refreshes f
        double gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            coef[i] = -y[i] * detail::sigmoid(-y[i] * f[i]) / static_cast<double>(n);
            gb += coef[i];
        }
        for (std::size_t k = 0; k < d; ++k) {
            const auto zr = z.row(k);
            double g = opt.reg * p.weights[k];
            for (std::size_t i = 0; i < n; ++i) g += coef[i] * zr[i];
            gw[k] = g;
        }
        for (std::size_t k = 0; k < d; ++k) p.weights[k] -= opt.learning_rate * gw[k];
        p.bias -= opt.learning_rate * gb;
    }
    p.loss_history.push_back(objective());
    for (double v : p.weights)
        if (!std::isfinite(v)) throw NumericalError("train_probe: non-finite probe weight");
    return p;
}

// True when the recorded objective never increases (up to rounding).
inline bool loss_monotone(const ProbeModel& p) {
    for (std::size_t i = 1; i < p.loss_history.size(); ++i)
        if (p.loss_history[i] > p.loss_history[i - 1] * (1.0 + 1e-12) + 1e-15) return false;
    return true;
}

// Seeded 70/30 split of column indices.
struct ProbeSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

inline ProbeSplit probe_split(std::size_t n, std::uint64_t seed, double train_fraction = 0.7) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    RngStream(seed).split("probe-split").shuffle(idx);
    const std::size_t n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction));
    ProbeSplit s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

inline Matrix select_columns(const Matrix& x, std::span<const std::size_t> cols) {
    Matrix out(x.rows(), cols.size());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) out(r, c) = x(r, cols[c]);
    return out;
}

inline Labels select_labels(const Labels& labels, std::span<const std::size_t> idx) {
    Labels out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
}

struct ProbeCell {
    std::string train_model;
    std::string eval_model;
    std::size_t layer = 0;
    double auroc = 0.0;
};

struct NamedModel {
    std::string name;
    const ModelCheckpoint* model = nullptr;
};

struct TransferGrid {
    std::vector<ProbeCell> cells;
    bool all_losses_monotone = true;

    const ProbeCell* find(std::string_view train, std::string_view eval, std::size_t layer) const {
        for (const auto& c : cells)
            if (c.train_model == train && c.eval_model == eval && c.layer == layer) return &c;
        return nullptr;
    }

    std::string to_csv(const std::string& config_hash) const {
        std::ostringstream os;
        os.precision(17);
        os << "# config_hash=" << config_hash << '\n';
        os << "train_model,eval_model,layer,auroc\n";
        for (const auto& c : cells) os << c.train_model << ',' << c.eval_model << ',' << c.layer << ',' << c.auroc << '\n';
        return os.str();
    }
};

// For every layer: probes trained on each listed train model's training split
// are scored on every eval model's test split. Each probe carries its own
// standardization, so transfer reuses the training model's statistics.
inline TransferGrid transfer_grid(std::span<const NamedModel> train_models, std::span<const NamedModel> eval_models,
                                  std::span<const QaExample> data, std::span<const std::size_t> layers,
                                  std::uint64_t seed, const ProbeOptions& opt = {}) {
    const ProbeSplit split = probe_split(data.size(), seed);
    TransferGrid g;
    for (std::size_t j : layers) {
        std::vector<ProbeModel> probes;
        for (const auto& tm : train_models) {
            const ProbeFeatures f = extract_features(*tm.model, data, j);
            ProbeModel p = train_probe(select_columns(f.x, split.train), select_labels(f.labels, split.train), opt, seed);
            p.checkpoint_id = tm.name;
            p.layer = j;
            g.all_losses_monotone = g.all_losses_monotone && loss_monotone(p);
            probes.push_back(std::move(p));
        }
        for (const auto& em : eval_models) {
            const ProbeFeatures f = extract_features(*em.model, data, j);
            const Matrix xt = select_columns(f.x, split.test);
            const Labels yt = select_labels(f.labels, split.test);
            for (std::size_t t = 0; t < train_models.size(); ++t) {
                const Vector s = probes[t].score(xt);
                g.cells.push_back({train_models[t].name, em.name, j, auroc(s, yt)});
            }
        }
    }
    return g;
}

// Grid for the (a -> b) protocol: rows (a, a), (b, b) and (a, b) per layer.
inline TransferGrid transfer_matrix(const NamedModel& a, const NamedModel& b, std::span<const QaExample> data,
                                    std::span<const std::size_t> layers, std::uint64_t seed,
                                    const ProbeOptions& opt = {}) {
    const std::vector<NamedModel> both{a, b};
    return transfer_grid(both, both, data, layers, seed, opt);
}

// Functionally equivalent network with hidden units of every layer permuted:
// rows of W_j and b_j, and the matching columns of the next layer's weights.
inline ModelCheckpoint permute_hidden_units(const ModelCheckpoint& m, std::uint64_t seed) {
    ModelCheckpoint out = m;
    RngStream rng = RngStream(seed).split("permute-hidden-units");
    const std::size_t L = m.arch.num_layers;
    for (std::size_t j = 0; j < L; ++j) {
        std::vector<std::size_t> perm(m.arch.hidden_dim);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        // new unit i = old unit perm[i]
        const LayerParams& src = out.hidden[j];
        LayerParams dst = src;
        for (std::size_t i = 0; i < perm.size(); ++i) {
            const auto r = src.weight.row(perm[i]);
            std::copy(r.begin(), r.end(), dst.weight.row(i).begin());
            dst.bias[i] = src.bias[perm[i]];
        }
        out.hidden[j] = std::move(dst);
        Matrix& next = j + 1 < L ? out.hidden[j + 1].weight : out.out.weight;
        const Matrix old = next;
        for (std::size_t r = 0; r < next.rows(); ++r)
            for (std::size_t i = 0; i < perm.size(); ++i) next(r, i) = old(r, perm[i]);
    }
    return out;
}

// Negative control: probes trained on `m` scored on copies of `m` whose hidden
// units are permuted. Returns, per requested layer, the transferred AUROC
// averaged over `n_permutations` seeded permutations (a single draw can land
// far from 0.5 by chance when many units carry the label signal).
struct PermutationControl {
    std::vector<std::size_t> layers;
    std::vector<double> mean_auroc;
    std::vector<std::vector<double>> draws;  // [layer][permutation]
};

inline PermutationControl permuted_unit_control(const ModelCheckpoint& m, std::span<const QaExample> data,
                                                std::span<const std::size_t> layers, std::uint64_t seed,
                                                std::size_t n_permutations = 8, const ProbeOptions& opt = {}) {
    if (n_permutations == 0) throw ContractViolation("permuted_unit_control: need at least one permutation");
    PermutationControl out;
    out.layers.assign(layers.begin(), layers.end());
    out.draws.assign(layers.size(), {});
    std::vector<ModelCheckpoint> permuted;
    RngStream rng = RngStream(seed).split("permuted-unit-control");
    for (std::size_t p = 0; p < n_permutations; ++p) permuted.push_back(permute_hidden_units(m, rng.next_u64()));
    std::vector<NamedModel> train{{"model", &m}};
    std::vector<NamedModel> eval;
    for (std::size_t p = 0; p < n_permutations; ++p) eval.push_back({"perm" + std::to_string(p), &permuted[p]});
    const TransferGrid g = transfer_grid(train, eval, data, layers, seed, opt);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        double sum = 0.0;
        for (std::size_t p = 0; p < n_permutations; ++p) {
            const double a = g.find("model", eval[p].name, layers[li])->auroc;
            out.draws[li].push_back(a);
            sum += a;
        }
        out.mean_auroc.push_back(sum / static_cast<double>(n_permutations));
    }
    return out;
}

}  // namespace hcnr
