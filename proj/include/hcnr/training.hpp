#pragma once

// Momentum-SGD training loops for every stage (pretrain, domain SFT, RAIT,
// rehearsal) plus the rehearsal data mixer.

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hcnr/metrics.hpp"
#include "hcnr/model.hpp"

namespace hcnr {

enum class Stage { pretrain, sft, rait, rehearsal };

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::sft: return "sft";
        case Stage::rait: return "rait";
        case Stage::rehearsal: return "rehearsal";
    }
    return "unknown";
}

inline Stage stage_from_string(const std::string& s) {
    for (Stage st : {Stage::pretrain, Stage::sft, Stage::rait, Stage::rehearsal})
        if (to_string(st) == s) return st;
    throw ConfigError("unknown training stage '" + s + "'");
}

inline Provenance provenance_of(Stage s) {
    switch (s) {
        case Stage::pretrain: return Provenance::pretrained;
        case Stage::sft: return Provenance::sft;
        case Stage::rait: return Provenance::rait;
        case Stage::rehearsal: return Provenance::rehearsal;
    }
    return Provenance::pretrained;
}

struct TrainConfig {
    Stage stage = Stage::pretrain;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::size_t steps = 1000;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // 0 disables the curve
    bool train_embeddings = true;
    // With train_embeddings == false, these embedding rows still train
    // (e.g. tokens introduced by the stage's data).
    std::vector<TokenId> trainable_embedding_rows;
    bool train_output = true;

    void validate() const {
        if (batch_size == 0) throw ConfigError(to_string(stage) + ": batch_size must be positive");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ConfigError(to_string(stage) + ": learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError(to_string(stage) + ": momentum must be in [0, 1)");
    }
};

struct CurvePoint {
    std::size_t step = 0;
    double honesty_f1 = 0.0;
    double refusal_delta = 0.0;
    double domain_accuracy = 0.0;
};

struct RecoveryCurve {
    std::vector<CurvePoint> points;

    std::string to_csv(const std::string& config_hash) const {
        std::ostringstream os;
        os.precision(17);
        os << "# config_hash=" << config_hash << '\n';
        os << "step,f1,rf_delta,domain_acc\n";
        for (const auto& p : points)
            os << p.step << ',' << p.honesty_f1 << ',' << p.refusal_delta << ',' << p.domain_accuracy << '\n';
        return os.str();
    }
};

struct EvalSuite {
    std::span<const QaExample> honesty_eval;
    std::span<const QaExample> domain_eval;
    TokenId idk_token = 0;
};

struct TrainResult {
    ModelCheckpoint model;
    RecoveryCurve curve;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

inline TrainResult train(ModelCheckpoint model, std::span<const QaExample> data, const TrainConfig& cfg,
                         const std::optional<EvalSuite>& eval = std::nullopt) {
    cfg.validate();
    if (data.empty()) throw ContractViolation(to_string(cfg.stage) + ": empty training set");

    TrainResult r;
    r.initial_loss = mean_loss(model, data);

    auto record = [&](std::size_t step) {
        if (!eval || cfg.eval_every == 0) return;
        const EvalReport rep = evaluate(model, eval->honesty_eval, eval->domain_eval, eval->idk_token);
        r.curve.points.push_back({step, rep.honesty_f1, rep.refusal_delta, rep.domain_accuracy});
    };

    if (cfg.steps == 0) {
        r.final_loss = r.initial_loss;
        r.model = std::move(model);
        return r;
    }
    record(0);

    RngStream rng = RngStream(cfg.seed).split("train/" + to_string(cfg.stage));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t bsz = std::min(cfg.batch_size, data.size());

    BatchGradients velocity = zero_gradients(model.arch);
    std::vector<QaExample> batch(bsz);

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (std::size_t i = 0; i < bsz; ++i) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch[i] = data[order[cursor++]];
        }
        BatchGradients g = backward(model, batch);
        if (!std::isfinite(g.loss))
            throw TrainingDiverged(step, to_string(cfg.stage) + ": loss became non-finite at step " +
                                             std::to_string(step));

        // v <- mu v + g ; theta <- theta - lr v
        const auto gs = tensor_spans(g);
        const auto vs = tensor_spans(velocity);
        const auto ps = tensor_spans(model);
        for (std::size_t t = 0; t < ps.size(); ++t) {
            if (t == 0 && !cfg.train_embeddings) {
                const std::size_t e = model.arch.embed_dim;
                for (TokenId tok : cfg.trainable_embedding_rows)
                    for (std::size_t i = tok * e; i < (tok + 1) * e; ++i) {
                        vs[t][i] = cfg.momentum * vs[t][i] + gs[t][i];
                        ps[t][i] -= cfg.learning_rate * vs[t][i];
                    }
                continue;
            }
            if (t + 2 >= ps.size() && !cfg.train_output) continue;
            for (std::size_t i = 0; i < ps[t].size(); ++i) {
                vs[t][i] = cfg.momentum * vs[t][i] + gs[t][i];
                ps[t][i] -= cfg.learning_rate * vs[t][i];
            }
        }

        if (cfg.eval_every != 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) record(step);
    }

    r.final_loss = mean_loss(model, data);
    if (!std::isfinite(r.final_loss))
        throw TrainingDiverged(cfg.steps, to_string(cfg.stage) + ": final loss is non-finite");
    model.meta.provenance = provenance_of(cfg.stage);
    model.meta.stage = to_string(cfg.stage);
    r.model = std::move(model);
    return r;
}

// Interleaves domain data with examples drawn from the IDK dataset so that
// the IDK-sourced share of the output equals `fraction`. When the IDK set is
// too small the shortfall is drawn with replacement.
inline std::vector<QaExample> rehearsal_mix(std::span<const QaExample> domain_train, std::span<const QaExample> idk_set,
                                            double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ContractViolation("rehearsal_mix: fraction must be in [0, 1]");
    RngStream rng = RngStream(seed).split("rehearsal-mix");

    std::vector<QaExample> out;
    std::size_t n_idk = 0;
    if (fraction >= 1.0) {
        n_idk = domain_train.size();
    } else {
        n_idk = static_cast<std::size_t>(
            std::llround(static_cast<double>(domain_train.size()) * fraction / (1.0 - fraction)));
        out.assign(domain_train.begin(), domain_train.end());
    }
    if (n_idk > 0) {
        if (idk_set.empty()) throw ContractViolation("rehearsal_mix: IDK set is empty");
        std::vector<QaExample> pool(idk_set.begin(), idk_set.end());
        rng.shuffle(pool);
        for (std::size_t i = 0; i < n_idk; ++i)
            out.push_back(i < pool.size() ? pool[i] : idk_set[rng.uniform_index(idk_set.size())]);
    }
    rng.shuffle(out);
    return out;
}

}  // namespace hcnr
