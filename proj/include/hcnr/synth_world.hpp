#pragma once

// Synthetic knowledge world and the datasets carved out of it.
//
// Vocabulary layout (contiguous id ranges):
//   [entities][base relations][domain relations][answers][IDK]
//
// Known entities carry one fact per base relation; unknown entities carry
// none, so any (unknown entity, base relation) query is unanswerable. Each
// base relation owns its own group of answer tokens. Domain relation m
// rephrases base relation m mod B: its answer for a known entity equals that
// entity's base answer, so domain answers for held-out pairs are inferable
// from pretraining knowledge once the new relation token is learned.
//
// A small "novel" share of the unknown entities also receives domain facts
// with arbitrary answers. Domain SFT therefore teaches some answers the
// pretrained model could not know, which is what erodes refusal; their base
// relation queries stay unanswerable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hcnr/core_math.hpp"
#include "hcnr/errors.hpp"

namespace hcnr {

using TokenId = std::uint32_t;
using QueryKey = std::pair<TokenId, TokenId>;  // (subject, relation)

struct WorldConfig {
    std::size_t entities = 500;
    std::size_t known = 400;
    std::size_t unknown = 100;
    std::size_t base_relations = 8;
    std::size_t domain_relations = 4;
    std::size_t answers = 64;
    // Share of unknown entities that receive (non-inferable) domain facts.
    double novel_domain_fraction = 0.05;
};

struct World {
    WorldConfig config;
    std::uint64_t seed = 0;

    std::vector<TokenId> entities;
    std::vector<TokenId> base_relations;
    std::vector<TokenId> domain_relations;
    std::vector<TokenId> answers;
    TokenId idk_token = 0;
    std::size_t vocab_size = 0;

    std::vector<TokenId> known_entities;
    std::vector<TokenId> unknown_entities;
    std::vector<TokenId> novel_entities;  // subset of unknown_entities with domain facts
    std::map<QueryKey, TokenId> known_facts;
    std::map<QueryKey, TokenId> domain_facts;

    // False when there are no unknown entities: nothing to refuse.
    bool has_honesty_signal = true;

    // Stable content hash (hex) over every fact and the vocabulary layout.
    std::string hash() const {
        std::ostringstream os;
        os << "vocab=" << vocab_size << ";idk=" << idk_token << ";seed=" << seed << ';';
        for (auto e : known_entities) os << 'k' << e << ',';
        for (auto e : unknown_entities) os << 'u' << e << ',';
        for (auto e : novel_entities) os << 'n' << e << ',';
        for (const auto& [key, ans] : known_facts) os << key.first << ':' << key.second << '=' << ans << ',';
        for (const auto& [key, ans] : domain_facts) os << key.first << ':' << key.second << '=' << ans << ',';
        return hex64(fnv1a64(os.str()));
    }
};

struct QaExample {
    TokenId subject = 0;
    TokenId relation = 0;
    TokenId target = 0;
    bool answerable = false;

    QueryKey key() const noexcept { return {subject, relation}; }
    friend bool operator==(const QaExample&, const QaExample&) = default;
};

struct DatasetSizes {
    std::size_t honesty_eval = 400;
    std::size_t domain_eval = 200;
    std::size_t d_hon = 128;
    std::size_t d_task = 128;
    std::size_t d_hon_holdout = 128;
    // Share of IDK-labeled examples in the pretraining corpus (9:1 default).
    double pretrain_idk_fraction = 0.1;
};

struct DatasetBundle {
    std::vector<QaExample> pretrain;
    std::vector<QaExample> domain_train;
    std::vector<QaExample> honesty_eval;
    std::vector<QaExample> domain_eval;
    std::vector<QaExample> d_hon;
    std::vector<QaExample> d_task;
    // Fresh D^hon-style examples never used for fitting (compensation overfit guard).
    std::vector<QaExample> d_hon_holdout;
};

// ============================================================================
// WORLD GENERATION
// ============================================================================

inline World generate_world(const WorldConfig& cfg, std::uint64_t seed) {
    if (cfg.entities == 0 || cfg.base_relations == 0 || cfg.answers == 0)
        throw ConfigError("world config: entity, base relation and answer counts must be positive");
    if (cfg.known + cfg.unknown > cfg.entities)
        throw ConfigError("world config: known + unknown (" + std::to_string(cfg.known + cfg.unknown) +
                          ") exceeds entity count (" + std::to_string(cfg.entities) + ")");
    if (cfg.known == 0) throw ConfigError("world config: at least one known entity is required");
    if (cfg.answers / cfg.base_relations < 2)
        throw ConfigError("world config: need at least two answer tokens per base relation");
    if (!(cfg.novel_domain_fraction >= 0.0 && cfg.novel_domain_fraction <= 1.0))
        throw ConfigError("world config: novel_domain_fraction must lie in [0, 1]");

    World w;
    w.config = cfg;
    w.seed = seed;

    TokenId next = 0;
    for (std::size_t i = 0; i < cfg.entities; ++i) w.entities.push_back(next++);
    for (std::size_t i = 0; i < cfg.base_relations; ++i) w.base_relations.push_back(next++);
    for (std::size_t i = 0; i < cfg.domain_relations; ++i) w.domain_relations.push_back(next++);
    for (std::size_t i = 0; i < cfg.answers; ++i) w.answers.push_back(next++);
    w.idk_token = next++;
    w.vocab_size = next;

    RngStream rng = RngStream(seed).split("world");

    std::vector<TokenId> order = w.entities;
    rng.shuffle(order);
    w.known_entities.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.known));
    w.unknown_entities.assign(order.begin() + static_cast<std::ptrdiff_t>(cfg.known),
                              order.begin() + static_cast<std::ptrdiff_t>(cfg.known + cfg.unknown));
    std::sort(w.known_entities.begin(), w.known_entities.end());
    std::sort(w.unknown_entities.begin(), w.unknown_entities.end());
    w.has_honesty_signal = !w.unknown_entities.empty();

    const std::size_t group = cfg.answers / cfg.base_relations;
    for (TokenId e : w.known_entities)
        for (std::size_t r = 0; r < cfg.base_relations; ++r)
            w.known_facts[{e, w.base_relations[r]}] = w.answers[r * group + rng.uniform_index(group)];

    // Novel entities: a seeded subset of the unknown ones.
    std::vector<TokenId> pool = w.unknown_entities;
    rng.shuffle(pool);
    const std::size_t n_novel = static_cast<std::size_t>(
        std::floor(static_cast<double>(pool.size()) * cfg.novel_domain_fraction + 1e-9));
    w.novel_entities.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_novel));
    std::sort(w.novel_entities.begin(), w.novel_entities.end());

    for (std::size_t m = 0; m < cfg.domain_relations; ++m) {
        const std::size_t src = m % cfg.base_relations;
        for (TokenId e : w.known_entities)
            w.domain_facts[{e, w.domain_relations[m]}] = w.known_facts.at({e, w.base_relations[src]});
        for (TokenId e : w.novel_entities)
            w.domain_facts[{e, w.domain_relations[m]}] = w.answers[src * group + rng.uniform_index(group)];
    }
    return w;
}

// ============================================================================
// DATASET CONSTRUCTION
// ============================================================================

namespace detail {

// Reorders pairs so each subject's first query comes before any subject's
// second one. Spreads a prefix evenly over subjects.
inline void round_robin_by_subject(std::vector<QaExample>& xs) {
    std::map<TokenId, std::size_t> seen;
    std::vector<std::pair<std::size_t, std::size_t>> rank;  // (per-subject rank, position)
    rank.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) rank.emplace_back(seen[xs[i].subject]++, i);
    std::stable_sort(rank.begin(), rank.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<QaExample> out;
    out.reserve(xs.size());
    for (const auto& [r, i] : rank) out.push_back(xs[i]);
    xs = std::move(out);
}

inline std::set<QueryKey> keys_of(const std::vector<QaExample>& xs) {
    std::set<QueryKey> k;
    for (const auto& x : xs) k.insert(x.key());
    return k;
}

}  // namespace detail

// Every split draws from its own named substream, so resizing one split
// (e.g. |D^hon| in a sweep) never reshuffles another.
inline DatasetBundle build_datasets(const World& w, const DatasetSizes& sizes, std::uint64_t seed) {
    if (!(sizes.pretrain_idk_fraction >= 0.0 && sizes.pretrain_idk_fraction < 1.0))
        throw ConfigError("dataset sizes: pretrain_idk_fraction must lie in [0, 1)");

    const RngStream root = RngStream(seed).split("datasets");
    RngStream rng = root.split("partition");
    DatasetBundle b;

    std::vector<QaExample> known;
    for (const auto& [key, ans] : w.known_facts) known.push_back({key.first, key.second, ans, true});
    std::vector<QaExample> unknown;
    for (TokenId e : w.unknown_entities)
        for (TokenId r : w.base_relations) unknown.push_back({e, r, w.idk_token, false});

    const std::size_t n_ans_eval = sizes.honesty_eval / 2;
    const std::size_t n_unans_eval = sizes.honesty_eval - n_ans_eval;
    if (n_ans_eval >= known.size())
        throw ConfigError("dataset sizes: honesty_eval needs more answerable queries than the world has");
    if (w.has_honesty_signal && n_unans_eval > unknown.size())
        throw ConfigError("dataset sizes: honesty_eval needs more unanswerable queries than the world has");

    rng.shuffle(known);
    rng.shuffle(unknown);
    // Unanswerable eval queries are drawn round-robin so the remaining pool
    // still covers every unknown entity.
    detail::round_robin_by_subject(unknown);
    std::reverse(unknown.begin(), unknown.end());

    std::vector<QaExample> eval_ans(known.begin(), known.begin() + static_cast<std::ptrdiff_t>(n_ans_eval));
    std::vector<QaExample> known_train(known.begin() + static_cast<std::ptrdiff_t>(n_ans_eval), known.end());

    const std::size_t take_unans = w.has_honesty_signal ? n_unans_eval : 0;
    std::vector<QaExample> eval_unans(unknown.begin(), unknown.begin() + static_cast<std::ptrdiff_t>(take_unans));
    std::vector<QaExample> unknown_pool(unknown.begin() + static_cast<std::ptrdiff_t>(take_unans), unknown.end());
    rng.shuffle(unknown_pool);
    detail::round_robin_by_subject(unknown_pool);

    // Pretraining corpus: every remaining known fact plus IDK queries at the
    // configured share.
    const double f = sizes.pretrain_idk_fraction;
    std::size_t n_idk = static_cast<std::size_t>(
        std::llround(static_cast<double>(known_train.size()) * f / (1.0 - f)));
    n_idk = std::min(n_idk, unknown_pool.size());
    b.pretrain = known_train;
    b.pretrain.insert(b.pretrain.end(), unknown_pool.begin(),
                      unknown_pool.begin() + static_cast<std::ptrdiff_t>(n_idk));
    rng.shuffle(b.pretrain);
    std::vector<QaExample> idk_rest(unknown_pool.begin() + static_cast<std::ptrdiff_t>(n_idk), unknown_pool.end());

    // Honesty eval: balanced and interleaved deterministically.
    b.honesty_eval = eval_ans;
    b.honesty_eval.insert(b.honesty_eval.end(), eval_unans.begin(), eval_unans.end());
    rng.shuffle(b.honesty_eval);

    // D^hon and its holdout: half fresh IDK queries, half answerable known
    // facts. Both pools are permuted once; D^hon takes a prefix and the
    // holdout is cut from the far end, so neither depends on the other's size.
    if (w.has_honesty_signal) {
        RngStream hr = root.split("d_hon");
        std::vector<QaExample> idk_pool = idk_rest;
        std::vector<QaExample> ans_pool = known_train;
        hr.shuffle(idk_pool);
        hr.shuffle(ans_pool);
        auto take = [&](std::size_t n_total, bool from_end, std::vector<QaExample>& out) {
            const std::size_t n_idk_part = n_total / 2;
            const std::size_t n_ans_part = n_total - n_idk_part;
            if (n_idk_part > idk_pool.size())
                throw ConfigError("dataset sizes: D^hon requests " + std::to_string(n_idk_part) +
                                  " IDK queries but only " + std::to_string(idk_pool.size()) + " remain");
            if (n_ans_part > ans_pool.size()) throw ConfigError("dataset sizes: D^hon too large");
            auto slice = [&](const std::vector<QaExample>& pool, std::size_t n) {
                return from_end ? std::vector<QaExample>(pool.end() - static_cast<std::ptrdiff_t>(n), pool.end())
                                : std::vector<QaExample>(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
            };
            out = slice(idk_pool, n_idk_part);
            const auto a = slice(ans_pool, n_ans_part);
            out.insert(out.end(), a.begin(), a.end());
        };
        take(sizes.d_hon, false, b.d_hon);
        take(sizes.d_hon_holdout, true, b.d_hon_holdout);
        const auto overlap = [](const std::vector<QaExample>& a, const std::vector<QaExample>& c) {
            const std::set<QueryKey> ka = detail::keys_of(a);
            return std::any_of(c.begin(), c.end(), [&](const QaExample& x) { return ka.count(x.key()) > 0; });
        };
        if (overlap(b.d_hon, b.d_hon_holdout))
            throw ConfigError("dataset sizes: D^hon and its holdout overlap; reduce d_hon or d_hon_holdout");
        root.split("d_hon/order").shuffle(b.d_hon);
        root.split("d_hon_holdout/order").shuffle(b.d_hon_holdout);
    }

    // Domain split. Eval pairs must be inferable: a known entity whose source
    // base fact is in the pretraining corpus. Everything else (including the
    // novel entities' facts) is training data.
    RngStream dr = root.split("domain");
    const std::set<QueryKey> pretrain_keys = detail::keys_of(b.pretrain);
    std::vector<QaExample> domain_ok, domain_other;
    for (const auto& [key, ans] : w.domain_facts) {
        const std::size_t m = static_cast<std::size_t>(key.second - w.domain_relations.front());
        const TokenId src = w.base_relations[m % w.config.base_relations];
        QaExample ex{key.first, key.second, ans, true};
        (pretrain_keys.count({key.first, src}) ? domain_ok : domain_other).push_back(ex);
    }
    if (sizes.domain_eval > domain_ok.size())
        throw ConfigError("dataset sizes: domain_eval exceeds inferable domain facts");
    dr.shuffle(domain_ok);
    b.domain_eval.assign(domain_ok.begin(), domain_ok.begin() + static_cast<std::ptrdiff_t>(sizes.domain_eval));
    b.domain_train.assign(domain_ok.begin() + static_cast<std::ptrdiff_t>(sizes.domain_eval), domain_ok.end());
    b.domain_train.insert(b.domain_train.end(), domain_other.begin(), domain_other.end());
    dr.shuffle(b.domain_train);

    if (sizes.d_task > b.domain_train.size()) throw ConfigError("dataset sizes: d_task exceeds domain_train");
    RngStream tr = root.split("d_task");
    for (std::size_t i : tr.sample_without_replacement(b.domain_train.size(), sizes.d_task))
        b.d_task.push_back(b.domain_train[i]);

    // Disjointness of evaluation and training keys.
    std::set<QueryKey> train_keys = pretrain_keys;
    for (const auto* split : {&b.domain_train, &b.d_hon, &b.d_task, &b.d_hon_holdout})
        for (const auto& x : *split) train_keys.insert(x.key());
    for (const auto* split : {&b.honesty_eval, &b.domain_eval})
        for (const auto& x : *split)
            if (train_keys.count(x.key()))
                throw InternalError("evaluation query (" + std::to_string(x.subject) + ", " +
                                    std::to_string(x.relation) + ") leaked into a training split");
    return b;
}

// ============================================================================
// SERIALIZATION
// ============================================================================

inline nlohmann::json to_json(const QaExample& x) {
    return {{"subject", x.subject}, {"relation", x.relation}, {"target", x.target}, {"answerable", x.answerable}};
}

inline QaExample qa_from_json(const nlohmann::json& j) {
    QaExample x;
    x.subject = j.at("subject").get<TokenId>();
    x.relation = j.at("relation").get<TokenId>();
    x.target = j.at("target").get<TokenId>();
    x.answerable = j.at("answerable").get<bool>();
    return x;
}

// One QaExample per line.
inline std::string to_jsonl(const std::vector<QaExample>& xs) {
    std::string out;
    for (const auto& x : xs) {
        out += to_json(x).dump();
        out += '\n';
    }
    return out;
}

// Reads QaExample lines; a leading {"kind": "header", ...} line is returned
// through `header` (when given) and otherwise skipped.
inline std::vector<QaExample> from_jsonl(std::istream& in, nlohmann::json* header = nullptr) {
    std::vector<QaExample> xs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            if (j.is_object() && j.contains("kind") && j["kind"] == "header") {
                if (header) *header = std::move(j);
                continue;
            }
            xs.push_back(qa_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("line " + std::to_string(lineno), "malformed QaExample on line " +
                                                                  std::to_string(lineno) + ": " + e.what());
        }
    }
    return xs;
}

// Dataset file: one header line (split name, config and world hashes), then
// one QaExample per line.
inline std::string dataset_file_jsonl(const std::string& split, const std::vector<QaExample>& xs,
                                      const std::string& config_hash, const std::string& world_hash) {
    const nlohmann::json header = {{"kind", "header"},          {"schema", "hcnr-dataset/1"},
                                   {"split", split},            {"config_hash", config_hash},
                                   {"world_hash", world_hash},  {"count", xs.size()}};
    return header.dump() + '\n' + to_jsonl(xs);
}

inline const std::vector<std::pair<std::string, const std::vector<QaExample> DatasetBundle::*>>& bundle_splits() {
    static const std::vector<std::pair<std::string, const std::vector<QaExample> DatasetBundle::*>> splits = {
        {"pretrain", &DatasetBundle::pretrain},       {"domain_train", &DatasetBundle::domain_train},
        {"honesty_eval", &DatasetBundle::honesty_eval}, {"domain_eval", &DatasetBundle::domain_eval},
        {"d_hon", &DatasetBundle::d_hon},             {"d_task", &DatasetBundle::d_task},
        {"d_hon_holdout", &DatasetBundle::d_hon_holdout},
    };
    return splits;
}

inline std::string bundle_hash(const DatasetBundle& b) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, member] : bundle_splits()) {
        h = fnv1a64(name, h);
        h = fnv1a64(to_jsonl(b.*member), h);
    }
    return hex64(h);
}

// world.jsonl: a header line followed by one line per fact / unknown entity.
inline std::string world_to_jsonl(const World& w, const std::string& config_hash) {
    std::string out;
    nlohmann::json header = {
        {"kind", "header"},
        {"config_hash", config_hash},
        {"world_hash", w.hash()},
        {"seed", w.seed},
        {"vocab_size", w.vocab_size},
        {"idk_token", w.idk_token},
        {"entities", w.config.entities},
        {"known", w.config.known},
        {"unknown", w.config.unknown},
        {"base_relations", w.base_relations},
        {"domain_relations", w.domain_relations},
        {"answers", {w.answers.front(), w.answers.back()}},
        {"has_honesty_signal", w.has_honesty_signal},
        {"novel_entities", w.novel_entities},
    };
    out += header.dump() + '\n';
    for (TokenId e : w.unknown_entities) out += nlohmann::json{{"kind", "unknown"}, {"entity", e}}.dump() + '\n';
    for (const auto& [k, a] : w.known_facts)
        out += nlohmann::json{{"kind", "fact"}, {"subject", k.first}, {"relation", k.second}, {"answer", a}}.dump() + '\n';
    for (const auto& [k, a] : w.domain_facts)
        out += nlohmann::json{{"kind", "domain_fact"}, {"subject", k.first}, {"relation", k.second}, {"answer", a}}
                   .dump() +
               '\n';
    return out;
}

}  // namespace hcnr
