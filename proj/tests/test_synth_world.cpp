#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "hcnr/synth_world.hpp"
#include "test_util.hpp"

using namespace hcnr;

namespace {

const World& default_world() {
    static const World w = generate_world({}, 7);
    return w;
}

const DatasetBundle& default_bundle() {
    static const DatasetBundle b = build_datasets(default_world(), {}, 7);
    return b;
}

}  // namespace

TEST(GenerateWorld, DeterministicForSeed) {
    const World a = generate_world({}, 7);
    const World b = generate_world({}, 7);
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.known_facts, b.known_facts);
    EXPECT_EQ(a.domain_facts, b.domain_facts);
    EXPECT_NE(a.hash(), generate_world({}, 8).hash());
}

TEST(GenerateWorld, KnownFactCountByConstruction) {
    EXPECT_EQ(default_world().known_facts.size(), 400u * 8u);
    EXPECT_EQ(default_world().known_entities.size(), 400u);
    EXPECT_EQ(default_world().unknown_entities.size(), 100u);
    EXPECT_EQ(default_world().base_relations.size(), 8u);
    EXPECT_EQ(default_world().domain_relations.size(), 4u);
    EXPECT_EQ(default_world().answers.size(), 64u);
}

TEST(GenerateWorld, NoUnknownEntitiesFlagsNoHonestySignal) {
    WorldConfig c;
    c.unknown = 0;
    const World w = generate_world(c, 7);
    EXPECT_TRUE(w.unknown_entities.empty());
    EXPECT_FALSE(w.has_honesty_signal);
}

TEST(GenerateWorld, InfeasibleSplitIsConfigError) {
    WorldConfig c;
    c.known = 450;
    c.unknown = 100;
    EXPECT_THROW(generate_world(c, 7), ConfigError);
    WorldConfig z;
    z.answers = 0;
    EXPECT_THROW(generate_world(z, 7), ConfigError);
}

TEST(GenerateWorld, StructuralInvariants) {
    const World& w = default_world();
    const std::set<TokenId> answers(w.answers.begin(), w.answers.end());
    EXPECT_FALSE(answers.count(w.idk_token));
    const std::set<TokenId> unknown(w.unknown_entities.begin(), w.unknown_entities.end());
    for (const auto& [key, ans] : w.known_facts) {
        EXPECT_FALSE(unknown.count(key.first));
        EXPECT_TRUE(answers.count(ans));
    }
    for (const auto& [key, ans] : w.domain_facts) EXPECT_TRUE(answers.count(ans));
    for (TokenId e : w.novel_entities) EXPECT_TRUE(unknown.count(e));
    EXPECT_EQ(w.novel_entities.size(), 5u);  // floor(0.05 * 100)
}

TEST(GenerateWorld, DomainFactsOfKnownEntitiesAliasBaseFacts) {
    const World& w = default_world();
    for (const auto& [key, ans] : w.domain_facts) {
        const auto it = std::find(w.known_entities.begin(), w.known_entities.end(), key.first);
        if (it == w.known_entities.end()) continue;
        const std::size_t m = key.second - w.domain_relations.front();
        EXPECT_EQ(ans, w.known_facts.at({key.first, w.base_relations[m % w.base_relations.size()]}));
    }
}

TEST(BuildDatasets, DefaultSizes) {
    const DatasetBundle& b = default_bundle();
    EXPECT_EQ(b.d_hon.size(), 128u);
    EXPECT_EQ(b.d_task.size(), 128u);
    EXPECT_EQ(b.d_hon_holdout.size(), 128u);
    EXPECT_EQ(b.honesty_eval.size(), 400u);
    EXPECT_EQ(b.domain_eval.size(), 200u);
}

TEST(BuildDatasets, HonestyEvalBalance) {
    DatasetSizes s;
    s.honesty_eval = 200;
    const DatasetBundle b = build_datasets(default_world(), s, 7);
    std::size_t ans = 0;
    for (const auto& x : b.honesty_eval) ans += x.answerable;
    EXPECT_EQ(ans, 100u);
    EXPECT_EQ(b.honesty_eval.size() - ans, 100u);
}

TEST(BuildDatasets, SplitContents) {
    const World& w = default_world();
    const DatasetBundle& b = default_bundle();
    std::size_t idk_pre = 0;
    for (const auto& x : b.pretrain) idk_pre += !x.answerable;
    EXPECT_GT(idk_pre, 0u);
    EXPECT_GT(b.pretrain.size() - idk_pre, 0u);
    // 9:1 answer-labeled to IDK-labeled.
    EXPECT_NEAR(static_cast<double>(idk_pre) / static_cast<double>(b.pretrain.size()), 0.1, 0.005);
    for (const auto& x : b.domain_train) {
        EXPECT_TRUE(x.answerable);
        EXPECT_NE(x.target, w.idk_token);
    }
    std::size_t idk_hon = 0;
    for (const auto& x : b.d_hon) idk_hon += !x.answerable;
    EXPECT_EQ(idk_hon, 64u);
    const std::set<QueryKey> domain_keys = detail::keys_of(b.domain_train);
    for (const auto& x : b.d_task) EXPECT_TRUE(domain_keys.count(x.key()));
}

TEST(BuildDatasets, AnswerableIffNotIdk) {
    const World& w = default_world();
    for (const auto& [name, member] : bundle_splits())
        for (const auto& x : default_bundle().*member) EXPECT_EQ(x.answerable, x.target != w.idk_token) << name;
}

TEST(BuildDatasets, UnanswerableSubjectsAreUnknownEntities) {
    const World& w = default_world();
    const std::set<TokenId> unknown(w.unknown_entities.begin(), w.unknown_entities.end());
    const std::set<TokenId> base(w.base_relations.begin(), w.base_relations.end());
    for (const auto& [name, member] : bundle_splits())
        for (const auto& x : default_bundle().*member)
            if (!x.answerable) {
                EXPECT_TRUE(unknown.count(x.subject)) << name;
                EXPECT_TRUE(base.count(x.relation)) << name;
            }
}

TEST(BuildDatasets, EvalDisjointFromTraining) {
    const DatasetBundle& b = default_bundle();
    std::set<QueryKey> train;
    for (const auto* s : {&b.pretrain, &b.domain_train, &b.d_hon, &b.d_task, &b.d_hon_holdout})
        for (const auto& x : *s) train.insert(x.key());
    for (const auto* s : {&b.honesty_eval, &b.domain_eval})
        for (const auto& x : *s) EXPECT_FALSE(train.count(x.key()));
}

TEST(BuildDatasets, ByteIdenticalAcrossRuns) {
    const DatasetBundle again = build_datasets(generate_world({}, 7), {}, 7);
    EXPECT_EQ(bundle_hash(again), bundle_hash(default_bundle()));
    for (const auto& [name, member] : bundle_splits()) EXPECT_EQ(to_jsonl(again.*member), to_jsonl(default_bundle().*member));
}

TEST(BuildDatasets, ResizingDhonLeavesOtherSplitsUnchanged) {
    DatasetSizes s;
    s.d_hon = 32;
    const DatasetBundle b = build_datasets(default_world(), s, 7);
    for (const auto& [name, member] : bundle_splits()) {
        if (name == "d_hon") continue;
        EXPECT_EQ(b.*member, default_bundle().*member) << name;
    }
}

TEST(BuildDatasets, OversizedRequestsAreConfigErrors) {
    DatasetSizes s;
    s.d_hon = 100000;
    EXPECT_THROW(build_datasets(default_world(), s, 7), ConfigError);
    DatasetSizes t;
    t.domain_eval = 100000;
    EXPECT_THROW(build_datasets(default_world(), t, 7), ConfigError);
}

TEST(Serialization, JsonlRoundTripWithHeader) {
    const auto& xs = default_bundle().d_hon;
    std::istringstream in(dataset_file_jsonl("d_hon", xs, "cfg", "world"));
    nlohmann::json header;
    const auto back = from_jsonl(in, &header);
    EXPECT_EQ(back, xs);
    EXPECT_EQ(header["split"], "d_hon");
    EXPECT_EQ(header["world_hash"], "world");
    EXPECT_EQ(header["count"], xs.size());
}

TEST(Serialization, MalformedLineIsLoadError) {
    std::istringstream in("{\"subject\": 1}\n");
    EXPECT_THROW(from_jsonl(in), LoadError);
}

TEST(Serialization, WorldFileHeaderCarriesHashes) {
    const std::string text = world_to_jsonl(default_world(), "abc");
    const auto header = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(header["config_hash"], "abc");
    EXPECT_EQ(header["world_hash"], default_world().hash());
}
