#include <gtest/gtest.h>

#include <limits>

#include "hcnr/training.hpp"
#include "test_util.hpp"

using namespace hcnr;
using hcnr::testing::random_batch;
using hcnr::testing::random_model;
using hcnr::testing::tiny_arch;

namespace {

TrainConfig quick(std::size_t steps) {
    TrainConfig c;
    c.steps = steps;
    c.batch_size = 8;
    c.learning_rate = 0.1;
    c.seed = 4;
    return c;
}

}  // namespace

TEST(Train, ZeroStepsReturnsInputUnchanged) {
    const auto a = tiny_arch();
    const auto m = random_model(a, 1);
    const auto data = random_batch(a, 10, 2);
    const TrainResult r = train(m, data, quick(0));
    EXPECT_TRUE(r.model.same_weights(m));
    EXPECT_EQ(r.initial_loss, r.final_loss);
    EXPECT_TRUE(r.curve.points.empty());
}

TEST(Train, SingleStepIsPlainSgd) {
    // With an empty velocity, one momentum step equals theta - lr * grad.
    const auto a = tiny_arch();
    const auto m = random_model(a, 1);
    const auto data = random_batch(a, 8, 2);
    TrainConfig c = quick(1);
    c.batch_size = 8;
    const TrainResult r = train(m, data, c);
    BatchGradients g = backward(m, data);  // full batch, order-independent mean
    ModelCheckpoint expect = m;
    auto ps = tensor_spans(expect);
    auto gs = tensor_spans(g);
    for (std::size_t t = 0; t < ps.size(); ++t)
        for (std::size_t i = 0; i < ps[t].size(); ++i) ps[t][i] -= c.learning_rate * gs[t][i];
    auto got = tensor_spans(const_cast<ModelCheckpoint&>(r.model));
    for (std::size_t t = 0; t < ps.size(); ++t)
        for (std::size_t i = 0; i < ps[t].size(); ++i) EXPECT_NEAR(got[t][i], ps[t][i], 1e-12);
}

TEST(Train, LossDecreasesOnFixedData) {
    const auto a = tiny_arch(12, 4, 8, 2);
    const auto data = random_batch(a, 16, 3);
    const TrainResult r = train(init_model(a, 5, 0.5), data, quick(300));
    EXPECT_LT(r.final_loss, 0.5 * r.initial_loss);
}

TEST(Train, DeterministicForSeed) {
    const auto a = tiny_arch();
    const auto data = random_batch(a, 20, 3);
    const auto m = init_model(a, 5);
    EXPECT_EQ(checkpoint_bytes(train(m, data, quick(25)).model), checkpoint_bytes(train(m, data, quick(25)).model));
}

TEST(Train, FrozenTensorsStayFixed) {
    const auto a = tiny_arch();
    const auto m = random_model(a, 1);
    const auto data = random_batch(a, 10, 2);
    TrainConfig c = quick(10);
    c.train_embeddings = false;
    c.trainable_embedding_rows = {data[0].relation};
    c.train_output = false;
    const TrainResult r = train(m, data, c);
    EXPECT_EQ(r.model.out, m.out);
    for (std::size_t v = 0; v < a.vocab; ++v) {
        const bool trainable = v == data[0].relation;
        bool same = true;
        for (std::size_t i = 0; i < a.embed_dim; ++i) same = same && r.model.embed(v, i) == m.embed(v, i);
        if (!trainable) {
            EXPECT_TRUE(same) << "row " << v;
        }
    }
    EXPECT_NE(r.model.hidden[0].weight, m.hidden[0].weight);
}

TEST(Train, CurveRecordsStepZeroAndEnd) {
    const auto a = tiny_arch();
    const auto data = random_batch(a, 10, 2);
    TrainConfig c = quick(25);
    c.eval_every = 10;
    const EvalSuite suite{data, data, 11};
    const TrainResult r = train(random_model(a, 1), data, c, suite);
    std::vector<std::size_t> steps;
    for (const auto& p : r.curve.points) steps.push_back(p.step);
    EXPECT_EQ(steps, (std::vector<std::size_t>{0, 10, 20, 25}));
    EXPECT_NE(r.curve.to_csv("h").find("step,f1,rf_delta,domain_acc"), std::string::npos);
}

TEST(Train, ProvenanceFollowsStage) {
    const auto a = tiny_arch();
    TrainConfig c = quick(2);
    c.stage = Stage::rait;
    EXPECT_EQ(train(random_model(a, 1), random_batch(a, 4, 2), c).model.meta.provenance, Provenance::rait);
}

TEST(Train, DivergenceIsReported) {
    const auto a = tiny_arch();
    // tanh keeps a finite model's loss finite, so poison one weight.
    ModelCheckpoint m = random_model(a, 1);
    m.hidden[1].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train(m, random_batch(a, 8, 2), quick(5));
        FAIL() << "expected TrainingDiverged";
    } catch (const TrainingDiverged& e) {
        EXPECT_EQ(e.step(), 1u);
    }
}

TEST(Train, InvalidConfigAndEmptyData) {
    const auto a = tiny_arch();
    TrainConfig c = quick(1);
    c.batch_size = 0;
    EXPECT_THROW(train(random_model(a, 1), random_batch(a, 4, 2), c), ConfigError);
    c = quick(1);
    c.momentum = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(train(random_model(a, 1), std::span<const QaExample>{}, quick(1)), ContractViolation);
    EXPECT_THROW(stage_from_string("finetune"), ConfigError);
}

TEST(RehearsalMix, FractionOfIdkExamples) {
    const auto a = tiny_arch();
    auto domain = random_batch(a, 90, 1);
    for (auto& x : domain) x.answerable = true;
    auto idk = random_batch(a, 20, 2);
    for (auto& x : idk) x.answerable = false;
    const auto mix = rehearsal_mix(domain, idk, 0.1, 3);
    std::size_t n_idk = 0;
    for (const auto& x : mix) n_idk += !x.answerable;
    EXPECT_EQ(mix.size(), 100u);
    EXPECT_EQ(n_idk, 10u);
    EXPECT_EQ(rehearsal_mix(domain, idk, 0.1, 3), mix);
}

TEST(RehearsalMix, SmallIdkSetDrawsWithReplacement) {
    const auto a = tiny_arch();
    const auto domain = random_batch(a, 10, 1);
    const auto idk = random_batch(a, 2, 2);
    EXPECT_EQ(rehearsal_mix(domain, idk, 0.5, 3).size(), 20u);
    EXPECT_EQ(rehearsal_mix(domain, idk, 0.0, 3).size(), 10u);
    EXPECT_THROW(rehearsal_mix(domain, {}, 0.5, 3), ContractViolation);
    EXPECT_THROW(rehearsal_mix(domain, idk, 1.5, 3), ContractViolation);
}
