#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "hcnr/model.hpp"
#include "test_util.hpp"

using namespace hcnr;
using hcnr::testing::random_batch;
using hcnr::testing::random_model;
using hcnr::testing::tiny_arch;

TEST(Forward, ShapesAndTrace) {
    const auto a = tiny_arch();
    const auto m = random_model(a, 1);
    const auto batch = random_batch(a, 6, 2);
    const ForwardResult r = forward(m, batch);
    EXPECT_EQ(r.logits.rows(), a.vocab);
    EXPECT_EQ(r.logits.cols(), 6u);
    ASSERT_EQ(r.trace.inputs.size(), a.num_layers);
    EXPECT_EQ(r.trace.inputs[0].rows(), 2 * a.embed_dim);
    for (std::size_t j = 1; j < a.num_layers; ++j) EXPECT_EQ(r.trace.inputs[j], r.trace.outputs[j - 1]);
}

TEST(Forward, HandComputedOneUnit) {
    // vocab 2, E=1, d'=1, one layer: h = tanh(w0*e_s + w1*e_r + b), logits = W_out h + b_out.
    const auto a = tiny_arch(2, 1, 1, 1);
    ModelCheckpoint m = zero_model(a);
    m.embed(0, 0) = 0.5;
    m.embed(1, 0) = -1.0;
    m.hidden[0].weight(0, 0) = 2.0;
    m.hidden[0].weight(0, 1) = 1.0;
    m.hidden[0].bias[0] = 0.25;
    m.out.weight(0, 0) = 1.0;
    m.out.weight(1, 0) = -1.0;
    const std::vector<QaExample> batch{{0, 1, 0, true}};
    const ForwardResult r = forward(m, batch);
    const double h = std::tanh(2.0 * 0.5 + 1.0 * -1.0 + 0.25);
    EXPECT_DOUBLE_EQ(r.trace.outputs[0](0, 0), h);
    EXPECT_DOUBLE_EQ(r.logits(0, 0), h);
    EXPECT_DOUBLE_EQ(r.logits(1, 0), -h);
    const double expect_loss = -(h - std::log(std::exp(h) + std::exp(-h)));
    EXPECT_NEAR(mean_loss(m, batch), expect_loss, 1e-14);
}

TEST(Forward, OutOfRangeTokenIsInputError) {
    const auto a = tiny_arch();
    const auto m = random_model(a, 1);
    const std::vector<QaExample> batch{{static_cast<TokenId>(a.vocab), 0, 0, true}};
    EXPECT_THROW(forward(m, batch), InputError);
}

TEST(Predict, ArgmaxTieGoesToLowerIndex) {
    const auto a = tiny_arch(4, 1, 1, 1);
    ModelCheckpoint m = zero_model(a);
    const std::vector<QaExample> batch{{0, 1, 0, true}};
    EXPECT_EQ(predict(m, batch), (std::vector<TokenId>{0}));
    m.out.bias[2] = 1.0;
    m.out.bias[3] = 1.0;
    EXPECT_EQ(predict(m, batch), (std::vector<TokenId>{2}));
}

TEST(Backward, MatchesCentralFiniteDifferences) {
    const auto a = tiny_arch(10, 3, 4, 3);
    ModelCheckpoint m = random_model(a, 21, 0.6);
    const auto batch = random_batch(a, 5, 22);
    BatchGradients g = backward(m, batch);
    EXPECT_NEAR(g.loss, mean_loss(m, batch), 1e-12);

    auto grads = tensor_spans(g);
    auto params = tensor_spans(m);
    ASSERT_EQ(grads.size(), params.size());
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            const double keep = params[t][i];
            params[t][i] = keep + h;
            const double up = mean_loss(m, batch);
            params[t][i] = keep - h;
            const double down = mean_loss(m, batch);
            params[t][i] = keep;
            const double fd = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(fd - grads[t][i]) / std::max(1.0, std::abs(fd)));
        }
    EXPECT_LT(worst, 1e-6);
}

TEST(Backward, SquaredRowGradientsMatchPerExampleGradients) {
    const auto a = tiny_arch(10, 3, 4, 2);
    const ModelCheckpoint m = random_model(a, 4);
    const auto batch = random_batch(a, 6, 5);
    const BatchGradients g = backward(m, batch);
    for (std::size_t j = 0; j < a.num_layers; ++j)
        for (std::size_t k = 0; k < a.hidden_dim; ++k) {
            double expect = 0.0;
            for (const auto& x : batch) {
                const std::vector<QaExample> one{x};
                const BatchGradients gi = backward(m, one);
                for (double v : gi.hidden[j].weight.row(k)) expect += v * v;
            }
            expect /= static_cast<double>(batch.size());
            EXPECT_NEAR(g.sq_row_grads[j][k], expect, 1e-10 * (1.0 + expect));
        }
}

TEST(Backward, EmptyBatchIsContractViolation) {
    const auto m = random_model(tiny_arch(), 1);
    EXPECT_THROW(backward(m, std::span<const QaExample>{}), ContractViolation);
}

TEST(InitModel, BiasesZeroAndSeeded) {
    const auto a = tiny_arch();
    const auto m1 = init_model(a, 5);
    const auto m2 = init_model(a, 5);
    EXPECT_TRUE(m1.same_weights(m2));
    EXPECT_FALSE(m1.same_weights(init_model(a, 6)));
    for (const auto& l : m1.hidden)
        for (double b : l.bias) EXPECT_EQ(b, 0.0);
}

TEST(ZeroModel, RejectsZeroDimensions) {
    EXPECT_THROW(zero_model(tiny_arch(0)), ConfigError);
}

TEST(Checkpoint, ByteRoundTripIsBitwise) {
    ModelCheckpoint m = random_model(tiny_arch(), 9);
    m.meta.provenance = Provenance::hcnr;
    m.meta.stage = "hcnr";
    m.meta.config_hash = "abc";
    m.meta.world_hash = "def";
    const std::string bytes = checkpoint_bytes(m);
    const ModelCheckpoint back = checkpoint_from_bytes(bytes);
    EXPECT_TRUE(back.same_weights(m));
    EXPECT_EQ(back.meta, m.meta);
    EXPECT_EQ(checkpoint_bytes(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
    const auto dir = hcnr::testing::scratch_dir("ckpt");
    const ModelCheckpoint m = random_model(tiny_arch(), 10);
    save_checkpoint(m, (dir / "m.hcnr").string());
    EXPECT_TRUE(load_checkpoint((dir / "m.hcnr").string()).same_weights(m));
    EXPECT_THROW(load_checkpoint((dir / "missing.hcnr").string()), LoadError);
}

TEST(Checkpoint, TruncatedPayloadNamesTensor) {
    const std::string bytes = checkpoint_bytes(random_model(tiny_arch(), 11));
    try {
        checkpoint_from_bytes(std::string_view(bytes).substr(0, bytes.size() - 4));
        FAIL() << "expected LoadError";
    } catch (const LoadError& e) {
        EXPECT_EQ(e.field(), "tensor out.bias");
    }
}

TEST(Checkpoint, BadMagicAndTrailingBytes) {
    std::string bytes = checkpoint_bytes(random_model(tiny_arch(), 12));
    std::string bad = bytes;
    bad[0] = 'X';
    try {
        checkpoint_from_bytes(bad);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.field(), "magic");
    }
    try {
        checkpoint_from_bytes(bytes + "xx");
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.field(), "payload");
    }
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
    const ModelCheckpoint m = random_model(tiny_arch(), 13);
    std::string bytes = checkpoint_bytes(m);
    const std::size_t hlen = detail::get_le(bytes, 6, 4);
    auto header = nlohmann::json::parse(bytes.substr(10, hlen));
    header["tensors"][1]["shape"] = {99, 99};
    std::string h = header.dump();
    std::string rebuilt = bytes.substr(0, 6);
    detail::put_le(rebuilt, h.size(), 4);
    rebuilt += h + bytes.substr(10 + hlen);
    try {
        checkpoint_from_bytes(rebuilt);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_EQ(e.field(), "hidden.0.weight");
    }
}

TEST(ValidateModel, NonFiniteIsNumericalError) {
    ModelCheckpoint m = random_model(tiny_arch(), 14);
    m.hidden[1].bias[0] = std::nan("");
    EXPECT_THROW(validate_model(m), NumericalError);
}
