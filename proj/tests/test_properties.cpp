// Property tests: invariants checked over many seeded random instances.

#include <gtest/gtest.h>

#include <cmath>

#include "hcnr/compensation.hpp"
#include "hcnr/metrics.hpp"
#include "hcnr/probes.hpp"
#include "hcnr/surgery.hpp"
#include "test_util.hpp"

using namespace hcnr;
using hcnr::testing::random_batch;
using hcnr::testing::random_matrix;
using hcnr::testing::random_model;
using hcnr::testing::tiny_arch;

namespace {

constexpr std::uint64_t kCases = 25;

LayerScores random_scores(const Architecture& a, RngStream& rng) {
    LayerScores s(a.num_layers, Vector(a.hidden_dim));
    for (auto& l : s)
        for (double& v : l) v = std::abs(rng.normal());
    return s;
}

}  // namespace

TEST(Property, CandidateCountsAndPartition) {
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const auto a = tiny_arch(10, 2, 3 + rng.uniform_index(10), 1 + rng.uniform_index(5));
        const double r_iw = 0.05 + 0.95 * rng.uniform();
        const double r_cw = 0.05 + 0.95 * rng.uniform();
        const ModelCheckpoint orig = random_model(a, seed);
        ModelCheckpoint sft = random_model(a, seed + 1000);
        const LayerScores r = priority(random_scores(a, rng), random_scores(a, rng));
        const LayerIndexSets cand = candidate_neurons(r, r_iw);
        for (const auto& c : cand) EXPECT_EQ(c.size(), ratio_count(a.hidden_dim, r_iw));
        const SurgeryPlan p = plan_from_candidates(cand, orig, sft, r_iw, r_cw);
        EXPECT_LE(p.selected_layers.size(), ratio_count(a.num_layers, r_cw));
        double modified = 0.0, total = 0.0;
        for (std::size_t j = 0; j < a.num_layers; ++j) {
            modified += static_cast<double>(p.hc[j].size() * p.row_sizes[j]);
            total += static_cast<double>(a.hidden_dim * p.row_sizes[j]);
        }
        EXPECT_NEAR(p.modification_ratio, modified / total, 1e-15);
        EXPECT_LE(p.modification_ratio, r_iw + 1e-12);
        for (std::size_t j = 0; j < a.num_layers; ++j) {
            EXPECT_EQ(p.hc[j].size() + p.task[j].size(), a.hidden_dim);
            EXPECT_TRUE(std::is_sorted(p.hc[j].begin(), p.hc[j].end()));
        }
    }
}

TEST(Property, RestoreIsIdempotentAndLocal) {
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const auto a = tiny_arch(10, 2, 6, 3);
        const ModelCheckpoint orig = random_model(a, seed);
        const ModelCheckpoint sft = random_model(a, seed + 1000);
        const LayerIndexSets cand = candidate_neurons(random_scores(a, rng), 0.5);
        const SurgeryPlan p = plan_from_candidates(cand, orig, sft, 0.5, 0.67);
        const ModelCheckpoint once = restore(sft, orig, p);
        EXPECT_TRUE(restore(once, orig, p).same_weights(once));
        // Restoring everything from sft itself is the identity.
        EXPECT_TRUE(restore(sft, sft, p).same_weights(sft));
        std::size_t changed = 0;
        for (std::size_t j = 0; j < a.num_layers; ++j)
            for (std::size_t r = 0; r < a.hidden_dim; ++r)
                changed += !std::equal(once.hidden[j].weight.row(r).begin(), once.hidden[j].weight.row(r).end(),
                                       sft.hidden[j].weight.row(r).begin());
        EXPECT_EQ(changed, p.hc_rows());
    }
}

TEST(Property, CompensationSatisfiesPinConstraint) {
    // For a single task row k the closed form pins v_k = delta_k and is the
    // constrained minimizer of v^T H v.
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const std::size_t n = 2 + rng.uniform_index(6);
        const Matrix h = random_spd(n, rng);
        const std::size_t k = rng.uniform_index(n);
        const double delta = rng.normal();
        Matrix d(n, 1);
        d(k, 0) = delta;
        const std::vector<std::size_t> task{k};
        const Matrix c = compensation_matrix(damped_spd_inverse(h, 0.0), d, task);
        EXPECT_NEAR(c(k, 0), delta, 1e-9 * (1.0 + std::abs(delta)));
        const Vector oracle = constrained_quadratic_min(h, k, delta);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(c(i, 0), oracle[i], 1e-7 * (1.0 + std::abs(oracle[i])));
    }
}

TEST(Property, CompensationIsLinear) {
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const std::size_t n = 2 + rng.uniform_index(6);
        const Matrix h_inv = damped_spd_inverse(random_spd(n, rng), 0.0);
        const Matrix d1 = random_matrix(n, 3, rng), d2 = random_matrix(n, 3, rng);
        std::vector<std::size_t> task;
        for (std::size_t i = 0; i < n; ++i)
            if (rng.uniform() < 0.5) task.push_back(i);
        const double alpha = rng.normal();
        Matrix mix = d1;
        for (std::size_t i = 0; i < mix.size(); ++i) mix.data()[i] = alpha * d1.data()[i] + d2.data()[i];
        const Matrix c1 = compensation_matrix(h_inv, d1, task), c2 = compensation_matrix(h_inv, d2, task);
        const Matrix cm = compensation_matrix(h_inv, mix, task);
        for (std::size_t i = 0; i < cm.size(); ++i)
            EXPECT_NEAR(cm.data()[i], alpha * c1.data()[i] + c2.data()[i], 1e-9 * (1.0 + std::abs(cm.data()[i])));
    }
}

TEST(Property, HcnrGapNeverBelowRestoredGap) {
    // gap(hcnr) = gap(restored) + ||C_hc X||^2, so compensation on the hc rows
    // cannot shrink the layer's activation gap to the pretrained model.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        RngStream rng(seed);
        const auto a = tiny_arch(12, 3, 6, 3);
        const ModelCheckpoint orig = random_model(a, seed);
        ModelCheckpoint sft = orig;
        for (auto& l : sft.hidden)
            for (double& v : l.weight.data()) v += 0.2 * rng.normal();
        const LayerIndexSets cand = candidate_neurons(random_scores(a, rng), 0.5);
        const SurgeryPlan p = plan_from_candidates(cand, orig, sft, 0.5, 0.67);
        const auto batch = random_batch(a, 16, seed);
        const auto ctx = build_compensation(orig, sft, p, batch, 0.01, HessianStrategy::output_gram);
        for (const auto& [j, lc] : ctx.layers) EXPECT_GE(lc.gap_hcnr, lc.gap_restored - 1e-12);
    }
}

TEST(Property, AurocBoundsAndMonotoneInvariance) {
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const std::size_t n = 4 + rng.uniform_index(40);
        std::vector<double> s(n);
        Labels y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = rng.normal();
            y[i] = static_cast<std::uint8_t>(i % 2);
        }
        const double a = auroc(s, y);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
        std::vector<double> t(n), neg(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = std::exp(2.0 * s[i]) + 3.0;
            neg[i] = -s[i];
        }
        EXPECT_NEAR(auroc(t, y), a, 1e-12);
        EXPECT_NEAR(auroc(neg, y), 1.0 - a, 1e-12);
    }
}

TEST(Property, PermutationPreservesFunction) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto a = tiny_arch(10, 2, 5, 1 + seed % 4);
        const ModelCheckpoint m = random_model(a, seed);
        const auto batch = random_batch(a, 8, seed);
        EXPECT_LT(max_abs_diff(forward(m, batch).logits, forward(permute_hidden_units(m, seed), batch).logits), 1e-12);
    }
}

TEST(Property, MetricsStayInRange) {
    for (std::uint64_t seed = 0; seed < kCases; ++seed) {
        RngStream rng(seed);
        const ConfusionCounts c{rng.uniform_index(20), rng.uniform_index(20), rng.uniform_index(20),
                                rng.uniform_index(20)};
        const double f1 = f1_from_counts(c);
        EXPECT_GE(f1, 0.0);
        EXPECT_LE(f1, 1.0);
        const double d = refusal_delta_from_counts(c);
        EXPECT_GE(d, -100.0);
        EXPECT_LE(d, 100.0);
    }
}

TEST(Property, CheckpointRoundTripAcrossShapes) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        RngStream rng(seed);
        const auto a = tiny_arch(2 + rng.uniform_index(10), 1 + rng.uniform_index(4), 1 + rng.uniform_index(6),
                                 1 + rng.uniform_index(4));
        const ModelCheckpoint m = random_model(a, seed);
        EXPECT_TRUE(checkpoint_from_bytes(checkpoint_bytes(m)).same_weights(m));
    }
}
