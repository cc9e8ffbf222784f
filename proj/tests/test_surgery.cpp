#include <gtest/gtest.h>

#include <cmath>

#include "hcnr/surgery.hpp"
#include "test_util.hpp"

using namespace hcnr;
using hcnr::testing::random_model;
using hcnr::testing::tiny_arch;

TEST(LayerDisplacement, WorkedExample) {
    const Matrix o = Matrix::from_rows({{3.0, 4.0}, {1.0, 1.0}});
    const Matrix s = Matrix::from_rows({{3.0, 4.0}, {2.0, 1.0}});
    const std::vector<std::size_t> row0{0}, row1{1}, both{0, 1};
    EXPECT_EQ(layer_displacement(o, s, row0), 0.0);
    EXPECT_NEAR(layer_displacement(o, s, row1), 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(layer_displacement(o, s, both), 1.0 / std::sqrt(27.0), 1e-15);
}

TEST(LayerDisplacement, ZeroOriginalIsDegenerate) {
    const Matrix z(2, 2);
    const Matrix s = Matrix::from_rows({{1.0, 0.0}, {0.0, 0.0}});
    const std::vector<std::size_t> rows{0};
    EXPECT_THROW(layer_displacement(z, s, rows), DegenerateLayerError);
    EXPECT_THROW(layer_displacement(z, s, std::vector<std::size_t>{}), ContractViolation);
}

TEST(SelectLayers, TopByDisplacement) {
    const std::vector<double> d{0.1, 0.4, 0.3, 0.4};
    EXPECT_EQ(select_layers(d, 0.5), (std::vector<std::size_t>{1, 3}));
    std::vector<std::string> warnings;
    EXPECT_TRUE(select_layers(d, 0.2, &warnings).empty());
    EXPECT_EQ(warnings.size(), 1u);
    EXPECT_THROW(select_layers(d, 0.0), ContractViolation);
}

namespace {

// Orig/SFT pair where layer j moves by (j+1) * 0.1 on every row.
std::pair<ModelCheckpoint, ModelCheckpoint> drifted(const Architecture& a) {
    ModelCheckpoint orig = random_model(a, 1);
    ModelCheckpoint sft = orig;
    for (std::size_t j = 0; j < a.num_layers; ++j)
        for (double& v : sft.hidden[j].weight.data()) v *= 1.0 + 0.1 * static_cast<double>(j + 1);
    return {orig, sft};
}

}  // namespace

TEST(BuildPlan, TwelveAndAHalfPercentModification) {
    Architecture a;
    a.vocab = 20;
    a.embed_dim = 64;
    a.hidden_dim = 128;
    a.num_layers = 4;
    const auto [orig, sft] = drifted(a);
    LayerScores pr(4, Vector(128, 0.0));
    RngStream rng(3);
    for (auto& l : pr)
        for (double& v : l) v = rng.normal();
    const LayerIndexSets cand = candidate_neurons(pr, 0.5);
    const SurgeryPlan p = plan_from_candidates(cand, orig, sft, 0.5, 0.25);
    EXPECT_EQ(p.selected_layers, (std::vector<std::size_t>{3}));
    EXPECT_EQ(p.hc_rows(), 64u);
    EXPECT_NEAR(p.modification_ratio, 0.125, 1e-15);
}

TEST(BuildPlan, HcAndTaskPartitionEachLayer) {
    const auto a = tiny_arch(12, 3, 6, 4);
    const auto [orig, sft] = drifted(a);
    const LayerIndexSets cand{{0, 1}, {2}, {3, 5}, {4}};
    const SurgeryPlan p = plan_from_candidates(cand, orig, sft, 0.5, 0.5);
    for (std::size_t j = 0; j < 4; ++j) {
        std::vector<std::size_t> all = p.hc[j];
        all.insert(all.end(), p.task[j].begin(), p.task[j].end());
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> expect(6);
        std::iota(expect.begin(), expect.end(), std::size_t{0});
        EXPECT_EQ(all, expect);
        const Matrix m = p.mask(j);
        for (std::size_t r = 0; r < 6; ++r) {
            const bool in = std::find(cand[j].begin(), cand[j].end(), r) != cand[j].end();
            EXPECT_EQ(m(r, 0), in ? 1.0 : 0.0);
        }
    }
    EXPECT_EQ(p.selected_layers, (std::vector<std::size_t>{3, 2}));
}

TEST(BuildPlan, EmptyCandidateLayersAreNeverSelected) {
    const auto a = tiny_arch(12, 3, 6, 3);
    const auto [orig, sft] = drifted(a);
    const SurgeryPlan p = plan_from_candidates({{0}, {1}, {}}, orig, sft, 0.2, 1.0);
    EXPECT_TRUE(std::isnan(p.displacement[2]));
    EXPECT_EQ(p.selected_layers, (std::vector<std::size_t>{1, 0}));
    EXPECT_TRUE(p.hc[2].empty());
    const auto j = to_json(p, "h");
    EXPECT_TRUE(j["layers"][2]["displacement"].is_null());
}

TEST(PlanWithLayers, UsesGivenLayers) {
    const auto a = tiny_arch(12, 3, 6, 3);
    const auto [orig, sft] = drifted(a);
    const SurgeryPlan p = plan_with_layers({{0, 1}, {2}, {3}}, {0}, orig, sft, 0.3, 0.34);
    EXPECT_EQ(p.hc[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_TRUE(p.hc[2].empty());
    EXPECT_THROW(plan_with_layers({{0}, {1}, {2}}, {5}, orig, sft, 0.3, 0.34), ContractViolation);
}

TEST(Restore, CopiesExactlyTheHcRows) {
    const auto a = tiny_arch(12, 3, 6, 3);
    auto [orig, sft] = drifted(a);
    for (auto& l : sft.hidden)
        for (double& b : l.bias) b += 1.0;
    const SurgeryPlan p = plan_from_candidates({{0, 4}, {1}, {2, 3}}, orig, sft, 0.34, 0.34);
    ASSERT_EQ(p.selected_layers, (std::vector<std::size_t>{2}));
    const ModelCheckpoint r = restore(sft, orig, p);
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t row = 0; row < 6; ++row) {
            const bool hc = j == 2 && (row == 2 || row == 3);
            const auto& src = hc ? orig : sft;
            EXPECT_TRUE(std::equal(r.hidden[j].weight.row(row).begin(), r.hidden[j].weight.row(row).end(),
                                   src.hidden[j].weight.row(row).begin()));
            EXPECT_EQ(r.hidden[j].bias[row], src.hidden[j].bias[row]);
        }
    EXPECT_EQ(r.embed, sft.embed);
    EXPECT_EQ(r.out, sft.out);
    EXPECT_EQ(r.meta.provenance, Provenance::restored);
}

TEST(Restore, ArchitectureMismatchIsContractViolation) {
    const auto a = random_model(tiny_arch(12, 3, 6, 3), 1);
    const auto b = random_model(tiny_arch(12, 3, 7, 3), 1);
    EXPECT_THROW(require_same_architecture(a, b), ContractViolation);
    const auto c = random_model(tiny_arch(12, 3, 6, 2), 1);
    EXPECT_THROW(require_same_architecture(a, c), ContractViolation);
}
