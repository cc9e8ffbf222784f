#include <gtest/gtest.h>

#include <cmath>

#include "hcnr/core_math.hpp"
#include "test_util.hpp"

using namespace hcnr;

namespace {

double inf_norm_residual(const Matrix& m, double lambda, const Matrix& inv) {
    Matrix damped = m;
    for (std::size_t i = 0; i < m.rows(); ++i) damped(i, i) += lambda;
    const Matrix prod = matmul(damped, inv);
    return max_abs_diff(prod, Matrix::identity(m.rows()));
}

}  // namespace

TEST(DampedSpdInverse, IdentityIsItsOwnInverse) {
    const Matrix inv = damped_spd_inverse(Matrix::identity(3), 0.0);
    EXPECT_LT(max_abs_diff(inv, Matrix::identity(3)), 1e-15);
}

TEST(DampedSpdInverse, DiagonalReciprocal) {
    const std::vector<double> d{2.0, 4.0};
    const Matrix inv = damped_spd_inverse(Matrix::diagonal(d), 0.0);
    EXPECT_DOUBLE_EQ(inv(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(inv(1, 1), 0.25);
    EXPECT_DOUBLE_EQ(inv(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(inv(1, 0), 0.0);
}

TEST(DampedSpdInverse, RandomSpdMultiplyBack) {
    RngStream rng(11);
    const Matrix m = random_spd(4, rng);
    const double lambda = 0.01 * mean_diagonal(m);
    const Matrix inv = damped_spd_inverse(m, lambda);
    EXPECT_LT(inf_norm_residual(m, lambda, inv), 1e-8);
    EXPECT_TRUE(is_symmetric(inv, 1e-10));
}

TEST(DampedSpdInverse, RejectsNonSymmetric) {
    const Matrix m = Matrix::from_rows({{1.0, 2.0}, {0.0, 1.0}});
    EXPECT_THROW(damped_spd_inverse(m, 0.0), ContractViolation);
}

TEST(DampedSpdInverse, IndefiniteNamesTheLayer) {
    const Matrix m = Matrix::from_rows({{1.0, 0.0}, {0.0, -1.0}});
    try {
        damped_spd_inverse(m, 0.0, "hidden layer 2");
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("indefinite"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("hidden layer 2"), std::string::npos);
    }
}

TEST(DampedSpdInverse, RejectsNegativeDamping) {
    EXPECT_THROW(damped_spd_inverse(Matrix::identity(2), -1.0), ContractViolation);
}

TEST(ConstrainedQuadraticMin, IdentityDecouples) {
    const Vector v = constrained_quadratic_min(Matrix::identity(2), 0, 1.0);
    EXPECT_DOUBLE_EQ(v[0], 1.0);
    EXPECT_DOUBLE_EQ(v[1], 0.0);
}

TEST(ConstrainedQuadraticMin, HandEliminationTwoByTwo) {
    const Matrix h = Matrix::from_rows({{2.0, 1.0}, {1.0, 2.0}});
    const Vector v = constrained_quadratic_min(h, 0, 1.0);
    EXPECT_NEAR(v[0], 1.0, 1e-15);
    EXPECT_NEAR(v[1], -0.5, 1e-15);
}

TEST(ConstrainedQuadraticMin, MatchesClosedFormOnRandomSpd) {
    RngStream rng(5);
    const Matrix h = random_spd(5, rng);
    const std::size_t k = rng.uniform_index(5);
    const double delta = rng.normal();
    const Vector oracle = constrained_quadratic_min(h, k, delta);
    const Vector closed = obs_compensation_vector(damped_spd_inverse(h, 0.0), k, delta);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(oracle[i], closed[i], 1e-8 * (1.0 + std::abs(oracle[i])));
}

TEST(ConstrainedQuadraticMin, RejectsBadIndex) {
    EXPECT_THROW(constrained_quadratic_min(Matrix::identity(2), 2, 1.0), ContractViolation);
}

TEST(ConstrainedQuadraticMin, SingularReducedSystemIsExplicit) {
    // Reduced system after fixing v0 is the zero 1x1 matrix.
    const Matrix h = Matrix::from_rows({{1.0, 0.0}, {0.0, 0.0}});
    EXPECT_THROW(constrained_quadratic_min(h, 0, 1.0), NumericalError);
}

TEST(StableTopk, TieBrokenByLowerIndex) {
    const std::vector<double> s{5, 1, 5, 0};
    EXPECT_EQ(stable_topk(s, 2), (std::vector<std::size_t>{0, 2}));
}

TEST(StableTopk, EmptySelection) {
    const std::vector<double> s{1, 2, 3};
    EXPECT_TRUE(stable_topk(s, 0).empty());
}

TEST(StableTopk, SortThenCutReference) {
    const std::vector<double> s{0.3, 0.9, 0.1, 0.9, 0.5};
    EXPECT_EQ(stable_topk(s, 3), (std::vector<std::size_t>{1, 3, 4}));
}

TEST(StableTopk, KTooLargeIsContractViolation) {
    const std::vector<double> s{1.0};
    EXPECT_THROW(stable_topk(s, 2), ContractViolation);
}

TEST(StableTopk, RejectsNonFinite) {
    const std::vector<double> s{1.0, std::nan("")};
    EXPECT_THROW(stable_topk(s, 1), ContractViolation);
}

TEST(RngStream, SameSeedSameSequence) {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, KnownFirstDraw) {
    // SplitMix64 of (0 + golden) is the published first output for seed 0.
    RngStream r(0);
    EXPECT_EQ(r.next_u64(), 0xe220a8397b1dcdafULL);
}

TEST(RngStream, NamedSubstreamsDiffer) {
    const RngStream root(1);
    RngStream a = root.split("a"), b = root.split("b"), a2 = root.split("a");
    const auto x = a.next_u64();
    EXPECT_NE(x, b.next_u64());
    EXPECT_EQ(x, a2.next_u64());
}

TEST(RngStream, SampleWithoutReplacementDistinct) {
    RngStream r(3);
    auto v = r.sample_without_replacement(50, 20);
    std::sort(v.begin(), v.end());
    EXPECT_EQ(std::unique(v.begin(), v.end()), v.end());
    EXPECT_LT(v.back(), 50u);
    EXPECT_THROW(r.sample_without_replacement(3, 4), ContractViolation);
}

TEST(RngStream, UniformIndexInRange) {
    RngStream r(9);
    for (int i = 0; i < 1000; ++i) EXPECT_LT(r.uniform_index(7), 7u);
    EXPECT_THROW(r.uniform_index(0), ContractViolation);
}

TEST(Fnv1a, KnownVectors) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(hex64(0x1ULL), "0000000000000001");
}

TEST(Matmul, TransposedVariantsAgreeWithNaive) {
    RngStream rng(8);
    const Matrix a = hcnr::testing::random_matrix(3, 4, rng);
    const Matrix b = hcnr::testing::random_matrix(5, 4, rng);
    const Matrix c = hcnr::testing::random_matrix(3, 5, rng);
    const Matrix nt = matmul_nt(a, b);
    const Matrix tn = matmul_tn(a, c);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(j, k);
            EXPECT_NEAR(nt(i, j), s, 1e-12);
        }
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += a(k, i) * c(k, j);
            EXPECT_NEAR(tn(i, j), s, 1e-12);
        }
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ContractViolation);
}
