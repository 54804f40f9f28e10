#include <gtest/gtest.h>

#include <cmath>

#include "stochpc/numkit.hpp"
#include "stochpc/plant.hpp"
#include "test_util.hpp"

using namespace stochpc;
using namespace stochpc::numkit;
using testutil::random_matrix;

TEST(BlockHankel, ScalarDepthTwo) {
    Mat s(1, 4);
    s << 1, 2, 3, 4;
    Mat expect(2, 3);
    expect << 1, 2, 3, 2, 3, 4;
    EXPECT_EQ(block_hankel(s, 2), expect);
}

TEST(BlockHankel, Shapes) {
    std::mt19937_64 rng(1);
    EXPECT_EQ(block_hankel(random_matrix(rng, 2, 600), 10).rows(), 20);
    EXPECT_EQ(block_hankel(random_matrix(rng, 2, 600), 10).cols(), 591);
    const Mat s = random_matrix(rng, 1, 7);
    EXPECT_EQ(block_hankel(s, 1), s);
    EXPECT_THROW(block_hankel(s, 8), DimensionError);
    EXPECT_THROW(block_hankel(s, 0), DimensionError);
}

TEST(BlockHankel, DepthNesting) {
    std::mt19937_64 rng(2);
    const Mat s = random_matrix(rng, 3, 40);
    for (Eigen::Index K = 1; K < 10; ++K) {
        const Mat a = block_hankel(s, K), b = block_hankel(s, K + 1);
        EXPECT_EQ(a.leftCols(b.cols()), b.topRows(a.rows()));
    }
}

TEST(BlockToeplitz, Scalars) {
    std::vector<Mat> blocks{Mat::Constant(1, 1, 1), Mat::Constant(1, 1, 2), Mat::Constant(1, 1, 3)};
    Mat expect(3, 3);
    expect << 1, 0, 0, 2, 1, 0, 3, 2, 1;
    EXPECT_EQ(block_toeplitz(blocks), expect);
}

TEST(BlockToeplitz, SingleBlockAndMismatch) {
    std::mt19937_64 rng(3);
    const Mat M = random_matrix(rng, 2, 3);
    EXPECT_EQ(block_toeplitz(std::vector<Mat>{M}), M);
    EXPECT_THROW(block_toeplitz(std::vector<Mat>{M, Mat::Zero(3, 3)}), DimensionError);
}

TEST(BlockToeplitz, BatchReactorObservabilityBlocks) {
    const auto sys = plant::batch_reactor();
    const Mat T = block_toeplitz(std::vector<Mat>{Mat::Zero(2, 4), sys.C, sys.C * sys.A});
    Mat CA(2, 4);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) {
            double acc = 0;
            for (int k = 0; k < 4; ++k) acc += sys.C(i, k) * sys.A(k, j);
            CA(i, j) = acc;
        }
    EXPECT_LE(max_abs(T.block(4, 0, 2, 4) - CA), 1e-15);
    EXPECT_EQ(T.block(0, 4, 2, 4), Mat::Zero(2, 4));
}

TEST(Pinv, Examples) {
    EXPECT_LE(max_abs(pinv(Mat::Identity(3, 3)) - Mat::Identity(3, 3)), 1e-15);
    Mat r1(2, 2);
    r1 << 1, 0, 0, 0;
    EXPECT_LE(max_abs(pinv(r1) - r1), 1e-15);
    std::mt19937_64 rng(4);
    const Mat M = random_matrix(rng, 5, 8);
    EXPECT_LE(max_abs(M * pinv(M) - Mat::Identity(5, 5)), 1e-10);
    EXPECT_THROW(pinv(Mat::Constant(2, 2, NAN)), InputError);
}

TEST(Pinv, MoorePenroseIdentities) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> dim(1, 50);
    for (int trial = 0; trial < 30; ++trial) {
        const int r = dim(rng), c = dim(rng);
        const int k = std::uniform_int_distribution<int>(1, std::min(r, c))(rng);
        const Mat M = random_matrix(rng, r, k) * random_matrix(rng, k, c);
        const Mat X = pinv(M);
        const double s = std::max(1.0, max_abs(M)) * std::max(1.0, max_abs(X));
        EXPECT_LE(max_abs(M * X * M - M), 1e-9 * s);
        EXPECT_LE(max_abs(X * M * X - X), 1e-9 * s);
        EXPECT_LE(max_abs((M * X).transpose() - M * X), 1e-9);
        EXPECT_LE(max_abs((X * M).transpose() - X * M), 1e-9);
    }
}

TEST(Tikhonov, Examples) {
    EXPECT_NEAR(tikhonov_dagger(Mat::Constant(1, 1, 2.0), 0.0)(0, 0), 0.5, 1e-15);
    const Mat d = tikhonov_dagger(Mat::Ones(2, 1), 2.0);
    EXPECT_NEAR(d(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(d(0, 1), 0.25, 1e-15);
    EXPECT_THROW(tikhonov_dagger(Mat::Ones(2, 2), 0.0), RankError);
    EXPECT_THROW(tikhonov_dagger(Mat::Ones(2, 3), 0.0), RankError);
    EXPECT_THROW(tikhonov_dagger(Mat::Ones(2, 1), -1.0), InputError);
}

TEST(Tikhonov, MatchesNormalEquations) {
    std::mt19937_64 rng(6);
    const Mat W = random_matrix(rng, 9, 4);
    const double lam = 0.3;
    const Mat direct = (W.transpose() * W + lam * Mat::Identity(4, 4)).ldlt().solve(W.transpose());
    EXPECT_LE(max_abs(tikhonov_dagger(W, lam) - direct), 1e-12);
}

TEST(Tikhonov, SmallLambdaLimit) {
    std::mt19937_64 rng(7);
    const Mat W = random_matrix(rng, 12, 5);
    EXPECT_LE(max_abs(tikhonov_dagger(W, 1e-14) - pinv(W)), 1e-9);
    EXPECT_LE(max_abs(tikhonov_dagger(W, 1e-12) * W - Mat::Identity(5, 5)), 1e-6);
}

TEST(Dare, ZeroDynamics) {
    const Mat Z = Mat::Zero(1, 1), I = Mat::Identity(1, 1);
    const auto s = solve_dare(Z, Mat::Constant(1, 1, 3.0), I, I);
    EXPECT_NEAR(s.sigma(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(s.gain(0, 0), 0.0, 1e-15);
}

TEST(Dare, ScalarClosedForm) {
    // sigma^2 - 0.25 sigma - 1 = 0
    const double root = (0.25 + std::sqrt(0.0625 + 4.0)) / 2.0;
    const Mat I = Mat::Identity(1, 1);
    const auto s = solve_dare(Mat::Constant(1, 1, 0.5), I, I, I);
    EXPECT_NEAR(s.sigma(0, 0), root, 1e-9);
    EXPECT_NEAR(root, 1.132782, 1e-6);
    EXPECT_NEAR(s.gain(0, 0), 0.5 * root / (root + 1.0), 1e-9);
}

TEST(Dare, RandomFixedPoint) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const Mat A = random_matrix(rng, 5, 5, 0.5), C = random_matrix(rng, 2, 5);
        const Mat Sw = testutil::random_psd(rng, 5), Sv = testutil::random_pd(rng, 2);
        const auto s = solve_dare(A, C, Sw, Sv);
        EXPECT_LE(dare_residual(A, C, Sw, Sv, s.sigma), 1e-10 * std::max(1.0, max_abs(s.sigma)));
        EXPECT_LE(max_abs(s.sigma - s.sigma.transpose()), 1e-12);
        EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat>(s.sigma).eigenvalues().minCoeff(), -1e-10);
        const Mat Lref = A * s.sigma * C.transpose() * (C * s.sigma * C.transpose() + Sv).inverse();
        EXPECT_LE(max_abs(s.gain - Lref), 1e-10);
    }
}

TEST(Dare, UndetectableDiverges) {
    // Unstable mode invisible to C with process noise driving it.
    Mat A(2, 2);
    A << 1.5, 0, 0, 0.5;
    Mat C(1, 2);
    C << 0, 1;
    DareOptions opt;
    opt.max_iter = 200;
    EXPECT_THROW(solve_dare(A, C, Mat::Identity(2, 2), Mat::Identity(1, 1), opt), DareDiverged);
}

TEST(Dare, RejectsIndefiniteSv) {
    const Mat I = Mat::Identity(1, 1);
    EXPECT_THROW(solve_dare(I, I, I, Mat::Zero(1, 1)), InputError);
    EXPECT_THROW(solve_dare(I, Mat::Identity(2, 2), I, I), DimensionError);
}

TEST(PsdSqrt, Examples) {
    EXPECT_EQ(psd_sqrt(Mat::Identity(3, 3)), Mat::Identity(3, 3));
    Vec d(2);
    d << 4, 9;
    Vec r(2);
    r << 2, 3;
    EXPECT_LE(max_abs(psd_sqrt(d.asDiagonal()) - Mat(r.asDiagonal())), 1e-14);
    Mat asym(2, 2);
    asym << 1, 1, 0, 1;
    EXPECT_THROW(psd_sqrt(asym), InputError);
}

TEST(PsdSqrt, RandomResidual) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const Mat M = testutil::random_psd(rng, 6, trial % 6 + 1);
        const Mat S = psd_sqrt(M);
        EXPECT_LE(max_abs(S * S - M), 1e-10 * std::max(1.0, max_abs(M)));
        EXPECT_EQ(S, S.transpose());
    }
}

TEST(Kron, Examples) {
    Mat pm(2, 1);
    pm << 1, -1;
    Mat expect(4, 2);
    expect << 1, 0, -1, 0, 0, 1, 0, -1;
    EXPECT_EQ(kron(Mat::Identity(2, 2), pm), expect);
    std::mt19937_64 rng(10);
    const Mat A = random_matrix(rng, 3, 2);
    EXPECT_EQ(kron(A, Mat::Ones(1, 1)), A);
    const Mat K = kron(Mat::Identity(2, 2), random_matrix(rng, 2, 3));
    EXPECT_EQ(K.rows(), 4);
    EXPECT_EQ(K.cols(), 6);
}

TEST(Stacking, BlockDiagAndStacks) {
    const Mat a = Mat::Ones(1, 2), b = Mat::Constant(2, 1, 3.0);
    const Mat bd = block_diag({a, b});
    EXPECT_EQ(bd.rows(), 3);
    EXPECT_EQ(bd.cols(), 3);
    EXPECT_EQ(bd(0, 2), 0.0);
    EXPECT_EQ(bd(2, 2), 3.0);
    EXPECT_THROW(vstack({a, b}), DimensionError);
    EXPECT_THROW(hstack({a, b}), DimensionError);
    EXPECT_EQ(vstack({a, a}).rows(), 2);
    EXPECT_EQ(hstack({b, b}).cols(), 2);
}
