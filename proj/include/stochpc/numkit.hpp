#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stochpc/errors.hpp"

namespace stochpc {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace numkit {

inline double max_abs(const Mat& M) { return M.size() == 0 ? 0.0 : M.cwiseAbs().maxCoeff(); }

inline bool all_finite(const Mat& M) { return M.allFinite(); }

inline Mat symmetrize(const Mat& M) { return 0.5 * (M + M.transpose()); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw DimensionError(what);
}

/// Block-diagonal concatenation; empty blocks are allowed and contribute nothing.
inline Mat block_diag(std::initializer_list<Mat> blocks) {
    Eigen::Index r = 0, c = 0;
    for (const auto& b : blocks) { r += b.rows(); c += b.cols(); }
    Mat out = Mat::Zero(r, c);
    r = c = 0;
    for (const auto& b : blocks) {
        out.block(r, c, b.rows(), b.cols()) = b;
        r += b.rows();
        c += b.cols();
    }
    return out;
}

/// Vertical concatenation col(M1, ..., Mk). All blocks must share a column count.
inline Mat vstack(std::initializer_list<Mat> blocks) {
    Eigen::Index r = 0, c = -1;
    for (const auto& b : blocks) {
        if (c < 0) c = b.cols();
        require(b.cols() == c, "vstack: column count mismatch");
        r += b.rows();
    }
    Mat out(r, std::max<Eigen::Index>(c, 0));
    r = 0;
    for (const auto& b : blocks) {
        out.middleRows(r, b.rows()) = b;
        r += b.rows();
    }
    return out;
}

inline Mat hstack(std::initializer_list<Mat> blocks) {
    Eigen::Index r = -1, c = 0;
    for (const auto& b : blocks) {
        if (r < 0) r = b.rows();
        require(b.rows() == r, "hstack: row count mismatch");
        c += b.cols();
    }
    Mat out(std::max<Eigen::Index>(r, 0), c);
    c = 0;
    for (const auto& b : blocks) {
        out.middleCols(c, b.cols()) = b;
        c += b.cols();
    }
    return out;
}

/// Depth-K block-Hankel matrix of a signal stored one sample per column (d x T).
/// Column j stacks samples j, ..., j+K-1; the result is dK x (T-K+1).
inline Mat block_hankel(const Mat& signal, Eigen::Index depth) {
    const Eigen::Index d = signal.rows(), T = signal.cols();
    if (depth < 1 || T < depth)
        throw DimensionError("block_hankel: need T >= depth >= 1 (T=" + std::to_string(T) +
                             ", depth=" + std::to_string(depth) + ")");
    const Eigen::Index width = T - depth + 1;
    Mat H(d * depth, width);
    for (Eigen::Index i = 0; i < depth; ++i)
        H.middleRows(i * d, d) = signal.middleCols(i, width);
    return H;
}

/// Lower block-triangular Toeplitz matrix with first block column col(M1, ..., Mk).
inline Mat block_toeplitz(std::span<const Mat> blocks) {
    require(!blocks.empty(), "block_toeplitz: need at least one block");
    const Eigen::Index q = blocks[0].rows(), r = blocks[0].cols();
    for (const auto& b : blocks)
        require(b.rows() == q && b.cols() == r, "block_toeplitz: blocks must share dimensions");
    const auto k = static_cast<Eigen::Index>(blocks.size());
    Mat T = Mat::Zero(k * q, k * r);
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            T.block(i * q, j * r, q, r) = blocks[static_cast<std::size_t>(i - j)];
    return T;
}

inline Mat block_toeplitz(const std::vector<Mat>& blocks) {
    return block_toeplitz(std::span<const Mat>(blocks.data(), blocks.size()));
}

inline Mat kron(const Mat& A, const Mat& B) {
    Mat K(A.rows() * B.rows(), A.cols() * B.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j)
            K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    return K;
}

inline constexpr double kDefaultRankTol = 1e-10;

/// Moore-Penrose pseudo-inverse. Singular values below rank_tol times the
/// largest one are treated as zero.
inline Mat pinv(const Mat& M, double rank_tol = kDefaultRankTol) {
    if (!all_finite(M)) throw InputError("pinv: non-finite entries");
    if (M.size() == 0) return Mat::Zero(M.cols(), M.rows());
    Eigen::BDCSVD<Mat> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("pinv: SVD failed");
    const Vec& s = svd.singularValues();
    const double cutoff = rank_tol * (s.size() ? s(0) : 0.0);
    Vec inv = Vec::Zero(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > cutoff && s(i) > 0.0) inv(i) = 1.0 / s(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Numerical rank with the same relative cutoff as pinv.
inline Eigen::Index rank(const Mat& M, double rank_tol = kDefaultRankTol) {
    if (M.size() == 0) return 0;
    Eigen::BDCSVD<Mat> svd(M);
    const Vec& s = svd.singularValues();
    const double cutoff = rank_tol * s(0);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > cutoff && s(i) > 0.0) ++r;
    return r;
}

/// Tikhonov-regularized left inverse (W'W + lambda I)^{-1} W'.
///
/// Evaluated through the SVD W = U S V' as V diag(s / (s^2 + lambda)) U', which
/// is exact for every lambda >= 0 and avoids forming the h x h Gram matrix.
/// At lambda = 0 W must have full column rank.
inline Mat tikhonov_dagger(const Mat& W, double lambda) {
    if (!(lambda >= 0.0)) throw InputError("tikhonov_dagger: lambda must be >= 0");
    if (!all_finite(W)) throw InputError("tikhonov_dagger: non-finite entries");
    Eigen::BDCSVD<Mat> svd(W, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("tikhonov_dagger: SVD failed");
    const Vec& s = svd.singularValues();
    if (lambda == 0.0) {
        const double cutoff = 1e-12 * (s.size() ? s(0) : 0.0);
        if (W.cols() > W.rows() || s.size() == 0 || s(s.size() - 1) <= cutoff)
            throw RankError("tikhonov_dagger: W must have full column rank when lambda = 0");
    }
    Vec d(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) d(i) = s(i) / (s(i) * s(i) + lambda);
    return svd.matrixV() * d.asDiagonal() * svd.matrixU().transpose();
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped to zero.
inline Mat psd_sqrt(const Mat& M) {
    if (M.rows() != M.cols()) throw DimensionError("psd_sqrt: matrix must be square");
    if (M.size() == 0) return M;
    const double asym = max_abs(M - M.transpose());
    if (asym > 1e-10 * std::max(1.0, max_abs(M)))
        throw InputError("psd_sqrt: matrix is not symmetric (asymmetry " + std::to_string(asym) + ")");
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(M));
    if (es.info() != Eigen::Success) throw NumericalError("psd_sqrt: eigendecomposition failed");
    Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return symmetrize(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
}

struct DareSolution {
    Mat sigma; // stabilizing PSD solution
    Mat gain;  // A sigma C' (C sigma C' + Sv)^{-1}
    int iterations = 0;
};

struct DareOptions {
    double abs_tol = 1e-13;
    double rel_tol = 1e-13;
    int max_iter = 10000;
};

/// Gain A S C' (C S C' + Sv)^{-1} for a given variance S.
inline Mat dare_gain(const Mat& A, const Mat& C, const Mat& Sv, const Mat& S) {
    const Mat innov = C * S * C.transpose() + Sv;
    Eigen::LDLT<Mat> f(innov);
    return f.solve(C * S * A.transpose()).transpose();
}

/// One Riccati step S -> A S A' - A S C' (C S C' + Sv)^{-1} C S A' + Sw.
inline Mat riccati_step(const Mat& A, const Mat& C, const Mat& Sw, const Mat& Sv, const Mat& S) {
    const Mat ASCt = A * S * C.transpose();
    Eigen::LDLT<Mat> f(C * S * C.transpose() + Sv);
    return symmetrize(A * S * A.transpose() - ASCt * f.solve(ASCt.transpose()) + Sw);
}

/// Max-abs residual of S = (A - L C) S A' + Sw with L the gain for S.
inline double dare_residual(const Mat& A, const Mat& C, const Mat& Sw, const Mat& Sv, const Mat& S) {
    const Mat L = dare_gain(A, C, Sv, S);
    return max_abs(S - ((A - L * C) * S * A.transpose() + Sw));
}

/// Filter-type discrete algebraic Riccati equation by fixed-point iteration
/// started at Sw. Iterates are symmetrized after every step.
///
/// Convergence is declared when the successive change falls below
/// rel_tol * max|S|, or below abs_tol once the change has stopped shrinking
/// (round-off floor). Running out of iterations with a change above abs_tol
/// means the pair is not detectable/stabilizable and raises DareDiverged.
inline DareSolution solve_dare(const Mat& A, const Mat& C, const Mat& Sw, const Mat& Sv,
                               const DareOptions& opt = {}) {
    const Eigen::Index n = A.rows(), p = C.rows();
    if (A.cols() != n || C.cols() != n || Sw.rows() != n || Sw.cols() != n || Sv.rows() != p ||
        Sv.cols() != p)
        throw DimensionError("solve_dare: inconsistent dimensions");
    if (!all_finite(A) || !all_finite(C) || !all_finite(Sw) || !all_finite(Sv))
        throw InputError("solve_dare: non-finite entries");
    if (p > 0) {
        Eigen::LLT<Mat> pd(symmetrize(Sv));
        if (pd.info() != Eigen::Success) throw InputError("solve_dare: Sv must be positive definite");
    }

    Mat S = symmetrize(Sw);
    double prev_change = std::numeric_limits<double>::infinity();
    double change = prev_change;
    int stalled = 0;
    int it = 0;
    for (; it < opt.max_iter; ++it) {
        Mat next = riccati_step(A, C, Sw, Sv, S);
        if (!all_finite(next)) throw DareDiverged("solve_dare: iterate became non-finite");
        change = max_abs(next - S);
        S = std::move(next);
        if (change <= opt.rel_tol * max_abs(S)) break;
        stalled = change >= prev_change ? stalled + 1 : 0;
        if (change <= opt.abs_tol && stalled >= 5) break;
        prev_change = change;
    }
    if (it == opt.max_iter && !(change <= opt.abs_tol))
        throw DareDiverged("solve_dare: no convergence after " + std::to_string(opt.max_iter) +
                           " iterations (last change " + std::to_string(change) + ")");
    return {S, dare_gain(A, C, Sv, S), it + 1};
}

} // namespace numkit
} // namespace stochpc
