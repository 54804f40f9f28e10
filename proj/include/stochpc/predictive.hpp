#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stochpc/errors.hpp"
#include "stochpc/json_io.hpp"
#include "stochpc/model.hpp"
#include "stochpc/numkit.hpp"
#include "stochpc/socp.hpp"

namespace stochpc::predictive {

using Eigen::Index;

struct EstimatorGains {
    Mat Sx;    // steady-state estimation error variance
    Mat Lgain; // observer gain A Sx C' (C Sx C' + Sv)^{-1}
};

inline EstimatorGains compute_gains(const StateSpaceModel& model, const numkit::DareOptions& opt = {}) {
    model.validate();
    auto d = numkit::solve_dare(model.A, model.C, model.Sw, model.Sv, opt);
    return {std::move(d.sigma), std::move(d.gain)};
}

/// col(C, CA, ..., CA^{N-1}).
inline Mat theta(const Mat& A, const Mat& C, Index N) {
    const Index p = C.rows();
    Mat out(p * N, A.cols());
    Mat CAk = C;
    for (Index i = 0; i < N; ++i) {
        out.middleRows(i * p, p) = CAk;
        CAk = CAk * A;
    }
    return out;
}

/// Toep(0, C, CA, ..., CA^{N-2}): block (i, j) = C A^{i-j-1} for i > j.
inline Mat xi(const Mat& A, const Mat& C, Index N) {
    const Index p = C.rows(), s = A.cols();
    std::vector<Mat> blocks{Mat::Zero(p, s)};
    Mat CAk = C;
    for (Index i = 1; i < N; ++i) {
        blocks.push_back(CAk);
        CAk = CAk * A;
    }
    return numkit::block_toeplitz(blocks);
}

/// Stacked maps from eta = col(x_k - mu, w_k..w_{k+N-1}, v_k..v_{k+N-1}):
///   y - ybar = DY (u - ubar) + DA eta,   nu = DM eta.
/// DU is the identity and is not stored.
struct DeltaSet {
    Index N = 0, s = 0, m = 0, p = 0;
    Mat DY;    // pN x mN
    Mat DA;    // pN x n_eta
    Mat DM;    // pN x n_eta
    Mat Theta; // pN x s, nominal output response to mu

    Index n_eta() const { return s + s * N + p * N; }
    Mat du(Index i) const {
        Mat out = Mat::Zero(m, m * N);
        out.middleCols(i * m, m).setIdentity();
        return out;
    }
    Mat dy(Index i) const { return DY.middleRows(i * p, p); }
    Mat da(Index i) const { return DA.middleRows(i * p, p); }
    /// [DU_i; DY_i]
    Mat delta(Index i) const { return numkit::vstack({du(i), dy(i)}); }
    /// [0; DA_i]
    Mat offset(Index i) const { return numkit::vstack({Mat::Zero(m, n_eta()), da(i)}); }
};

inline DeltaSet build_deltas(const StateSpaceModel& model, const EstimatorGains& gains, Index N) {
    if (N < 1) throw InputError("build_deltas: N must be >= 1");
    const Index s = model.s(), m = model.m(), p = model.p();
    if (gains.Lgain.rows() != s || gains.Lgain.cols() != p) throw DimensionError("build_deltas: gain shape");
    DeltaSet d;
    d.N = N;
    d.s = s;
    d.m = m;
    d.p = p;
    const Mat XiA = xi(model.A, model.C, N);
    d.Theta = theta(model.A, model.C, N);
    d.DY = XiA * numkit::kron(Mat::Identity(N, N), model.B) + numkit::kron(Mat::Identity(N, N), model.D);
    d.DA = numkit::hstack({d.Theta, XiA, Mat::Identity(p * N, p * N)});
    const Mat AL = model.A - gains.Lgain * model.C;
    const Mat XiL = xi(AL, model.C, N);
    d.DM = numkit::hstack({theta(AL, model.C, N), XiL,
                           Mat::Identity(p * N, p * N) - XiL * numkit::kron(Mat::Identity(N, N), gains.Lgain)});
    return d;
}

/// Blockwise square root of Diag(Sx, I_N (x) Sw, I_N (x) Sv).
inline Mat eta_sqrt(const StateSpaceModel& model, const EstimatorGains& gains, Index N) {
    const Index s = model.s(), p = model.p();
    const Mat rx = numkit::psd_sqrt(gains.Sx), rw = numkit::psd_sqrt(model.Sw), rv = numkit::psd_sqrt(model.Sv);
    const Index n = s + s * N + p * N;
    Mat out = Mat::Zero(n, n);
    out.topLeftCorner(s, s) = rx;
    for (Index i = 0; i < N; ++i) {
        out.block(s + i * s, s + i * s, s, s) = rw;
        out.block(s + s * N + i * p, s + s * N + i * p, p, p) = rv;
    }
    return out;
}

struct ConstraintSpec {
    Mat E;
    Vec f;
    double alpha = 0.3;

    Index q() const { return E.rows(); }
    double kappa() const { return 2.0 * std::sqrt((1.0 - alpha) / alpha); }

    void validate(Index m, Index p) const {
        if (E.rows() < 1 || E.cols() != m + p || f.size() != E.rows())
            throw DimensionError("ConstraintSpec: E must be q x (m+p) with q >= 1 and f of length q");
        if (!(alpha > 0.0 && alpha <= 1.0)) throw InputError("ConstraintSpec: alpha must lie in (0, 1]");
    }
};

/// Stage cost |y - r|_Q^2 + |u|_R^2; `reference` holds r_t column-wise and
/// the last column is held beyond its end.
struct CostSpec {
    Mat Q, R;
    Mat reference;

    Vec r(Index t) const {
        if (reference.cols() == 0) return Vec::Zero(Q.rows());
        return reference.col(std::min<Index>(t, reference.cols() - 1));
    }
    Mat window(Index k, Index N) const {
        Mat out(Q.rows(), N);
        for (Index i = 0; i < N; ++i) out.col(i) = r(k + i);
        return out;
    }
};

/// Index of block (t, s), s < t, in the strictly lower-triangular ordering
/// (t ascending, then s ascending).
inline Index block_index(Index t, Index s) { return t * (t - 1) / 2 + s; }
inline Index num_blocks(Index N) { return N * (N - 1) / 2; }

struct PolicySolution {
    Mat ubar;              // m x N
    std::vector<Mat> M;    // m x p blocks at block_index(t, s)
    double objective = std::numeric_limits<double>::quiet_NaN();

    Index N() const { return ubar.cols(); }
    const Mat& block(Index t, Index s) const { return M.at(static_cast<std::size_t>(block_index(t, s))); }
};

inline std::vector<Mat> zero_blocks(Index N, Index m, Index p) {
    return std::vector<Mat>(static_cast<std::size_t>(num_blocks(N)), Mat::Zero(m, p));
}

/// Dense mN x pN gain matrix with zero diagonal blocks.
inline Mat gain_matrix(const std::vector<Mat>& blocks, Index N, Index m, Index p) {
    if (static_cast<Index>(blocks.size()) != num_blocks(N)) throw DimensionError("gain_matrix: block count");
    Mat G = Mat::Zero(m * N, p * N);
    for (Index t = 1; t < N; ++t)
        for (Index s = 0; s < t; ++s) G.block(t * m, s * p, m, p) = blocks[static_cast<std::size_t>(block_index(t, s))];
    return G;
}

/// Lambda_i = [DU_i; DY_i] M DM + [0; DA_i].
inline Mat lambda_of(const DeltaSet& d, const std::vector<Mat>& blocks, Index i) {
    if (i < 0 || i >= d.N) throw InputError("lambda_of: offset outside the horizon");
    const Mat G = gain_matrix(blocks, d.N, d.m, d.p);
    return d.delta(i) * G * d.DM + d.offset(i);
}

struct NominalRollout {
    Mat xbar; // s x (N+1)
    Mat ybar; // p x N
};

inline NominalRollout nominal_rollout(const StateSpaceModel& model, const Vec& mu, const Mat& ubar) {
    const Index N = ubar.cols();
    NominalRollout r{Mat(model.s(), N + 1), Mat(model.p(), N)};
    r.xbar.col(0) = mu;
    for (Index t = 0; t < N; ++t) {
        r.ybar.col(t) = model.C * r.xbar.col(t) + model.D * ubar.col(t);
        r.xbar.col(t + 1) = model.A * r.xbar.col(t) + model.B * ubar.col(t);
    }
    return r;
}

struct ControllerState {
    Index k = 0;
    Vec mu, mu_backup, xhat, xbar;
    Mat nu; // innovations of the current window, one per column

    static ControllerState initial(const Vec& mu_ini) {
        return {0, mu_ini, mu_ini, mu_ini, mu_ini, Mat(0, 0)};
    }
};

/// nu_t = y_t - C xhat_t - D u_t; xhat_{t+1} = A xhat_t + B u_t + L nu_t.
inline Vec estimator_update(const StateSpaceModel& model, const EstimatorGains& gains, ControllerState& st,
                            const Vec& u, const Vec& y) {
    const Vec nu = y - model.C * st.xhat - model.D * u;
    st.xhat = model.A * st.xhat + model.B * u + gains.Lgain * nu;
    st.nu.conservativeResize(nu.size(), st.nu.cols() + 1);
    st.nu.col(st.nu.cols() - 1) = nu;
    return nu;
}

/// Per horizon step t, the QR factors of (DM_{[0,pt)} Sigma^{1/2})' = Q_t R_t.
/// For any row vector z supported on the first pt innovation coordinates,
///   |z DM Sigma^{1/2} + e' P_t|^2 = |R_t z' + O_t e|^2 + e' Res_t e
/// with P_t = [0; DA_t] Sigma^{1/2}, O_t = Q_t' P_t' and Res_t the Gram
/// matrix of the part of P_t orthogonal to range(Q_t).
struct ReducedConeData {
    std::vector<Mat> R;      // pt x pt
    std::vector<Mat> offset; // pt x (m+p)
    std::vector<Mat> resid;  // (m+p) x (m+p)
    Mat GS;                  // DM Sigma^{1/2}
    std::vector<Mat> PS;     // [0; DA_t] Sigma^{1/2}

    /// |Sigma^{1/2} Lambda_t' e| from the compressed data.
    double norm(const DeltaSet& d, const std::vector<Mat>& blocks, Index t, const Vec& e) const {
        const Index pt = d.p * t;
        const Vec a = d.delta(t).transpose() * e;
        const Mat G = gain_matrix(blocks, d.N, d.m, d.p);
        const Vec z = (a.transpose() * G).transpose().head(pt);
        const double r = std::max(0.0, e.dot(resid[static_cast<std::size_t>(t)] * e));
        return std::sqrt((R[static_cast<std::size_t>(t)] * z + offset[static_cast<std::size_t>(t)] * e).squaredNorm() + r);
    }
};

inline ReducedConeData reduce_soc_data(const DeltaSet& d, const Mat& Seta_sqrt) {
    const Index n = d.n_eta(), p = d.p, N = d.N;
    if (Seta_sqrt.rows() != n || Seta_sqrt.cols() != n) throw DimensionError("reduce_soc_data: Sigma sqrt shape");
    ReducedConeData red;
    red.GS = d.DM * Seta_sqrt;
    const Mat DAS = d.DA * Seta_sqrt;
    for (Index t = 0; t < N; ++t) {
        Mat P = Mat::Zero(d.m + p, n);
        P.bottomRows(p) = DAS.middleRows(t * p, p);
        const Index pt = p * t;
        Mat Rt(pt, pt), Ot(pt, d.m + p), Res = P;
        if (pt > 0) {
            Eigen::HouseholderQR<Mat> qr(red.GS.topRows(pt).transpose());
            const Mat Qt = qr.householderQ() * Mat::Identity(n, pt);
            Rt = qr.matrixQR().topRows(pt).triangularView<Eigen::Upper>();
            Ot = Qt.transpose() * P.transpose();
            Res = P - Ot.transpose() * Qt.transpose();
        }
        red.R.push_back(std::move(Rt));
        red.offset.push_back(std::move(Ot));
        red.resid.push_back(numkit::symmetrize(Res * Res.transpose()));
        red.PS.push_back(std::move(P));
    }
    return red;
}

/// How the feedback blocks enter the program.
enum class GainMode {
    Optimized, // decision variables (DR/O)
    Fixed,     // given blocks, only ubar optimized (DR/F)
    Nominal    // no feedback, hard constraints on the nominal pair (deterministic MPC)
};

/// M^s_t = -K (A - BK)^{t-1-s} L from expanding u_t = ubar_t - K (xhat_t - xbar_t).
inline std::vector<Mat> fixed_gain_blocks(const StateSpaceModel& model, const EstimatorGains& gains, const Mat& K,
                                          Index N) {
    const Index m = model.m(), p = model.p();
    if (K.rows() != m || K.cols() != model.s()) throw DimensionError("fixed_gain_blocks: K must be m x s");
    const Mat Acl = model.A - model.B * K;
    std::vector<Mat> pw{gains.Lgain};
    for (Index j = 1; j < N; ++j) pw.push_back(Acl * pw.back());
    auto blocks = zero_blocks(N, m, p);
    for (Index t = 1; t < N; ++t)
        for (Index s = 0; s < t; ++s)
            blocks[static_cast<std::size_t>(block_index(t, s))] = -K * pw[static_cast<std::size_t>(t - 1 - s)];
    return blocks;
}

/// Infinite-horizon LQR gain for stage weights (C'QC + 1e-9 I, R).
inline Mat lqr_gain(const StateSpaceModel& model, const Mat& Q, const Mat& R) {
    const Mat Qx = model.C.transpose() * Q * model.C + 1e-9 * Mat::Identity(model.s(), model.s());
    const auto d = numkit::solve_dare(model.A.transpose(), model.B.transpose(), Qx, R);
    return d.gain.transpose();
}

/// Window-invariant data of the receding-horizon program.
struct PolicyProblem {
    StateSpaceModel model;
    EstimatorGains gains;
    DeltaSet deltas;
    Mat Seta_sqrt;
    ReducedConeData reduced;
    Mat Q, R;
    ConstraintSpec cons;
    GainMode mode = GainMode::Optimized;
    std::vector<Mat> fixed; // blocks used when mode != Optimized
    socp::Settings settings;

    // Cached objective pieces.
    Mat K;     // Rbar + DY' Qbar DY
    Mat Pfull; // Hessian over all decision variables
    Vec qM;    // linear term on the gain entries
    double constM = 0.0;
    std::vector<std::vector<double>> fixed_norms; // [t][i], Fixed mode only

    Index N() const { return deltas.N; }
    Index m() const { return deltas.m; }
    Index p() const { return deltas.p; }
    Index num_vars() const {
        return m() * N() + (mode == GainMode::Optimized ? m() * p() * num_blocks(N()) : 0);
    }
    Index var_index(Index t, Index s, Index a, Index c) const {
        return m() * N() + block_index(t, s) * m() * p() + a * p() + c;
    }
};

inline PolicyProblem make_problem(const StateSpaceModel& model, Index N, const Mat& Q, const Mat& R,
                                  const ConstraintSpec& cons, GainMode mode, const std::vector<Mat>& fixed = {},
                                  const socp::Settings& settings = {}) {
    model.validate();
    const Index m = model.m(), p = model.p();
    cons.validate(m, p);
    if (Q.rows() != p || Q.cols() != p || R.rows() != m || R.cols() != m)
        throw DimensionError("make_problem: Q must be p x p and R m x m");
    PolicyProblem pb;
    pb.model = model;
    pb.gains = compute_gains(model);
    pb.deltas = build_deltas(model, pb.gains, N);
    pb.Q = Q;
    pb.R = R;
    pb.cons = cons;
    pb.mode = mode;
    pb.settings = settings;
    pb.fixed = mode == GainMode::Fixed ? fixed : zero_blocks(N, m, p);
    if (mode == GainMode::Fixed && static_cast<Index>(fixed.size()) != num_blocks(N))
        throw DimensionError("make_problem: fixed gain block count");

    const DeltaSet& d = pb.deltas;
    const Mat Qb = numkit::kron(Mat::Identity(N, N), Q), Rb = numkit::kron(Mat::Identity(N, N), R);
    pb.K = numkit::symmetrize(Rb + d.DY.transpose() * Qb * d.DY);
    const Index nu = m * N, d_all = pb.num_vars();
    pb.Pfull = Mat::Zero(d_all, d_all);
    pb.Pfull.topLeftCorner(nu, nu) = 2.0 * pb.K;
    if (mode == GainMode::Nominal) return pb;

    pb.Seta_sqrt = eta_sqrt(model, pb.gains, N);
    pb.reduced = reduce_soc_data(d, pb.Seta_sqrt);
    const ReducedConeData& red = pb.reduced;
    Mat Dw = Mat::Zero(m + p, m + p);
    Dw.topLeftCorner(m, m) = R;
    Dw.bottomRightCorner(p, p) = Q;

    if (mode == GainMode::Fixed) {
        const Mat G = gain_matrix(pb.fixed, N, m, p);
        const Mat GMS = G * red.GS;
        pb.constM = 0.0;
        pb.fixed_norms.assign(static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(cons.q())));
        for (Index t = 0; t < N; ++t) {
            const Mat LS = d.delta(t) * GMS + red.PS[static_cast<std::size_t>(t)];
            pb.constM += (Dw * LS * LS.transpose()).trace();
            for (Index i = 0; i < cons.q(); ++i)
                pb.fixed_norms[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] =
                    (cons.E.row(i) * LS).norm();
        }
        return pb;
    }

    // Optimized: E|D^{1/2} Lambda_t Sigma^{1/2}|^2 summed over t equals
    // tr(K M Gg M') + 2 <M, H> + const with Gg = GS GS'.
    const Mat Gg = red.GS * red.GS.transpose();
    Mat H = Mat::Zero(m * N, p * N);
    pb.constM = 0.0;
    for (Index t = 0; t < N; ++t) {
        const Mat& P = red.PS[static_cast<std::size_t>(t)];
        H += d.delta(t).transpose() * Dw * P * red.GS.transpose();
        pb.constM += (Dw * P * P.transpose()).trace();
    }
    pb.qM = Vec::Zero(d_all - nu);
    for (Index t = 1; t < N; ++t)
        for (Index s = 0; s < t; ++s)
            for (Index a = 0; a < m; ++a)
                for (Index c = 0; c < p; ++c) {
                    const Index r = t * m + a, col = s * p + c, vi = pb.var_index(t, s, a, c);
                    pb.qM(vi - nu) = 2.0 * H(r, col);
                    for (Index t2 = 1; t2 < N; ++t2)
                        for (Index s2 = 0; s2 < t2; ++s2)
                            for (Index a2 = 0; a2 < m; ++a2)
                                for (Index c2 = 0; c2 < p; ++c2) {
                                    const Index r2 = t2 * m + a2, col2 = s2 * p + c2;
                                    pb.Pfull(vi, pb.var_index(t2, s2, a2, c2)) = 2.0 * pb.K(r, r2) * Gg(col, col2);
                                }
                }
    return pb;
}

/// Conic program for the window starting at mean `mu` with reference
/// columns r_k..r_{k+N-1}. Decision vector: [ubar (mN); gain entries].
inline socp::ConicProgram assemble_program(const PolicyProblem& pb, const Vec& mu, const Mat& ref) {
    const DeltaSet& d = pb.deltas;
    const Index N = d.N, m = d.m, p = d.p, nu = m * N, nv = pb.num_vars();
    if (mu.size() != d.s) throw DimensionError("assemble_program: mu has wrong length");
    if (ref.rows() != p || ref.cols() != N) throw DimensionError("assemble_program: reference window must be p x N");
    const Mat Qb = numkit::kron(Mat::Identity(N, N), pb.Q);
    const Vec y0 = d.Theta * mu - ref.reshaped();

    socp::ConicProgram prog;
    prog.P = pb.Pfull;
    prog.q = Vec::Zero(nv);
    prog.q.head(nu) = 2.0 * d.DY.transpose() * Qb * y0;
    if (pb.mode == GainMode::Optimized) prog.q.tail(nv - nu) = pb.qM;
    prog.constant = y0.dot(Qb * y0) + pb.constM;

    const double kappa = pb.mode == GainMode::Nominal ? 0.0 : pb.cons.kappa();
    const Index q = pb.cons.q();
    std::vector<Vec> brows;
    std::vector<std::vector<std::pair<Index, double>>> arows;
    auto add_row = [&](double b) {
        brows.push_back(Vec::Constant(1, b));
        arows.emplace_back();
        return arows.size() - 1;
    };
    std::vector<socp::Cone> linear_rows, cones_out;
    std::vector<std::size_t> order;
    for (Index t = 0; t < N; ++t) {
        const Mat Dt = d.delta(t);
        const Index pt = p * t;
        for (Index i = 0; i < q; ++i) {
            const Vec e = pb.cons.E.row(i).transpose();
            const Vec a = Dt.transpose() * e;
            double b0 = pb.cons.f(i) - e.tail(p).dot(d.Theta.middleRows(t * p, p) * mu);
            // Deterministic rows that no decision variable reaches (measured
            // output at the window start when D = 0) are left out.
            if (pb.mode == GainMode::Nominal && a.isZero(0.0)) continue;
            if (pb.mode == GainMode::Fixed)
                b0 -= kappa * pb.fixed_norms[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
            const std::size_t r0 = add_row(b0);
            for (Index j = 0; j < nu; ++j)
                if (a(j) != 0.0) arows[r0].emplace_back(j, a(j));
            if (pb.mode != GainMode::Optimized || kappa == 0.0) {
                cones_out.push_back({socp::ConeKind::NonNeg, 1});
                continue;
            }
            const Mat& Rt = pb.reduced.R[static_cast<std::size_t>(t)];
            const Vec off = pb.reduced.offset[static_cast<std::size_t>(t)] * e;
            const double res = std::max(0.0, e.dot(pb.reduced.resid[static_cast<std::size_t>(t)] * e));
            for (Index jrow = 0; jrow < pt; ++jrow) {
                const std::size_t rr = add_row(kappa * off(jrow));
                // (R z)_j with z_c = sum_r a_r M(r, c); R upper triangular.
                for (Index c = jrow; c < pt; ++c) {
                    const double rc = Rt(jrow, c);
                    if (rc == 0.0) continue;
                    const Index sblk = c / p, cc = c % p;
                    for (Index tb = sblk + 1; tb <= t; ++tb)
                        for (Index aa = 0; aa < m; ++aa) {
                            const double ar = a(tb * m + aa);
                            if (ar != 0.0) arows[rr].emplace_back(pb.var_index(tb, sblk, aa, cc), -kappa * rc * ar);
                        }
                }
            }
            Index dim = 1 + pt;
            if (res > 0.0) {
                add_row(kappa * std::sqrt(res));
                ++dim;
            }
            cones_out.push_back(dim >= 2 ? socp::Cone{socp::ConeKind::SOC, dim} : socp::Cone{socp::ConeKind::NonNeg, 1});
        }
    }
    const Index rows = static_cast<Index>(brows.size());
    prog.A = Mat::Zero(rows, nv);
    prog.b = Vec(rows);
    for (Index r = 0; r < rows; ++r) {
        prog.b(r) = brows[static_cast<std::size_t>(r)](0);
        for (const auto& [j, v] : arows[static_cast<std::size_t>(r)]) prog.A(r, j) += v;
    }
    // Merge consecutive scalar rows into NonNeg blocks.
    for (const auto& c : cones_out) {
        if (c.kind == socp::ConeKind::NonNeg && !prog.cones.empty() && prog.cones.back().kind == socp::ConeKind::NonNeg)
            prog.cones.back().dim += c.dim;
        else
            prog.cones.push_back(c);
    }
    return prog;
}

enum class PolicyStatus { Optimal, Inaccurate, Infeasible };

inline std::string to_string(PolicyStatus s) {
    switch (s) {
    case PolicyStatus::Optimal: return "optimal";
    case PolicyStatus::Inaccurate: return "inaccurate";
    case PolicyStatus::Infeasible: return "infeasible";
    }
    return "unknown";
}

struct PolicyOutcome {
    PolicyStatus status = PolicyStatus::Infeasible;
    PolicySolution solution;
    socp::Status solver_status = socp::Status::NumericalFailure;
    int iterations = 0;
    socp::Residuals residuals;
    int active_constraints = 0;
};

/// Residual level up to which a non-converged solve is still accepted.
inline constexpr double kInaccurateTol = 1e-6;

inline PolicyOutcome solve_policy(const PolicyProblem& pb, const socp::ConicProgram& prog) {
    const auto sol = socp::solve(prog, pb.settings);
    PolicyOutcome out;
    out.solver_status = sol.status;
    out.iterations = sol.iterations;
    out.residuals = sol.residuals;
    if (sol.status == socp::Status::PrimalInfeasible) return out;
    if (sol.status != socp::Status::Optimal) {
        const bool usable = sol.x.size() == pb.num_vars() && sol.x.allFinite() &&
                            sol.residuals.primal <= kInaccurateTol && sol.residuals.dual <= kInaccurateTol;
        if (!usable)
            throw NumericalError(std::string("solve_policy: solver stopped with status ") + socp::to_string(sol.status));
        out.status = PolicyStatus::Inaccurate;
    } else {
        out.status = PolicyStatus::Optimal;
    }
    const Index N = pb.N(), m = pb.m(), p = pb.p();
    out.solution.ubar = sol.x.head(m * N).reshaped(m, N);
    if (pb.mode == GainMode::Optimized) {
        out.solution.M = zero_blocks(N, m, p);
        for (Index t = 1; t < N; ++t)
            for (Index s = 0; s < t; ++s)
                for (Index a = 0; a < m; ++a)
                    for (Index c = 0; c < p; ++c)
                        out.solution.M[static_cast<std::size_t>(block_index(t, s))](a, c) = sol.x(pb.var_index(t, s, a, c));
    } else {
        out.solution.M = pb.fixed;
    }
    out.solution.objective = sol.objective;
    Index off = 0;
    for (const auto& c : prog.cones) {
        const auto blk = sol.s.segment(off, c.dim);
        const double scale = 1e-6 * (1.0 + std::abs(prog.b(off)));
        if (c.kind == socp::ConeKind::NonNeg)
            out.active_constraints += static_cast<int>((blk.array() <= scale).count());
        else if (c.kind == socp::ConeKind::SOC && blk(0) - blk.tail(c.dim - 1).norm() <= scale)
            ++out.active_constraints;
        off += c.dim;
    }
    return out;
}

/// ubar_t + sum_{s<t} M^s_t nu_s.
inline Vec apply_policy(const PolicySolution& sol, const Mat& nu_history, Index t) {
    if (nu_history.cols() != t) throw DimensionError("apply_policy: innovation history must have length t");
    if (t < 0 || t >= sol.N()) throw InputError("apply_policy: t outside the horizon");
    Vec u = sol.ubar.col(t);
    for (Index s = 0; s < t; ++s) u += sol.block(t, s) * nu_history.col(s);
    return u;
}

/// Expected horizon cost evaluated in full dimension.
inline double expected_cost(const PolicySolution& sol, const StateSpaceModel& model, const DeltaSet& d,
                            const Mat& Seta_sqrt, const Mat& Q, const Mat& R, const Vec& mu, const Mat& ref) {
    const auto nom = nominal_rollout(model, mu, sol.ubar);
    double c = 0.0;
    for (Index t = 0; t < d.N; ++t) {
        const Vec e = nom.ybar.col(t) - ref.col(t);
        c += e.dot(Q * e) + sol.ubar.col(t).dot(R * sol.ubar.col(t));
        const Mat LS = lambda_of(d, sol.M, t) * Seta_sqrt;
        c += (R * LS.topRows(d.m) * LS.topRows(d.m).transpose()).trace() +
             (Q * LS.bottomRows(d.p) * LS.bottomRows(d.p).transpose()).trace();
    }
    return c;
}

/// Applies u to the plant at time t and returns the measured output.
using PlantIO = std::function<Vec(Index t, const Vec& u)>;

struct StepReport {
    Index k = 0;
    bool backup_used = false;
    PolicyOutcome outcome;
    Mat u, y; // applied inputs and measured outputs, one column per step
};

/// One receding-horizon window: solve (falling back to the backup mean if
/// infeasible), then apply the policy for N_c steps while updating the
/// estimator and the nominal state.
inline StepReport control_step(const PolicyProblem& pb, ControllerState& st, const CostSpec& cost, Index N_c,
                               const PlantIO& plant_io) {
    const Index N = pb.N();
    if (N_c < 1 || N_c > N) throw InputError("control_step: N_c must lie in [1, N]");
    StepReport rep;
    rep.k = st.k;
    const Mat ref = cost.window(st.k, N);
    rep.outcome = solve_policy(pb, assemble_program(pb, st.mu, ref));
    if (rep.outcome.status == PolicyStatus::Infeasible) {
        st.mu = st.mu_backup;
        rep.backup_used = true;
        rep.outcome = solve_policy(pb, assemble_program(pb, st.mu, ref));
        if (rep.outcome.status == PolicyStatus::Infeasible)
            throw InfeasibleAfterBackup("control_step: program infeasible after switching to the backup mean at k=" +
                                            std::to_string(st.k),
                                        static_cast<long>(st.k));
    }
    const PolicySolution& sol = rep.outcome.solution;
    st.xhat = st.mu;
    st.xbar = st.mu;
    st.nu.resize(pb.p(), 0);
    rep.u.resize(pb.m(), N_c);
    rep.y.resize(pb.p(), N_c);
    for (Index j = 0; j < N_c; ++j) {
        const Vec u = apply_policy(sol, st.nu, j);
        const Vec y = plant_io(st.k + j, u);
        rep.u.col(j) = u;
        rep.y.col(j) = y;
        estimator_update(pb.model, pb.gains, st, u, y);
        st.xbar = pb.model.A * st.xbar + pb.model.B * sol.ubar.col(j);
    }
    st.mu = st.xhat;
    st.mu_backup = st.xbar;
    st.k += N_c;
    return rep;
}

/// Nominal inputs of the deterministic MPC baseline for one window.
inline Mat det_mpc_step(const PolicyProblem& pb, const Vec& xhat, const Mat& ref, Index N_c) {
    if (pb.mode != GainMode::Nominal) throw InputError("det_mpc_step: problem must be built in Nominal mode");
    const auto out = solve_policy(pb, assemble_program(pb, xhat, ref));
    if (out.status == PolicyStatus::Infeasible) throw InfeasibleAfterBackup("det_mpc_step: infeasible", 0);
    return out.solution.ubar.leftCols(N_c);
}

inline json_io::json step_record(const StepReport& r) {
    json_io::json j;
    j["k"] = r.k;
    j["status"] = to_string(r.outcome.status);
    j["solver_status"] = socp::to_string(r.outcome.solver_status);
    j["objective"] = r.outcome.solution.objective;
    j["iterations"] = r.outcome.iterations;
    j["backup_used"] = r.backup_used;
    j["active_constraints"] = r.outcome.active_constraints;
    j["primal_residual"] = r.outcome.residuals.primal;
    j["dual_residual"] = r.outcome.residuals.dual;
    const Vec u0 = r.outcome.solution.ubar.col(0);
    j["ubar0"] = std::vector<double>(u0.data(), u0.data() + u0.size());
    return j;
}

} // namespace stochpc::predictive
