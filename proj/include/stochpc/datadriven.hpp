#pragma once

#include <string>
#include <vector>

#include "stochpc/json_io.hpp"
#include "stochpc/model.hpp"
#include "stochpc/numkit.hpp"
#include "stochpc/plant.hpp"

namespace stochpc::datadriven {

/// Past/last-row split of the (L+1)-depth Hankel matrices of offline data.
struct HankelPartition {
    Mat U1, U2, Y1, Y2;
    Eigen::Index L = 0;
    Eigen::Index h = 0;
};

/// Multi-step output predictor y_t = GammaU u_past + GammaY y_past + D u_t.
struct PredictorMatrices {
    Mat GammaU, GammaY, Dmat;
};

/// Extended observability, extended controllability and impulse-response
/// Toeplitz matrices of a model over a window of length L.
struct ModelStructuralMatrices {
    Mat Obs;  // pL x n
    Mat Ctrb; // n x mL, [A^{L-1}B ... AB B]
    Mat Imp;  // pL x mL, Toep(D, CB, ..., CA^{L-2}B)
};

/// Auxiliary realization whose state stacks the last L inputs, noise-free
/// outputs and process-noise responses.
struct AuxModel {
    Mat A, B, C, Dmat, Sw, Sv;
    Eigen::Index L = 0, m = 0, p = 0;

    Eigen::Index n_aux() const { return A.rows(); }
    StateSpaceModel to_model() const { return {A, B, C, Dmat, Sw, Sv}; }
};

struct ExcitationCheck {
    bool ok = false;
    double margin = 0.0; // smallest / largest singular value of the Hankel matrix
};

inline HankelPartition partition_data(const Mat& u_d, const Mat& y_d, Eigen::Index L) {
    if (L < 1) throw InputError("partition_data: L must be >= 1");
    if (u_d.cols() != y_d.cols()) throw DimensionError("partition_data: u and y lengths differ");
    if (u_d.cols() <= L)
        throw DimensionError("partition_data: need T_d > L (T_d=" + std::to_string(u_d.cols()) + ")");
    const Eigen::Index m = u_d.rows(), p = y_d.rows();
    const Mat Hu = numkit::block_hankel(u_d, L + 1), Hy = numkit::block_hankel(y_d, L + 1);
    return {Hu.topRows(m * L), Hu.bottomRows(m), Hy.topRows(p * L), Hy.bottomRows(p), L, Hu.cols()};
}

inline ExcitationCheck check_persistent_excitation(const Mat& u_d, Eigen::Index order, double tol = 1e-8) {
    if (u_d.cols() < order) return {false, 0.0};
    const Mat H = numkit::block_hankel(u_d, order);
    if (H.rows() > H.cols()) return {false, 0.0};
    Eigen::BDCSVD<Mat> svd(H);
    const Vec& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return {false, 0.0};
    const double margin = s(s.size() - 1) / s(0);
    return {margin > tol, margin};
}

/// [GammaU, GammaY, D] = Y2 col(U1, Y1, U2)^+ when lambda = 0, otherwise
/// the Tikhonov-regularized left inverse replaces the pseudo-inverse.
inline PredictorMatrices estimate_predictor(const HankelPartition& part, double lambda,
                                            double rank_tol = numkit::kDefaultRankTol) {
    if (!(lambda >= 0.0)) throw InputError("estimate_predictor: lambda must be >= 0");
    const Eigen::Index mL = part.U1.rows(), pL = part.Y1.rows(), m = part.U2.rows();
    const Mat W = numkit::vstack({part.U1, part.Y1, part.U2});
    if (numkit::rank(W, rank_tol) == 0) throw RankError("estimate_predictor: data matrix is zero");
    const Mat G = part.Y2 * (lambda == 0.0 ? numkit::pinv(W, rank_tol) : numkit::tikhonov_dagger(W, lambda));
    return {G.leftCols(mL), G.middleCols(mL, pL), G.rightCols(m)};
}

inline ModelStructuralMatrices structural_matrices(const plant::LTISystem& sys, Eigen::Index L) {
    if (L < 1) throw InputError("structural_matrices: L must be >= 1");
    const Eigen::Index n = sys.n(), m = sys.m(), p = sys.p();
    ModelStructuralMatrices out{Mat(p * L, n), Mat(n, m * L), Mat()};
    Mat Ak = Mat::Identity(n, n);
    std::vector<Mat> markov{sys.D};
    for (Eigen::Index i = 0; i < L; ++i) {
        out.Obs.middleRows(i * p, p) = sys.C * Ak;
        out.Ctrb.middleCols((L - 1 - i) * m, m) = Ak * sys.B;
        if (i + 1 < L) markov.push_back(sys.C * Ak * sys.B);
        Ak = sys.A * Ak;
    }
    out.Imp = numkit::block_toeplitz(markov);
    return out;
}

struct ModelPredictor {
    PredictorMatrices pred;
    ModelStructuralMatrices structure;
};

/// Model-based predictor [C Ctrb, C A^L] [I 0; Imp Obs]^+; requires Obs to
/// have full column rank.
inline ModelPredictor model_predictor(const plant::LTISystem& sys, Eigen::Index L,
                                      double rank_tol = numkit::kDefaultRankTol) {
    sys.validate();
    auto st = structural_matrices(sys, L);
    const Eigen::Index n = sys.n(), m = sys.m(), p = sys.p();
    if (numkit::rank(st.Obs, rank_tol) < n)
        throw RankError("model_predictor: observability matrix is rank deficient (L too small)");
    Mat AL = Mat::Identity(n, n);
    for (Eigen::Index i = 0; i < L; ++i) AL = sys.A * AL;
    Mat S = Mat::Zero(m * L + p * L, m * L + n);
    S.topLeftCorner(m * L, m * L).setIdentity();
    S.bottomLeftCorner(p * L, m * L) = st.Imp;
    S.bottomRightCorner(p * L, n) = st.Obs;
    const Mat G = numkit::hstack({sys.C * st.Ctrb, sys.C * AL}) * numkit::pinv(S, rank_tol);
    return {{G.leftCols(m * L), G.rightCols(p * L), sys.D}, std::move(st)};
}

/// S_j = [0, I_p, 0] selecting the j-th (1-based) p-block of a pL vector.
inline Mat block_selector(Eigen::Index p, Eigen::Index L, Eigen::Index j) {
    Mat S = Mat::Zero(p, p * L);
    S.middleCols((j - 1) * p, p).setIdentity();
    return S;
}

/// Block-shift matrix with I_{q(L-1)} on the upper block superdiagonal.
inline Mat shift_block(Eigen::Index q, Eigen::Index L) {
    Mat Dq = Mat::Zero(q * L, q * L);
    if (L > 1) Dq.topRightCorner(q * (L - 1), q * (L - 1)).setIdentity();
    return Dq;
}

inline AuxModel build_aux_model(const PredictorMatrices& pred, Eigen::Index L, const Mat& Srho, const Mat& Sv) {
    const Eigen::Index p = pred.GammaU.rows(), m = pred.Dmat.cols();
    if (L < 1) throw InputError("build_aux_model: L must be >= 1");
    if (pred.GammaU.cols() != m * L || pred.GammaY.rows() != p || pred.GammaY.cols() != p * L ||
        pred.Dmat.rows() != p || Srho.rows() != p * L || Srho.cols() != p * L || Sv.rows() != p || Sv.cols() != p)
        throw DimensionError("build_aux_model: shapes inconsistent with (m, p, L)");
    const Eigen::Index pL = p * L, n_aux = m * L + pL + pL * L;

    // E = Toep(0_{p x pL}, S_1, ..., S_{L-1}) is pL x pL^2, F = [S_L, ..., S_1] is p x pL^2.
    std::vector<Mat> eblocks{Mat::Zero(p, pL)};
    for (Eigen::Index j = 1; j < L; ++j) eblocks.push_back(block_selector(p, L, j));
    const Mat E = numkit::block_toeplitz(eblocks);
    Mat F(p, pL * L);
    for (Eigen::Index j = 0; j < L; ++j) F.middleCols(j * pL, pL) = block_selector(p, L, L - j);

    AuxModel aux;
    aux.L = L;
    aux.m = m;
    aux.p = p;
    aux.C = numkit::hstack({pred.GammaU, pred.GammaY, F - pred.GammaY * E});
    aux.A = numkit::block_diag({shift_block(m, L), shift_block(p, L), shift_block(pL, L)});
    aux.A.middleRows(m * L + p * (L - 1), p) += aux.C;
    aux.B = Mat::Zero(n_aux, m);
    aux.B.middleRows(m * (L - 1), m).setIdentity();
    aux.B.middleRows(m * L + p * (L - 1), p) = pred.Dmat;
    aux.Dmat = pred.Dmat;
    aux.Sw = Mat::Zero(n_aux, n_aux);
    aux.Sw.bottomRightCorner(pL, pL) = Srho;
    aux.Sv = Sv;
    return aux;
}

/// col(u_{[t-L,t)}, y_core_{[t-L,t)}, rho_{[t-L,t)}) from histories stored one
/// sample per column (oldest first).
inline Vec aux_state_from_history(const Mat& u_hist, const Mat& ycore_hist, const Mat& rho_hist) {
    const Eigen::Index L = u_hist.cols();
    if (ycore_hist.cols() != L || rho_hist.cols() != L)
        throw DimensionError("aux_state_from_history: histories must all have length L");
    if (rho_hist.rows() != ycore_hist.rows() * L)
        throw DimensionError("aux_state_from_history: rho entries must have length pL");
    Vec x(u_hist.size() + ycore_hist.size() + rho_hist.size());
    x << u_hist.reshaped(), ycore_hist.reshaped(), rho_hist.reshaped();
    return x;
}

/// Zeros except the trailing pL entries, which hold rho_t.
inline Vec aux_disturbance(const Vec& rho_t, Eigen::Index n_aux) {
    if (rho_t.size() > n_aux) throw DimensionError("aux_disturbance: rho longer than the auxiliary state");
    Vec w = Vec::Zero(n_aux);
    w.tail(rho_t.size()) = rho_t;
    return w;
}

inline json_io::json predictor_to_json(const PredictorMatrices& pr) {
    return {{"GammaU", json_io::mat_to_json(pr.GammaU)},
            {"GammaY", json_io::mat_to_json(pr.GammaY)},
            {"D", json_io::mat_to_json(pr.Dmat)}};
}

inline PredictorMatrices predictor_from_json(const json_io::json& j) {
    return {json_io::mat_from_json(j.at("GammaU")), json_io::mat_from_json(j.at("GammaY")),
            json_io::mat_from_json(j.at("D"))};
}

inline json_io::json aux_to_json(const AuxModel& a) {
    return {{"L", a.L},
            {"m", a.m},
            {"p", a.p},
            {"A", json_io::mat_to_json(a.A)},
            {"B", json_io::mat_to_json(a.B)},
            {"C", json_io::mat_to_json(a.C)},
            {"D", json_io::mat_to_json(a.Dmat)},
            {"Sw", json_io::mat_to_json(a.Sw)},
            {"Sv", json_io::mat_to_json(a.Sv)}};
}

inline AuxModel aux_from_json(const json_io::json& j) {
    AuxModel a;
    a.L = j.at("L").get<Eigen::Index>();
    a.m = j.at("m").get<Eigen::Index>();
    a.p = j.at("p").get<Eigen::Index>();
    a.A = json_io::mat_from_json(j.at("A"));
    a.B = json_io::mat_from_json(j.at("B"));
    a.C = json_io::mat_from_json(j.at("C"));
    a.Dmat = json_io::mat_from_json(j.at("D"));
    a.Sw = json_io::mat_from_json(j.at("Sw"));
    a.Sv = json_io::mat_from_json(j.at("Sv"));
    a.to_model().validate();
    return a;
}

} // namespace stochpc::datadriven
