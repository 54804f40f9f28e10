#pragma once

#include <string>
#include <vector>

#include "stochpc/datadriven.hpp"
#include "stochpc/errors.hpp"
#include "stochpc/json_io.hpp"
#include "stochpc/numkit.hpp"
#include "stochpc/plant.hpp"
#include "stochpc/predictive.hpp"
#include "stochpc/rng.hpp"

namespace stochpc::equivalence {

using Eigen::Index;

/// Maps from col(u_{[k-L,k)}, x_{k-L}, w_{[k-L,k)}) to the state of the
/// original system and to the auxiliary state.
struct PhiPair {
    Mat phi_orig; // n x (mL + n + nL)
    Mat phi_aux;  // n_aux x (mL + n + nL)
};

inline PhiPair phi_matrices(const plant::LTISystem& sys, Index L, double rank_tol = 1e-10) {
    sys.validate();
    const Index n = sys.n(), m = sys.m(), p = sys.p();
    const auto st = datadriven::structural_matrices(sys, L);
    if (numkit::rank(st.Obs, rank_tol) < n) throw RankError("phi_matrices: observability matrix is rank deficient");
    Mat AL = Mat::Identity(n, n);
    for (Index i = 0; i < L; ++i) AL = sys.A * AL;
    Mat Cw(n, n * L);
    {
        Mat Ak = Mat::Identity(n, n);
        for (Index i = 0; i < L; ++i) {
            Cw.middleCols((L - 1 - i) * n, n) = Ak;
            Ak = sys.A * Ak;
        }
    }
    std::vector<Mat> gblocks{Mat::Zero(p, n)};
    {
        Mat CAk = sys.C;
        for (Index i = 1; i < L; ++i) {
            gblocks.push_back(CAk);
            CAk = CAk * sys.A;
        }
    }
    const Mat Gw = numkit::block_toeplitz(gblocks);

    PhiPair out;
    out.phi_orig = numkit::hstack({st.Ctrb, AL, Cw});
    const Index cols = m * L + n + n * L, pL = p * L;
    out.phi_aux = Mat::Zero(m * L + pL + pL * L, cols);
    out.phi_aux.topLeftCorner(m * L, m * L).setIdentity();
    out.phi_aux.block(m * L, 0, pL, m * L) = st.Imp;
    out.phi_aux.block(m * L, m * L, pL, n) = st.Obs;
    out.phi_aux.block(m * L, m * L + n, pL, n * L) = Gw;
    out.phi_aux.bottomRightCorner(pL * L, n * L) = numkit::kron(Mat::Identity(L, L), st.Obs);

    Eigen::BDCSVD<Mat> svd(out.phi_orig);
    const Vec& sv = svd.singularValues();
    if (sv.size() < n || sv(n - 1) <= 1e-10 * sv(0)) throw RankError("phi_matrices: Phi_orig lacks full row rank");
    return out;
}

struct RelatedParams {
    Mat Srho;       // O Sw O'
    Vec mu_tilde;   // minimum-norm preimage of mu_ini under Phi_orig
    Vec mu_aux_ini; // Phi_aux mu_tilde
};

inline RelatedParams related_params(const plant::LTISystem& sys, Index L, const Mat& Sw, const Vec& mu_ini) {
    const auto phi = phi_matrices(sys, L);
    const auto st = datadriven::structural_matrices(sys, L);
    if (Sw.rows() != sys.n() || Sw.cols() != sys.n() || mu_ini.size() != sys.n())
        throw DimensionError("related_params: Sw must be n x n and mu_ini of length n");
    RelatedParams a;
    a.Srho = numkit::symmetrize(st.Obs * Sw * st.Obs.transpose());
    a.mu_tilde = numkit::pinv(phi.phi_orig) * mu_ini;
    a.mu_aux_ini = phi.phi_aux * a.mu_tilde;
    const double res = (phi.phi_orig * a.mu_tilde - mu_ini).cwiseAbs().maxCoeff();
    if (res > 1e-10 * (1.0 + mu_ini.cwiseAbs().maxCoeff()))
        throw NumericalError("related_params: Phi_orig preimage residual " + std::to_string(res));
    return a;
}

/// Setup shared by the two controllers of a paired run.
struct PairedSetup {
    plant::LTISystem sys;
    Index L = 5, N = 15, N_c = 5, steps = 12, T_d = 600;
    double dt = 0.1, excitation_variance = 1e-2, lambda = 0.0;
    Mat Q, R;
    predictive::ConstraintSpec cons;
    Mat Sw, Sv;   // controller-side variances of the original system
    Vec mu_ini;   // initial mean; the plant starts at x0 = mu_ini
    Mat reference; // p x (steps * N_c + N) reference samples
    socp::Settings settings;
};

struct PairedRunReport {
    double max_state_dev = 0.0, max_input_dev = 0.0, max_output_dev = 0.0;
    std::vector<double> input_dev, output_dev; // per plant step
    plant::Trajectory smpc, sddpc;
    int backups_smpc = 0, backups_sddpc = 0;

    bool passed(double tol) const { return max_input_dev <= tol && max_output_dev <= tol; }
};

inline json_io::json report_to_json(const PairedRunReport& r, double tol) {
    return {{"max_state_dev", r.max_state_dev},   {"max_input_dev", r.max_input_dev},
            {"max_output_dev", r.max_output_dev}, {"input_dev", r.input_dev},
            {"output_dev", r.output_dev},         {"backups_smpc", r.backups_smpc},
            {"backups_sddpc", r.backups_sddpc},   {"tolerance", tol},
            {"passed", r.passed(tol)}};
}

/// Data-driven auxiliary model from offline data of the noise-free system.
inline datadriven::AuxModel build_data_pipeline(const PairedSetup& s, const Mat& Srho, RngStream& data_rng) {
    const auto data = plant::collect_offline_data(s.sys, plant::NoiseModel::none(s.sys.n(), s.sys.p()), s.T_d,
                                                  s.excitation_variance, s.dt, data_rng);
    const auto pe = datadriven::check_persistent_excitation(data.u, s.L + 1 + s.sys.n());
    if (!pe.ok) throw RankError("build_data_pipeline: offline input is not persistently exciting");
    const auto part = datadriven::partition_data(data.u, data.y, s.L);
    const auto pred = datadriven::estimate_predictor(part, s.lambda);
    return datadriven::build_aux_model(pred, s.L, Srho, s.Sv);
}

/// Runs the model-based controller (true model) and the data-driven one (auxiliary model) on two
/// copies of the plant driven by one noise realization.
inline PairedRunReport run_paired(const PairedSetup& s, const plant::NoiseModel& noise, std::uint64_t seed) {
    const Index n = s.sys.n(), m = s.sys.m(), p = s.sys.p(), T = s.steps * s.N_c;
    const auto a1 = related_params(s.sys, s.L, s.Sw, s.mu_ini);
    RngStream data_rng(seed, "offline-data"), noise_rng(seed, "paired-noise");
    const auto aux = build_data_pipeline(s, a1.Srho, data_rng);

    const auto pb_orig = predictive::make_problem(StateSpaceModel::from_plant(s.sys, s.Sw, s.Sv), s.N, s.Q, s.R,
                                                  s.cons, predictive::GainMode::Optimized, {}, s.settings);
    const auto pb_aux = predictive::make_problem(aux.to_model(), s.N, s.Q, s.R, s.cons,
                                                 predictive::GainMode::Optimized, {}, s.settings);
    const predictive::CostSpec cost{s.Q, s.R, s.reference};

    const plant::NoiseSequence ns = T > 0 ? plant::sample_noise(noise, noise_rng, T)
                                          : plant::NoiseSequence{Mat(n, 0), Mat(p, 0)};
    auto run = [&](const predictive::PolicyProblem& pb, const Vec& mu0, int& backups) {
        plant::Trajectory tr;
        tr.u.resize(m, T);
        tr.y.resize(p, T);
        tr.x.resize(n, T);
        tr.w = ns.w;
        tr.v = ns.v;
        Vec x = s.mu_ini;
        predictive::ControllerState st = predictive::ControllerState::initial(mu0);
        predictive::PlantIO io = [&](Index t, const Vec& u) {
            const auto r = plant::step(s.sys, x, u, ns.w.col(t), ns.v.col(t));
            tr.x.col(t) = x;
            tr.u.col(t) = u;
            tr.y.col(t) = r.y;
            x = r.x_next;
            return r.y;
        };
        for (Index w = 0; w < s.steps; ++w) {
            const auto rep = predictive::control_step(pb, st, cost, s.N_c, io);
            backups += rep.backup_used ? 1 : 0;
        }
        return tr;
    };

    PairedRunReport rep;
    rep.smpc = run(pb_orig, s.mu_ini, rep.backups_smpc);
    rep.sddpc = run(pb_aux, a1.mu_aux_ini, rep.backups_sddpc);
    for (Index t = 0; t < T; ++t) {
        rep.input_dev.push_back((rep.smpc.u.col(t) - rep.sddpc.u.col(t)).cwiseAbs().maxCoeff());
        rep.output_dev.push_back((rep.smpc.y.col(t) - rep.sddpc.y.col(t)).cwiseAbs().maxCoeff());
        rep.max_input_dev = std::max(rep.max_input_dev, rep.input_dev.back());
        rep.max_output_dev = std::max(rep.max_output_dev, rep.output_dev.back());
        rep.max_state_dev =
            std::max(rep.max_state_dev, (rep.smpc.x.col(t) - rep.sddpc.x.col(t)).cwiseAbs().maxCoeff());
    }
    return rep;
}

struct SingleSolveReport {
    bool feasible_orig = false, feasible_aux = false;
    double ubar_dev = 0.0;
    double objective_rel_dev = 0.0;
    double objective_orig = 0.0, objective_aux = 0.0;

    bool consistent(double tol) const {
        if (feasible_orig != feasible_aux) return false;
        return !feasible_orig || (ubar_dev <= tol && objective_rel_dev <= tol);
    }
};

/// Solves the original and auxiliary programs once at k = 0 for means
/// related through the Phi maps (mu = Phi_orig mu_tilde, mu_aux = Phi_aux mu_tilde).
inline SingleSolveReport check_single_solve(const predictive::PolicyProblem& pb_orig,
                                             const predictive::PolicyProblem& pb_aux, const PhiPair& phi,
                                             const Vec& mu_tilde, const Mat& ref) {
    SingleSolveReport r;
    const auto o1 = predictive::solve_policy(pb_orig, predictive::assemble_program(pb_orig, phi.phi_orig * mu_tilde, ref));
    const auto o2 = predictive::solve_policy(pb_aux, predictive::assemble_program(pb_aux, phi.phi_aux * mu_tilde, ref));
    r.feasible_orig = o1.status != predictive::PolicyStatus::Infeasible;
    r.feasible_aux = o2.status != predictive::PolicyStatus::Infeasible;
    if (r.feasible_orig && r.feasible_aux) {
        r.objective_orig = o1.solution.objective;
        r.objective_aux = o2.solution.objective;
        r.ubar_dev = (o1.solution.ubar - o2.solution.ubar).cwiseAbs().maxCoeff();
        r.objective_rel_dev = std::abs(r.objective_orig - r.objective_aux) / std::max(1.0, std::abs(r.objective_orig));
    }
    return r;
}

} // namespace stochpc::equivalence
