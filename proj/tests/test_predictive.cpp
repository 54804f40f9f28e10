#include <gtest/gtest.h>

#include "policy_oracles.hpp"
#include "stochpc/datadriven.hpp"
#include "stochpc/predictive.hpp"
#include "test_util.hpp"

using namespace stochpc;
using namespace stochpc::predictive;
using numkit::max_abs;

namespace {

StateSpaceModel random_model(std::mt19937_64& rng, Index n, Index m, Index p, bool with_d = true) {
    const auto sys = testutil::random_system(rng, n, m, p, with_d, 1.05);
    return StateSpaceModel::from_plant(sys, 0.1 * testutil::random_pd(rng, n), 0.1 * testutil::random_pd(rng, p));
}

ConstraintSpec box(Index m, Index p, double bound, double alpha = 0.3) {
    ConstraintSpec c;
    c.E = numkit::kron(Mat::Identity(m + p, m + p), (Mat(2, 1) << 1, -1).finished());
    c.f = Vec::Constant(2 * (m + p), bound);
    c.alpha = alpha;
    return c;
}

StateSpaceModel batch_reactor_model() {
    return StateSpaceModel::from_plant(plant::batch_reactor(), 1e-4 * Mat::Identity(4, 4), 5e-7 * Mat::Identity(2, 2));
}

datadriven::AuxModel batch_reactor_aux() {
    const auto sys = plant::batch_reactor();
    RngStream rng(3, "offline-data");
    const auto data = plant::collect_offline_data(sys, plant::NoiseModel::none(4, 2), 600, 1e-2, 0.1, rng);
    const auto pred = datadriven::estimate_predictor(datadriven::partition_data(data.u, data.y, 5), 0.0);
    return datadriven::build_aux_model(pred, 5, 1e-7 * Mat::Identity(10, 10), 5e-7 * Mat::Identity(2, 2));
}

} // namespace

TEST(Gains, ScalarClosedForm) {
    const StateSpaceModel m{Mat::Constant(1, 1, 0.5), Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1),
                            Mat::Ones(1, 1), Mat::Ones(1, 1)};
    const auto g = compute_gains(m);
    const double sigma = (0.25 + std::sqrt(0.0625 + 4.0)) / 2.0; // sigma^2 - sigma/4 - 1 = 0
    EXPECT_NEAR(g.Sx(0, 0), sigma, 1e-9);
    EXPECT_NEAR(g.Lgain(0, 0), 0.5 * sigma / (sigma + 1.0), 1e-9);
    EXPECT_NEAR(g.Lgain(0, 0), 0.2656, 1e-4);
}

TEST(Gains, ZeroDynamicsGiveZeroGain) {
    std::mt19937_64 rng(1);
    auto m = random_model(rng, 3, 1, 2);
    m.A.setZero();
    EXPECT_LE(max_abs(compute_gains(m).Lgain), 1e-14);
}

TEST(Deltas, Dimensions) {
    const auto smpc = batch_reactor_model();
    const auto d1 = build_deltas(smpc, compute_gains(smpc), 15);
    EXPECT_EQ(d1.n_eta(), 94);
    EXPECT_EQ(d1.DA.cols(), 94);
    EXPECT_EQ(d1.DY.rows(), 30);
    EXPECT_EQ(d1.DY.cols(), 30);

    const auto aux = batch_reactor_aux().to_model();
    const auto d2 = build_deltas(aux, compute_gains(aux), 15);
    EXPECT_EQ(d2.n_eta(), 1150);
    EXPECT_EQ(d2.DM.cols(), 1150);

    const auto d0 = build_deltas(smpc, compute_gains(smpc), 1);
    EXPECT_EQ(d0.DM.rows(), 2);
    EXPECT_EQ(d0.DM.cols(), 4 + 4 + 2);
    EXPECT_EQ(d0.DM.leftCols(4), smpc.C);
    EXPECT_EQ(d0.DM.rightCols(2), Mat::Identity(2, 2));
}

TEST(Lambda, ZeroGainsAndFirstStep) {
    std::mt19937_64 rng(2);
    const auto model = random_model(rng, 3, 2, 2);
    const auto d = build_deltas(model, compute_gains(model), 5);
    for (Index i = 0; i < 5; ++i) EXPECT_EQ(lambda_of(d, zero_blocks(5, 2, 2), i), d.offset(i));
    const auto sol = oracle::random_solution(rng, 5, 2, 2);
    EXPECT_EQ(max_abs(lambda_of(d, sol.M, 0).topRows(2)), 0.0);
    EXPECT_THROW(lambda_of(d, sol.M, 5), InputError);
}

TEST(Lambda, AffineIdentityInClosedLoop) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto model = random_model(rng, 3, 2, 2, trial % 2 == 0);
        const auto g = compute_gains(model);
        const Index N = 6;
        const auto d = build_deltas(model, g, N);
        const auto sol = oracle::random_solution(rng, N, 2, 2);
        const Vec mu = testutil::random_vector(rng, 3), ex = testutil::random_vector(rng, 3);
        const Mat W = testutil::random_matrix(rng, 3, N), V = testutil::random_matrix(rng, 2, N);
        const auto run = oracle::simulate_window(model, g, sol, mu, ex, W, V);
        const Vec eta = oracle::eta_vector(ex, W, V);
        for (Index t = 0; t < N; ++t) {
            Vec dev(4);
            dev << run.u.col(t) - run.ubar.col(t), run.y.col(t) - run.ybar.col(t);
            EXPECT_LE((dev - lambda_of(d, sol.M, t) * eta).cwiseAbs().maxCoeff(), 1e-10) << trial << ' ' << t;
        }
    }
}

TEST(NominalRollout, Examples) {
    const StateSpaceModel m{Mat::Constant(1, 1, 2.0), Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1),
                            Mat::Ones(1, 1), Mat::Ones(1, 1)};
    const auto r = nominal_rollout(m, Vec::Ones(1), Mat::Zero(1, 1));
    EXPECT_EQ(r.xbar(0, 1), 2.0);
    EXPECT_EQ(r.ybar(0, 0), 1.0);

    std::mt19937_64 rng(4);
    const auto sys = testutil::random_system(rng, 4, 2, 3);
    const auto model = StateSpaceModel::from_plant(sys, Mat::Identity(4, 4), Mat::Identity(3, 3));
    const Vec x0 = testutil::random_vector(rng, 4);
    const Mat u = testutil::random_matrix(rng, 2, 8);
    const auto nom = nominal_rollout(model, x0, u);
    const auto sim = plant::simulate_with_noise(
        sys, x0, {Mat::Zero(4, 8), Mat::Zero(3, 8)},
        [&](Index t, const Eigen::Ref<const Mat>&, const Eigen::Ref<const Mat>&) { return Vec(u.col(t)); }, 8);
    EXPECT_LE(max_abs(nom.ybar - sim.y), 1e-13);
}

TEST(Estimator, ExactOutputAdvancesOpenLoop) {
    std::mt19937_64 rng(5);
    const auto model = random_model(rng, 3, 1, 2);
    const auto g = compute_gains(model);
    auto st = ControllerState::initial(testutil::random_vector(rng, 3));
    const Vec u = testutil::random_vector(rng, 1);
    const Vec y = model.C * st.xhat + model.D * u;
    const Vec expect = model.A * st.xhat + model.B * u;
    const Vec nu = estimator_update(model, g, st, u, y);
    EXPECT_LE(nu.cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((st.xhat - expect).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_EQ(st.nu.cols(), 1);
}

TEST(Estimator, ErrorVarianceApproachesSteadyState) {
    const auto model = batch_reactor_model();
    const auto g = compute_gains(model);
    const auto noise = plant::NoiseModel::gaussian(model.Sw, model.Sv);
    const auto sys = plant::batch_reactor();
    double acc = 0.0;
    const int seeds = 10, T = 50;
    int count = 0;
    for (int s = 0; s < seeds; ++s) {
        RngStream rng(100 + s, "estimator");
        const auto ns = plant::sample_noise(noise, rng, 4 * T);
        for (int rep = 0; rep < 4; ++rep) {
            auto st = ControllerState::initial(Vec::Zero(4));
            Vec x = numkit::psd_sqrt(g.Sx) * Vec(Eigen::Map<const Vec>(ns.w.col(rep * T).data(), 4)) /
                    std::sqrt(1e-4);
            for (int t = 0; t < T; ++t) {
                const Index k = rep * T + t;
                const Vec u = Vec::Zero(2);
                const Vec y = sys.C * x + ns.v.col(k);
                estimator_update(model, g, st, u, y);
                x = sys.A * x + ns.w.col(k);
                if (t == T - 1) {
                    acc += (x - st.xhat).squaredNorm();
                    ++count;
                }
            }
        }
    }
    EXPECT_NEAR(acc / count, g.Sx.trace(), 0.3 * g.Sx.trace());
}

TEST(ConeReduction, MatchesFullNormSmallInstance) {
    std::mt19937_64 rng(6);
    const auto model = random_model(rng, 3, 2, 2);
    const auto g = compute_gains(model);
    const auto d = build_deltas(model, g, 5);
    const Mat S = eta_sqrt(model, g, 5);
    const auto red = reduce_soc_data(d, S);
    for (int draw = 0; draw < 20; ++draw) {
        const auto sol = oracle::random_solution(rng, 5, 2, 2, draw == 0 ? 0.0 : 1.0);
        for (Index t = 0; t < 5; ++t) {
            const Vec e = testutil::random_vector(rng, 4);
            EXPECT_NEAR(red.norm(d, sol.M, t, e), oracle::full_cone_norm(d, sol.M, S, t, e), 1e-10);
        }
    }
}

TEST(ConeReduction, OrthonormalFactorProjection) {
    // Sigma = I and orthonormal innovation rows: the residual is the part of
    // the offset orthogonal to range(GS').
    DeltaSet d;
    d.N = 2;
    d.s = 1;
    d.m = 1;
    d.p = 1;
    const Index n = 1 + 1 * 2 + 1 * 2;
    d.DY = Mat::Zero(2, 2);
    d.Theta = Mat::Ones(2, 1);
    d.DM = Mat::Zero(2, n);
    d.DM(0, 0) = 1.0;
    d.DM(1, 1) = 1.0;
    d.DA = Mat::Zero(2, n);
    d.DA(1, 0) = 0.6;
    d.DA(1, 4) = 0.8;
    const auto red = reduce_soc_data(d, Mat::Identity(n, n));
    Vec e(2);
    e << 0, 1;
    EXPECT_NEAR(e.dot(red.resid[1] * e), 0.64, 1e-14);
    EXPECT_NEAR(std::abs((red.offset[1] * e)(0)), 0.6, 1e-14);
}

TEST(FixedGain, MatchesDirectStateFeedback) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const auto model = random_model(rng, 3, 2, 2, trial % 2 == 1);
        const auto g = compute_gains(model);
        const Index N = 6;
        const Mat K = testutil::random_matrix(rng, 2, 3, 0.5);
        PolicySolution sol;
        sol.ubar = testutil::random_matrix(rng, 2, N);
        sol.M = fixed_gain_blocks(model, g, K, N);
        const Vec mu = testutil::random_vector(rng, 3), ex = testutil::random_vector(rng, 3);
        const Mat W = testutil::random_matrix(rng, 3, N), V = testutil::random_matrix(rng, 2, N);
        const auto run = oracle::simulate_window(model, g, sol, mu, ex, W, V);
        // u_t = ubar_t - K (xhat_t - xbar_t) simulated directly.
        Vec x = mu + ex, xhat = mu, xbar = mu;
        for (Index t = 0; t < N; ++t) {
            const Vec u = sol.ubar.col(t) - K * (xhat - xbar);
            EXPECT_LE((u - run.u.col(t)).cwiseAbs().maxCoeff(), 1e-10);
            const Vec y = model.C * x + model.D * u + V.col(t);
            xhat = model.A * xhat + model.B * u + g.Lgain * (y - model.C * xhat - model.D * u);
            xbar = model.A * xbar + model.B * sol.ubar.col(t);
            x = model.A * x + model.B * u + W.col(t);
        }
    }
    const auto model = batch_reactor_model();
    const auto g = compute_gains(model);
    const auto zero = fixed_gain_blocks(model, g, Mat::Zero(2, 4), 4);
    for (const auto& b : zero) EXPECT_EQ(max_abs(b), 0.0);
    const Mat K = Mat::Ones(2, 4);
    EXPECT_LE(max_abs(fixed_gain_blocks(model, g, K, 4)[block_index(3, 2)] + K * g.Lgain), 1e-15);
}

TEST(Program, BatchReactorSizes) {
    ConstraintSpec cons;
    cons.E = numkit::kron(Mat::Identity(4, 4), (Mat(2, 1) << 1, -1).finished());
    cons.f.resize(8);
    cons.f << .1, .1, .5, .1, .4, .4, .4, .4;
    const auto pb = make_problem(batch_reactor_model(), 15, 1e3 * Mat::Identity(2, 2), Mat::Identity(2, 2), cons,
                                 GainMode::Optimized);
    EXPECT_EQ(pb.num_vars(), 450);
    const auto prog = assemble_program(pb, Vec::Zero(4), Mat::Zero(2, 15));
    EXPECT_EQ(prog.A.cols(), 450);
    // One cone per (t, i): SOC blocks plus scalar rows merged into NonNeg blocks.
    Index constraints = 0;
    for (const auto& c : prog.cones) constraints += c.kind == socp::ConeKind::SOC ? 1 : c.dim;
    EXPECT_EQ(constraints, 120);
    for (const auto& c : prog.cones)
        if (c.kind == socp::ConeKind::SOC) EXPECT_LE(c.dim, 2 * 15 + 2);
}

TEST(Program, ObjectiveMatchesUnreducedOracle) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 3; ++trial) {
        const auto model = random_model(rng, 2, 1, 1, trial == 1);
        const Index N = 3;
        const auto pb = make_problem(model, N, 2.0 * Mat::Identity(1, 1), Mat::Identity(1, 1), box(1, 1, 6.0),
                                     GainMode::Optimized);
        const Vec mu = testutil::random_vector(rng, 2, 0.5);
        const Mat ref = testutil::random_matrix(rng, 1, N);
        const auto prog = assemble_program(pb, mu, ref);
        const auto out = solve_policy(pb, prog);
        ASSERT_EQ(out.status, PolicyStatus::Optimal);
        const auto full = oracle::full_program(pb, mu, ref);
        const auto ref_sol = socp::solve(full);
        ASSERT_EQ(ref_sol.status, socp::Status::Optimal);
        EXPECT_NEAR(out.solution.objective, ref_sol.objective, 1e-7 * (1 + std::abs(ref_sol.objective))) << trial;
        // Reported objective equals the expected cost of the returned policy.
        const double ec = expected_cost(out.solution, pb.model, pb.deltas, pb.Seta_sqrt, pb.Q, pb.R, mu, ref);
        EXPECT_NEAR(out.solution.objective, ec, 1e-7 * (1 + std::abs(ec)));
        // Full-dimension constraints hold at the optimum.
        for (Index t = 0; t < N; ++t) {
            const auto nom = nominal_rollout(pb.model, mu, out.solution.ubar);
            Vec pair(2);
            pair << out.solution.ubar.col(t), nom.ybar.col(t);
            for (Index i = 0; i < pb.cons.q(); ++i) {
                const Vec e = pb.cons.E.row(i).transpose();
                const double lhs = pb.cons.kappa() * oracle::full_cone_norm(pb.deltas, out.solution.M, pb.Seta_sqrt, t, e);
                EXPECT_LE(lhs + e.dot(pair) - pb.cons.f(i), 1e-7);
            }
        }
    }
}

TEST(Program, UnconstrainedZeroReference) {
    std::mt19937_64 rng(9);
    const auto model = random_model(rng, 3, 2, 2);
    const auto pb = make_problem(model, 4, Mat::Identity(2, 2), Mat::Identity(2, 2), box(2, 2, 1e6),
                                 GainMode::Optimized);
    const auto out = solve_policy(pb, assemble_program(pb, Vec::Zero(3), Mat::Zero(2, 4)));
    ASSERT_NE(out.status, PolicyStatus::Infeasible);
    EXPECT_LE(max_abs(out.solution.ubar), 1e-6);
}

TEST(Program, ContradictoryBoundsAreInfeasible) {
    std::mt19937_64 rng(10);
    const auto model = random_model(rng, 3, 1, 1);
    auto cons = box(1, 1, 1.0);
    cons.f(0) = -1.0; // u <= -1
    cons.f(1) = -1.0; // -u <= -1
    const auto pb = make_problem(model, 3, Mat::Identity(1, 1), Mat::Identity(1, 1), cons, GainMode::Optimized);
    EXPECT_EQ(solve_policy(pb, assemble_program(pb, Vec::Zero(3), Mat::Zero(1, 3))).status, PolicyStatus::Infeasible);
}

TEST(Program, AlphaOneDropsTightening) {
    std::mt19937_64 rng(11);
    const auto model = random_model(rng, 3, 1, 1);
    const auto pb = make_problem(model, 3, Mat::Identity(1, 1), Mat::Identity(1, 1), box(1, 1, 1.0, 1.0),
                                 GainMode::Optimized);
    EXPECT_EQ(pb.cons.kappa(), 0.0);
    const auto prog = assemble_program(pb, Vec::Zero(3), Mat::Zero(1, 3));
    for (const auto& c : prog.cones) EXPECT_EQ(c.kind, socp::ConeKind::NonNeg);
}

TEST(Policy, ApplyPolicy) {
    PolicySolution sol;
    sol.ubar = Mat::Ones(2, 3);
    sol.M = zero_blocks(3, 2, 2);
    sol.M[block_index(2, 1)] = Mat::Identity(2, 2);
    EXPECT_EQ(apply_policy(sol, Mat(2, 0), 0), Vec(Vec::Ones(2)));
    Mat nu = Mat::Zero(2, 2);
    nu.col(1) << 3, 4;
    EXPECT_EQ(apply_policy(sol, nu, 2), Vec((Vec(2) << 4, 5).finished()));
    EXPECT_THROW(apply_policy(sol, nu, 1), DimensionError);
}

TEST(ExpectedCost, MonteCarlo) {
    std::mt19937_64 rng(12);
    const auto model = random_model(rng, 3, 2, 2);
    const auto g = compute_gains(model);
    const Index N = 5;
    const auto d = build_deltas(model, g, N);
    const Mat S = eta_sqrt(model, g, N);
    const auto sol = oracle::random_solution(rng, N, 2, 2);
    const Mat Q = testutil::random_pd(rng, 2), R = testutil::random_pd(rng, 2);
    const Vec mu = testutil::random_vector(rng, 3);
    const Mat ref = testutil::random_matrix(rng, 2, N);
    const double analytic = expected_cost(sol, model, d, S, Q, R, mu, ref);
    const Mat Rx = numkit::psd_sqrt(g.Sx), Rw = numkit::psd_sqrt(model.Sw), Rv = numkit::psd_sqrt(model.Sv);
    double acc = 0.0;
    const int samples = 10000;
    for (int k = 0; k < samples; ++k) {
        const Vec ex = Rx * testutil::random_vector(rng, 3);
        const Mat W = Rw * testutil::random_matrix(rng, 3, N), V = Rv * testutil::random_matrix(rng, 2, N);
        const auto run = oracle::simulate_window(model, g, sol, mu, ex, W, V);
        for (Index t = 0; t < N; ++t) {
            const Vec e = run.y.col(t) - ref.col(t);
            acc += e.dot(Q * e) + run.u.col(t).dot(R * run.u.col(t));
        }
    }
    EXPECT_NEAR(acc / samples, analytic, 0.02 * analytic);
}

TEST(ExpectedCost, ZeroPolicyIsNoiseFloor) {
    std::mt19937_64 rng(13);
    const auto model = random_model(rng, 3, 2, 2);
    const auto g = compute_gains(model);
    const auto d = build_deltas(model, g, 4);
    const Mat S = eta_sqrt(model, g, 4);
    PolicySolution sol{Mat::Zero(2, 4), zero_blocks(4, 2, 2)};
    const Mat Q = Mat::Identity(2, 2), R = Mat::Identity(2, 2);
    double floor = 0.0;
    for (Index t = 0; t < 4; ++t) {
        const Mat P = d.offset(t) * S;
        floor += P.squaredNorm();
    }
    EXPECT_NEAR(expected_cost(sol, model, d, S, Q, R, Vec::Zero(3), Mat::Zero(2, 4)), floor, 1e-12 * (1 + floor));
}

TEST(ExpectedCost, MidpointConvex) {
    std::mt19937_64 rng(14);
    const auto model = random_model(rng, 3, 2, 2);
    const auto g = compute_gains(model);
    const auto d = build_deltas(model, g, 4);
    const Mat S = eta_sqrt(model, g, 4);
    const Mat Q = Mat::Identity(2, 2), R = Mat::Identity(2, 2);
    for (int k = 0; k < 10; ++k) {
        const auto a = oracle::random_solution(rng, 4, 2, 2), b = oracle::random_solution(rng, 4, 2, 2);
        PolicySolution mid{0.5 * (a.ubar + b.ubar), a.M};
        for (std::size_t i = 0; i < mid.M.size(); ++i) mid.M[i] = 0.5 * (a.M[i] + b.M[i]);
        auto f = [&](const PolicySolution& s) { return expected_cost(s, model, d, S, Q, R, Vec::Zero(3), Mat::Zero(2, 4)); };
        EXPECT_LE(f(mid), 0.5 * (f(a) + f(b)) + 1e-9);
    }
}

TEST(ControlStep, ZeroNoiseStaysAtOrigin) {
    std::mt19937_64 rng(15);
    const auto model = random_model(rng, 3, 1, 1);
    const auto pb = make_problem(model, 4, Mat::Identity(1, 1), Mat::Identity(1, 1), box(1, 1, 10.0),
                                 GainMode::Optimized);
    auto st = ControllerState::initial(Vec::Zero(3));
    const CostSpec cost{Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Zero(1, 1)};
    Vec x = Vec::Zero(3);
    PlantIO io = [&](Index, const Vec& u) {
        const Vec y = model.C * x + model.D * u;
        x = model.A * x + model.B * u;
        return y;
    };
    for (int w = 0; w < 3; ++w) {
        const auto rep = control_step(pb, st, cost, 2, io);
        EXPECT_FALSE(rep.backup_used);
        EXPECT_LE(max_abs(rep.u), 1e-6);
    }
    EXPECT_EQ(st.k, 6);
}

TEST(ControlStep, FallsBackToBackupMean) {
    // The estimate violates the output bound at the first step; the backup
    // mean (origin) does not.
    const StateSpaceModel model{Mat::Constant(1, 1, 0.5), Mat::Ones(1, 1), Mat::Ones(1, 1), Mat::Zero(1, 1),
                                1e-4 * Mat::Ones(1, 1), 1e-4 * Mat::Ones(1, 1)};
    const auto pb = make_problem(model, 3, Mat::Identity(1, 1), Mat::Identity(1, 1), box(1, 1, 1.0),
                                 GainMode::Optimized);
    auto st = ControllerState::initial(Vec::Zero(1));
    st.mu = Vec::Constant(1, 5.0);
    const CostSpec cost{Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Zero(1, 1)};
    PlantIO io = [&](Index, const Vec&) { return Vec(Vec::Zero(1)); };
    const auto rep = control_step(pb, st, cost, 1, io);
    EXPECT_TRUE(rep.backup_used);

    st = ControllerState::initial(Vec::Constant(1, 5.0));
    EXPECT_THROW(control_step(pb, st, cost, 1, io), InfeasibleAfterBackup);
}

TEST(DetMpc, PinsOutputAtBound) {
    const auto sys = plant::batch_reactor();
    const auto model = batch_reactor_model();
    ConstraintSpec cons;
    cons.E = numkit::kron(Mat::Identity(4, 4), (Mat(2, 1) << 1, -1).finished());
    cons.f.resize(8);
    cons.f << .1, .1, .5, .1, .4, .4, .4, .4;
    const auto pb = make_problem(model, 15, 1e3 * Mat::Identity(2, 2), Mat::Identity(2, 2), cons, GainMode::Nominal);
    Mat ref = Mat::Zero(2, 15);
    ref.row(0).setConstant(0.5);
    const auto out = solve_policy(pb, assemble_program(pb, Vec::Zero(4), ref));
    ASSERT_EQ(out.status, PolicyStatus::Optimal);
    const auto nom = nominal_rollout(model, Vec::Zero(4), out.solution.ubar);
    EXPECT_NEAR(nom.ybar(0, 14), 0.4, 1e-6);
    EXPECT_LE(nom.ybar.row(0).maxCoeff(), 0.4 + 1e-7);
    const Mat u = det_mpc_step(pb, Vec::Zero(4), ref, 5);
    EXPECT_LE(max_abs(u - out.solution.ubar.leftCols(5)), 1e-12);
    EXPECT_LE(max_abs(det_mpc_step(pb, Vec::Zero(4), Mat::Zero(2, 15), 5)), 1e-7);
}
