#pragma once

// Independent reference computations used only by the tests.

#include <cmath>
#include <random>
#include <vector>

#include "stochpc/socp.hpp"
#include "test_util.hpp"

namespace oracle {

using stochpc::Mat;
using stochpc::Vec;
using stochpc::socp::Cone;
using stochpc::socp::ConeKind;

inline void project_cone(const Cone& c, Eigen::Ref<Vec> y) {
    if (c.kind == ConeKind::NonNeg) {
        y = y.cwiseMax(0.0);
        return;
    }
    if (c.kind == ConeKind::Zero) {
        y.setZero();
        return;
    }
    const double t = y(0), nv = y.tail(y.size() - 1).norm();
    if (nv <= t) return;
    if (nv <= -t) {
        y.setZero();
        return;
    }
    const double a = 0.5 * (t + nv);
    y.tail(y.size() - 1) *= a / nv;
    y(0) = a;
}

/// Program with an invertible square A: the feasible set in y = b - A x is the
/// cone itself, so projected gradient in y needs only cone projections.
struct RandomConeProgram {
    stochpc::socp::ConicProgram prog;
    Mat Ainv;
};

inline RandomConeProgram random_program(std::mt19937_64& rng, const std::vector<Cone>& cones) {
    Eigen::Index d = 0;
    for (const auto& c : cones) d += c.dim;
    RandomConeProgram r;
    auto& p = r.prog;
    const Mat Q1 = Eigen::HouseholderQR<Mat>(testutil::random_matrix(rng, d, d)).householderQ();
    const Mat Q2 = Eigen::HouseholderQR<Mat>(testutil::random_matrix(rng, d, d)).householderQ();
    std::uniform_real_distribution<double> sv(0.5, 2.0);
    Vec sig(d);
    for (Eigen::Index i = 0; i < d; ++i) sig(i) = sv(rng);
    p.A = Q1 * sig.asDiagonal() * Q2;
    r.Ainv = Q2.transpose() * sig.cwiseInverse().asDiagonal() * Q1.transpose();
    const Mat F = testutil::random_matrix(rng, d, d);
    p.P = stochpc::numkit::symmetrize(F * F.transpose() / double(d) + 0.5 * Mat::Identity(d, d));
    p.q = testutil::random_vector(rng, d, 3.0);
    p.b = testutil::random_vector(rng, d);
    p.cones = cones;
    return r;
}

/// Accelerated projected gradient on y = b - A x over the product cone.
inline Vec projected_gradient(const RandomConeProgram& r, int max_iter = 400000, double tol = 1e-13) {
    const auto& p = r.prog;
    // x = Ainv (b - y): f(y) = 0.5 (b-y)' Ainv' P Ainv (b-y) + q' Ainv (b - y)
    const Mat Hy = r.Ainv.transpose() * p.P * r.Ainv;
    const Vec gy0 = r.Ainv.transpose() * p.q;
    Eigen::SelfAdjointEigenSolver<Mat> es(stochpc::numkit::symmetrize(Hy));
    const double Lc = es.eigenvalues().maxCoeff(), mc = es.eigenvalues().minCoeff();
    const double beta = (std::sqrt(Lc / mc) - 1.0) / (std::sqrt(Lc / mc) + 1.0);
    auto project = [&](Vec& y) {
        Eigen::Index off = 0;
        for (const auto& c : p.cones) {
            project_cone(c, y.segment(off, c.dim));
            off += c.dim;
        }
    };
    Vec y = Vec::Zero(p.b.size()), yprev = y;
    project(y);
    for (int it = 0; it < max_iter; ++it) {
        const Vec v = y + beta * (y - yprev);
        const Vec grad = Hy * (v - p.b) - gy0;
        Vec next = v - grad / Lc;
        project(next);
        yprev = y;
        y = next;
        if ((y - yprev).cwiseAbs().maxCoeff() < tol) break;
    }
    return r.Ainv * (p.b - y);
}

inline double objective(const stochpc::socp::ConicProgram& p, const Vec& x) {
    return 0.5 * x.dot(p.P * x) + p.q.dot(x) + p.constant;
}

} // namespace oracle
