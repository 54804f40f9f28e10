#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stochpc/json_io.hpp"
#include "stochpc/numkit.hpp"

namespace stochpc::socp {

enum class ConeKind { Zero, NonNeg, SOC };

struct Cone {
    ConeKind kind;
    Eigen::Index dim;
};

/// minimize 0.5 x'Px + q'x + constant  subject to  A x + s = b, s in K.
struct ConicProgram {
    Mat P;
    Vec q;
    double constant = 0.0;
    Mat A;
    Vec b;
    std::vector<Cone> cones;

    Eigen::Index num_vars() const { return q.size(); }
    Eigen::Index num_rows() const { return b.size(); }

    void validate() const {
        const Eigen::Index d = q.size(), M = b.size();
        if (P.rows() != d || P.cols() != d || A.rows() != M || A.cols() != d)
            throw DimensionError("ConicProgram: inconsistent shapes");
        Eigen::Index total = 0;
        for (const auto& c : cones) {
            if (c.dim < 1 || (c.kind == ConeKind::SOC && c.dim < 2))
                throw InputError("ConicProgram: invalid cone dimension");
            total += c.dim;
        }
        if (total != M) throw DimensionError("ConicProgram: cone dimensions do not sum to the row count");
        if (!P.allFinite() || !q.allFinite() || !A.allFinite() || !b.allFinite())
            throw InputError("ConicProgram: non-finite data");
        if (numkit::max_abs(P - P.transpose()) > 1e-10 * std::max(1.0, numkit::max_abs(P)))
            throw InputError("ConicProgram: P is not symmetric");
    }
};

enum class Status { Optimal, PrimalInfeasible, DualInfeasible, MaxIterations, NumericalFailure };

inline const char* to_string(Status s) {
    switch (s) {
    case Status::Optimal: return "optimal";
    case Status::PrimalInfeasible: return "primal_infeasible";
    case Status::DualInfeasible: return "dual_infeasible";
    case Status::MaxIterations: return "max_iterations";
    case Status::NumericalFailure: return "numerical_failure";
    }
    return "unknown";
}

struct Residuals {
    double primal = 0.0, dual = 0.0, gap = 0.0;
};

struct IterationRecord {
    int iter = 0;
    double tau = 0, kappa = 0, mu = 0, pres = 0, dres = 0, gap = 0, step = 0, sigma = 0;
};

struct Settings {
    double tol_feas = 1e-8;
    double tol_gap = 1e-8;     // absolute and relative duality gap
    double tol_infeas = 1e-8;
    int max_iter = 200;
    double static_reg = 1e-9;
    int refine_steps = 3;
    int ruiz_iters = 15;
    double step_fraction = 0.99;
    int polish_iters = 8; // extra steps after convergence while the residuals keep shrinking
};

struct Solution {
    Vec x, s, z;
    Status status = Status::NumericalFailure;
    int iterations = 0;
    Residuals residuals;
    double objective = std::numeric_limits<double>::quiet_NaN();
    std::vector<IterationRecord> history;
};

/// primal = |Ax+s-b| / (1+|b|), dual = |Px+q+A'z| / (1+|q|), gap = |x'Px + q'x + b'z|
/// (infinity norms).
inline Residuals kkt_residuals(const ConicProgram& prog, const Vec& x, const Vec& s, const Vec& z) {
    auto inf = [](const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };
    Residuals r;
    const Vec Px = prog.P * x;
    r.primal = inf(prog.A * x + s - prog.b) / (1.0 + inf(prog.b));
    r.dual = inf(Px + prog.q + prog.A.transpose() * z) / (1.0 + inf(prog.q));
    r.gap = std::abs(x.dot(Px) + prog.q.dot(x) + prog.b.dot(z));
    return r;
}

inline Residuals kkt_residuals(const ConicProgram& prog, const Solution& sol) {
    return kkt_residuals(prog, sol.x, sol.s, sol.z);
}

inline json_io::json program_to_json(const ConicProgram& prog) {
    json_io::json cones = json_io::json::array();
    for (const auto& c : prog.cones)
        cones.push_back({{"kind", c.kind == ConeKind::Zero ? "zero" : c.kind == ConeKind::NonNeg ? "nonneg" : "soc"},
                         {"dim", c.dim}});
    Vec qv = prog.q, bv = prog.b;
    return {{"P", json_io::mat_to_json(prog.P)}, {"q", json_io::mat_to_json(qv)},
            {"constant", prog.constant},         {"A", json_io::mat_to_json(prog.A)},
            {"b", json_io::mat_to_json(bv)},     {"cones", cones}};
}

namespace detail {

// Nesterov-Todd scaling of one cone block. For NonNeg blocks `w` holds the
// diagonal sqrt(s/z); for SOC blocks W = eta [w0 w1'; w1 I + w1 w1'/(1+w0)].
struct Scaling {
    ConeKind kind;
    Eigen::Index off, dim;
    Vec w;
    double eta = 1.0;
};

inline void apply_W(const Scaling& sc, const Eigen::Ref<const Vec>& in, Eigen::Ref<Vec> out, bool inverse) {
    if (sc.kind == ConeKind::NonNeg) {
        out = inverse ? Vec(in.cwiseQuotient(sc.w)) : Vec(in.cwiseProduct(sc.w));
        return;
    }
    const double w0 = sc.w(0);
    const auto w1 = sc.w.tail(sc.dim - 1);
    const double sgn = inverse ? -1.0 : 1.0;
    const double scale = inverse ? 1.0 / sc.eta : sc.eta;
    const double v = w1.dot(in.tail(sc.dim - 1));
    const double in0 = in(0);
    Vec res(sc.dim);
    res(0) = w0 * in0 + sgn * v;
    res.tail(sc.dim - 1) = in.tail(sc.dim - 1) + (sgn * in0 + v / (1.0 + w0)) * w1;
    out = scale * res;
}

// Same map applied to every column of a row block.
inline void apply_W_rows(const Scaling& sc, const Eigen::Ref<const Mat>& in, Eigen::Ref<Mat> out, bool inverse) {
    if (sc.kind == ConeKind::NonNeg) {
        const Vec f = inverse ? Vec(sc.w.cwiseInverse()) : sc.w;
        out = f.asDiagonal() * in;
        return;
    }
    const double w0 = sc.w(0);
    const Vec w1 = sc.w.tail(sc.dim - 1);
    const double sgn = inverse ? -1.0 : 1.0;
    const double scale = inverse ? 1.0 / sc.eta : sc.eta;
    const Eigen::RowVectorXd v = w1.transpose() * in.bottomRows(sc.dim - 1);
    const Eigen::RowVectorXd r0 = in.row(0);
    out.row(0) = scale * (w0 * r0 + sgn * v);
    out.bottomRows(sc.dim - 1) = scale * (in.bottomRows(sc.dim - 1) + w1 * (sgn * r0 + v / (1.0 + w0)));
}

inline double soc_det(const Eigen::Ref<const Vec>& u) { return u(0) * u(0) - u.tail(u.size() - 1).squaredNorm(); }

// Jordan product u o v.
inline Vec jordan(ConeKind k, const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
    if (k == ConeKind::NonNeg) return u.cwiseProduct(v);
    Vec r(u.size());
    r(0) = u.dot(v);
    r.tail(u.size() - 1) = u(0) * v.tail(u.size() - 1) + v(0) * u.tail(u.size() - 1);
    return r;
}

// Solves lambda o w = xi for w.
inline Vec jordan_div(ConeKind k, const Eigen::Ref<const Vec>& lam, const Eigen::Ref<const Vec>& xi) {
    if (k == ConeKind::NonNeg) return xi.cwiseQuotient(lam);
    const Eigen::Index n = lam.size();
    const double det = soc_det(lam);
    Vec w(n);
    w(0) = (lam(0) * xi(0) - lam.tail(n - 1).dot(xi.tail(n - 1))) / det;
    w.tail(n - 1) = (xi.tail(n - 1) - w(0) * lam.tail(n - 1)) / lam(0);
    return w;
}

// Largest alpha with u + alpha du in the cone (capped at `cap`).
inline double max_step(ConeKind k, const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& du, double cap) {
    double a = cap;
    if (k == ConeKind::NonNeg) {
        for (Eigen::Index i = 0; i < u.size(); ++i)
            if (du(i) < 0) a = std::min(a, -u(i) / du(i));
        return a;
    }
    const Eigen::Index n = u.size();
    const double qa = soc_det(du);
    const double qb = 2.0 * (u(0) * du(0) - u.tail(n - 1).dot(du.tail(n - 1)));
    const double qc = std::max(soc_det(u), 0.0);
    // Smallest positive root of qa t^2 + qb t + qc.
    double root = std::numeric_limits<double>::infinity();
    if (std::abs(qa) < 1e-300) {
        if (qb < 0) root = -qc / qb;
    } else {
        const double disc = qb * qb - 4.0 * qa * qc;
        if (disc >= 0) {
            const double sq = std::sqrt(disc);
            const double t = -0.5 * (qb + (qb >= 0 ? sq : -sq));
            double r1 = t / qa, r2 = t != 0 ? qc / t : std::numeric_limits<double>::infinity();
            for (double r : {r1, r2})
                if (r > 0 && r < root) root = r;
        }
    }
    a = std::min(a, root);
    if (du(0) < 0) a = std::min(a, -u(0) / du(0));
    return std::max(a, 0.0);
}

inline double min_eig(ConeKind k, const Eigen::Ref<const Vec>& u) {
    if (k == ConeKind::NonNeg) return u.minCoeff();
    return u(0) - u.tail(u.size() - 1).norm();
}

inline void add_unit(ConeKind k, Eigen::Ref<Vec> u, double a) {
    if (k == ConeKind::NonNeg)
        u.array() += a;
    else
        u(0) += a;
}

// Ruiz equilibration: prog -> c * D P D, c * D q, E A D, E b, with E uniform
// inside each SOC block.
struct Equilibration {
    Vec D, E;
    double c = 1.0;
};

inline Equilibration equilibrate(ConicProgram& prog, int iters) {
    const Eigen::Index d = prog.num_vars(), M = prog.num_rows();
    Equilibration eq{Vec::Ones(d), Vec::Ones(M), 1.0};
    auto clamp = [](double v) { return std::clamp(v, 1e-4, 1e4); };
    for (int it = 0; it < iters; ++it) {
        Vec dcol(d), erow(M);
        for (Eigen::Index j = 0; j < d; ++j) {
            double nrm = d ? prog.P.col(j).cwiseAbs().maxCoeff() : 0.0;
            if (M) nrm = std::max(nrm, prog.A.col(j).cwiseAbs().maxCoeff());
            dcol(j) = nrm > 0 ? clamp(1.0 / std::sqrt(nrm)) : 1.0;
        }
        Eigen::Index off = 0;
        for (const auto& cone : prog.cones) {
            auto blk = prog.A.middleRows(off, cone.dim);
            if (cone.kind == ConeKind::SOC) {
                const double nrm = blk.cwiseAbs().maxCoeff();
                erow.segment(off, cone.dim).setConstant(nrm > 0 ? clamp(1.0 / std::sqrt(nrm)) : 1.0);
            } else {
                for (Eigen::Index i = 0; i < cone.dim; ++i) {
                    const double nrm = blk.row(i).cwiseAbs().maxCoeff();
                    erow(off + i) = nrm > 0 ? clamp(1.0 / std::sqrt(nrm)) : 1.0;
                }
            }
            off += cone.dim;
        }
        // Bound the accumulated factors so near-empty rows are not blown up.
        for (Eigen::Index j = 0; j < d; ++j) dcol(j) = clamp(eq.D(j) * dcol(j)) / eq.D(j);
        for (Eigen::Index i = 0; i < M; ++i) erow(i) = clamp(eq.E(i) * erow(i)) / eq.E(i);
        prog.P = dcol.asDiagonal() * prog.P * dcol.asDiagonal();
        prog.q = dcol.cwiseProduct(prog.q);
        prog.A = erow.asDiagonal() * prog.A * dcol.asDiagonal();
        prog.b = erow.cwiseProduct(prog.b);
        eq.D = eq.D.cwiseProduct(dcol);
        eq.E = eq.E.cwiseProduct(erow);
    }
    // Cost scaling.
    double pn = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) pn += prog.P.col(j).cwiseAbs().maxCoeff();
    pn = d ? pn / d : 0.0;
    const double qn = d ? prog.q.cwiseAbs().maxCoeff() : 0.0;
    const double ref = std::max(pn, qn);
    eq.c = ref > 0 ? clamp(1.0 / ref) : 1.0;
    prog.P *= eq.c;
    prog.q *= eq.c;
    return eq;
}

// NT scaling point for (s, z) strictly inside the cone.
inline Scaling nt_scaling(ConeKind kind, Eigen::Index off, const Eigen::Ref<const Vec>& s,
                          const Eigen::Ref<const Vec>& z) {
    Scaling sc{kind, off, s.size(), Vec(), 1.0};
    if (kind == ConeKind::NonNeg) {
        sc.w = s.cwiseQuotient(z).cwiseSqrt();
        return sc;
    }
    const Eigen::Index n = s.size();
    const double sd = std::sqrt(std::max(soc_det(s), 1e-300)), zd = std::sqrt(std::max(soc_det(z), 1e-300));
    const Vec sb = s / sd, zb = z / zd;
    const double gamma = std::sqrt(std::max((1.0 + sb.dot(zb)) / 2.0, 1e-300));
    sc.w.resize(n);
    sc.w(0) = (sb(0) + zb(0)) / (2.0 * gamma);
    sc.w.tail(n - 1) = (sb.tail(n - 1) - zb.tail(n - 1)) / (2.0 * gamma);
    // Re-normalize w onto the unit hyperboloid w0^2 - |w1|^2 = 1.
    sc.w(0) = std::sqrt(1.0 + sc.w.tail(n - 1).squaredNorm());
    sc.eta = std::sqrt(sd / zd);
    return sc;
}

// Reduced KKT system for K = [P A'; A -W^2]. Inequality rows are eliminated
// through W^{-1} into H = P + A'W^{-2}A; Zero-cone rows stay as an augmented
// equality block.
class KktSystem {
public:
    struct Group {
        Eigen::Index lastcol;
        std::vector<std::size_t> members; // indices into the scaling list
    };

    KktSystem(const ConicProgram& prog, const std::vector<Eigen::Index>& zero_rows, const std::vector<Group>& groups,
              double reg, int refine)
        : prog_(prog), zero_rows_(zero_rows), groups_(groups), reg_(reg), refine_(refine) {
        Ae_.resize(static_cast<Eigen::Index>(zero_rows.size()), prog.num_vars());
        for (std::size_t i = 0; i < zero_rows.size(); ++i) Ae_.row(static_cast<Eigen::Index>(i)) = prog.A.row(zero_rows[i]);
        At_.resize(prog.num_rows(), prog.num_vars());
    }

    /// Rebuilds H for the scalings and factors it; returns false on breakdown
    /// after one retry with an enlarged diagonal shift.
    bool factor(const std::vector<Scaling>& scal) {
        scal_ = &scal;
        const Eigen::Index d = prog_.num_vars();
        for (const auto& sc : scal)
            apply_W_rows(sc, prog_.A.middleRows(sc.off, sc.dim), At_.middleRows(sc.off, sc.dim), true);
        Mat H = prog_.P;
        H.triangularView<Eigen::StrictlyUpper>().setZero();
        for (const auto& g : groups_) {
            if (g.lastcol == 0) continue;
            Eigen::Index rows = 0;
            for (auto k : g.members) rows += scal[k].dim;
            Mat blk(rows, g.lastcol);
            Eigen::Index r = 0;
            for (auto k : g.members) {
                blk.middleRows(r, scal[k].dim) = At_.block(scal[k].off, 0, scal[k].dim, g.lastcol);
                r += scal[k].dim;
            }
            H.topLeftCorner(g.lastcol, g.lastcol).selfadjointView<Eigen::Lower>().rankUpdate(blk.transpose());
        }
        double shift = reg_;
        for (int attempt = 0; attempt < 2; ++attempt) {
            if (try_factor(H, shift, d)) return true;
            shift = reg_ * (1.0 + H.diagonal().cwiseAbs().maxCoeff()) * 1e3;
        }
        return false;
    }

    /// K [dx; dz] = [rx; rz] with iterative refinement on the unregularized system.
    void solve(const Vec& rx, const Vec& rz, Vec& dx, Vec& dz) const {
        solve_once(rx, rz, dx, dz);
        const double scale = 1.0 + std::max(inf(rx), inf(rz));
        for (int k = 0; k < refine_; ++k) {
            Vec ex, ez;
            residual(rx, rz, dx, dz, ex, ez);
            if (std::max(inf(ex), inf(ez)) <= 1e-14 * scale) break;
            Vec cx, cz;
            solve_once(ex, ez, cx, cz);
            dx += cx;
            dz += cz;
        }
    }

private:
    static double inf(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

    bool try_factor(const Mat& H, double shift, Eigen::Index d) {
        const Eigen::Index ne = Ae_.rows();
        if (ne == 0) {
            Mat Hs = H;
            Hs.diagonal().array() += shift;
            ldlt_.compute(Hs);
            if (ldlt_.info() != Eigen::Success) return false;
            const Vec D = ldlt_.vectorD();
            return D.allFinite() && (D.array() > 0).all();
        }
        Mat K = Mat::Zero(d + ne, d + ne);
        K.topLeftCorner(d, d) = H.selfadjointView<Eigen::Lower>();
        K.topLeftCorner(d, d).diagonal().array() += shift;
        K.topRightCorner(d, ne) = Ae_.transpose();
        K.bottomLeftCorner(ne, d) = Ae_;
        K.bottomRightCorner(ne, ne).diagonal().setConstant(-shift);
        lu_.compute(K);
        const double rcond = lu_.rcond();
        return std::isfinite(rcond) && rcond > 1e-300;
    }

    void solve_once(const Vec& rx, const Vec& rz, Vec& dx, Vec& dz) const {
        const auto& scal = *scal_;
        Vec rhs = rx;
        Vec t(rz.size());
        for (const auto& sc : scal) {
            apply_W(sc, rz.segment(sc.off, sc.dim), t.segment(sc.off, sc.dim), true);
            rhs.noalias() += At_.middleRows(sc.off, sc.dim).transpose() * t.segment(sc.off, sc.dim);
        }
        dz.resize(rz.size());
        const Eigen::Index ne = Ae_.rows(), d = rx.size();
        if (ne == 0) {
            dx = ldlt_.solve(rhs);
        } else {
            Vec full(d + ne);
            full.head(d) = rhs;
            for (Eigen::Index i = 0; i < ne; ++i) full(d + i) = rz(zero_rows_[static_cast<std::size_t>(i)]);
            const Vec sol = lu_.solve(full);
            dx = sol.head(d);
            for (Eigen::Index i = 0; i < ne; ++i) dz(zero_rows_[static_cast<std::size_t>(i)]) = sol(d + i);
        }
        for (const auto& sc : scal) {
            const Vec u = At_.middleRows(sc.off, sc.dim) * dx - t.segment(sc.off, sc.dim);
            apply_W(sc, u, dz.segment(sc.off, sc.dim), true);
        }
    }

    void residual(const Vec& rx, const Vec& rz, const Vec& dx, const Vec& dz, Vec& ex, Vec& ez) const {
        ex = rx - prog_.P * dx - prog_.A.transpose() * dz;
        ez = rz - prog_.A * dx;
        Vec t(0), u(0);
        for (const auto& sc : *scal_) {
            t.resize(sc.dim);
            u.resize(sc.dim);
            apply_W(sc, dz.segment(sc.off, sc.dim), t, false);
            apply_W(sc, t, u, false);
            ez.segment(sc.off, sc.dim) += u;
        }
    }

    const ConicProgram& prog_;
    std::vector<Eigen::Index> zero_rows_;
    std::vector<Group> groups_;
    double reg_;
    int refine_;
    Mat Ae_, At_;
    const std::vector<Scaling>* scal_ = nullptr;
    Eigen::LDLT<Mat> ldlt_;
    Eigen::PartialPivLU<Mat> lu_;
};

} // namespace detail

/// Primal-dual interior-point method on the homogeneous self-dual embedding
/// with Nesterov-Todd scaling and Mehrotra predictor-corrector steps.
inline Solution solve(const ConicProgram& original, const Settings& set = {}) {
    using namespace detail;
    original.validate();
    const Eigen::Index d = original.num_vars(), M = original.num_rows();
    Solution out;

    ConicProgram prog = original;
    const Equilibration eq = equilibrate(prog, set.ruiz_iters);

    // Cone bookkeeping.
    std::vector<Eigen::Index> zero_rows;
    std::vector<Scaling> scal;
    {
        Eigen::Index off = 0;
        for (const auto& c : prog.cones) {
            if (c.kind == ConeKind::Zero)
                for (Eigen::Index i = 0; i < c.dim; ++i) zero_rows.push_back(off + i);
            else
                scal.push_back({c.kind, off, c.dim, Vec(), 1.0});
            off += c.dim;
        }
    }
    double degree = 0.0;
    for (const auto& sc : scal) degree += sc.kind == ConeKind::NonNeg ? double(sc.dim) : 1.0;

    // Column profile: inequality cones grouped by their last nonzero column.
    std::vector<KktSystem::Group> groups;
    {
        std::vector<std::pair<Eigen::Index, std::size_t>> last;
        for (std::size_t k = 0; k < scal.size(); ++k) {
            Eigen::Index lc = 0;
            const auto blk = prog.A.middleRows(scal[k].off, scal[k].dim);
            for (Eigen::Index j = d - 1; j >= 0; --j)
                if ((blk.col(j).array() != 0.0).any()) {
                    lc = j + 1;
                    break;
                }
            last.emplace_back(lc, k);
        }
        std::stable_sort(last.begin(), last.end(), [](auto& a, auto& b) { return a.first < b.first; });
        for (const auto& [lc, k] : last) {
            if (groups.empty() || groups.back().lastcol != lc) groups.push_back({lc, {}});
            groups.back().members.push_back(k);
        }
    }

    KktSystem kkt(prog, zero_rows, groups, set.static_reg, set.refine_steps);

    auto unscale = [&](const Vec& xh, const Vec& sh, const Vec& zh, double tau, Vec& x, Vec& s, Vec& z) {
        x = eq.D.cwiseProduct(xh) / tau;
        s = sh.cwiseQuotient(eq.E) / tau;
        z = eq.E.cwiseProduct(zh) / (eq.c * tau);
    };

    // Initial point from [P A'; A -I][x; z] = [-q; b].
    Vec x(d), s = Vec::Zero(M), z(M);
    for (auto& sc : scal) {
        sc.w = Vec::Zero(sc.dim);
        sc.w(0) = 1.0;
        if (sc.kind == ConeKind::NonNeg) sc.w.setOnes();
        sc.eta = 1.0;
    }
    if (!kkt.factor(scal)) {
        out.status = Status::NumericalFailure;
        return out;
    }
    kkt.solve(-prog.q, prog.b, x, z);
    for (const auto& sc : scal) {
        auto sk = s.segment(sc.off, sc.dim);
        auto zk = z.segment(sc.off, sc.dim);
        sk = -zk;
        for (auto* u : {&sk, &zk}) {
            const double me = min_eig(sc.kind, *u);
            if (me < 1.0) add_unit(sc.kind, *u, 1.0 - me);
        }
    }
    double tau = 1.0, kappa = 1.0;

    Vec xu, su, zu;
    const Vec q = prog.q, b = prog.b;
    struct Snapshot {
        Vec x, s, z;
        double tau, kappa, merit;
        Residuals res;
        int iter;
    };
    std::optional<Snapshot> best;
    int polished = 0;
    for (int iter = 0;; ++iter) {
        // Residuals of the embedding.
        const Vec Px = prog.P * x;
        const double xPx = x.dot(Px);
        const Vec r1 = Px + prog.A.transpose() * z + q * tau;
        const Vec r2 = prog.A * x + s - b * tau;
        const double r3 = q.dot(x) + b.dot(z) + xPx / tau + kappa;
        double sz = 0.0;
        for (const auto& sc : scal) sz += s.segment(sc.off, sc.dim).dot(z.segment(sc.off, sc.dim));
        const double mu = (sz + tau * kappa) / (degree + 1.0);

        // Termination, judged in the original scaling.
        unscale(x, s, z, tau, xu, su, zu);
        out.residuals = kkt_residuals(original, xu, su, zu);
        const double pobj = 0.5 * xu.dot(original.P * xu) + original.q.dot(xu);
        const double dobj = -0.5 * xu.dot(original.P * xu) - original.b.dot(zu);
        const double gap_rel = out.residuals.gap / (1.0 + std::min(std::abs(pobj), std::abs(dobj)));
        IterationRecord rec{iter, tau, kappa, mu, out.residuals.primal, out.residuals.dual, out.residuals.gap, 0, 0};
        const double merit = std::max({out.residuals.primal / set.tol_feas, out.residuals.dual / set.tol_feas,
                                        std::min(out.residuals.gap, gap_rel) / set.tol_gap});
        if (best) {
            const bool better = merit < 0.5 * best->merit;
            if (merit < best->merit) best = Snapshot{x, s, z, tau, kappa, merit, out.residuals, iter};
            if (!better || ++polished >= set.polish_iters) {
                out.history.push_back(rec);
                break;
            }
        } else if (merit <= 1.0) {
            out.status = Status::Optimal;
            best = Snapshot{x, s, z, tau, kappa, merit, out.residuals, iter};
            if (set.polish_iters <= 0) {
                out.history.push_back(rec);
                break;
            }
        }
        if (!best) {
            // Infeasibility certificates from the unnormalized iterates.
            const Vec zr = eq.E.cwiseProduct(z) / eq.c, xr = eq.D.cwiseProduct(x);
            const Vec sr = s.cwiseQuotient(eq.E);
            const double btz = original.b.dot(zr);
            if (btz < 0) {
                const double atz = (original.A.transpose() * zr).cwiseAbs().maxCoeff();
                if (atz <= set.tol_infeas * (-btz)) {
                    out.status = Status::PrimalInfeasible;
                    out.history.push_back(rec);
                    break;
                }
            }
            const double qtx = original.q.dot(xr);
            if (qtx < 0) {
                const double px = (original.P * xr).cwiseAbs().maxCoeff();
                const double axs = M ? (original.A * xr + sr).cwiseAbs().maxCoeff() : 0.0;
                if (px <= set.tol_infeas * (-qtx) && axs <= set.tol_infeas * (-qtx)) {
                    out.status = Status::DualInfeasible;
                    out.history.push_back(rec);
                    break;
                }
            }
        }
        if (iter >= set.max_iter) {
            if (!best) out.status = Status::MaxIterations;
            out.history.push_back(rec);
            break;
        }

        // Scaling and factorization.
        Vec lam(M);
        lam.setZero();
        for (auto& sc : scal) {
            sc = nt_scaling(sc.kind, sc.off, s.segment(sc.off, sc.dim), z.segment(sc.off, sc.dim));
            apply_W(sc, z.segment(sc.off, sc.dim), lam.segment(sc.off, sc.dim), false);
        }
        if (!kkt.factor(scal)) {
            if (!best) out.status = Status::NumericalFailure;
            out.history.push_back(rec);
            break;
        }
        Vec x1, z1;
        kkt.solve(-q, b, x1, z1);
        const Vec qq = q + 2.0 * Px / tau;
        const double denom_base = qq.dot(x1) + b.dot(z1) - xPx / (tau * tau) - kappa / tau;

        // Direction for given complementarity targets xi, xi_tau and residual weight.
        struct Dir {
            Vec dx, dz, ds;
            double dtau = 0, dkappa = 0;
        };
        auto direction = [&](const Vec& xi, double xi_tau, double weight) {
            Dir D;
            Vec rz = -weight * r2;
            Vec wl(M);
            wl.setZero();
            for (const auto& sc : scal) {
                const Vec jd = jordan_div(sc.kind, lam.segment(sc.off, sc.dim), xi.segment(sc.off, sc.dim));
                apply_W(sc, jd, wl.segment(sc.off, sc.dim), false);
                rz.segment(sc.off, sc.dim) -= wl.segment(sc.off, sc.dim);
            }
            Vec x2, z2;
            kkt.solve(-weight * r1, rz, x2, z2);
            D.dtau = (-weight * r3 - xi_tau / tau - qq.dot(x2) - b.dot(z2)) / denom_base;
            D.dx = x2 + D.dtau * x1;
            D.dz = z2 + D.dtau * z1;
            // ds from the linearized primal equation keeps primal feasibility
            // exact up to rounding even when W^2 is badly scaled.
            D.ds = -weight * r2 - prog.A * D.dx + b * D.dtau;
            for (Eigen::Index i : zero_rows) D.ds(i) = 0.0;
            D.dkappa = (xi_tau - kappa * D.dtau) / tau;
            return D;
        };
        auto step_length = [&](const Dir& D) {
            double a = 1e30;
            for (const auto& sc : scal) {
                a = max_step(sc.kind, s.segment(sc.off, sc.dim), D.ds.segment(sc.off, sc.dim), a);
                a = max_step(sc.kind, z.segment(sc.off, sc.dim), D.dz.segment(sc.off, sc.dim), a);
            }
            if (D.dtau < 0) a = std::min(a, -tau / D.dtau);
            if (D.dkappa < 0) a = std::min(a, -kappa / D.dkappa);
            return a;
        };

        // Predictor.
        Vec xi_aff(M);
        xi_aff.setZero();
        for (const auto& sc : scal)
            xi_aff.segment(sc.off, sc.dim) =
                -jordan(sc.kind, lam.segment(sc.off, sc.dim), lam.segment(sc.off, sc.dim));
        const Dir aff = direction(xi_aff, -tau * kappa, 1.0);
        const double a_aff = std::min(1.0, step_length(aff));
        const double sigma = std::pow(1.0 - a_aff, 3);

        // Corrector.
        Vec xi(M);
        xi.setZero();
        for (const auto& sc : scal) {
            Vec wids(sc.dim), wdz(sc.dim);
            apply_W(sc, aff.ds.segment(sc.off, sc.dim), wids, true);
            apply_W(sc, aff.dz.segment(sc.off, sc.dim), wdz, false);
            Vec e = Vec::Zero(sc.dim);
            if (sc.kind == ConeKind::NonNeg)
                e.setOnes();
            else
                e(0) = 1.0;
            xi.segment(sc.off, sc.dim) = xi_aff.segment(sc.off, sc.dim) - jordan(sc.kind, wids, wdz) + sigma * mu * e;
        }
        const Dir dir = direction(xi, -tau * kappa - aff.dtau * aff.dkappa + sigma * mu, 1.0 - sigma);
        const double alpha = std::min(1.0, set.step_fraction * step_length(dir));
        rec.step = alpha;
        rec.sigma = sigma;
        out.history.push_back(rec);
        if (!(alpha > 1e-14) || !dir.dx.allFinite()) {
            if (!best) out.status = Status::NumericalFailure;
            break;
        }
        x += alpha * dir.dx;
        z += alpha * dir.dz;
        s += alpha * dir.ds;
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
        out.iterations = iter + 1;
    }

    if (best) {
        x = best->x;
        s = best->s;
        z = best->z;
        tau = best->tau;
        out.residuals = best->res;
        out.iterations = best->iter;
    }
    if (out.status == Status::PrimalInfeasible || out.status == Status::DualInfeasible) {
        // Report the certificate direction rather than a meaningless point.
        out.x = eq.D.cwiseProduct(x);
        out.s = s.cwiseQuotient(eq.E);
        out.z = eq.E.cwiseProduct(z) / eq.c;
    } else {
        unscale(x, s, z, tau, out.x, out.s, out.z);
        out.objective = 0.5 * out.x.dot(original.P * out.x) + original.q.dot(out.x) + original.constant;
    }
    return out;
}

} // namespace stochpc::socp
