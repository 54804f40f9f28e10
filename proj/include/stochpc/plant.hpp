#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stochpc/numkit.hpp"
#include "stochpc/rng.hpp"

namespace stochpc::plant {

/// Discrete-time LTI system x+ = A x + B u + w, y = C x + D u + v.
struct LTISystem {
    Mat A, B, C, D;

    Eigen::Index n() const { return A.rows(); }
    Eigen::Index m() const { return B.cols(); }
    Eigen::Index p() const { return C.rows(); }

    void validate() const {
        const auto n_ = n(), m_ = m(), p_ = p();
        if (A.cols() != n_ || B.rows() != n_ || C.cols() != n_ || D.rows() != p_ || D.cols() != m_)
            throw DimensionError("LTISystem: inconsistent dimensions");
        if (!A.allFinite() || !B.allFinite() || !C.allFinite() || !D.allFinite())
            throw InputError("LTISystem: non-finite entries");
    }
};

/// Four-state, two-input, two-output batch reactor sampled at 0.1 s.
inline LTISystem batch_reactor() {
    LTISystem s;
    s.A.resize(4, 4);
    s.A << 1.178, 0.001, 0.511, -0.403,
          -0.051, 0.661, -0.011, 0.061,
           0.076, 0.335, 0.560, 0.382,
           0.0,   0.335, 0.089, 0.849;
    s.B.resize(4, 2);
    s.B << 0.004, -0.087,
           0.467,  0.001,
           0.213, -0.235,
           0.213, -0.016;
    s.C.resize(2, 4);
    s.C << 1, 0, 1, -1,
           0, 1, 0, 0;
    s.D = Mat::Zero(2, 2);
    return s;
}

enum class NoiseKind { None, Gaussian, StudentT };

/// Process/measurement noise description. For Gaussian noise the draws have
/// variance exactly Sw / Sv; for StudentT every channel is an i.i.d. dof-DOF
/// Student-t variate times `scale` and Sw / Sv are only nominal.
struct NoiseModel {
    NoiseKind kind = NoiseKind::None;
    int dof = 2;
    double scale = 1.0;
    Mat Sw, Sv;

    Eigen::Index n() const { return Sw.rows(); }
    Eigen::Index p() const { return Sv.rows(); }

    static NoiseModel none(Eigen::Index n, Eigen::Index p) {
        return {NoiseKind::None, 0, 0.0, Mat::Zero(n, n), Mat::Zero(p, p)};
    }
    static NoiseModel gaussian(Mat Sw, Mat Sv) { return {NoiseKind::Gaussian, 0, 1.0, std::move(Sw), std::move(Sv)}; }
    static NoiseModel student_t(Eigen::Index n, Eigen::Index p, int dof, double scale) {
        return {NoiseKind::StudentT, dof, scale, Mat::Zero(n, n), Mat::Zero(p, p)};
    }
};

struct NoiseSequence {
    Mat w; // n x T
    Mat v; // p x T
};

inline NoiseSequence sample_noise(const NoiseModel& model, RngStream& rng, Eigen::Index T) {
    if (T < 1) throw InputError("sample_noise: T must be >= 1");
    const Eigen::Index n = model.n(), p = model.p();
    NoiseSequence out{Mat::Zero(n, T), Mat::Zero(p, T)};
    switch (model.kind) {
    case NoiseKind::None:
        break;
    case NoiseKind::Gaussian: {
        const Mat Lw = numkit::psd_sqrt(model.Sw), Lv = numkit::psd_sqrt(model.Sv);
        Vec gw(n), gv(p);
        for (Eigen::Index t = 0; t < T; ++t) {
            for (Eigen::Index i = 0; i < n; ++i) gw(i) = rng.normal();
            for (Eigen::Index i = 0; i < p; ++i) gv(i) = rng.normal();
            out.w.col(t) = Lw * gw;
            out.v.col(t) = Lv * gv;
        }
        break;
    }
    case NoiseKind::StudentT:
        if (model.dof <= 0) throw InputError("sample_noise: Student-t dof must be positive");
        for (Eigen::Index t = 0; t < T; ++t) {
            for (Eigen::Index i = 0; i < n; ++i) out.w(i, t) = model.scale * rng.student_t(model.dof);
            for (Eigen::Index i = 0; i < p; ++i) out.v(i, t) = model.scale * rng.student_t(model.dof);
        }
        break;
    }
    return out;
}

/// Logged closed-loop run, one column per step. x, y_core, w, v are only
/// present for simulated runs (zero columns otherwise).
struct Trajectory {
    Mat u, y, x, y_core, w, v;
    long t0 = 0;

    Eigen::Index length() const { return u.cols(); }
    bool has_state() const { return x.cols() == u.cols() && x.rows() > 0; }
};

struct StepResult {
    Vec x_next;
    Vec y;
};

inline StepResult step(const LTISystem& sys, const Vec& x, const Vec& u, const Vec& w, const Vec& v) {
    if (x.size() != sys.n() || u.size() != sys.m() || w.size() != sys.n() || v.size() != sys.p())
        throw DimensionError("plant::step: vector dimensions do not match the system");
    return {sys.A * x + sys.B * u + w, sys.C * x + sys.D * u + v};
}

/// Supplies u_t given the inputs and measurements logged on [0, t).
using ControlLaw = std::function<Vec(Eigen::Index t, const Eigen::Ref<const Mat>& u_hist,
                                     const Eigen::Ref<const Mat>& y_hist)>;

/// Runs the plant against a controller with a pre-materialized noise realization.
inline Trajectory simulate_with_noise(const LTISystem& sys, const Vec& x0, const NoiseSequence& noise,
                                      const ControlLaw& controller, Eigen::Index T) {
    sys.validate();
    if (noise.w.cols() < T || noise.v.cols() < T) throw DimensionError("simulate: noise shorter than horizon");
    Trajectory tr;
    tr.u.resize(sys.m(), T);
    tr.y.resize(sys.p(), T);
    tr.x.resize(sys.n(), T);
    tr.y_core.resize(sys.p(), T);
    tr.w = noise.w.leftCols(T);
    tr.v = noise.v.leftCols(T);
    Vec x = x0;
    for (Eigen::Index t = 0; t < T; ++t) {
        Vec u = controller(t, tr.u.leftCols(t), tr.y.leftCols(t));
        if (u.size() != sys.m()) throw DimensionError("simulate: controller returned wrong input size");
        auto r = step(sys, x, u, tr.w.col(t), tr.v.col(t));
        tr.x.col(t) = x;
        tr.u.col(t) = u;
        tr.y.col(t) = r.y;
        tr.y_core.col(t) = r.y - tr.v.col(t);
        x = std::move(r.x_next);
    }
    return tr;
}

inline Trajectory simulate_closed_loop(const LTISystem& sys, const NoiseModel& noise, const ControlLaw& controller,
                                       Eigen::Index T, RngStream& rng, const Vec& x0 = Vec()) {
    const Vec start = x0.size() ? x0 : Vec::Zero(sys.n());
    if (T == 0) return simulate_with_noise(sys, start, {Mat::Zero(sys.n(), 0), Mat::Zero(sys.p(), 0)}, controller, 0);
    return simulate_with_noise(sys, start, sample_noise(noise, rng, T), controller, T);
}

/// Output-feedback PI law u = Kp y_{t-1} + Ki iota_t with forward-Euler
/// integrators iota_{t+1} = iota_t + dt y_t.
struct PiLaw {
    Mat Kp, Ki;

    /// U(s) = [0, -1/s; 2 + 1/s, 0] Y(s).
    static PiLaw batch_reactor() {
        PiLaw pi;
        pi.Kp.resize(2, 2);
        pi.Kp << 0, 0, 2, 0;
        pi.Ki.resize(2, 2);
        pi.Ki << 0, -1, 1, 0;
        return pi;
    }
    static PiLaw none(Eigen::Index m, Eigen::Index p) { return {Mat::Zero(m, p), Mat::Zero(m, p)}; }
};

/// Offline input-output record: PI loop plus white excitation of per-sample
/// variance excitation_variance / dt, started from x0 = 0.
inline Trajectory collect_offline_data(const LTISystem& sys, const NoiseModel& noise, Eigen::Index T_d,
                                       double excitation_variance, double dt, RngStream& rng,
                                       const PiLaw& pi) {
    if (T_d < 1) throw InputError("collect_offline_data: T_d must be >= 1");
    if (!(dt > 0.0) || !(excitation_variance >= 0.0))
        throw InputError("collect_offline_data: need dt > 0 and excitation_variance >= 0");
    if (pi.Kp.rows() != sys.m() || pi.Kp.cols() != sys.p() || pi.Ki.rows() != sys.m() || pi.Ki.cols() != sys.p())
        throw DimensionError("collect_offline_data: PI gains must be m x p");
    const NoiseSequence ns = sample_noise(noise, rng, T_d);
    const double ex_std = std::sqrt(excitation_variance / dt);
    Mat excitation(sys.m(), T_d);
    for (Eigen::Index t = 0; t < T_d; ++t)
        for (Eigen::Index i = 0; i < sys.m(); ++i) excitation(i, t) = ex_std * rng.normal();

    Vec iota = Vec::Zero(sys.p());
    ControlLaw law = [&](Eigen::Index t, const Eigen::Ref<const Mat>&, const Eigen::Ref<const Mat>& y_hist) -> Vec {
        Vec y_prev = t > 0 ? Vec(y_hist.col(t - 1)) : Vec::Zero(sys.p());
        if (t > 0) iota += dt * y_prev;
        return pi.Kp * y_prev + pi.Ki * iota + excitation.col(t);
    };
    return simulate_with_noise(sys, Vec::Zero(sys.n()), ns, law, T_d);
}

inline Trajectory collect_offline_data(const LTISystem& sys, const NoiseModel& noise, Eigen::Index T_d,
                                       double excitation_variance, double dt, RngStream& rng) {
    return collect_offline_data(sys, noise, T_d, excitation_variance, dt, rng,
                                sys.m() == 2 && sys.p() == 2 ? PiLaw::batch_reactor() : PiLaw::none(sys.m(), sys.p()));
}

// CSV: header t,u1..um,y1..yp[,x1..xn,w1..wn,v1..vp], 17 significant digits.

inline void write_csv(std::ostream& os, const Trajectory& tr) {
    const bool full = tr.has_state() && tr.w.cols() == tr.length() && tr.v.cols() == tr.length();
    os << "t";
    auto names = [&](char c, Eigen::Index k) {
        for (Eigen::Index i = 1; i <= k; ++i) os << ',' << c << i;
    };
    names('u', tr.u.rows());
    names('y', tr.y.rows());
    if (full) {
        names('x', tr.x.rows());
        names('w', tr.w.rows());
        names('v', tr.v.rows());
    }
    os << '\n';
    char buf[40];
    auto put = [&](double d) {
        std::snprintf(buf, sizeof buf, "%.17g", d);
        os << ',' << buf;
    };
    for (Eigen::Index t = 0; t < tr.length(); ++t) {
        os << (tr.t0 + t);
        for (Eigen::Index i = 0; i < tr.u.rows(); ++i) put(tr.u(i, t));
        for (Eigen::Index i = 0; i < tr.y.rows(); ++i) put(tr.y(i, t));
        if (full) {
            for (Eigen::Index i = 0; i < tr.x.rows(); ++i) put(tr.x(i, t));
            for (Eigen::Index i = 0; i < tr.w.rows(); ++i) put(tr.w(i, t));
            for (Eigen::Index i = 0; i < tr.v.rows(); ++i) put(tr.v(i, t));
        }
        os << '\n';
    }
}

inline Trajectory read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw InputError("read_csv: empty input");
    std::vector<char> kinds;
    {
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        if (tok != "t") throw InputError("read_csv: header must start with 't'");
        while (std::getline(ss, tok, ',')) {
            if (tok.empty() || std::string("uyxwv").find(tok[0]) == std::string::npos)
                throw InputError("read_csv: unknown column '" + tok + "'");
            kinds.push_back(tok[0]);
        }
    }
    auto count = [&](char c) { return static_cast<Eigen::Index>(std::count(kinds.begin(), kinds.end(), c)); };
    std::vector<std::vector<double>> rows;
    long t0 = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        if (rows.empty()) t0 = std::stol(tok);
        std::vector<double> r;
        while (std::getline(ss, tok, ',')) r.push_back(std::stod(tok));
        if (r.size() != kinds.size()) throw InputError("read_csv: ragged row");
        rows.push_back(std::move(r));
    }
    const auto T = static_cast<Eigen::Index>(rows.size());
    Trajectory tr;
    tr.t0 = t0;
    tr.u.resize(count('u'), T);
    tr.y.resize(count('y'), T);
    tr.x.resize(count('x'), count('x') ? T : 0);
    tr.w.resize(count('w'), count('w') ? T : 0);
    tr.v.resize(count('v'), count('v') ? T : 0);
    for (Eigen::Index t = 0; t < T; ++t) {
        Eigen::Index iu = 0, iy = 0, ix = 0, iw = 0, iv = 0;
        for (std::size_t k = 0; k < kinds.size(); ++k) {
            const double val = rows[static_cast<std::size_t>(t)][k];
            switch (kinds[k]) {
            case 'u': tr.u(iu++, t) = val; break;
            case 'y': tr.y(iy++, t) = val; break;
            case 'x': tr.x(ix++, t) = val; break;
            case 'w': tr.w(iw++, t) = val; break;
            case 'v': tr.v(iv++, t) = val; break;
            }
        }
    }
    if (tr.v.cols() == T && tr.v.rows() == tr.y.rows()) tr.y_core = tr.y - tr.v;
    return tr;
}

} // namespace stochpc::plant
