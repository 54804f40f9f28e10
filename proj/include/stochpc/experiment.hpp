#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stochpc/datadriven.hpp"
#include "stochpc/equivalence.hpp"
#include "stochpc/errors.hpp"
#include "stochpc/json_io.hpp"
#include "stochpc/plant.hpp"
#include "stochpc/predictive.hpp"
#include "stochpc/rng.hpp"

namespace stochpc::experiment {

using Eigen::Index;
using json_io::json;

enum class Variant { DroSddpc, DrfSddpc, DroSmpc, DrfSmpc, DetMpc };

inline const char* to_string(Variant v) {
    switch (v) {
    case Variant::DroSddpc: return "dro_sddpc";
    case Variant::DrfSddpc: return "drf_sddpc";
    case Variant::DroSmpc: return "dro_smpc";
    case Variant::DrfSmpc: return "drf_smpc";
    case Variant::DetMpc: return "det_mpc";
    }
    return "unknown";
}

inline Variant variant_from_string(const std::string& s) {
    for (Variant v : {Variant::DroSddpc, Variant::DrfSddpc, Variant::DroSmpc, Variant::DrfSmpc, Variant::DetMpc})
        if (s == to_string(v)) return v;
    throw ValidationError("controller", "unknown controller variant '" + s + "'");
}

inline bool is_data_driven(Variant v) { return v == Variant::DroSddpc || v == Variant::DrfSddpc; }

/// Piece of the reference: a constant value, or a square wave alternating
/// between `high` and `low` every `half_period` seconds starting with `high`.
struct ReferenceSegment {
    double start = 0.0, end = 0.0;
    Vec value;
    bool square = false;
    Vec low, high;
    double half_period = 3.0;
};

struct ReferenceSpec {
    std::vector<ReferenceSegment> segments;
    double end_time() const { return segments.empty() ? 0.0 : segments.back().end; }
};

/// Reference at step t of length dt. Segment boundaries are compared with a
/// small slack so that t*dt rounding does not shift them.
inline Vec reference_signal(const ReferenceSpec& spec, Index t, double dt) {
    constexpr double slack = 1e-9;
    const double time = static_cast<double>(t) * dt;
    for (const auto& seg : spec.segments) {
        if (time + slack < seg.start || time + slack >= seg.end) continue;
        if (!seg.square) return seg.value;
        const auto phase = static_cast<long long>(std::floor((time - seg.start) / seg.half_period + slack));
        return phase % 2 == 0 ? seg.high : seg.low;
    }
    throw InputError("reference_signal: time " + std::to_string(time) + " s is outside the reference specification");
}

struct NoiseSpec {
    std::string kind = "student_t"; // none | gaussian | student_t
    double dof = 2.0, scale = 1e-4;
    Mat Sw, Sv;                     // plant-side variances for gaussian noise
    Mat Sv_design, Srho_design;     // controller-side variances
    bool offline_noise = true;      // offline data corrupted by the same noise model
};

struct EquivalenceSpec {
    Index steps = 12;
    double start_time = 57.0; // reference time at the first control step
    double lambda = 0.0;
    double tolerance = 1e-6;
    Vec mu_ini;
    std::vector<std::string> noises{"gaussian", "student_t"};
};

struct SolverSpec {
    double tol_feas = 1e-8, tol_gap = 1e-8;
    int max_iter = 200;
};

struct ExperimentConfig {
    std::string plant_name = "batch_reactor";
    plant::LTISystem sys;
    Index L = 5, N = 15, N_c = 5, T_d = 600;
    double dt = 0.1, duration = 90.0, excitation_variance = 1e-2;
    Mat Q, R;
    predictive::ConstraintSpec cons;
    NoiseSpec noise;
    double lambda = 1e-4;
    Variant controller = Variant::DroSddpc;
    ReferenceSpec reference;
    std::vector<std::uint64_t> seeds{1};
    std::string output_dir = "out";
    Vec x0;
    EquivalenceSpec equivalence;
    SolverSpec solver;
    std::vector<std::pair<double, double>> metric_segments{{0.0, 30.0}, {30.0, 60.0}, {60.0, 90.0}};

    Index steps() const { return static_cast<Index>(std::llround(duration / dt)); }
    socp::Settings settings() const {
        socp::Settings s;
        s.tol_feas = solver.tol_feas;
        s.tol_gap = solver.tol_gap;
        s.max_iter = solver.max_iter;
        return s;
    }
};

namespace detail {

inline void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ValidationError(where, "expected an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError(where.empty() ? key : where + "." + key, "unknown key");
    }
}

inline std::string join(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

inline Mat matrix(const json& j, const std::string& field) {
    try {
        return json_io::mat_from_rows(j);
    } catch (const std::exception& e) {
        throw ValidationError(field, std::string("invalid matrix: ") + e.what());
    }
}

inline double number(const json& j, const std::string& field) {
    if (!j.is_number()) throw ValidationError(field, "expected a number");
    return j.get<double>();
}

inline Index count(const json& j, const std::string& field) {
    if (!j.is_number_integer()) throw ValidationError(field, "expected an integer");
    return j.get<Index>();
}

inline Vec vector(const json& j, const std::string& field) {
    const Mat M = matrix(j, field);
    if (M.cols() != 1) throw ValidationError(field, "expected a flat array");
    return M.col(0);
}

inline void require(bool cond, const std::string& field, const std::string& what) {
    if (!cond) throw ValidationError(field, what);
}

inline std::pair<int, int> line_of(const std::string& text, std::size_t byte) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

} // namespace detail

/// Parses and validates a configuration document; unknown keys are rejected.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    using namespace detail;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto [line, col] = line_of(text, e.byte == 0 ? 0 : e.byte - 1);
        throw ValidationError(origin + ":" + std::to_string(line) + ":" + std::to_string(col),
                              std::string("parse error: ") + e.what());
    }
    check_keys(j, {"plant", "horizons", "T_d", "dt", "duration", "excitation_variance", "cost", "constraint", "noise",
                   "lambda", "controller", "reference", "seeds", "output_dir", "x0", "equivalence", "solver",
                   "metric_segments"},
               "");
    ExperimentConfig c;

    if (j.contains("plant")) {
        const json& p = j["plant"];
        if (p.is_string()) {
            require(p.get<std::string>() == "batch_reactor", "plant", "unknown builtin plant");
            c.sys = plant::batch_reactor();
        } else {
            check_keys(p, {"A", "B", "C", "D"}, "plant");
            for (const char* k : {"A", "B", "C"}) require(p.contains(k), join("plant", k), "missing");
            c.plant_name = "custom";
            c.sys.A = matrix(p["A"], "plant.A");
            c.sys.B = matrix(p["B"], "plant.B");
            c.sys.C = matrix(p["C"], "plant.C");
            c.sys.D = p.contains("D") ? matrix(p["D"], "plant.D") : Mat::Zero(c.sys.C.rows(), c.sys.B.cols());
            try {
                c.sys.validate();
            } catch (const Error& e) {
                throw ValidationError("plant", e.what());
            }
        }
    } else {
        c.sys = plant::batch_reactor();
    }
    const Index n = c.sys.n(), m = c.sys.m(), p = c.sys.p();

    if (j.contains("horizons")) {
        const json& h = j["horizons"];
        check_keys(h, {"L", "N", "N_c"}, "horizons");
        if (h.contains("L")) c.L = count(h["L"], "horizons.L");
        if (h.contains("N")) c.N = count(h["N"], "horizons.N");
        if (h.contains("N_c")) c.N_c = count(h["N_c"], "horizons.N_c");
    }
    require(c.L >= 1, "horizons.L", "must be >= 1");
    require(c.N >= 1, "horizons.N", "must be >= 1");
    require(c.N_c >= 1 && c.N_c <= c.N, "horizons.N_c", "must lie in [1, N]");
    if (j.contains("T_d")) c.T_d = count(j["T_d"], "T_d");
    if (j.contains("dt")) c.dt = number(j["dt"], "dt");
    if (j.contains("duration")) c.duration = number(j["duration"], "duration");
    if (j.contains("excitation_variance")) c.excitation_variance = number(j["excitation_variance"], "excitation_variance");
    require(c.dt > 0, "dt", "must be positive");
    require(c.duration >= 0, "duration", "must be non-negative");
    require(c.excitation_variance >= 0, "excitation_variance", "must be non-negative");
    require(c.T_d > c.L, "T_d", "must exceed L");

    c.Q = 1e3 * Mat::Identity(p, p);
    c.R = Mat::Identity(m, m);
    if (j.contains("cost")) {
        const json& cj = j["cost"];
        check_keys(cj, {"Q", "R"}, "cost");
        if (cj.contains("Q")) c.Q = matrix(cj["Q"], "cost.Q");
        if (cj.contains("R")) c.R = matrix(cj["R"], "cost.R");
    }
    require(c.Q.rows() == p && c.Q.cols() == p, "cost.Q", "must be p x p");
    require(c.R.rows() == m && c.R.cols() == m, "cost.R", "must be m x m");
    require(Eigen::LLT<Mat>(numkit::symmetrize(c.R)).info() == Eigen::Success, "cost.R", "must be positive definite");

    require(j.contains("constraint"), "constraint", "missing");
    {
        const json& k = j["constraint"];
        check_keys(k, {"E", "f", "alpha"}, "constraint");
        require(k.contains("E") && k.contains("f"), "constraint", "E and f are required");
        c.cons.E = matrix(k["E"], "constraint.E");
        c.cons.f = vector(k["f"], "constraint.f");
        if (k.contains("alpha")) c.cons.alpha = number(k["alpha"], "constraint.alpha");
        require(c.cons.E.cols() == m + p && c.cons.E.rows() >= 1, "constraint.E", "must be q x (m+p)");
        require(c.cons.f.size() == c.cons.E.rows(), "constraint.f", "length must equal the rows of E");
        require(c.cons.alpha > 0.0 && c.cons.alpha < 1.0, "constraint.alpha", "must lie in (0, 1)");
    }

    c.noise.Sv_design = 5e-7 * Mat::Identity(p, p);
    c.noise.Srho_design = 1e-7 * Mat::Identity(p * c.L, p * c.L);
    if (j.contains("noise")) {
        const json& nj = j["noise"];
        check_keys(nj, {"kind", "dof", "scale", "Sw", "Sv", "Sv_design", "Srho_design", "offline_noise"}, "noise");
        if (nj.contains("kind")) c.noise.kind = nj["kind"].get<std::string>();
        if (nj.contains("dof")) c.noise.dof = number(nj["dof"], "noise.dof");
        if (nj.contains("scale")) c.noise.scale = number(nj["scale"], "noise.scale");
        if (nj.contains("Sw")) c.noise.Sw = matrix(nj["Sw"], "noise.Sw");
        if (nj.contains("Sv")) c.noise.Sv = matrix(nj["Sv"], "noise.Sv");
        if (nj.contains("Sv_design")) c.noise.Sv_design = matrix(nj["Sv_design"], "noise.Sv_design");
        if (nj.contains("Srho_design")) c.noise.Srho_design = matrix(nj["Srho_design"], "noise.Srho_design");
        if (nj.contains("offline_noise")) c.noise.offline_noise = nj["offline_noise"].get<bool>();
    }
    require(c.noise.kind == "none" || c.noise.kind == "gaussian" || c.noise.kind == "student_t", "noise.kind",
            "must be none, gaussian or student_t");
    require(c.noise.dof >= 1 && c.noise.dof == std::floor(c.noise.dof), "noise.dof", "must be a positive integer");
    require(c.noise.Sv_design.rows() == p && c.noise.Sv_design.cols() == p, "noise.Sv_design", "must be p x p");
    require(c.noise.Srho_design.rows() == p * c.L && c.noise.Srho_design.cols() == p * c.L, "noise.Srho_design",
            "must be pL x pL");
    if (c.noise.kind == "gaussian") {
        if (c.noise.Sw.size() == 0) c.noise.Sw = Mat::Zero(n, n);
        if (c.noise.Sv.size() == 0) c.noise.Sv = c.noise.Sv_design;
        require(c.noise.Sw.rows() == n && c.noise.Sw.cols() == n, "noise.Sw", "must be n x n");
        require(c.noise.Sv.rows() == p && c.noise.Sv.cols() == p, "noise.Sv", "must be p x p");
    }

    if (j.contains("lambda")) c.lambda = number(j["lambda"], "lambda");
    require(c.lambda >= 0, "lambda", "must be non-negative");
    if (j.contains("controller")) c.controller = variant_from_string(j["controller"].get<std::string>());

    require(j.contains("reference"), "reference", "missing");
    {
        const json& r = j["reference"];
        check_keys(r, {"segments"}, "reference");
        require(r.contains("segments") && r["segments"].is_array() && !r["segments"].empty(), "reference.segments",
                "must be a non-empty array");
        double prev_end = 0.0;
        for (std::size_t i = 0; i < r["segments"].size(); ++i) {
            const json& s = r["segments"][i];
            const std::string where = "reference.segments[" + std::to_string(i) + "]";
            check_keys(s, {"start", "end", "value", "low", "high", "half_period"}, where);
            ReferenceSegment seg;
            seg.start = number(s.at("start"), where + ".start");
            seg.end = number(s.at("end"), where + ".end");
            require(seg.end > seg.start, where, "end must exceed start");
            require(std::abs(seg.start - prev_end) < 1e-9, where, "segments must be contiguous from 0");
            prev_end = seg.end;
            if (s.contains("value")) {
                seg.value = vector(s["value"], where + ".value");
                require(seg.value.size() == p, where + ".value", "must have length p");
            } else {
                require(s.contains("low") && s.contains("high"), where, "needs value or low/high");
                seg.square = true;
                seg.low = vector(s["low"], where + ".low");
                seg.high = vector(s["high"], where + ".high");
                require(seg.low.size() == p && seg.high.size() == p, where, "low/high must have length p");
                if (s.contains("half_period")) seg.half_period = number(s["half_period"], where + ".half_period");
                require(seg.half_period > 0, where + ".half_period", "must be positive");
            }
            c.reference.segments.push_back(seg);
        }
    }
    if (j.contains("duration"))
        require(c.duration <= c.reference.end_time() + 1e-9, "duration", "reference segments must cover the run");
    else
        c.duration = c.reference.end_time();

    if (j.contains("seeds")) {
        require(j["seeds"].is_array() && !j["seeds"].empty(), "seeds", "must be a non-empty array");
        c.seeds.clear();
        for (const auto& s : j["seeds"]) {
            require(s.is_number_unsigned() || (s.is_number_integer() && s.get<long long>() >= 0), "seeds",
                    "entries must be non-negative integers");
            c.seeds.push_back(s.get<std::uint64_t>());
        }
    }
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    c.x0 = j.contains("x0") ? vector(j["x0"], "x0") : Vec::Zero(n);
    require(c.x0.size() == n, "x0", "must have length n");

    c.equivalence.mu_ini = Vec::Zero(n);
    if (j.contains("equivalence")) {
        const json& e = j["equivalence"];
        check_keys(e, {"steps", "start_time", "lambda", "tolerance", "mu_ini", "noises"}, "equivalence");
        if (e.contains("steps")) c.equivalence.steps = count(e["steps"], "equivalence.steps");
        if (e.contains("start_time")) c.equivalence.start_time = number(e["start_time"], "equivalence.start_time");
        if (e.contains("lambda")) c.equivalence.lambda = number(e["lambda"], "equivalence.lambda");
        if (e.contains("tolerance")) c.equivalence.tolerance = number(e["tolerance"], "equivalence.tolerance");
        if (e.contains("mu_ini")) c.equivalence.mu_ini = vector(e["mu_ini"], "equivalence.mu_ini");
        if (e.contains("noises")) c.equivalence.noises = e["noises"].get<std::vector<std::string>>();
        require(c.equivalence.steps >= 0, "equivalence.steps", "must be non-negative");
        require(c.equivalence.lambda >= 0, "equivalence.lambda", "must be non-negative");
        require(c.equivalence.mu_ini.size() == n, "equivalence.mu_ini", "must have length n");
        for (const auto& k : c.equivalence.noises)
            require(k == "gaussian" || k == "student_t" || k == "none", "equivalence.noises", "unknown noise " + k);
    }
    if (j.contains("solver")) {
        const json& s = j["solver"];
        check_keys(s, {"tol_feas", "tol_gap", "max_iter"}, "solver");
        if (s.contains("tol_feas")) c.solver.tol_feas = number(s["tol_feas"], "solver.tol_feas");
        if (s.contains("tol_gap")) c.solver.tol_gap = number(s["tol_gap"], "solver.tol_gap");
        if (s.contains("max_iter")) c.solver.max_iter = static_cast<int>(count(s["max_iter"], "solver.max_iter"));
        require(c.solver.tol_feas > 0 && c.solver.tol_gap > 0 && c.solver.max_iter > 0, "solver",
                "tolerances and max_iter must be positive");
    }
    if (j.contains("metric_segments")) {
        c.metric_segments.clear();
        for (const auto& s : j["metric_segments"]) {
            require(s.is_array() && s.size() == 2, "metric_segments", "entries must be [start, end] pairs");
            c.metric_segments.emplace_back(number(s[0], "metric_segments"), number(s[1], "metric_segments"));
        }
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config", "cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

/// Plant noise model named by `kind` ("none", "gaussian", "student_t").
inline plant::NoiseModel noise_model(const ExperimentConfig& c, const std::string& kind) {
    const Index n = c.sys.n(), p = c.sys.p();
    if (kind == "none") return plant::NoiseModel::none(n, p);
    if (kind == "gaussian") return plant::NoiseModel::gaussian(c.noise.Sw, c.noise.Sv);
    return plant::NoiseModel::student_t(n, p, static_cast<int>(c.noise.dof), c.noise.scale);
}

/// Sw := O^+ Srho O^+' from the true observability matrix.
inline Mat smpc_process_variance(const ExperimentConfig& c) {
    const auto st = datadriven::structural_matrices(c.sys, c.L);
    const Mat Oi = numkit::pinv(st.Obs);
    return numkit::symmetrize(Oi * c.noise.Srho_design * Oi.transpose());
}

/// Reference samples r_0..r_{T-1}.
inline Mat reference_samples(const ExperimentConfig& c, Index T, double t0 = 0.0) {
    Mat r(c.sys.p(), T);
    const Index offset = static_cast<Index>(std::llround(t0 / c.dt));
    const Index last = static_cast<Index>(std::llround(c.reference.end_time() / c.dt)) - 1;
    for (Index t = 0; t < T; ++t) r.col(t) = reference_signal(c.reference, std::min(offset + t, last), c.dt);
    return r;
}

struct Pipeline {
    predictive::PolicyProblem problem;
    Vec mu0;
    std::optional<datadriven::AuxModel> aux;
};

inline Pipeline build_pipeline(const ExperimentConfig& c, Variant v, std::uint64_t seed) {
    Pipeline pl;
    const auto mode = v == Variant::DetMpc                                ? predictive::GainMode::Nominal
                      : (v == Variant::DrfSddpc || v == Variant::DrfSmpc) ? predictive::GainMode::Fixed
                                                                          : predictive::GainMode::Optimized;
    StateSpaceModel model;
    if (is_data_driven(v)) {
        RngStream rng(seed, "offline-data");
        const auto nm = c.noise.offline_noise ? noise_model(c, c.noise.kind) : plant::NoiseModel::none(c.sys.n(), c.sys.p());
        const auto data = plant::collect_offline_data(c.sys, nm, c.T_d, c.excitation_variance, c.dt, rng);
        const auto part = datadriven::partition_data(data.u, data.y, c.L);
        const auto pred = datadriven::estimate_predictor(part, c.lambda);
        pl.aux = datadriven::build_aux_model(pred, c.L, c.noise.Srho_design, c.noise.Sv_design);
        model = pl.aux->to_model();
        // The initial auxiliary state is the Phi_aux image of x0 (zero for a zero start).
        pl.mu0 = c.x0.isZero(0.0) ? Vec::Zero(model.s())
                                  : Vec(equivalence::related_params(c.sys, c.L, Mat::Zero(c.sys.n(), c.sys.n()), c.x0)
                                            .mu_aux_ini);
    } else {
        model = StateSpaceModel::from_plant(c.sys, smpc_process_variance(c), c.noise.Sv_design);
        pl.mu0 = c.x0;
    }
    std::vector<Mat> fixed;
    if (mode == predictive::GainMode::Fixed) {
        const auto gains = predictive::compute_gains(model);
        fixed = predictive::fixed_gain_blocks(model, gains, predictive::lqr_gain(model, c.Q, c.R), c.N);
    }
    pl.problem = predictive::make_problem(model, c.N, c.Q, c.R, c.cons, mode, fixed, c.settings());
    return pl;
}

struct SegmentMetrics {
    double start = 0.0, end = 0.0;
    double tracking_cost = 0.0;     // sum |y - r|_Q^2
    double tracking_with_input = 0.0; // adds |u|_R^2
    double violation = 0.0;         // sum max(0, max_i(e_i'[u;y] - f_i))
};

struct MetricsReport {
    std::vector<SegmentMetrics> segments;
};

/// Streaming accumulator; compute_metrics feeds whole logs through it.
class MetricsAccumulator {
public:
    MetricsAccumulator(Mat Q, Mat R, predictive::ConstraintSpec cons, std::vector<std::pair<double, double>> segs,
                       double dt)
        : Q_(std::move(Q)), R_(std::move(R)), cons_(std::move(cons)), dt_(dt) {
        for (const auto& [a, b] : segs) report_.segments.push_back({a, b, 0.0, 0.0, 0.0});
    }

    void add(Index t, const Vec& u, const Vec& y, const Vec& r) {
        const double time = static_cast<double>(t) * dt_ + 1e-9;
        const Vec e = y - r;
        const double track = e.dot(Q_ * e), input = u.dot(R_ * u);
        Vec uy(u.size() + y.size());
        uy << u, y;
        const double viol = std::max(0.0, (cons_.E * uy - cons_.f).maxCoeff());
        for (auto& s : report_.segments) {
            if (time < s.start || time >= s.end) continue;
            s.tracking_cost += track;
            s.tracking_with_input += track + input;
            s.violation += viol;
        }
    }

    const MetricsReport& report() const { return report_; }

private:
    Mat Q_, R_;
    predictive::ConstraintSpec cons_;
    double dt_;
    MetricsReport report_;
};

inline MetricsReport compute_metrics(const Mat& u, const Mat& y, const Mat& ref, const Mat& Q, const Mat& R,
                                     const predictive::ConstraintSpec& cons,
                                     const std::vector<std::pair<double, double>>& segments, double dt) {
    if (u.cols() != y.cols() || ref.cols() < y.cols()) throw DimensionError("compute_metrics: log lengths differ");
    MetricsAccumulator acc(Q, R, cons, segments, dt);
    for (Index t = 0; t < y.cols(); ++t) acc.add(t, u.col(t), y.col(t), ref.col(t));
    return acc.report();
}

inline json metrics_to_json(const MetricsReport& m) {
    json out = json::array();
    for (const auto& s : m.segments)
        out.push_back({{"start", s.start},
                       {"end", s.end},
                       {"tracking_cost", s.tracking_cost},
                       {"tracking_cost_with_input", s.tracking_with_input},
                       {"cumulative_violation", s.violation}});
    return out;
}

struct SeedResult {
    Variant variant = Variant::DroSddpc;
    std::uint64_t seed = 0;
    plant::Trajectory trajectory;
    Mat reference;
    std::vector<json> diagnostics;
    MetricsReport metrics;
    int backups = 0;
    std::string error; // non-empty when the run stopped early
    bool infeasible = false;
};

/// One closed-loop run over the configured duration.
inline SeedResult run_seed(const ExperimentConfig& c, Variant v, std::uint64_t seed) {
    SeedResult res;
    res.variant = v;
    res.seed = seed;
    const Index T = c.steps(), n = c.sys.n(), m = c.sys.m(), p = c.sys.p();
    res.reference = reference_samples(c, T);
    RngStream noise_rng(seed, "plant-noise");
    const auto ns = T > 0 ? plant::sample_noise(noise_model(c, c.noise.kind), noise_rng, T)
                          : plant::NoiseSequence{Mat(n, 0), Mat(p, 0)};
    auto& tr = res.trajectory;
    tr.u = Mat::Zero(m, T);
    tr.y = Mat::Zero(p, T);
    tr.x = Mat::Zero(n, T);
    tr.w = ns.w;
    tr.v = ns.v;
    Index done = 0;
    try {
        const auto pl = build_pipeline(c, v, seed);
        const predictive::CostSpec cost{c.Q, c.R, res.reference};
        auto st = predictive::ControllerState::initial(pl.mu0);
        Vec x = c.x0;
        predictive::PlantIO io = [&](Index t, const Vec& u) {
            const auto r = plant::step(c.sys, x, u, ns.w.col(t), ns.v.col(t));
            tr.x.col(t) = x;
            tr.u.col(t) = u;
            tr.y.col(t) = r.y;
            x = r.x_next;
            done = t + 1;
            return r.y;
        };
        while (st.k < T) {
            const Index nc = std::min(c.N_c, T - st.k);
            const auto rep = predictive::control_step(pl.problem, st, cost, nc, io);
            res.backups += rep.backup_used ? 1 : 0;
            res.diagnostics.push_back(predictive::step_record(rep));
        }
    } catch (const InfeasibleAfterBackup& e) {
        res.error = e.what();
        res.infeasible = true;
    } catch (const Error& e) {
        res.error = e.what();
    }
    if (done < T) {
        tr.u.conservativeResize(m, done);
        tr.y.conservativeResize(p, done);
        tr.x.conservativeResize(n, done);
        tr.w.conservativeResize(n, done);
        tr.v.conservativeResize(p, done);
    }
    res.metrics = compute_metrics(tr.u, tr.y, res.reference, c.Q, c.R, c.cons, c.metric_segments, c.dt);
    return res;
}

inline std::string run_name(Variant v, std::uint64_t seed) {
    return std::string(to_string(v)) + "_seed" + std::to_string(seed);
}

/// Writes {variant}_seed{n}.csv, .jsonl and _metrics.json into `dir`.
inline void write_seed_outputs(const SeedResult& r, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string base = (std::filesystem::path(dir) / run_name(r.variant, r.seed)).string();
    {
        std::ofstream f(base + ".csv");
        plant::write_csv(f, r.trajectory);
    }
    {
        std::ofstream f(base + ".jsonl");
        for (const auto& d : r.diagnostics) f << d.dump() << '\n';
        if (!r.error.empty()) f << json{{"failed", true}, {"error", r.error}}.dump() << '\n';
    }
    {
        std::ofstream f(base + "_metrics.json");
        json j{{"variant", to_string(r.variant)},
               {"seed", r.seed},
               {"completed", r.error.empty()},
               {"backups", r.backups},
               {"segments", metrics_to_json(r.metrics)}};
        if (!r.error.empty()) j["error"] = r.error;
        f << j.dump(2) << '\n';
    }
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size() / 2;
    return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

/// Per-segment medians over seeds.
inline json aggregate_metrics(const std::vector<SeedResult>& runs) {
    json out = json::array();
    if (runs.empty()) return out;
    for (std::size_t s = 0; s < runs.front().metrics.segments.size(); ++s) {
        std::vector<double> tc, ti, vi;
        for (const auto& r : runs) {
            tc.push_back(r.metrics.segments[s].tracking_cost);
            ti.push_back(r.metrics.segments[s].tracking_with_input);
            vi.push_back(r.metrics.segments[s].violation);
        }
        out.push_back({{"start", runs.front().metrics.segments[s].start},
                       {"end", runs.front().metrics.segments[s].end},
                       {"median_tracking_cost", median(tc)},
                       {"median_tracking_cost_with_input", median(ti)},
                       {"median_cumulative_violation", median(vi)}});
    }
    return out;
}

/// Worker count from STOCHPC_THREADS (default: hardware concurrency).
inline unsigned worker_count() {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("STOCHPC_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return hw;
}

/// Runs every seed of `c` for variant `v`; seeds are distributed over
/// worker threads and results are returned in seed order.
inline std::vector<SeedResult> run_experiment(const ExperimentConfig& c, Variant v,
                                              const std::vector<std::uint64_t>& seeds) {
    std::vector<SeedResult> out(seeds.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) out[i] = run_seed(c, v, seeds[i]);
    };
    const unsigned nw = std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max<std::size_t>(1, seeds.size())));
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < nw; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    return out;
}

/// Paired SMPC/SDDPC run set up from the configuration.
inline equivalence::PairedSetup paired_setup(const ExperimentConfig& c) {
    equivalence::PairedSetup s;
    s.sys = c.sys;
    s.L = c.L;
    s.N = c.N;
    s.N_c = c.N_c;
    s.steps = c.equivalence.steps;
    s.T_d = c.T_d;
    s.dt = c.dt;
    s.excitation_variance = c.excitation_variance;
    s.lambda = c.equivalence.lambda;
    s.Q = c.Q;
    s.R = c.R;
    s.cons = c.cons;
    s.Sw = smpc_process_variance(c);
    s.Sv = c.noise.Sv_design;
    s.mu_ini = c.equivalence.mu_ini;
    s.reference = reference_samples(c, s.steps * s.N_c + s.N, c.equivalence.start_time);
    s.settings = c.settings();
    return s;
}

struct EquivalenceResult {
    std::string noise;
    equivalence::PairedRunReport report;
};

inline std::vector<EquivalenceResult> run_equivalence(const ExperimentConfig& c, std::uint64_t seed) {
    const auto s = paired_setup(c);
    std::vector<EquivalenceResult> out;
    for (const auto& kind : c.equivalence.noises) {
        const auto nm = kind == "gaussian" ? plant::NoiseModel::gaussian(s.Sw, s.Sv) : noise_model(c, kind);
        out.push_back({kind, equivalence::run_paired(s, nm, seed)});
    }
    return out;
}

} // namespace stochpc::experiment
