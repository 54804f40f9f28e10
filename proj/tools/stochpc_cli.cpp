// stochpc command-line runner.
//
//   stochpc collect-data --config C [--seed N] [--out DIR]
//   stochpc run          --config C [--seed N] [--variant V] [--out DIR]
//   stochpc equivalence  --config C [--seed N] [--out DIR] [--lambda X]
//   stochpc metrics      --config C [--seed N] [--variant V] [--out DIR]
//   stochpc dump-program --config C [--seed N] [--variant V] [--out DIR]
//
// Exit codes: 0 success, 1 runtime failure or failed equivalence check,
// 2 infeasible after backup, 3 validation / usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "stochpc/stochpc.hpp"

namespace fs = std::filesystem;
using namespace stochpc;
using namespace stochpc::experiment;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitValidation = 3;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string out;
    std::optional<double> lambda;
};

struct Context {
    ExperimentConfig cfg;
    Variant variant;
    std::vector<std::uint64_t> seeds;
    std::string out;
};

Context load(const Options& o) {
    Context c{load_config(o.config), Variant::DroSddpc, {}, {}};
    c.variant = o.variant.empty() ? c.cfg.controller : variant_from_string(o.variant);
    c.seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : c.cfg.seeds;
    c.out = o.out.empty() ? c.cfg.output_dir : o.out;
    return c;
}

void write_json(const fs::path& path, const json_io::json& j) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream f(path);
    f << j.dump(2) << '\n';
}

int cmd_collect(const Options& o) {
    const auto c = load(o);
    for (auto seed : c.seeds) {
        RngStream rng(seed, "offline-data");
        const auto nm = c.cfg.noise.offline_noise ? noise_model(c.cfg, c.cfg.noise.kind)
                                                  : plant::NoiseModel::none(c.cfg.sys.n(), c.cfg.sys.p());
        const auto data =
            plant::collect_offline_data(c.cfg.sys, nm, c.cfg.T_d, c.cfg.excitation_variance, c.cfg.dt, rng);
        const auto pe = datadriven::check_persistent_excitation(data.u, c.cfg.L + 1 + c.cfg.sys.n());
        const auto pred = datadriven::estimate_predictor(datadriven::partition_data(data.u, data.y, c.cfg.L),
                                                         c.cfg.lambda);
        const auto aux = datadriven::build_aux_model(pred, c.cfg.L, c.cfg.noise.Srho_design, c.cfg.noise.Sv_design);
        fs::create_directories(c.out);
        const std::string tag = "_seed" + std::to_string(seed);
        {
            std::ofstream f(fs::path(c.out) / ("offline_data" + tag + ".csv"));
            plant::write_csv(f, data);
        }
        write_json(fs::path(c.out) / ("predictor" + tag + ".json"), datadriven::predictor_to_json(pred));
        write_json(fs::path(c.out) / ("aux_model" + tag + ".json"), datadriven::aux_to_json(aux));
        std::cout << "seed " << seed << ": " << data.u.cols() << " samples, PE margin " << pe.margin
                  << (pe.ok ? "" : " (not persistently exciting)") << '\n';
    }
    return 0;
}

int cmd_run(const Options& o) {
    const auto c = load(o);
    const auto runs = run_experiment(c.cfg, c.variant, c.seeds);
    bool infeasible = false, failed = false;
    json_io::json per_seed = json_io::json::array();
    for (const auto& r : runs) {
        write_seed_outputs(r, c.out);
        infeasible = infeasible || r.infeasible;
        failed = failed || !r.error.empty();
        per_seed.push_back({{"seed", r.seed},
                            {"completed", r.error.empty()},
                            {"backups", r.backups},
                            {"segments", metrics_to_json(r.metrics)}});
        std::cout << to_string(c.variant) << " seed " << r.seed << ':';
        for (const auto& s : r.metrics.segments)
            std::cout << " [" << s.start << ',' << s.end << ") cost " << s.tracking_cost << " viol " << s.violation;
        if (!r.error.empty()) std::cout << "  FAILED: " << r.error;
        std::cout << '\n';
    }
    write_json(fs::path(c.out) / (std::string(to_string(c.variant)) + "_metrics.json"),
               {{"variant", to_string(c.variant)}, {"seeds", per_seed}, {"median", aggregate_metrics(runs)}});
    if (infeasible) return kExitInfeasible;
    return failed ? kExitFailure : 0;
}

int cmd_equivalence(const Options& o) {
    auto c = load(o);
    if (o.lambda) c.cfg.equivalence.lambda = *o.lambda;
    const auto seed = c.seeds.front();
    const auto results = run_equivalence(c.cfg, seed);
    const double tol = c.cfg.equivalence.tolerance;
    bool ok = true;
    json_io::json out = json_io::json::array();
    for (const auto& r : results) {
        ok = ok && r.report.passed(tol);
        auto j = equivalence::report_to_json(r.report, tol);
        j["noise"] = r.noise;
        out.push_back(j);
        std::cout << r.noise << ": max input dev " << r.report.max_input_dev << ", max output dev "
                  << r.report.max_output_dev << (r.report.passed(tol) ? "  PASS" : "  FAIL") << '\n';
    }
    write_json(fs::path(c.out) / "equivalence_report.json",
               {{"seed", seed}, {"lambda", c.cfg.equivalence.lambda}, {"runs", out}, {"passed", ok}});
    return ok ? 0 : kExitFailure;
}

int cmd_metrics(const Options& o) {
    const auto c = load(o);
    std::vector<SeedResult> runs;
    for (auto seed : c.seeds) {
        const fs::path path = fs::path(c.out) / (run_name(c.variant, seed) + ".csv");
        std::ifstream f(path);
        if (!f) throw ValidationError("--out", "missing log " + path.string());
        SeedResult r;
        r.variant = c.variant;
        r.seed = seed;
        r.trajectory = plant::read_csv(f);
        const Mat ref = reference_samples(c.cfg, r.trajectory.y.cols());
        r.metrics = compute_metrics(r.trajectory.u, r.trajectory.y, ref, c.cfg.Q, c.cfg.R, c.cfg.cons,
                                    c.cfg.metric_segments, c.cfg.dt);
        runs.push_back(std::move(r));
    }
    json_io::json per_seed = json_io::json::array();
    for (const auto& r : runs) per_seed.push_back({{"seed", r.seed}, {"segments", metrics_to_json(r.metrics)}});
    std::cout << json_io::json{{"variant", to_string(c.variant)}, {"seeds", per_seed}, {"median", aggregate_metrics(runs)}}
                     .dump(2)
              << '\n';
    return 0;
}

int cmd_dump(const Options& o) {
    const auto c = load(o);
    const auto seed = c.seeds.front();
    const auto pl = build_pipeline(c.cfg, c.variant, seed);
    const Mat ref = reference_samples(c.cfg, c.cfg.N);
    const auto prog = predictive::assemble_program(pl.problem, pl.mu0, ref);
    const fs::path path = fs::path(c.out) / (run_name(c.variant, seed) + "_program.json");
    write_json(path, socp::program_to_json(prog));
    std::size_t soc = 0;
    for (const auto& k : prog.cones) soc += k.kind == socp::ConeKind::SOC;
    std::cout << path.string() << ": " << prog.A.cols() << " variables, " << prog.A.rows() << " cone rows, " << soc
              << " second-order cones\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic model-based and data-driven predictive control"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sc, bool variant) {
        sc->add_option("--config", o.config, "experiment configuration (JSON)")->required()->check(CLI::ExistingFile);
        sc->add_option("--seed", o.seed, "run a single seed instead of the configured list");
        sc->add_option("--out", o.out, "output directory (default: output_dir from the config)");
        if (variant)
            sc->add_option("--variant", o.variant, "dro_sddpc | drf_sddpc | dro_smpc | drf_smpc | det_mpc");
    };
    auto* collect = app.add_subcommand("collect-data", "record offline data and fit the predictor");
    auto* run = app.add_subcommand("run", "closed-loop experiment over all seeds");
    auto* equiv = app.add_subcommand("equivalence", "paired model-based / data-driven run");
    auto* metrics = app.add_subcommand("metrics", "recompute metrics from CSV logs");
    auto* dump = app.add_subcommand("dump-program", "write the first-window conic program as JSON");
    add_common(collect, false);
    add_common(run, true);
    add_common(equiv, false);
    add_common(metrics, true);
    add_common(dump, true);
    equiv->add_option("--lambda", o.lambda, "override the Tikhonov weight of the data pipeline");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (*collect) return cmd_collect(o);
        if (*run) return cmd_run(o);
        if (*equiv) return cmd_equivalence(o);
        if (*metrics) return cmd_metrics(o);
        if (*dump) return cmd_dump(o);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const InfeasibleAfterBackup& e) {
        std::cerr << "infeasible: " << e.what() << '\n';
        return kExitInfeasible;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return 0;
}
