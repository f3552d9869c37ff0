#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "enkbf/config.hpp"
#include "enkbf/experiments.hpp"
#include "enkbf/io.hpp"

namespace enkbf::cli {

struct LevelRange {
    int lo = 3;
    int hi = 7;
};

/// Parses "a..b" (also accepts a single level "a").
inline LevelRange parse_levels(const std::string& text) {
    LevelRange r;
    auto dots = text.find("..");
    try {
        if (dots == std::string::npos) {
            r.lo = r.hi = std::stoi(text);
        } else {
            r.lo = std::stoi(text.substr(0, dots));
            r.hi = std::stoi(text.substr(dots + 2));
        }
    } catch (const std::exception&) {
        throw ConfigInvalid("cannot parse level range '" + text + "', expected a..b");
    }
    if (r.hi < r.lo || r.lo < 0) throw ConfigInvalid("invalid level range '" + text + "'");
    return r;
}

namespace detail {

struct CommonOpts {
    std::string config;
    int dim = 0;
    int dim_y = 0;
    std::uint64_t seed = 1;
    std::string out = ".";
    std::string variant = "deterministic";
    std::string estimator = "both";
    int T = 10;
    std::string levels;
    int replicates = 0;
};

inline void add_model_flags(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config, "config file with a [model] section");
    cmd->add_option("--dim", o.dim, "state dimension for a generated model");
    cmd->add_option("--dy", o.dim_y, "observation dimension (defaults to --dim)");
    cmd->add_option("--seed", o.seed, "master seed");
}

inline Model resolve_model(const CommonOpts& o) {
    if (!o.config.empty()) return load_model(o.config);
    if (o.dim < 1)
        throw ConfigInvalid("no model source: pass --config FILE or --dim N");
    ModelGenSpec spec;
    spec.d_x = o.dim;
    spec.d_y = o.dim_y > 0 ? o.dim_y : o.dim;
    spec.seed = o.seed;
    return make_ou_model(spec);
}

inline Variant parse_variant(const std::string& name) {
    if (name == "vanilla") return Variant::Vanilla;
    if (name == "deterministic") return Variant::Deterministic;
    throw ConfigInvalid("unknown variant '" + name + "'");
}

inline std::vector<EstimatorKind> parse_estimators(const std::string& name) {
    if (name == "st") return {EstimatorKind::SingleTerm};
    if (name == "cs") return {EstimatorKind::CoupledSum};
    if (name == "both") return {EstimatorKind::SingleTerm, EstimatorKind::CoupledSum};
    throw ConfigInvalid("unknown estimator '" + name + "', expected st, cs or both");
}

inline PmfKind parse_pmf(const std::string& name) {
    if (name == "geometric") return PmfKind::Geometric;
    if (name == "logweighted") return PmfKind::LogWeighted;
    throw ConfigInvalid("unknown pmf '" + name + "'");
}

inline std::string out_path(const CommonOpts& o, const std::string& file) {
    std::filesystem::create_directories(o.out);
    return (std::filesystem::path(o.out) / file).string();
}

inline void emit_manifest(const CommonOpts& o, const std::vector<std::string>& files,
                          const std::string& canonical) {
    std::vector<ManifestEntry> entries;
    const std::uint64_t h = fnv1a_hash(canonical);
    for (const auto& f : files)
        entries.push_back({std::filesystem::path(f).filename().string(), o.seed, h});
    write_manifest(entries, out_path(const_cast<CommonOpts&>(o), "manifest.csv"));
}

// Applies [experiment] / [estimator] sections, then CLI flags on top.
inline void apply_experiment_config(const std::string& path, ExperimentSpec& spec,
                                    std::optional<Model>& model) {
    IniFile ini = IniFile::load(path);
    if (ini.has_section("model")) model = model_from_ini(ini);

    ini.require_known_keys("experiment", {"kind", "T", "replicates", "seed", "out", "levels",
                                          "record_count", "sweep_points"});
    if (const std::string* v = ini.get("experiment", "kind")) {
        if (*v == "second-moment") spec.kind = ExperimentKind::SecondMoment;
        else if (*v == "bias") spec.kind = ExperimentKind::Bias;
        else if (*v == "mse-vs-cost") spec.kind = ExperimentKind::MseVsCost;
        else throw ConfigInvalid("unknown experiment kind '" + *v + "'");
    }
    if (const std::string* v = ini.get("experiment", "T")) spec.T = std::stoi(*v);
    if (const std::string* v = ini.get("experiment", "replicates")) spec.replicates = std::stoi(*v);
    if (const std::string* v = ini.get("experiment", "seed")) spec.master_seed = std::stoull(*v);
    if (const std::string* v = ini.get("experiment", "out")) spec.out_dir = *v;
    if (const std::string* v = ini.get("experiment", "levels")) {
        LevelRange r = parse_levels(*v);
        spec.l_start = r.lo;
        spec.l_max = r.hi - r.lo;
    }
    if (const std::string* v = ini.get("experiment", "record_count"))
        spec.record_count = std::stoi(*v);
    if (const std::string* v = ini.get("experiment", "sweep_points"))
        spec.sweep_points = std::stoi(*v);

    ini.require_known_keys("estimator", {"variant", "estimator", "N0", "p_max", "pmf", "alpha",
                                         "nbase", "m0", "bias_n"});
    if (const std::string* v = ini.get("estimator", "variant")) spec.variant = parse_variant(*v);
    if (const std::string* v = ini.get("estimator", "estimator"))
        spec.estimators = parse_estimators(*v);
    if (const std::string* v = ini.get("estimator", "N0")) spec.N0 = std::stoi(*v);
    if (const std::string* v = ini.get("estimator", "p_max")) spec.p_max = std::stoi(*v);
    if (const std::string* v = ini.get("estimator", "pmf")) spec.pmf_kind = parse_pmf(*v);
    if (const std::string* v = ini.get("estimator", "alpha")) spec.alpha = std::stod(*v);
    if (const std::string* v = ini.get("estimator", "nbase")) spec.ml_nbase = std::stoi(*v);
    if (const std::string* v = ini.get("estimator", "m0")) spec.unbiased_m0 = std::stoi(*v);
    if (const std::string* v = ini.get("estimator", "bias_n")) spec.bias_n = std::stoi(*v);
}

} // namespace detail

/// Entry point shared by the binary and the tests. Returns 0 on success, 1
/// on usage or validation errors, 2 on numerical failure.
inline int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"ensemble Kalman-Bucy filtering lab"};
    app.require_subcommand(1);

    detail::CommonOpts o;
    int level = 8;
    int n_particles = 64;
    int n_base = 32;
    int M = 128;
    int N0 = 25;
    int p_max = 5;
    bool with_cov = false;
    std::string pmf_name = "geometric";
    double alpha = 0.9;
    std::string experiment_kind;

    auto* simulate = app.add_subcommand("simulate", "write one observation record as CSV");
    detail::add_model_flags(simulate, o);
    simulate->add_option("--T", o.T, "time horizon");
    simulate->add_option("--level", level, "dyadic grid level");
    simulate->add_option("--out", o.out, "output directory");

    auto* kbf = app.add_subcommand("kbf", "reference filter trajectory");
    detail::add_model_flags(kbf, o);
    kbf->add_option("--T", o.T, "time horizon");
    kbf->add_option("--level", level, "dyadic grid level");
    kbf->add_option("--out", o.out, "output directory");
    kbf->add_flag("--with-cov", with_cov, "include flattened covariance columns");

    auto* enkbf_cmd = app.add_subcommand("enkbf", "single-level particle filter run");
    detail::add_model_flags(enkbf_cmd, o);
    enkbf_cmd->add_option("--T", o.T, "time horizon");
    enkbf_cmd->add_option("--level", level, "dyadic grid level");
    enkbf_cmd->add_option("--n", n_particles, "particle count");
    enkbf_cmd->add_option("--variant", o.variant, "vanilla or deterministic");
    enkbf_cmd->add_option("--out", o.out, "output directory");

    auto* ml = app.add_subcommand("mlenkbf", "multilevel estimate with per-level breakdown");
    detail::add_model_flags(ml, o);
    ml->add_option("--T", o.T, "time horizon");
    ml->add_option("--levels", o.levels, "level range a..b (start..target)");
    ml->add_option("--nbase", n_base, "base particle count for the allocation");
    ml->add_option("--variant", o.variant, "vanilla or deterministic");
    ml->add_option("--out", o.out, "output directory");

    auto* unb = app.add_subcommand("unbiased", "randomized estimator with per-sample records");
    detail::add_model_flags(unb, o);
    unb->add_option("--T", o.T, "time horizon");
    unb->add_option("--M", M, "number of weighted draws");
    unb->add_option("--N0", N0, "base particle count");
    unb->add_option("--levels", o.levels, "absolute level range a..b of the truncation");
    unb->add_option("--pmax", p_max, "particle-level truncation");
    unb->add_option("--pmf", pmf_name, "geometric or logweighted");
    unb->add_option("--alpha", alpha, "geometric pmf exponent");
    unb->add_option("--variant", o.variant, "vanilla or deterministic");
    unb->add_option("--estimator", o.estimator, "st or cs");
    unb->add_option("--out", o.out, "output directory");

    auto* exp = app.add_subcommand("experiment", "rate and cost studies, CSV output");
    exp->add_option("kind", experiment_kind, "second-moment, bias or mse-vs-cost")->required();
    detail::add_model_flags(exp, o);
    exp->add_option("--T", o.T, "time horizon");
    exp->add_option("--levels", o.levels, "absolute level range a..b");
    exp->add_option("--replicates", o.replicates, "replicates per point");
    exp->add_option("--N0", N0, "base particle count");
    exp->add_option("--pmax", p_max, "particle-level truncation");
    exp->add_option("--pmf", pmf_name, "geometric or logweighted");
    exp->add_option("--alpha", alpha, "geometric pmf exponent");
    exp->add_option("--variant", o.variant, "vanilla or deterministic");
    exp->add_option("--estimator", o.estimator, "st, cs or both");
    exp->add_option("--out", o.out, "output directory");

    try {
        std::vector<const char*> argv;
        argv.push_back("enkbf-lab");
        for (const auto& a : args) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (simulate->parsed()) {
            Model m = detail::resolve_model(o);
            ObservationRecord rec = experiment_record(m, o.T, level, o.seed);
            const std::string f = detail::out_path(o, "record.csv");
            export_record_csv(rec, f);
            detail::emit_manifest(o, {f}, "simulate;" + std::to_string(level));
            return 0;
        }
        if (kbf->parsed()) {
            Model m = detail::resolve_model(o);
            ObservationRecord rec = experiment_record(m, o.T, level, o.seed);
            const std::string f = detail::out_path(o, "kbf.csv");
            export_kbf_csv(run_kbf(rec, level, m), f, with_cov);
            detail::emit_manifest(o, {f}, "kbf;" + std::to_string(level));
            return 0;
        }
        if (enkbf_cmd->parsed()) {
            Model m = detail::resolve_model(o);
            ObservationRecord rec = experiment_record(m, o.T, level, o.seed);
            EnkbfRun run = run_enkbf(detail::parse_variant(o.variant), n_particles, level, rec, m,
                                     RngStream::derive(o.seed, {0x656eull}));
            const std::string f = detail::out_path(o, "ensemble.csv");
            export_ensemble_csv(run.ensemble, f);
            std::cout << "eta:";
            for (int j = 0; j < m.d_x; ++j) std::cout << ' ' << format_double(run.eta[j]);
            std::cout << "\n";
            detail::emit_manifest(o, {f}, "enkbf;" + o.variant + ";" + std::to_string(level));
            return 0;
        }
        if (ml->parsed()) {
            Model m = detail::resolve_model(o);
            LevelRange r = o.levels.empty() ? LevelRange{3, 5} : parse_levels(o.levels);
            MlConfig cfg;
            cfg.l_start = r.lo;
            cfg.l_target = r.hi;
            cfg.particles = allocate_particles(r.hi, r.lo, n_base);
            cfg.variant = detail::parse_variant(o.variant);
            cfg.T = o.T;
            for (const auto& w : validate_config(cfg)) std::cerr << "warning: " << w << "\n";
            ObservationRecord rec = experiment_record(m, o.T, r.hi, o.seed);
            MlEstimate est = ml_estimate(cfg, rec, m, RngStream::derive(o.seed, {0x6d6cull}));
            const std::string f = detail::out_path(o, "mlenkbf.csv");
            export_ml_csv(est, f);
            std::cout << "estimate:";
            for (int j = 0; j < m.d_x; ++j) std::cout << ' ' << format_double(est.estimate[j]);
            std::cout << "\ncost: " << format_double(est.cost) << "\n";
            detail::emit_manifest(o, {f}, "mlenkbf;" + o.variant + ";" + o.levels);
            return 0;
        }
        if (unb->parsed()) {
            Model m = detail::resolve_model(o);
            LevelRange r = o.levels.empty() ? LevelRange{3, 7} : parse_levels(o.levels);
            UnbiasedConfig cfg;
            cfg.variant = detail::parse_variant(o.variant);
            auto kinds = detail::parse_estimators(o.estimator == "both" ? "cs" : o.estimator);
            cfg.estimator = kinds.front();
            cfg.pmf_L = make_pmf(detail::parse_pmf(pmf_name), r.hi - r.lo, PmfRole::Level, alpha);
            cfg.pmf_P = make_pmf(detail::parse_pmf(pmf_name), p_max, PmfRole::Particle, alpha);
            cfg.N0 = N0;
            cfg.l_start = r.lo;
            cfg.T = o.T;
            cfg.M = M;
            ObservationRecord rec = experiment_record(m, o.T, r.hi, o.seed);
            UnbiasedResult res = unbiased_estimate(cfg, rec, m, o.seed);
            const std::string fs = detail::out_path(o, "unbiased_samples.csv");
            const std::string fj = detail::out_path(o, "unbiased_summary.json");
            export_unbiased_csv(res, fs);
            write_unbiased_summary_json(res, fj);
            detail::emit_manifest(o, {fs, fj}, "unbiased;" + o.estimator + ";" + o.variant);
            return 0;
        }
        if (exp->parsed()) {
            ExperimentSpec spec;
            if (experiment_kind == "second-moment") spec.kind = ExperimentKind::SecondMoment;
            else if (experiment_kind == "bias") spec.kind = ExperimentKind::Bias;
            else if (experiment_kind == "mse-vs-cost") spec.kind = ExperimentKind::MseVsCost;
            else throw ConfigInvalid("unknown experiment kind '" + experiment_kind + "'");

            std::optional<Model> model;
            if (!o.config.empty()) detail::apply_experiment_config(o.config, spec, model);
            if (!model) {
                if (o.dim >= 1) {
                    ModelGenSpec g;
                    g.d_x = o.dim;
                    g.d_y = o.dim_y > 0 ? o.dim_y : o.dim;
                    g.seed = o.seed;
                    model = make_ou_model(g);
                } else if (o.dim == 0 && o.config.empty()) {
                    // paper-style default scale
                    ModelGenSpec g;
                    g.d_x = 2;
                    g.d_y = 2;
                    g.seed = o.seed;
                    model = make_ou_model(g);
                }
            }
            spec.variant = detail::parse_variant(o.variant);
            spec.estimators = detail::parse_estimators(o.estimator);
            spec.master_seed = o.seed;
            spec.T = o.T;
            spec.N0 = N0;
            spec.p_max = p_max;
            spec.pmf_kind = detail::parse_pmf(pmf_name);
            spec.alpha = alpha;
            if (!o.levels.empty()) {
                LevelRange r = parse_levels(o.levels);
                spec.l_start = r.lo;
                spec.l_max = r.hi - r.lo;
            }
            if (o.replicates > 0) spec.replicates = o.replicates;
            else if (spec.kind == ExperimentKind::MseVsCost && spec.replicates > 50)
                spec.replicates = 30; // meta-replicated sweeps get expensive fast
            spec.out_dir = o.out;
            run_experiment_to_dir(spec, *model);
            return 0;
        }
    } catch (const NumericalBlowUp& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

} // namespace enkbf::cli
