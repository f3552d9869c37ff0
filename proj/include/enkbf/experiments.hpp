#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "enkbf/io.hpp"
#include "enkbf/kbf.hpp"
#include "enkbf/stats.hpp"
#include "enkbf/threads.hpp"
#include "enkbf/unbiased.hpp"

namespace enkbf {

enum class ExperimentKind { SecondMoment, Bias, MseVsCost };

inline const char* experiment_kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::SecondMoment: return "second-moment";
        case ExperimentKind::Bias: return "bias";
        default: return "mse-vs-cost";
    }
}

namespace detail {
inline constexpr std::uint64_t kTagData = 0x646174ull; // "dat"
inline constexpr std::uint64_t kTagSecondMoment = 0x736dull;
inline constexpr std::uint64_t kTagBias = 0x626961ull;
inline constexpr std::uint64_t kTagMse = 0x6d7365ull;
} // namespace detail

/// Scale and layout of one experiment run. The level window is
/// [l_start, l_start + l_max]; particle levels use N_p = N0 2^p up to p_max.
struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::SecondMoment;
    Variant variant = Variant::Deterministic;
    std::vector<EstimatorKind> estimators = {EstimatorKind::SingleTerm,
                                             EstimatorKind::CoupledSum};
    int l_start = 3;
    int l_max = 4;
    int p_max = 5;
    int N0 = 25;
    int T = 10;
    int replicates = 300;
    std::uint64_t master_seed = 1;
    std::string out_dir;
    PmfKind pmf_kind = PmfKind::Geometric;
    double alpha = 0.9;

    int bias_n = 512;       // fixed large ensemble for the time-bias sweep
    int bias_p_max = 4;     // particle levels for the particle-bias sweep
    int ml_nbase = 2;       // n_base(L) = ml_nbase * 4^(L - l_start)
    int unbiased_m0 = 32;   // first point of the M sweep
    int sweep_points = 4;
    int record_count = 1;   // >1 averages the MSE over observation records

    std::string canonical(const Model& m) const {
        std::ostringstream s;
        s << experiment_kind_name(kind) << ';' << variant_name(variant) << ";d=" << m.d_x << ','
          << m.d_y << ";mseed=" << m.seed << ";l*=" << l_start << ";lmax=" << l_max
          << ";pmax=" << p_max << ";N0=" << N0 << ";T=" << T << ";R=" << replicates
          << ";seed=" << master_seed << ";pmf=" << (pmf_kind == PmfKind::Geometric ? "geo" : "log")
          << ";alpha=" << alpha << ";biasN=" << bias_n << ";nbase=" << ml_nbase
          << ";m0=" << unbiased_m0 << ";sweeps=" << sweep_points << ";recs=" << record_count;
        return s.str();
    }

    void require_replicates() const {
        if (replicates < 30)
            throw InsufficientReplicates("slope fits need at least 30 replicates, got " +
                                         std::to_string(replicates));
    }
};

inline ObservationRecord experiment_record(const Model& m, int T, int level,
                                           std::uint64_t master_seed, int record_index = 0) {
    return simulate_truth_and_observations(
        m, T, level,
        RngStream::derive(master_seed,
                          {detail::kTagData, static_cast<std::uint64_t>(record_index)}));
}

namespace detail {

struct CellMoment {
    double mean = 0.0; // mean of ||Xi||^2 over surviving replicates
    double se = 0.0;
    long failures = 0;
};

// Replicate-averaged E||Xi_{l,p}||^2 for one (l, p) cell. Blow-ups are
// excluded; more than 1% of them invalidates the cell.
inline CellMoment cell_second_moment(int l, int p, const UnbiasedConfig& cfg,
                                     const ObservationRecord& rec, const Model& m,
                                     std::uint64_t master_seed, std::uint64_t cell_id,
                                     int replicates) {
    std::vector<double> values(static_cast<std::size_t>(replicates),
                               std::numeric_limits<double>::quiet_NaN());
    parallel_for(replicates, [&](long r) {
        RngStream stream = RngStream::derive(
            master_seed, {kTagSecondMoment, cell_id, static_cast<std::uint64_t>(r)});
        try {
            values[static_cast<std::size_t>(r)] = xi_increment(l, p, cfg, rec, m, stream).xi.squaredNorm();
        } catch (const NumericalBlowUp&) {
        }
    });
    CellMoment out;
    std::vector<double> ok;
    ok.reserve(values.size());
    for (double v : values) {
        if (std::isnan(v))
            ++out.failures;
        else
            ok.push_back(v);
    }
    if (out.failures * 100 > replicates)
        throw NumericalBlowUp("more than 1% of replicates blew up in second-moment cell");
    out.mean = mean_of(ok);
    out.se = stderr_of(ok);
    return out;
}

} // namespace detail

struct SecondMomentPoint {
    std::string axis; // "l" or "p"
    int level = 0;
    double second_moment = 0.0;
    double se = 0.0;
};

struct SecondMomentResult {
    std::vector<SecondMomentPoint> points;
    SlopeFit fit_vs_l;
    SlopeFit fit_vs_p;
    std::vector<std::string> warnings;
};

/// Sampled second moments of the telescope increments: one sweep over the
/// discretization level l at p = 1, one over the particle level p at l = 2.
/// Both log2 slopes should sit near -1.
inline SecondMomentResult run_second_moment_experiment(const ExperimentSpec& spec,
                                                       const Model& m) {
    if (spec.kind != ExperimentKind::SecondMoment)
        throw ConfigInvalid("spec kind is not second-moment");
    spec.require_replicates();

    ObservationRecord rec =
        experiment_record(m, spec.T, spec.l_start + spec.l_max, spec.master_seed);

    UnbiasedConfig cfg;
    cfg.variant = spec.variant;
    cfg.N0 = spec.N0;
    cfg.l_start = spec.l_start;
    cfg.T = spec.T;

    SecondMomentResult out;
    std::vector<std::pair<double, double>> pts_l, pts_p;
    for (int l = 0; l <= spec.l_max; ++l) {
        auto cell = detail::cell_second_moment(l, 1, cfg, rec, m, spec.master_seed,
                                               static_cast<std::uint64_t>(l), spec.replicates);
        out.points.push_back({"l", l, cell.mean, cell.se});
        // l = 0 is the single-filter convention term, whose second moment
        // carries no dt factor; the dt-proportionality being measured is a
        // statement about the coupled increments l >= 1
        if (l >= 1 || spec.l_max < 2) pts_l.emplace_back(l, std::log2(cell.mean));
    }
    const int p_axis_l = std::min(2, spec.l_max); // l = 2 unless the window is smaller
    for (int p = 0; p <= spec.p_max; ++p) {
        auto cell =
            detail::cell_second_moment(p_axis_l, p, cfg, rec, m, spec.master_seed,
                                       1000 + static_cast<std::uint64_t>(p), spec.replicates);
        out.points.push_back({"p", p, cell.mean, cell.se});
        pts_p.emplace_back(p, std::log2(cell.mean));
    }
    out.fit_vs_l = fit_line(std::move(pts_l));
    out.fit_vs_p = fit_line(std::move(pts_p));
    for (const auto* fit : {&out.fit_vs_l, &out.fit_vs_p})
        if (fit->r_squared < 0.8)
            out.warnings.push_back("slope fit has r_squared below 0.8");
    return out;
}

struct BiasPoint {
    std::string axis; // "delta" or "particles"
    int level = 0;    // absolute level, or particle level p
    double bias = 0.0;
    double se = 0.0;
};

struct BiasResult {
    std::vector<BiasPoint> points;
    SlopeFit fit_vs_delta; // log2 bias against log2 dt, target slope 1
    SlopeFit fit_vs_p;     // log2 bias against p, target slope -1
    std::vector<std::string> warnings;
};

namespace detail {

// Norm of (replicate-averaged ensemble mean - reference), with a norm-level
// standard error from the replicate scatter.
inline std::pair<double, double> bias_against(const Vector& reference, Variant variant, int n,
                                              int level, const ObservationRecord& rec,
                                              const Model& m, std::uint64_t master_seed,
                                              std::uint64_t cell_id, int replicates) {
    std::vector<Vector> etas(static_cast<std::size_t>(replicates));
    parallel_for(replicates, [&](long r) {
        RngStream stream = RngStream::derive(
            master_seed, {kTagBias, cell_id, static_cast<std::uint64_t>(r)});
        etas[static_cast<std::size_t>(r)] = run_enkbf(variant, n, level, rec, m, stream).eta;
    });
    Vector mean = Vector::Zero(m.d_x);
    for (const Vector& e : etas) mean += e;
    mean /= static_cast<double>(replicates);
    double var_trace = 0.0;
    for (const Vector& e : etas) var_trace += (e - mean).squaredNorm();
    var_trace /= static_cast<double>(replicates - 1);
    const double se = std::sqrt(var_trace / replicates);
    return {(mean - reference).norm(), se};
}

} // namespace detail

/// Discretization and particle bias sweeps. The time sweep holds N large and
/// compares against a two-levels-finer filter recursion; the particle sweep
/// holds the level fixed and compares against the matched-level recursion,
/// isolating the O(1/N) term.
inline BiasResult run_bias_experiment(const ExperimentSpec& spec, const Model& m) {
    if (spec.kind != ExperimentKind::Bias) throw ConfigInvalid("spec kind is not bias");
    spec.require_replicates();

    const int l_top = spec.l_start + spec.l_max;
    const int l_ref = l_top + 2;
    ObservationRecord rec = experiment_record(m, spec.T, l_ref, spec.master_seed);
    const Vector ref_fine = run_kbf(rec, l_ref, m).back().mean;
    const Vector ref_matched = run_kbf(rec, l_top, m).back().mean;

    BiasResult out;
    std::vector<std::pair<double, double>> pts_delta, pts_p;
    for (int lev = spec.l_start; lev <= l_top; ++lev) {
        auto [bias, se] =
            detail::bias_against(ref_fine, spec.variant, spec.bias_n, lev, rec, m,
                                 spec.master_seed, static_cast<std::uint64_t>(lev),
                                 spec.replicates);
        out.points.push_back({"delta", lev, bias, se});
        pts_delta.emplace_back(-lev, std::log2(bias)); // x = log2 dt
    }
    for (int p = 0; p <= spec.bias_p_max; ++p) {
        const int n = spec.N0 << p;
        auto [bias, se] =
            detail::bias_against(ref_matched, spec.variant, n, l_top, rec, m, spec.master_seed,
                                 1000 + static_cast<std::uint64_t>(p), spec.replicates);
        out.points.push_back({"particles", p, bias, se});
        pts_p.emplace_back(p, std::log2(bias));
    }
    out.fit_vs_delta = fit_line(std::move(pts_delta));
    out.fit_vs_p = fit_line(std::move(pts_p));
    for (const auto* fit : {&out.fit_vs_delta, &out.fit_vs_p})
        if (fit->r_squared < 0.8)
            out.warnings.push_back("slope fit has r_squared below 0.8");
    return out;
}

struct MsePoint {
    std::string estimator; // "ml", "st", "cs"
    Variant variant = Variant::Deterministic;
    int sweep_index = 0;
    double cost = 0.0;
    double mse = 0.0;
    double se = 0.0;
};

struct MseVsCostResult {
    std::vector<MsePoint> points;
    std::map<std::string, SlopeFit> fits;
    std::vector<std::string> warnings;

    std::vector<MsePoint> curve(const std::string& estimator) const {
        std::vector<MsePoint> c;
        for (const auto& p : points)
            if (p.estimator == estimator) c.push_back(p);
        return c;
    }
};

/// Cost at a target MSE by log-log interpolation along a sweep curve.
/// Returns NaN when the target lies outside the curve's MSE range.
inline double cost_at_mse(const std::vector<MsePoint>& curve, double target_mse) {
    std::vector<std::pair<double, double>> pts; // (log2 mse, log2 cost), sorted by mse
    for (const auto& p : curve) pts.emplace_back(std::log2(p.mse), std::log2(p.cost));
    std::sort(pts.begin(), pts.end());
    const double x = std::log2(target_mse);
    if (pts.size() < 2 || x < pts.front().first || x > pts.back().first)
        return std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (x <= pts[i].first) {
            const double t = (x - pts[i - 1].first) / (pts[i].first - pts[i - 1].first);
            return std::exp2(pts[i - 1].second + t * (pts[i].second - pts[i - 1].second));
        }
    }
    return std::numeric_limits<double>::quiet_NaN();
}

/// MSE against the fine filter recursion as a function of realized cost, for
/// the multilevel estimator (sweeping the target level) and the two
/// randomized estimators (sweeping the replicate budget M).
inline MseVsCostResult run_mse_vs_cost(const ExperimentSpec& spec, const Model& m) {
    if (spec.kind != ExperimentKind::MseVsCost)
        throw ConfigInvalid("spec kind is not mse-vs-cost");
    spec.require_replicates();
    if (spec.sweep_points > spec.l_max)
        throw ConfigInvalid("sweep_points must not exceed l_max");

    const int l_top = spec.l_start + spec.l_max;
    const int l_ref = l_top + 2;
    const int n_records = std::max(1, spec.record_count);
    std::vector<ObservationRecord> recs;
    std::vector<Vector> refs;
    for (int j = 0; j < n_records; ++j) {
        recs.push_back(experiment_record(m, spec.T, l_ref, spec.master_seed, j));
        refs.push_back(run_kbf(recs.back(), l_ref, m).back().mean);
    }

    MseVsCostResult out;

    auto push_curve = [&](const std::string& label, int sweep_index,
                          const std::function<std::pair<Vector, double>(long, int)>& one_rep) {
        std::vector<double> sq(static_cast<std::size_t>(spec.replicates),
                               std::numeric_limits<double>::quiet_NaN());
        std::vector<double> costs(static_cast<std::size_t>(spec.replicates), 0.0);
        parallel_for(spec.replicates, [&](long r) {
            const int j = static_cast<int>(r % n_records);
            try {
                auto [est, cost] = one_rep(r, j);
                sq[static_cast<std::size_t>(r)] = (est - refs[static_cast<std::size_t>(j)]).squaredNorm();
                costs[static_cast<std::size_t>(r)] = cost;
            } catch (const NumericalBlowUp&) {
            }
        });
        std::vector<double> ok, okc;
        long failures = 0;
        for (std::size_t i = 0; i < sq.size(); ++i) {
            if (std::isnan(sq[i]))
                ++failures;
            else {
                ok.push_back(sq[i]);
                okc.push_back(costs[i]);
            }
        }
        if (failures * 100 > spec.replicates)
            throw NumericalBlowUp("more than 1% of replicates blew up in mse sweep");
        MsePoint pt;
        pt.estimator = label;
        pt.variant = spec.variant;
        pt.sweep_index = sweep_index;
        pt.cost = mean_of(okc);
        pt.mse = mean_of(ok);
        pt.se = stderr_of(ok);
        out.points.push_back(pt);
    };

    // multilevel curve: deeper target level, variance re-balanced via n_base
    for (int k = 0; k < spec.sweep_points; ++k) {
        const int L = spec.l_start + 1 + k;
        const int n_base = std::max(
            2, static_cast<int>(std::lround(spec.ml_nbase * std::ldexp(1.0, 2 * (L - spec.l_start)))));
        MlConfig cfg;
        cfg.l_start = spec.l_start;
        cfg.l_target = L;
        cfg.particles = allocate_particles(L, spec.l_start, n_base);
        cfg.variant = spec.variant;
        cfg.T = spec.T;
        push_curve("ml", k, [&, L](long r, int j) {
            RngStream stream = RngStream::derive(
                spec.master_seed,
                {detail::kTagMse, static_cast<std::uint64_t>(L), static_cast<std::uint64_t>(r)});
            MlEstimate est = ml_estimate(cfg, recs[static_cast<std::size_t>(j)], m, stream);
            return std::make_pair(est.estimate, est.cost);
        });
    }

    // randomized estimators: sweep the number of weighted draws
    for (EstimatorKind ek : spec.estimators) {
        UnbiasedConfig cfg;
        cfg.variant = spec.variant;
        cfg.estimator = ek;
        cfg.pmf_L = make_pmf(spec.pmf_kind, spec.l_max, PmfRole::Level, spec.alpha);
        cfg.pmf_P = make_pmf(spec.pmf_kind, spec.p_max, PmfRole::Particle, spec.alpha);
        cfg.N0 = spec.N0;
        cfg.l_start = spec.l_start;
        cfg.T = spec.T;
        const std::string label = estimator_name(ek);
        for (int k = 0; k < spec.sweep_points; ++k) {
            cfg.M = spec.unbiased_m0 << (2 * k);
            push_curve(label, k, [&, ek, k](long r, int j) {
                const std::uint64_t seed =
                    derive_seed(spec.master_seed,
                                detail::kTagMse + (ek == EstimatorKind::SingleTerm ? 1 : 2),
                                static_cast<std::uint64_t>(k * 1000003 + r));
                UnbiasedResult res = unbiased_estimate(cfg, recs[static_cast<std::size_t>(j)], m, seed);
                return std::make_pair(res.estimate, res.total_cost);
            });
        }
    }

    for (const std::string& label : {std::string("ml"), std::string("st"), std::string("cs")}) {
        auto curve = out.curve(label);
        if (curve.size() < 2) continue;
        std::vector<double> xs, ys;
        for (const auto& p : curve) {
            xs.push_back(p.cost);
            ys.push_back(p.mse);
        }
        out.fits[label] = fit_loglog2(xs, ys);
        if (out.fits[label].r_squared < 0.8)
            out.warnings.push_back("slope fit for '" + label + "' has r_squared below 0.8");
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV emission

inline void write_fits_csv(const std::vector<std::pair<std::string, SlopeFit>>& fits,
                           const std::string& path) {
    CsvWriter csv(path, {"fit", "slope", "intercept", "r_squared"});
    for (const auto& [name, fit] : fits)
        csv.row({name, cell(fit.slope), cell(fit.intercept), cell(fit.r_squared)});
}

inline std::vector<std::string> write_second_moment_outputs(const SecondMomentResult& res,
                                                            const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string data = dir + "/second_moment.csv";
    CsvWriter csv(data, {"axis", "level", "second_moment", "stderr"});
    for (const auto& p : res.points)
        csv.row({p.axis, cell(p.level), cell(p.second_moment), cell(p.se)});
    const std::string fits = dir + "/second_moment_fits.csv";
    write_fits_csv({{"vs_l", res.fit_vs_l}, {"vs_p", res.fit_vs_p}}, fits);
    return {data, fits};
}

inline std::vector<std::string> write_bias_outputs(const BiasResult& res, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string data = dir + "/bias.csv";
    CsvWriter csv(data, {"axis", "level", "bias", "stderr"});
    for (const auto& p : res.points) csv.row({p.axis, cell(p.level), cell(p.bias), cell(p.se)});
    const std::string fits = dir + "/bias_fits.csv";
    write_fits_csv({{"vs_delta", res.fit_vs_delta}, {"vs_p", res.fit_vs_p}}, fits);
    return {data, fits};
}

inline std::vector<std::string> write_mse_outputs(const MseVsCostResult& res,
                                                  const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string data = dir + "/mse_vs_cost.csv";
    CsvWriter csv(data, {"estimator", "variant", "sweep_index", "cost", "mse", "stderr"});
    for (const auto& p : res.points)
        csv.row({p.estimator, variant_name(p.variant), cell(p.sweep_index), cell(p.cost),
                 cell(p.mse), cell(p.se)});
    const std::string fits = dir + "/mse_vs_cost_fits.csv";
    std::vector<std::pair<std::string, SlopeFit>> fit_rows(res.fits.begin(), res.fits.end());
    write_fits_csv(fit_rows, fits);
    return {data, fits};
}

/// Runs the experiment named by spec.kind and writes its CSVs plus a
/// manifest into spec.out_dir. Returns the artifact list.
inline std::vector<std::string> run_experiment_to_dir(const ExperimentSpec& spec, const Model& m) {
    std::vector<std::string> artifacts;
    std::vector<std::string> warnings;
    switch (spec.kind) {
        case ExperimentKind::SecondMoment: {
            auto res = run_second_moment_experiment(spec, m);
            artifacts = write_second_moment_outputs(res, spec.out_dir);
            warnings = res.warnings;
            break;
        }
        case ExperimentKind::Bias: {
            auto res = run_bias_experiment(spec, m);
            artifacts = write_bias_outputs(res, spec.out_dir);
            warnings = res.warnings;
            break;
        }
        case ExperimentKind::MseVsCost: {
            auto res = run_mse_vs_cost(spec, m);
            artifacts = write_mse_outputs(res, spec.out_dir);
            warnings = res.warnings;
            break;
        }
    }
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    const std::uint64_t spec_hash = fnv1a_hash(spec.canonical(m));
    std::vector<ManifestEntry> entries;
    for (const auto& a : artifacts)
        entries.push_back({std::filesystem::path(a).filename().string(), spec.master_seed, spec_hash});
    const std::string manifest = spec.out_dir + "/manifest.csv";
    write_manifest(entries, manifest);
    artifacts.push_back(manifest);
    return artifacts;
}

} // namespace enkbf
