#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "enkbf/enkbf.hpp"

namespace enkbf {

/// Fine/coarse pair driven by shared noise. At step 0 both systems hold the
/// same particles; afterwards each evolves with its own statistics and gain.
struct CoupledEnsemble {
    Ensemble fine;   // level l
    Ensemble coarse; // level l - 1
};

inline CoupledEnsemble init_coupled(int n, const Model& m, int level, Variant variant,
                                    RngStream stream) {
    if (level < 1) throw InvalidDimension("coupled pair needs level >= 1");
    CoupledEnsemble ce;
    ce.fine = init_ensemble(n, m, level, variant, stream);
    ce.coarse = ce.fine;
    ce.coarse.level = level - 1;
    return ce;
}

/// One coarse step with explicit noise: the fine system advances twice with
/// the two sub-step increments, the coarse system once with their sums. The
/// noise matrices hold standard normals scaled to the FINE step (variance
/// dt_fine); summing two of them gives exactly the coarse-step variance.
inline CoupledEnsemble coupled_step_with_noise(const CoupledEnsemble& ce, const Vector& dY0,
                                               const Vector& dY1, const Model& m,
                                               const Matrix& dW0, const Matrix& dV0,
                                               const Matrix& dW1, const Matrix& dV1) {
    CoupledEnsemble next;
    next.fine = enkbf_step_with_noise(ce.fine, dY0, m, dW0, dV0);
    next.fine = enkbf_step_with_noise(next.fine, dY1, m, dW1, dV1);
    const bool vanilla = (ce.coarse.variant == Variant::Vanilla);
    next.coarse = enkbf_step_with_noise(ce.coarse, dY0 + dY1, m, dW0 + dW1,
                                        vanilla ? Matrix(dV0 + dV1) : Matrix());
    return next;
}

/// Stream-driven coarse step. Noise is addressed at the fine level (steps
/// 2k and 2k+1), so the fine system sees exactly the draws a single-level
/// run at its level would see.
inline CoupledEnsemble coupled_step(const CoupledEnsemble& ce, const Vector& dY0,
                                    const Vector& dY1, const Model& m,
                                    const RngStream& noise_stream) {
    const int n = ce.fine.n();
    const double sdt = std::sqrt(ce.fine.dt());
    StepNoise n0 = draw_step_noise(noise_stream, ce.fine.step_index, n, m, ce.fine.variant);
    StepNoise n1 = draw_step_noise(noise_stream, ce.fine.step_index + 1, n, m, ce.fine.variant);
    n0.dW *= sdt;
    n1.dW *= sdt;
    if (n0.dV.size() > 0) {
        n0.dV *= sdt;
        n1.dV *= sdt;
    }
    return coupled_step_with_noise(ce, dY0, dY1, m, n0.dW, n0.dV, n1.dW, n1.dV);
}

struct CoupledRun {
    Vector increment; // fine terminal mean - coarse terminal mean
    Vector fine_mean;
    Vector coarse_mean;
};

/// Runs a coupled pair to the horizon and returns the level increment.
inline CoupledRun run_coupled(Variant variant, int n, int level, const ObservationRecord& rec,
                              const Model& m, RngStream stream) {
    if (level < 1) throw InvalidDimension("coupled run needs level >= 1");
    CoupledEnsemble ce = init_coupled(n, m, level, variant, stream.child(0));
    RngStream noise = stream.child(1);
    std::vector<Vector> incr = aggregate_increments(rec, level);
    const long coarse_steps = static_cast<long>(incr.size()) / 2;
    for (long k = 0; k < coarse_steps; ++k)
        ce = coupled_step(ce, incr[2 * k], incr[2 * k + 1], m, noise);
    CoupledRun out;
    out.fine_mean = ensemble_stats(ce.fine).mean;
    out.coarse_mean = ensemble_stats(ce.coarse).mean;
    out.increment = out.fine_mean - out.coarse_mean;
    return out;
}

/// Multilevel run configuration: independent terms on levels
/// l_start..l_target with per-level particle counts.
struct MlConfig {
    int l_start = 3;
    int l_target = 5;
    std::map<int, int> particles; // level -> N_l
    Variant variant = Variant::Deterministic;
    int T = 10;
};

/// Hard config errors throw; soft issues (non-monotone particle counts) are
/// returned as warnings.
inline std::vector<std::string> validate_config(const MlConfig& cfg) {
    if (cfg.l_start < 0) throw ConfigInvalid("l_start must be nonnegative");
    if (cfg.l_target < cfg.l_start) throw ConfigInvalid("l_target must be >= l_start");
    if (cfg.T < 1) throw ConfigInvalid("horizon must be >= 1");
    for (int lev = cfg.l_start; lev <= cfg.l_target; ++lev) {
        auto it = cfg.particles.find(lev);
        if (it == cfg.particles.end())
            throw ConfigInvalid("no particle count for level " + std::to_string(lev));
        if (it->second < 2)
            throw ConfigInvalid("particle count must be >= 2 at level " + std::to_string(lev));
    }
    std::vector<std::string> warnings;
    for (int lev = cfg.l_start + 1; lev <= cfg.l_target; ++lev) {
        if (cfg.particles.at(lev) > cfg.particles.at(lev - 1)) {
            warnings.push_back("particle counts increase from level " + std::to_string(lev - 1) +
                               " to " + std::to_string(lev));
            break;
        }
    }
    return warnings;
}

struct MlLevelTerm {
    int level = 0;
    Vector value;
    double cost = 0.0;
};

struct MlEstimate {
    Vector estimate;
    double cost = 0.0;
    std::vector<MlLevelTerm> terms;
};

/// Per-level cost in particle-steps: N_l * 2^l * T.
inline double level_cost(int n, int level, int T) {
    return static_cast<double>(n) * std::ldexp(1.0, level) * T;
}

/// Multilevel estimator: the base filter at l_start plus independent coupled
/// increments up to l_target. Term streams depend only on the level, so the
/// result is invariant to evaluation order.
inline MlEstimate ml_estimate(const MlConfig& cfg, const ObservationRecord& rec, const Model& m,
                              RngStream stream) {
    validate_config(cfg);
    if (cfg.l_target > rec.grid.level)
        throw LevelAboveFine("l_target above the record's fine level");

    MlEstimate out;
    const int n_base = cfg.particles.at(cfg.l_start);
    EnkbfRun base = run_enkbf(cfg.variant, n_base, cfg.l_start, rec, m,
                              stream.child(static_cast<std::uint64_t>(cfg.l_start)));
    out.estimate = base.eta;
    out.terms.push_back({cfg.l_start, base.eta, level_cost(n_base, cfg.l_start, cfg.T)});

    for (int lev = cfg.l_start + 1; lev <= cfg.l_target; ++lev) {
        const int n = cfg.particles.at(lev);
        CoupledRun cr =
            run_coupled(cfg.variant, n, lev, rec, m, stream.child(static_cast<std::uint64_t>(lev)));
        out.estimate += cr.increment;
        out.terms.push_back({lev, cr.increment, level_cost(n, lev, cfg.T)});
    }
    for (const auto& t : out.terms) out.cost += t.cost;
    return out;
}

/// Equipartition particle allocation
///   N_l = ceil(n_base * 2^{-(l - l_start)} * (l_target - l_start + 1)),
/// which balances the per-level variance contributions dt_l / N_l.
inline std::map<int, int> allocate_particles(int l_target, int l_start, int n_base) {
    if (l_target < l_start) throw ConfigInvalid("l_target must be >= l_start");
    std::map<int, int> alloc;
    const int k = l_target - l_start + 1;
    for (int lev = l_start; lev <= l_target; ++lev) {
        double n = std::ceil(static_cast<double>(n_base) * std::ldexp(1.0, -(lev - l_start)) * k);
        alloc[lev] = std::max(2, static_cast<int>(n));
    }
    return alloc;
}

} // namespace enkbf
