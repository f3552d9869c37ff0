#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "enkbf/model.hpp"
#include "enkbf/rng.hpp"

namespace enkbf {

inline constexpr double kBlowUpThreshold = 1e12;

/// Dyadic time grid with step 2^-level over [0, horizon].
struct TimeGrid {
    int level = 0;
    int horizon = 1;

    double dt() const { return std::ldexp(1.0, -level); }
    long n_steps() const { return static_cast<long>(horizon) << level; }
};

/// One realization of the hidden signal and the observation increments on
/// the finest grid an experiment will touch. Every estimator in a run
/// conditions on the same record, consuming increments aggregated down to
/// its own level.
struct ObservationRecord {
    TimeGrid grid;
    std::vector<Vector> dY;    // n_steps increments
    std::vector<Vector> truth; // n_steps + 1 states
    std::uint64_t data_seed = 0;
};

/// Euler simulation of the signal and observation increments at level_fine.
/// Signal and observation noise come from disjoint sub-streams so the same
/// record can be re-derived piecewise.
inline ObservationRecord simulate_truth_and_observations(const Model& m, int T, int level_fine,
                                                         RngStream stream) {
    if (T < 1) throw InvalidDimension("horizon must be at least 1");
    if (level_fine < 0) throw InvalidDimension("level must be nonnegative");

    ObservationRecord rec;
    rec.grid = TimeGrid{level_fine, T};
    const long n = rec.grid.n_steps();
    const double dt = rec.grid.dt();
    const double sdt = std::sqrt(dt);

    RngStream init_stream = stream.child(0);
    RngStream sig_stream = stream.child(1);
    RngStream obs_stream = stream.child(2);

    rec.truth.reserve(n + 1);
    rec.dY.reserve(n);
    rec.truth.push_back(m.m0 + m.P0_sqrt * init_stream.normal_vector(m.d_x));

    for (long k = 0; k < n; ++k) {
        const Vector& x = rec.truth.back();
        Vector dW = sdt * sig_stream.normal_vector(m.d_x);
        Vector dV = sdt * obs_stream.normal_vector(m.d_y);
        Vector x_next = x + m.A * x * dt + m.R1_sqrt * dW;
        if (x_next.norm() > kBlowUpThreshold)
            throw NumericalBlowUp("signal state norm exceeded " + std::to_string(kBlowUpThreshold));
        rec.dY.push_back(m.C * x * dt + m.R2_sqrt * dV);
        rec.truth.push_back(std::move(x_next));
    }
    return rec;
}

/// Sums fine increments down to level_target by repeated pairwise halving.
/// Halving one level at a time makes aggregation exactly associative:
/// going fine -> mid -> coarse reproduces fine -> coarse bit for bit.
inline std::vector<Vector> aggregate_increments(const ObservationRecord& rec, int level_target) {
    if (level_target > rec.grid.level)
        throw LevelAboveFine("target level above record's fine level");
    if (level_target < 0) throw InvalidDimension("level must be nonnegative");

    std::vector<Vector> out = rec.dY;
    for (int lev = rec.grid.level; lev > level_target; --lev) {
        std::vector<Vector> half(out.size() / 2);
        for (std::size_t k = 0; k < half.size(); ++k) half[k] = out[2 * k] + out[2 * k + 1];
        out = std::move(half);
    }
    return out;
}

} // namespace enkbf
