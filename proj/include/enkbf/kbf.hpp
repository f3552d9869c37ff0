#pragma once

#include <vector>

#include "enkbf/model.hpp"
#include "enkbf/paths.hpp"

namespace enkbf {

/// Kalman-Bucy filter state on a dyadic grid.
struct KbfState {
    Vector mean;
    Matrix cov;
    long step_index = 0;
    TimeGrid grid;
};

/// Ricc(Q) = AQ + QA' - QSQ + R1, symmetrized.
inline Matrix riccati_drift(const Matrix& P, const Model& m) {
    if (P.rows() != m.d_x || P.cols() != m.d_x)
        throw DimensionMismatch("covariance must be d_x x d_x");
    return symmetrize(m.A * P + P * m.A.transpose() - P * m.S * P + m.R1);
}

/// One Euler step of the filter mean and covariance:
///   mean' = mean + A mean dt + U (dY - C mean dt),     U = P C' R2^{-1}
///   cov'  = P + Ricc(P) dt + (A - PS) P (A' - SP) dt^2
inline KbfState kbf_step(const KbfState& state, const Vector& dY, const Model& m) {
    const double dt = state.grid.dt();
    const Matrix& P = state.cov;
    Matrix U = m.gain(P);

    KbfState next;
    next.grid = state.grid;
    next.step_index = state.step_index + 1;
    next.mean = state.mean + m.A * state.mean * dt + U * (dY - m.C * state.mean * dt);
    if (next.mean.norm() > kBlowUpThreshold)
        throw NumericalBlowUp("kbf mean norm exceeded " + std::to_string(kBlowUpThreshold));

    Matrix AmPS = m.A - P * m.S;
    next.cov = symmetrize(P + riccati_drift(P, m) * dt + AmPS * P * AmPS.transpose() * (dt * dt));
    return next;
}

/// Full trajectory of the discrete filter recursion at the given level,
/// started from (m0, P0) and driven by the record's aggregated increments.
inline std::vector<KbfState> run_kbf(const ObservationRecord& rec, int level, const Model& m) {
    std::vector<Vector> incr = aggregate_increments(rec, level);
    std::vector<KbfState> traj;
    traj.reserve(incr.size() + 1);
    traj.push_back(KbfState{m.m0, m.P0, 0, TimeGrid{level, rec.grid.horizon}});
    for (const Vector& dY : incr) traj.push_back(kbf_step(traj.back(), dY, m));
    return traj;
}

} // namespace enkbf
