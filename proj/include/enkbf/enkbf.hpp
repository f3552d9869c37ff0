#pragma once

#include <utility>
#include <vector>

#include "enkbf/kbf.hpp"
#include "enkbf/model.hpp"
#include "enkbf/paths.hpp"

namespace enkbf {

enum class Variant { Vanilla, Deterministic };

inline const char* variant_name(Variant v) {
    return v == Variant::Vanilla ? "vanilla" : "deterministic";
}

/// Particle system at one discretization level. Row i of `particles` is
/// particle i.
struct Ensemble {
    Matrix particles; // N x d_x
    int level = 0;
    long step_index = 0;
    Variant variant = Variant::Vanilla;

    int n() const { return static_cast<int>(particles.rows()); }
    double dt() const { return std::ldexp(1.0, -level); }
};

struct EnsembleStats {
    Vector mean;
    Matrix cov;
};

/// Per-step standard-normal draws for every particle; callers scale by
/// sqrt(dt) to get Brownian increments. dV is empty for the deterministic
/// variant.
struct StepNoise {
    Matrix dW; // N x d_x
    Matrix dV; // N x d_y, or 0 x 0
};

inline Ensemble init_ensemble(int n, const Model& m, int level, Variant variant,
                              RngStream stream) {
    if (n < 2) throw TooFewParticles("ensemble needs at least 2 particles");
    Ensemble e;
    e.level = level;
    e.variant = variant;
    e.particles = stream.normal_matrix(n, m.d_x) * m.P0_sqrt.transpose();
    e.particles.rowwise() += m.m0.transpose();
    return e;
}

inline EnsembleStats ensemble_stats(const Ensemble& e) {
    const int n = e.n();
    if (n < 2) throw TooFewParticles("sample covariance needs at least 2 particles");
    EnsembleStats s;
    s.mean = e.particles.colwise().mean().transpose();
    Matrix centered = e.particles.rowwise() - s.mean.transpose();
    s.cov = symmetrize(centered.transpose() * centered / (n - 1));
    return s;
}

/// Noise for one step under the stream addressing used throughout: at step
/// k, particle i draws its signal increment from sub-path [k, i, 0] and
/// (vanilla only) its observation perturbation from [k, i, 1]. The
/// deterministic variant never touches the [.,.,1] addresses, so vanilla and
/// deterministic runs on the same stream share signal noise exactly.
inline StepNoise draw_step_noise(const RngStream& noise_stream, long step_index, int n,
                                 const Model& m, Variant variant) {
    StepNoise noise;
    noise.dW.resize(n, m.d_x);
    const bool vanilla = (variant == Variant::Vanilla);
    if (vanilla) noise.dV.resize(n, m.d_y);
    RngStream step_stream = noise_stream.child(static_cast<std::uint64_t>(step_index));
    for (int i = 0; i < n; ++i) {
        RngStream pstream = step_stream.child(static_cast<std::uint64_t>(i));
        RngStream w = pstream.child(0);
        for (int j = 0; j < m.d_x; ++j) noise.dW(i, j) = w.next_normal();
        if (vanilla) {
            RngStream v = pstream.child(1);
            for (int j = 0; j < m.d_y; ++j) noise.dV(i, j) = v.next_normal();
        }
    }
    return noise;
}

/// One Euler step with explicit noise. `dW`/`dV` rows must already be
/// Brownian increments over dt (variance dt per coordinate); the Prop-style
/// identity checks and the noise-free examples enter through this hook.
/// Sample mean and covariance are frozen from the input ensemble.
inline Ensemble enkbf_step_with_noise(const Ensemble& e, const Vector& dY, const Model& m,
                                      const Matrix& dW, const Matrix& dV) {
    const double dt = e.dt();
    EnsembleStats stats = ensemble_stats(e);
    Matrix G = m.gain(stats.cov); // d_x x d_y

    Ensemble next;
    next.level = e.level;
    next.variant = e.variant;
    next.step_index = e.step_index + 1;

    const Matrix& X = e.particles;
    Matrix innovation; // N x d_y, row i as seen by particle i
    if (e.variant == Variant::Vanilla) {
        innovation = -dt * (X * m.C.transpose()) - dV * m.R2_sqrt.transpose();
        innovation.rowwise() += dY.transpose();
    } else {
        innovation = (-0.5 * dt) * (X * m.C.transpose());
        innovation.rowwise() += (dY - 0.5 * dt * m.C * stats.mean).transpose();
    }
    next.particles = X + dt * (X * m.A.transpose()) + dW * m.R1_sqrt.transpose() +
                     innovation * G.transpose();

    if (next.particles.rowwise().norm().maxCoeff() > kBlowUpThreshold)
        throw NumericalBlowUp("particle norm exceeded " + std::to_string(kBlowUpThreshold));
    return next;
}

/// Stream-driven step; dY must cover exactly one step of the ensemble's
/// level.
inline Ensemble enkbf_step(const Ensemble& e, const Vector& dY, const Model& m,
                           const RngStream& noise_stream) {
    StepNoise noise = draw_step_noise(noise_stream, e.step_index, e.n(), m, e.variant);
    const double sdt = std::sqrt(e.dt());
    noise.dW *= sdt;
    if (noise.dV.size() > 0) noise.dV *= sdt;
    return enkbf_step_with_noise(e, dY, m, noise.dW, noise.dV);
}

struct EnkbfRun {
    Ensemble ensemble;
    Vector eta; // terminal ensemble mean
};

/// Runs the particle filter to the horizon at `level` on the shared record.
/// Sub-stream 0 seeds the initial ensemble, sub-stream 1 drives the step
/// noise.
inline EnkbfRun run_enkbf(Variant variant, int n, int level, const ObservationRecord& rec,
                          const Model& m, RngStream stream) {
    Ensemble e = init_ensemble(n, m, level, variant, stream.child(0));
    RngStream noise = stream.child(1);
    for (const Vector& dY : aggregate_increments(rec, level))
        e = enkbf_step(e, dY, m, noise);
    Vector eta = ensemble_stats(e).mean;
    return EnkbfRun{std::move(e), std::move(eta)};
}

struct PairedRun {
    Vector eta_particle;  // interacting ensemble mean
    Vector eta_reference; // ideal i.i.d. system mean, expectation m^l exactly
};

/// Runs the interacting ensemble next to the ideal i.i.d. system whose gain
/// comes from the exact moment recursion, both consuming identical noise
/// draws and the same initial particles. The i.i.d. system is linear with
/// deterministic coefficients, so its ensemble mean is an exactly unbiased
/// estimate of the level-l filter mean; the difference of the two outputs
/// estimates the particle bias with far smaller variance than either output
/// alone.
///
/// The dt^2 term of the exact covariance recursion matches the variant:
/// (A - PS) P (A' - SP) with perturbed observations, the half-gain form
/// (A - PS/2) P (A' - SP/2) without them.
inline PairedRun run_with_iid_reference(Variant variant, int n, int level,
                                        const ObservationRecord& rec, const Model& m,
                                        RngStream stream) {
    Ensemble particle = init_ensemble(n, m, level, variant, stream.child(0));
    Matrix reference = particle.particles;
    RngStream noise = stream.child(1);

    Vector mean_exact = m.m0;
    Matrix cov_exact = m.P0;
    const double dt = particle.dt();
    const double sdt = std::sqrt(dt);
    const bool vanilla = (variant == Variant::Vanilla);

    for (const Vector& dY : aggregate_increments(rec, level)) {
        StepNoise sn = draw_step_noise(noise, particle.step_index, n, m, variant);
        sn.dW *= sdt;
        if (sn.dV.size() > 0) sn.dV *= sdt;

        Matrix U = m.gain(cov_exact);
        Matrix innovation;
        if (vanilla) {
            innovation = -dt * (reference * m.C.transpose()) - sn.dV * m.R2_sqrt.transpose();
            innovation.rowwise() += dY.transpose();
        } else {
            innovation = (-0.5 * dt) * (reference * m.C.transpose());
            innovation.rowwise() += (dY - 0.5 * dt * m.C * mean_exact).transpose();
        }
        reference += dt * (reference * m.A.transpose()) + sn.dW * m.R1_sqrt.transpose() +
                     innovation * U.transpose();

        Vector mean_next = mean_exact + m.A * mean_exact * dt + U * (dY - m.C * mean_exact * dt);
        Matrix shift = vanilla ? Matrix(m.A - cov_exact * m.S)
                               : Matrix(m.A - 0.5 * cov_exact * m.S);
        cov_exact = symmetrize(cov_exact + riccati_drift(cov_exact, m) * dt +
                               shift * cov_exact * shift.transpose() * (dt * dt));
        mean_exact = std::move(mean_next);

        particle = enkbf_step_with_noise(particle, dY, m, sn.dW, sn.dV);
    }

    PairedRun out;
    out.eta_particle = ensemble_stats(particle).mean;
    out.eta_reference = reference.colwise().mean().transpose();
    return out;
}

/// Side-by-side check of the deterministic variant's one-step mean and
/// covariance recursions against direct ensemble statistics, with the
/// standard-normal draws `omega` (one row per particle) shared by both
/// routes. Returns max-norm gaps (mean, covariance); both are exact
/// algebraic identities, so the gaps are pure roundoff.
inline std::pair<double, double> check_deterministic_recursions(const Ensemble& e,
                                                                const Vector& dY,
                                                                const Model& m,
                                                                const Matrix& omega) {
    const double dt = e.dt();
    const double sdt = std::sqrt(dt);
    const int n = e.n();
    EnsembleStats s0 = ensemble_stats(e);
    const Matrix& P = s0.cov;

    Matrix B = Matrix::Identity(m.d_x, m.d_x) + dt * m.A - 0.5 * dt * (P * m.S);
    Matrix U = m.gain(P);
    Matrix alpha = sdt * m.R1_sqrt;
    Vector forcing = U * (dY - 0.5 * dt * m.C * s0.mean);

    // direct step on the particles
    Ensemble advanced;
    advanced.level = e.level;
    advanced.variant = e.variant;
    advanced.step_index = e.step_index + 1;
    advanced.particles = e.particles * B.transpose() + omega * alpha.transpose();
    advanced.particles.rowwise() += forcing.transpose();
    EnsembleStats s1 = ensemble_stats(advanced);

    // closed-form recursions
    Vector omega_bar = omega.colwise().mean().transpose();
    Vector mean_rec = B * s0.mean + forcing + alpha * omega_bar;

    Matrix omega_c = omega.rowwise() - omega_bar.transpose();
    Matrix xi_c = e.particles.rowwise() - s0.mean.transpose();
    Matrix omega_cov = omega_c.transpose() * omega_c / (n - 1);       // d_x x d_x
    Matrix cross = omega_c.transpose() * xi_c / (n - 1);              // omega against xi
    Matrix half_ps = m.A - 0.5 * (P * m.S);
    Matrix sricc = half_ps * P * half_ps.transpose();
    Matrix mixed = alpha * cross * B.transpose();
    Matrix cov_rec = P + riccati_drift(P, m) * dt + sricc * (dt * dt) +
                     alpha * (omega_cov - Matrix::Identity(m.d_x, m.d_x)) * alpha.transpose() +
                     (mixed + mixed.transpose());

    const double mean_gap = (s1.mean - mean_rec).cwiseAbs().maxCoeff();
    const double cov_gap = (s1.cov - cov_rec).cwiseAbs().maxCoeff();
    return {mean_gap, cov_gap};
}

} // namespace enkbf
