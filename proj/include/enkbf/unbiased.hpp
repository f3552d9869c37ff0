#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "enkbf/mlmc.hpp"
#include "enkbf/threads.hpp"

namespace enkbf {

enum class PmfKind { LogWeighted, Geometric };
enum class PmfRole { Level, Particle };
enum class EstimatorKind { SingleTerm, CoupledSum };

inline const char* estimator_name(EstimatorKind k) {
    return k == EstimatorKind::SingleTerm ? "st" : "cs";
}

/// Truncated level distribution. weights[i] is the probability of index i;
/// tail_sums[s] = sum_{q >= s} weights[q], used by the coupled-sum weights.
struct Pmf {
    PmfKind kind = PmfKind::LogWeighted;
    double alpha = 0.9;
    int support_max = 0;
    std::vector<double> weights;
    std::vector<double> tail_sums;

    double operator()(int i) const { return weights.at(static_cast<std::size_t>(i)); }

    /// Inverse-CDF draw from one uniform.
    int sample(RngStream& stream) const {
        const double u = stream.next_uniform();
        double cum = 0.0;
        for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
            cum += weights[i];
            if (u <= cum) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }
};

/// Builds a truncated pmf over {0..support_max}.
///
/// LogWeighted follows w_k ~ 2^{-k} (k+1) log2(k+2)^2, the choice whose
/// inverse-weighted second moments stay summable. Geometric follows
/// w_k ~ 2^{-alpha k} with 0 < alpha < 1. The role fixes the interpretation
/// (time level vs particle level); the N_0 / base-level proportionality
/// constants cancel in the normalization, so the weights do not depend on
/// them.
inline Pmf make_pmf(PmfKind kind, int support_max, PmfRole role, double alpha = 0.9) {
    (void)role;
    if (support_max < 0) throw ConfigInvalid("pmf support_max must be >= 0");
    if (kind == PmfKind::Geometric && !(alpha > 0.0 && alpha < 1.0))
        throw InvalidAlpha("geometric pmf needs 0 < alpha < 1");

    Pmf pmf;
    pmf.kind = kind;
    pmf.alpha = alpha;
    pmf.support_max = support_max;
    pmf.weights.resize(static_cast<std::size_t>(support_max) + 1);
    for (int k = 0; k <= support_max; ++k) {
        const double w = (kind == PmfKind::LogWeighted)
                             ? std::ldexp(1.0, -k) * (k + 1) * std::pow(std::log2(k + 2.0), 2)
                             : std::pow(2.0, -alpha * k);
        pmf.weights[static_cast<std::size_t>(k)] = w;
    }
    double total = 0.0;
    for (double w : pmf.weights) total += w;
    for (double& w : pmf.weights) w /= total;

    pmf.tail_sums.resize(pmf.weights.size());
    double tail = 0.0;
    for (int k = support_max; k >= 0; --k) {
        tail += pmf.weights[static_cast<std::size_t>(k)];
        pmf.tail_sums[static_cast<std::size_t>(k)] = tail;
    }
    return pmf;
}

inline int sample_pmf(const Pmf& pmf, RngStream& stream) { return pmf.sample(stream); }

struct UnbiasedConfig {
    Variant variant = Variant::Deterministic;
    EstimatorKind estimator = EstimatorKind::CoupledSum;
    Pmf pmf_L;
    Pmf pmf_P;
    int N0 = 25;     // base particle count, N_p = N0 * 2^p
    int l_start = 3; // absolute level of the coarsest filter
    int T = 10;
    int M = 1; // replicate count for the averaged estimator

    void validate() const {
        if (N0 < 2) throw ConfigInvalid("N0 must be >= 2");
        if (M < 1) throw ConfigInvalid("M must be >= 1");
        if (l_start < 0) throw ConfigInvalid("l_start must be >= 0");
        if (T < 1) throw ConfigInvalid("horizon must be >= 1");
        if (pmf_L.weights.empty() || pmf_P.weights.empty())
            throw ConfigInvalid("pmfs must be initialized");
    }
};

/// One coupled increment of the doubly indexed telescope.
struct XiResult {
    Vector xi;                    // Xi_{l,p} = D_p - D_{p-1}
    std::vector<Vector> partials; // D_0..D_p
    double cost = 0.0;            // particle-steps across all batches
};

/// Particle-steps needed by the level-l term: fine grid plus, for l >= 1,
/// the coarse companion.
inline double xi_steps(int l, int l_start, int T) {
    double s = static_cast<double>(T) * std::ldexp(1.0, l_start + l);
    if (l >= 1) s += static_cast<double>(T) * std::ldexp(1.0, l_start + l - 1);
    return s;
}

/// Computes Xi_{l,p} from p+1 independent batches of sizes N_q - N_{q-1}
/// (N_q = N0 2^q, N_{-1} = 0). Batch q runs a single filter at the base
/// level when l = 0 and a coupled pair at (l_start + l, l_start + l - 1)
/// otherwise. D_s is the N_s-weighted combination over batches 0..s, so the
/// increments telescope exactly: sum_{s<=p} Xi_{l,s} = D_p.
inline XiResult xi_increment(int l, int p, const UnbiasedConfig& cfg,
                             const ObservationRecord& rec, const Model& m, RngStream stream) {
    if (l < 0 || p < 0) throw ConfigInvalid("level indices must be >= 0");
    if (cfg.l_start + l > rec.grid.level)
        throw LevelAboveFine("requested level above the record's fine level");

    XiResult out;
    out.partials.reserve(static_cast<std::size_t>(p) + 1);
    Vector weighted_sum = Vector::Zero(m.d_x); // sum_q (N_q - N_{q-1}) * batch value
    long n_prev = 0;
    for (int q = 0; q <= p; ++q) {
        const long n_q = static_cast<long>(cfg.N0) << q;
        const int batch = static_cast<int>(n_q - n_prev);
        Vector value;
        if (l == 0) {
            value = run_enkbf(cfg.variant, batch, cfg.l_start, rec, m,
                              stream.child(static_cast<std::uint64_t>(q)))
                        .eta;
        } else {
            value = run_coupled(cfg.variant, batch, cfg.l_start + l, rec, m,
                                stream.child(static_cast<std::uint64_t>(q)))
                        .increment;
        }
        out.cost += static_cast<double>(batch) * xi_steps(l, cfg.l_start, cfg.T);
        weighted_sum += static_cast<double>(batch) * value;
        out.partials.push_back(weighted_sum / static_cast<double>(n_q));
        n_prev = n_q;
    }
    out.xi = (p == 0) ? out.partials[0]
                      : Vector(out.partials[static_cast<std::size_t>(p)] -
                               out.partials[static_cast<std::size_t>(p) - 1]);
    return out;
}

/// One weighted draw of the randomized estimator.
struct UnbiasedSample {
    Vector value;
    int l_index = 0;
    int p_index = 0;
    double cost = 0.0;
    std::uint64_t master_seed = 0;
    long replicate = 0;
    bool ok = true;
};

namespace detail {

inline constexpr std::uint64_t kUnbiasedTag = 0x756e62ull; // "unb"

// Shared front half of both estimators: draw (l, p), then compute the
// increment batches for that cell.
struct DrawnIncrement {
    int l = 0;
    int p = 0;
    XiResult xi;
};

inline DrawnIncrement draw_increment(const UnbiasedConfig& cfg, const ObservationRecord& rec,
                                     const Model& m, std::uint64_t master_seed, long replicate) {
    RngStream base =
        RngStream::derive(master_seed, {kUnbiasedTag, static_cast<std::uint64_t>(replicate)});
    RngStream index_stream = base.child(0);
    DrawnIncrement d;
    d.l = cfg.pmf_L.sample(index_stream);
    d.p = cfg.pmf_P.sample(index_stream);
    d.xi = xi_increment(d.l, d.p, cfg, rec, m, base.child(1));
    return d;
}

} // namespace detail

/// Single-term estimator: Xi_{l,p} / (P_L(l) P_P(p)).
inline UnbiasedSample single_term_sample(const UnbiasedConfig& cfg, const ObservationRecord& rec,
                                         const Model& m, std::uint64_t master_seed,
                                         long replicate) {
    auto d = detail::draw_increment(cfg, rec, m, master_seed, replicate);
    UnbiasedSample s;
    s.l_index = d.l;
    s.p_index = d.p;
    s.cost = d.xi.cost;
    s.master_seed = master_seed;
    s.replicate = replicate;
    s.value = d.xi.xi / (cfg.pmf_L(d.l) * cfg.pmf_P(d.p));
    return s;
}

/// Coupled-sum estimator: sum_{s<=p} Xi_{l,s} / (P_L(l) tail_P(s)), reusing
/// the batches of one xi_increment call, so the cost equals the single-term
/// cost at the same (l, p).
inline UnbiasedSample coupled_sum_sample(const UnbiasedConfig& cfg, const ObservationRecord& rec,
                                         const Model& m, std::uint64_t master_seed,
                                         long replicate) {
    auto d = detail::draw_increment(cfg, rec, m, master_seed, replicate);
    UnbiasedSample s;
    s.l_index = d.l;
    s.p_index = d.p;
    s.cost = d.xi.cost;
    s.master_seed = master_seed;
    s.replicate = replicate;
    s.value = Vector::Zero(m.d_x);
    Vector prev = Vector::Zero(m.d_x);
    for (int q = 0; q <= d.p; ++q) {
        Vector xi_s = d.xi.partials[static_cast<std::size_t>(q)] - prev;
        prev = d.xi.partials[static_cast<std::size_t>(q)];
        s.value += xi_s / (cfg.pmf_L(d.l) * cfg.pmf_P.tail_sums[static_cast<std::size_t>(q)]);
    }
    return s;
}

struct UnbiasedResult {
    Vector estimate;
    double total_cost = 0.0;
    std::vector<UnbiasedSample> samples; // one per replicate, failures flagged
    long failures = 0;
};

/// Average of M independent weighted draws. Replicate r derives its streams
/// from (master_seed, r) only, so the result does not depend on scheduling.
/// Replicates that blow up are flagged and excluded; more than 1% of them
/// failing aborts the estimate.
inline UnbiasedResult unbiased_estimate(const UnbiasedConfig& cfg, const ObservationRecord& rec,
                                        const Model& m, std::uint64_t master_seed) {
    cfg.validate();
    UnbiasedResult out;
    out.samples.resize(static_cast<std::size_t>(cfg.M));

    parallel_for(cfg.M, [&](long r) {
        try {
            out.samples[static_cast<std::size_t>(r)] =
                (cfg.estimator == EstimatorKind::SingleTerm)
                    ? single_term_sample(cfg, rec, m, master_seed, r)
                    : coupled_sum_sample(cfg, rec, m, master_seed, r);
        } catch (const NumericalBlowUp&) {
            UnbiasedSample failed;
            failed.value = Vector::Zero(m.d_x);
            failed.master_seed = master_seed;
            failed.replicate = r;
            failed.ok = false;
            out.samples[static_cast<std::size_t>(r)] = std::move(failed);
        }
    });

    out.estimate = Vector::Zero(m.d_x);
    long used = 0;
    for (const UnbiasedSample& s : out.samples) {
        if (!s.ok) {
            ++out.failures;
            continue;
        }
        out.estimate += s.value;
        out.total_cost += s.cost;
        ++used;
    }
    if (out.failures * 100 > cfg.M)
        throw NumericalBlowUp("more than 1% of replicates blew up (" +
                              std::to_string(out.failures) + " of " + std::to_string(cfg.M) + ")");
    if (used > 0) out.estimate /= static_cast<double>(used);
    return out;
}

/// Empirical check of the summability condition behind the finite-variance
/// requirement: sum over the truncated support of E||Xi_{l,p}||^2 divided by
/// the unnormalized pmf weights. Uses unnormalized weights because the
/// untruncated normalizers are finite constants and only convergence of the
/// sum matters; extending the truncation should barely move the value.
inline double variance_condition_sum(const UnbiasedConfig& cfg, int l_max, int p_max,
                                     const ObservationRecord& rec, const Model& m,
                                     std::uint64_t master_seed, int replicates) {
    auto unnorm = [](const Pmf& pmf, int k) {
        return (pmf.kind == PmfKind::LogWeighted)
                   ? std::ldexp(1.0, -k) * (k + 1) * std::pow(std::log2(k + 2.0), 2)
                   : std::pow(2.0, -pmf.alpha * k);
    };

    struct Cell {
        double second_moment = 0.0;
    };
    std::vector<Cell> cells(static_cast<std::size_t>((l_max + 1) * (p_max + 1)));
    parallel_for(static_cast<long>(cells.size()), [&](long idx) {
        const int l = static_cast<int>(idx) / (p_max + 1);
        const int p = static_cast<int>(idx) % (p_max + 1);
        // cell address depends on (l, p) only, so enlarging the truncation
        // re-uses identical draws for the shared cells
        const std::uint64_t cell_id = static_cast<std::uint64_t>(l) * 1000 + p;
        double acc = 0.0;
        for (int r = 0; r < replicates; ++r) {
            RngStream s = RngStream::derive(
                master_seed, {0x766373ull, cell_id, static_cast<std::uint64_t>(r)});
            acc += xi_increment(l, p, cfg, rec, m, s).xi.squaredNorm();
        }
        cells[static_cast<std::size_t>(idx)].second_moment = acc / replicates;
    });

    double sum = 0.0;
    for (int l = 0; l <= l_max; ++l)
        for (int p = 0; p <= p_max; ++p)
            sum += cells[static_cast<std::size_t>(l * (p_max + 1) + p)].second_moment /
                   (unnorm(cfg.pmf_L, l) * unnorm(cfg.pmf_P, p));
    return sum;
}

} // namespace enkbf
