#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "enkbf/csv.hpp"
#include "enkbf/enkbf.hpp"
#include "enkbf/kbf.hpp"
#include "enkbf/mlmc.hpp"
#include "enkbf/paths.hpp"
#include "enkbf/unbiased.hpp"

namespace enkbf {

/// step,truth_0..,dY_0..; one row per step, plus a final row carrying the
/// terminal state with empty increment cells.
inline void export_record_csv(const ObservationRecord& rec, const std::string& path) {
    const int d_x = static_cast<int>(rec.truth.front().size());
    const int d_y = rec.dY.empty() ? 0 : static_cast<int>(rec.dY.front().size());
    std::vector<std::string> cols{"step"};
    for (int j = 0; j < d_x; ++j) cols.push_back("truth_" + std::to_string(j));
    for (int j = 0; j < d_y; ++j) cols.push_back("dY_" + std::to_string(j));
    CsvWriter csv(path, cols);

    const long n = rec.grid.n_steps();
    for (long k = 0; k <= n; ++k) {
        std::vector<std::string> row{cell(k)};
        for (int j = 0; j < d_x; ++j) row.push_back(cell(rec.truth[static_cast<std::size_t>(k)][j]));
        for (int j = 0; j < d_y; ++j)
            row.push_back(k < n ? cell(rec.dY[static_cast<std::size_t>(k)][j]) : std::string());
        csv.row(row);
    }
}

/// step,t,mean_0..[,cov_00..cov row-major].
inline void export_kbf_csv(const std::vector<KbfState>& traj, const std::string& path,
                           bool with_cov = false) {
    if (traj.empty()) throw ConfigInvalid("empty trajectory");
    const int d_x = static_cast<int>(traj.front().mean.size());
    std::vector<std::string> cols{"step", "t"};
    for (int j = 0; j < d_x; ++j) cols.push_back("mean_" + std::to_string(j));
    if (with_cov)
        for (int i = 0; i < d_x; ++i)
            for (int j = 0; j < d_x; ++j)
                cols.push_back("cov_" + std::to_string(i) + "_" + std::to_string(j));
    CsvWriter csv(path, cols);

    const double dt = traj.front().grid.dt();
    for (const KbfState& s : traj) {
        std::vector<std::string> row{cell(s.step_index), cell(s.step_index * dt)};
        for (int j = 0; j < d_x; ++j) row.push_back(cell(s.mean[j]));
        if (with_cov)
            for (int i = 0; i < d_x; ++i)
                for (int j = 0; j < d_x; ++j) row.push_back(cell(s.cov(i, j)));
        csv.row(row);
    }
}

/// particle,x_0..x_{d_x-1}.
inline void export_ensemble_csv(const Ensemble& e, const std::string& path) {
    const int d_x = static_cast<int>(e.particles.cols());
    std::vector<std::string> cols{"particle"};
    for (int j = 0; j < d_x; ++j) cols.push_back("x_" + std::to_string(j));
    CsvWriter csv(path, cols);
    for (int i = 0; i < e.n(); ++i) {
        std::vector<std::string> row{cell(i)};
        for (int j = 0; j < d_x; ++j) row.push_back(cell(e.particles(i, j)));
        csv.row(row);
    }
}

/// level,cost,value_0.. — one row per multilevel term.
inline void export_ml_csv(const MlEstimate& est, const std::string& path) {
    if (est.terms.empty()) throw ConfigInvalid("empty multilevel estimate");
    const int d_x = static_cast<int>(est.estimate.size());
    std::vector<std::string> cols{"level", "cost"};
    for (int j = 0; j < d_x; ++j) cols.push_back("value_" + std::to_string(j));
    CsvWriter csv(path, cols);
    for (const MlLevelTerm& t : est.terms) {
        std::vector<std::string> row{cell(t.level), cell(t.cost)};
        for (int j = 0; j < d_x; ++j) row.push_back(cell(t.value[j]));
        csv.row(row);
    }
}

/// replicate,l,p,cost,value_0..,status.
inline void export_unbiased_csv(const UnbiasedResult& res, const std::string& path) {
    if (res.samples.empty()) throw ConfigInvalid("no samples to export");
    const int d_x = static_cast<int>(res.estimate.size());
    std::vector<std::string> cols{"replicate", "l", "p", "cost"};
    for (int j = 0; j < d_x; ++j) cols.push_back("value_" + std::to_string(j));
    cols.push_back("status");
    CsvWriter csv(path, cols);
    for (const UnbiasedSample& s : res.samples) {
        std::vector<std::string> row{cell(s.replicate), cell(s.l_index), cell(s.p_index),
                                     cell(s.cost)};
        for (int j = 0; j < d_x; ++j) row.push_back(cell(s.value[j]));
        row.push_back(s.ok ? "ok" : "blowup");
        csv.row(row);
    }
}

inline void write_unbiased_summary_json(const UnbiasedResult& res, const std::string& path) {
    nlohmann::json j;
    j["estimate"] = std::vector<double>(res.estimate.data(), res.estimate.data() + res.estimate.size());
    j["total_cost"] = res.total_cost;
    j["M"] = res.samples.size();
    j["failure_count"] = res.failures;

    // scalar spread of the weighted draws around the estimate
    double var = 0.0;
    long used = 0;
    for (const UnbiasedSample& s : res.samples) {
        if (!s.ok) continue;
        var += (s.value - res.estimate).squaredNorm();
        ++used;
    }
    j["empirical_variance"] = used > 1 ? var / static_cast<double>(used - 1) : 0.0;

    std::ofstream out(path);
    if (!out) throw ConfigInvalid("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

/// FNV-1a over a canonical text form; manifests use it to tie artifacts to
/// the exact run configuration.
inline std::uint64_t fnv1a_hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

struct ManifestEntry {
    std::string artifact;
    std::uint64_t master_seed = 0;
    std::uint64_t spec_hash = 0;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
    CsvWriter csv(path, {"artifact", "master_seed", "spec_hash"});
    for (const auto& e : entries)
        csv.row({e.artifact, std::to_string(e.master_seed), std::to_string(e.spec_hash)});
}

} // namespace enkbf
