#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>

#include "enkbf/unbiased.hpp"
#include "enkbf/stats.hpp"
#include "helpers.hpp"

using namespace enkbf;

namespace {

UnbiasedConfig tiny_config(Variant v = Variant::Deterministic) {
    UnbiasedConfig cfg;
    cfg.variant = v;
    cfg.pmf_L = make_pmf(PmfKind::Geometric, 2, PmfRole::Level, 0.9);
    cfg.pmf_P = make_pmf(PmfKind::Geometric, 2, PmfRole::Particle, 0.9);
    cfg.N0 = 4;
    cfg.l_start = 2;
    cfg.T = 2;
    return cfg;
}

} // namespace

TEST_CASE("single-atom pmf is a point mass", "[unbiased]") {
    Pmf pmf = make_pmf(PmfKind::LogWeighted, 0, PmfRole::Level);
    REQUIRE(pmf.weights.size() == 1);
    REQUIRE(pmf.weights[0] == 1.0);
    RngStream s = RngStream::derive(1, {0});
    for (int i = 0; i < 50; ++i) REQUIRE(sample_pmf(pmf, s) == 0);
}

TEST_CASE("log-weighted pmf matches direct formula evaluation", "[unbiased]") {
    Pmf pmf = make_pmf(PmfKind::LogWeighted, 2, PmfRole::Level);
    const double w0 = 1.0;
    const double w1 = std::pow(std::log2(3.0), 2); // 2^{-1} * 2 * log2(3)^2
    const double w2 = 3.0;                         // 2^{-2} * 3 * log2(4)^2
    const double z = w0 + w1 + w2;
    REQUIRE(pmf.weights[0] == Catch::Approx(w0 / z).epsilon(1e-12));
    REQUIRE(pmf.weights[1] == Catch::Approx(w1 / z).epsilon(1e-12));
    REQUIRE(pmf.weights[2] == Catch::Approx(w2 / z).epsilon(1e-12));
    // decimal spot check
    REQUIRE(pmf.weights[0] == Catch::Approx(0.1535).margin(5e-4));
    REQUIRE(pmf.weights[1] == Catch::Approx(0.3857).margin(5e-4));
    REQUIRE(pmf.weights[2] == Catch::Approx(0.4607).margin(5e-4));
}

TEST_CASE("geometric pmf matches direct formula evaluation", "[unbiased]") {
    Pmf pmf = make_pmf(PmfKind::Geometric, 2, PmfRole::Particle, 0.5);
    const double w0 = 1.0, w1 = std::pow(2.0, -0.5), w2 = 0.5;
    const double z = w0 + w1 + w2;
    REQUIRE(pmf.weights[0] == Catch::Approx(w0 / z).epsilon(1e-12));
    REQUIRE(pmf.weights[1] == Catch::Approx(w1 / z).epsilon(1e-12));
    REQUIRE(pmf.weights[2] == Catch::Approx(w2 / z).epsilon(1e-12));
}

TEST_CASE("geometric pmf rejects invalid exponents", "[unbiased]") {
    REQUIRE_THROWS_AS(make_pmf(PmfKind::Geometric, 3, PmfRole::Particle, 1.0), InvalidAlpha);
    REQUIRE_THROWS_AS(make_pmf(PmfKind::Geometric, 3, PmfRole::Particle, 1.5), InvalidAlpha);
    REQUIRE_THROWS_AS(make_pmf(PmfKind::Geometric, 3, PmfRole::Particle, 0.0), InvalidAlpha);
    REQUIRE_THROWS_AS(make_pmf(PmfKind::Geometric, 3, PmfRole::Particle, -0.3), InvalidAlpha);
}

TEST_CASE("tail sums are normalized and monotone", "[unbiased]") {
    for (PmfKind kind : {PmfKind::LogWeighted, PmfKind::Geometric}) {
        Pmf pmf = make_pmf(kind, 5, PmfRole::Level, 0.9);
        double total = 0.0;
        for (double w : pmf.weights) {
            REQUIRE(w > 0.0);
            total += w;
        }
        REQUIRE(total == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(pmf.tail_sums[0] == Catch::Approx(1.0).margin(1e-12));
        for (std::size_t s = 1; s < pmf.tail_sums.size(); ++s)
            REQUIRE(pmf.tail_sums[s] <= pmf.tail_sums[s - 1]);
        REQUIRE(pmf.tail_sums.back() == Catch::Approx(pmf.weights.back()).margin(1e-15));
    }
}

TEST_CASE("pmf sampling hits the expected frequencies", "[unbiased]") {
    Pmf fair;
    fair.weights = {0.5, 0.5};
    fair.tail_sums = {1.0, 0.5};
    RngStream s = RngStream::derive(33, {0});
    const int n = 100000;
    int zeros = 0;
    for (int i = 0; i < n; ++i)
        if (fair.sample(s) == 0) ++zeros;
    const double freq = static_cast<double>(zeros) / n;
    REQUIRE(std::abs(freq - 0.5) < 4.0 * std::sqrt(0.25 / n));

    RngStream a = RngStream::derive(33, {1});
    RngStream b = RngStream::derive(33, {1});
    for (int i = 0; i < 100; ++i) REQUIRE(fair.sample(a) == fair.sample(b));
}

TEST_CASE("first increment is the convention term", "[unbiased]") {
    Model m = test::small_model(1, 3);
    UnbiasedConfig cfg = tiny_config();
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 5, RngStream::derive(2, {0}));
    XiResult r = xi_increment(1, 0, cfg, rec, m, RngStream::derive(2, {1}));
    REQUIRE(r.xi == r.partials[0]);
}

TEST_CASE("increments telescope exactly", "[unbiased]") {
    Model m = test::small_model(1, 4);
    UnbiasedConfig cfg = tiny_config();
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 6, RngStream::derive(3, {0}));
    RngStream gen = RngStream::derive(3, {9});
    for (int trial = 0; trial < 20; ++trial) {
        const int l = static_cast<int>(gen.next_u64() % 3);
        const int p = static_cast<int>(gen.next_u64() % 4);
        XiResult r = xi_increment(l, p, cfg, rec, m, gen.child(trial));
        Vector total = Vector::Zero(1);
        Vector prev = Vector::Zero(1);
        for (int s = 0; s <= p; ++s) {
            total += r.partials[static_cast<std::size_t>(s)] - prev;
            prev = r.partials[static_cast<std::size_t>(s)];
        }
        REQUIRE((total - r.partials[static_cast<std::size_t>(p)]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("xi cost charges fine and coarse grids", "[unbiased]") {
    Model m = test::small_model(1, 5);
    UnbiasedConfig cfg = tiny_config();
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 5, RngStream::derive(4, {0}));

    // l = 0, p = 1: batches of 4 and 4 at level 2, T = 2 -> 8 * (2*4) = 64
    XiResult a = xi_increment(0, 1, cfg, rec, m, RngStream::derive(4, {1}));
    REQUIRE(a.cost == 64.0);

    // l = 1, p = 0: one batch of 4 on the (3, 2) pair -> 4 * (2*8 + 2*4) = 96
    XiResult b = xi_increment(1, 0, cfg, rec, m, RngStream::derive(4, {2}));
    REQUIRE(b.cost == 96.0);
}

TEST_CASE("degenerate randomization reduces to the base filter", "[unbiased]") {
    Model m = test::small_model(1, 6);
    UnbiasedConfig cfg = tiny_config();
    cfg.pmf_L = make_pmf(PmfKind::Geometric, 0, PmfRole::Level, 0.9);
    cfg.pmf_P = make_pmf(PmfKind::Geometric, 0, PmfRole::Particle, 0.9);
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(5, {0}));

    UnbiasedSample s = single_term_sample(cfg, rec, m, 99, 0);
    REQUIRE(s.l_index == 0);
    REQUIRE(s.p_index == 0);

    RngStream base = RngStream::derive(99, {enkbf::detail::kUnbiasedTag, 0});
    EnkbfRun direct = run_enkbf(cfg.variant, cfg.N0, cfg.l_start, rec, m, base.child(1).child(0));
    REQUIRE(s.value == direct.eta);
}

TEST_CASE("single-term weights divide by both probabilities", "[unbiased]") {
    Model m = test::small_model(1, 7);
    UnbiasedConfig cfg = tiny_config();
    Pmf fair;
    fair.weights = {0.5, 0.5};
    fair.tail_sums = {1.0, 0.5};
    cfg.pmf_L = fair;
    cfg.pmf_P = fair;
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(6, {0}));

    bool checked = false;
    for (long r = 0; r < 50 && !checked; ++r) {
        UnbiasedSample s = single_term_sample(cfg, rec, m, 123, r);
        if (s.l_index == 1 && s.p_index == 1) {
            RngStream base = RngStream::derive(123, {enkbf::detail::kUnbiasedTag,
                                                     static_cast<std::uint64_t>(r)});
            XiResult xi = xi_increment(1, 1, cfg, rec, m, base.child(1));
            REQUIRE((s.value - 4.0 * xi.xi).cwiseAbs().maxCoeff() < 1e-15);
            checked = true;
        }
    }
    REQUIRE(checked);
}

TEST_CASE("coupled sum with p = 0 uses the full tail", "[unbiased]") {
    Model m = test::small_model(1, 8);
    UnbiasedConfig cfg = tiny_config();
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(7, {0}));

    for (long r = 0; r < 50; ++r) {
        UnbiasedSample cs = coupled_sum_sample(cfg, rec, m, 321, r);
        if (cs.p_index != 0) continue;
        RngStream base =
            RngStream::derive(321, {enkbf::detail::kUnbiasedTag, static_cast<std::uint64_t>(r)});
        XiResult xi = xi_increment(cs.l_index, 0, cfg, rec, m, base.child(1));
        REQUIRE((cs.value - xi.xi / cfg.pmf_L(cs.l_index)).cwiseAbs().maxCoeff() < 1e-15);
        return;
    }
    FAIL("no replicate drew p = 0");
}

TEST_CASE("point mass at the top particle level gives the full telescope", "[unbiased]") {
    Model m = test::small_model(1, 9);
    UnbiasedConfig cfg = tiny_config();
    Pmf top; // degenerate test pmf: all mass at p = 2
    top.weights = {0.0, 0.0, 1.0};
    top.tail_sums = {1.0, 1.0, 1.0};
    cfg.pmf_P = top;
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(8, {0}));

    UnbiasedSample cs = coupled_sum_sample(cfg, rec, m, 77, 0);
    REQUIRE(cs.p_index == 2);
    RngStream base = RngStream::derive(77, {enkbf::detail::kUnbiasedTag, 0});
    XiResult xi = xi_increment(cs.l_index, 2, cfg, rec, m, base.child(1));
    Vector expected = xi.partials[2] / cfg.pmf_L(cs.l_index);
    REQUIRE((cs.value - expected).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("estimate with one replicate is that sample", "[unbiased]") {
    Model m = test::small_model(1, 10);
    UnbiasedConfig cfg = tiny_config();
    cfg.M = 1;
    cfg.estimator = EstimatorKind::SingleTerm;
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(9, {0}));
    UnbiasedResult res = unbiased_estimate(cfg, rec, m, 13);
    UnbiasedSample s = single_term_sample(cfg, rec, m, 13, 0);
    REQUIRE(res.estimate == s.value);
    REQUIRE(res.total_cost == s.cost);
}

TEST_CASE("estimates are identical for any worker count", "[unbiased]") {
    Model m = test::small_model(1, 11);
    UnbiasedConfig cfg = tiny_config();
    cfg.M = 64;
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(10, {0}));

    setenv("ENKBF_LAB_THREADS", "1", 1);
    UnbiasedResult serial = unbiased_estimate(cfg, rec, m, 5);
    setenv("ENKBF_LAB_THREADS", "4", 1);
    UnbiasedResult parallel = unbiased_estimate(cfg, rec, m, 5);
    unsetenv("ENKBF_LAB_THREADS");

    REQUIRE(serial.estimate == parallel.estimate);
    REQUIRE(serial.total_cost == parallel.total_cost);
}

TEST_CASE("estimator variance scales like 1/M", "[unbiased]") {
    Model m = test::scalar_model(-0.5, 1.0, 1.0, 1.0, 1.0, 1.0);
    UnbiasedConfig cfg = tiny_config();
    cfg.N0 = 8;
    cfg.T = 1;
    cfg.estimator = EstimatorKind::CoupledSum;
    ObservationRecord rec = simulate_truth_and_observations(m, 1, 4, RngStream::derive(11, {0}));

    auto meta_variance = [&](int M, std::uint64_t tag) {
        std::vector<double> values;
        for (int k = 0; k < 50; ++k) {
            cfg.M = M;
            values.push_back(unbiased_estimate(cfg, rec, m, derive_seed(500, tag, k)).estimate[0]);
        }
        return variance_of(values);
    };
    const double ratio = meta_variance(500, 1) / meta_variance(2000, 2);
    REQUIRE(ratio > 3.0);
    REQUIRE(ratio < 5.3);
}

TEST_CASE("systematic blow-ups abort the estimate", "[unbiased]") {
    Model m = test::scalar_model(3.0, 0.0, 1.0, 1.0, 6.0, 1.0); // explosive drift
    UnbiasedConfig cfg = tiny_config(Variant::Vanilla);
    cfg.l_start = 0;
    cfg.T = 40;
    cfg.M = 8;
    ObservationRecord rec;
    rec.grid = TimeGrid{2, 40};
    rec.dY.assign(static_cast<std::size_t>(rec.grid.n_steps()), Vector::Zero(1));
    rec.truth.assign(static_cast<std::size_t>(rec.grid.n_steps() + 1), Vector::Zero(1));
    REQUIRE_THROWS_AS(unbiased_estimate(cfg, rec, m, 1), NumericalBlowUp);
}

TEST_CASE("sample means agree with the truncated-telescope oracle", "[unbiased]") {
    // scaled-down oracle comparison; the acceptance suite runs the full one
    Model m = test::small_model(1, 12);
    UnbiasedConfig cfg = tiny_config();
    cfg.N0 = 8;
    cfg.l_start = 3;
    cfg.pmf_L = make_pmf(PmfKind::Geometric, 1, PmfRole::Level, 0.9);
    cfg.pmf_P = make_pmf(PmfKind::Geometric, 1, PmfRole::Particle, 0.9);
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 4, RngStream::derive(12, {0}));

    // brute force: E[Xi_{l,p}] per cell from independent replicate averages
    const int cell_reps = 400;
    double oracle = 0.0, oracle_var = 0.0;
    for (int l = 0; l <= 1; ++l)
        for (int p = 0; p <= 1; ++p) {
            std::vector<double> vals;
            for (int r = 0; r < cell_reps; ++r) {
                RngStream s = RngStream::derive(900, {static_cast<std::uint64_t>(l * 2 + p),
                                                      static_cast<std::uint64_t>(r)});
                try {
                    vals.push_back(xi_increment(l, p, cfg, rec, m, s).xi[0]);
                } catch (const NumericalBlowUp&) {
                }
            }
            REQUIRE(vals.size() > static_cast<std::size_t>(cell_reps * 99 / 100));
            oracle += mean_of(vals);
            oracle_var += stderr_of(vals) * stderr_of(vals);
        }

    const int M = 2000;
    for (EstimatorKind ek : {EstimatorKind::SingleTerm, EstimatorKind::CoupledSum}) {
        cfg.estimator = ek;
        cfg.M = M;
        UnbiasedResult res = unbiased_estimate(cfg, rec, m, 901);
        std::vector<double> values;
        for (const auto& s : res.samples) values.push_back(s.value[0]);
        const double se = std::sqrt(stderr_of(values) * stderr_of(values) + oracle_var);
        REQUIRE(std::abs(res.estimate[0] - oracle) < 3.0 * se);
    }
}

TEST_CASE("weighted second-moment sum is stable under truncation growth", "[unbiased]") {
    Model m = test::small_model(1, 13);
    UnbiasedConfig cfg = tiny_config();
    cfg.pmf_L = make_pmf(PmfKind::LogWeighted, 4, PmfRole::Level);
    cfg.pmf_P = make_pmf(PmfKind::LogWeighted, 4, PmfRole::Particle);
    ObservationRecord rec = simulate_truth_and_observations(m, cfg.T, 6, RngStream::derive(14, {0}));

    const double base = variance_condition_sum(cfg, 2, 2, rec, m, 77, 80);
    const double extended = variance_condition_sum(cfg, 3, 3, rec, m, 77, 80);
    REQUIRE(std::isfinite(base));
    REQUIRE(std::abs(extended - base) / base < 0.10);
}
