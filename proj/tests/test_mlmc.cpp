#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "enkbf/mlmc.hpp"
#include "enkbf/stats.hpp"
#include "helpers.hpp"

using namespace enkbf;

TEST_CASE("drift-free coupling keeps fine and coarse together", "[mlmc]") {
    Model m = test::gain_free_model(2, 0.0);
    CoupledEnsemble ce = init_coupled(8, m, 3, Variant::Vanilla, RngStream::derive(1, {0}));
    Vector dY = Vector::Zero(2);
    CoupledEnsemble next = coupled_step(ce, dY, dY, m, RngStream::derive(1, {1}));
    const double gap = (next.fine.particles - next.coarse.particles).cwiseAbs().maxCoeff();
    REQUIRE(gap < 1e-13);
}

TEST_CASE("noise-free coupling gap matches hand arithmetic", "[mlmc]") {
    Model m = test::scalar_model(1.0, 1.0, 1.0, 1.0);
    CoupledEnsemble ce;
    ce.fine.particles = Matrix::Constant(2, 1, 1.0); // identical particles: zero gain
    ce.fine.level = 1;
    ce.fine.variant = Variant::Deterministic;
    ce.coarse = ce.fine;
    ce.coarse.level = 0;

    Vector dY = Vector::Zero(1);
    Matrix zw = Matrix::Zero(2, 1);
    CoupledEnsemble next = coupled_step_with_noise(ce, dY, dY, m, zw, Matrix(), zw, Matrix());
    REQUIRE(next.fine.particles(0, 0) == Catch::Approx(2.25).margin(1e-14));
    REQUIRE(next.coarse.particles(0, 0) == Catch::Approx(2.0).margin(1e-14));
    const double gap = next.fine.particles(0, 0) - next.coarse.particles(0, 0);
    REQUIRE(gap == Catch::Approx(0.25).margin(1e-14));
}

TEST_CASE("coupled runs are bit-reproducible", "[mlmc]") {
    Model m = test::small_model(2, 2);
    ObservationRecord rec = simulate_truth_and_observations(m, 2, 5, RngStream::derive(3, {0}));
    CoupledRun a = run_coupled(Variant::Deterministic, 16, 4, rec, m, RngStream::derive(3, {1}));
    CoupledRun b = run_coupled(Variant::Deterministic, 16, 4, rec, m, RngStream::derive(3, {1}));
    REQUIRE(a.increment == b.increment);
    REQUIRE(a.fine_mean == b.fine_mean);
}

TEST_CASE("identical dynamics give a vanishing increment", "[mlmc]") {
    const double eps = 1e-30;
    Matrix A = Matrix::Zero(1, 1), C = Matrix::Zero(1, 1);
    Matrix R1 = eps * Matrix::Identity(1, 1), R2 = Matrix::Identity(1, 1);
    Vector m0(1);
    m0 << 6.0;
    Model m = Model::create(A, C, R1, R2, m0, Matrix::Identity(1, 1));
    ObservationRecord rec = simulate_truth_and_observations(m, 2, 5, RngStream::derive(4, {0}));
    CoupledRun run = run_coupled(Variant::Vanilla, 8, 5, rec, m, RngStream::derive(4, {1}));
    REQUIRE(run.increment.norm() < 1e-10);
}

TEST_CASE("coupled increment variance decays with the level", "[mlmc]") {
    // centered variance isolates the dt_l / N coupling term; the mean gap
    // between levels is the O(dt_l) bias whose square would dominate at
    // fixed N and show slope -2 instead
    Model m = test::small_model(1, 12);
    const int T = 5, reps = 200, n = 64;
    ObservationRecord rec = simulate_truth_and_observations(m, T, 7, RngStream::derive(50, {0}));
    std::vector<std::pair<double, double>> pts;
    for (int lev = 4; lev <= 7; ++lev) {
        std::vector<double> incs;
        for (int r = 0; r < reps; ++r) {
            CoupledRun run = run_coupled(Variant::Deterministic, n, lev, rec, m,
                                         RngStream::derive(51, {static_cast<std::uint64_t>(lev),
                                                               static_cast<std::uint64_t>(r)}));
            incs.push_back(run.increment[0]);
        }
        pts.emplace_back(lev, std::log2(variance_of(incs)));
    }
    SlopeFit fit = fit_line(pts);
    REQUIRE(fit.slope > -1.5);
    REQUIRE(fit.slope < -0.6);
}

TEST_CASE("summed fine increments carry the coarse variance", "[mlmc]") {
    Model m = test::small_model(1, 7);
    const int level = 4; // fine dt = 1/16, coarse dt = 1/8
    const double dt = std::ldexp(1.0, -level);
    RngStream noise = RngStream::derive(8, {0});
    double sum = 0, sq = 0;
    long count = 0;
    for (int step = 0; step < 100; ++step) {
        StepNoise a = draw_step_noise(noise, 2 * step, 500, m, Variant::Deterministic);
        StepNoise b = draw_step_noise(noise, 2 * step + 1, 500, m, Variant::Deterministic);
        Matrix coarse = std::sqrt(dt) * (a.dW + b.dW);
        for (int i = 0; i < coarse.rows(); ++i) {
            sum += coarse(i, 0);
            sq += coarse(i, 0) * coarse(i, 0);
            ++count;
        }
    }
    const double mean = sum / count;
    const double var = sq / count - mean * mean;
    REQUIRE(var == Catch::Approx(2.0 * dt).epsilon(0.05));
}

TEST_CASE("single-level config reduces to the plain filter", "[mlmc]") {
    Model m = test::small_model(2, 9);
    ObservationRecord rec = simulate_truth_and_observations(m, 2, 4, RngStream::derive(9, {0}));
    MlConfig cfg;
    cfg.l_start = cfg.l_target = 3;
    cfg.particles[3] = 32;
    cfg.variant = Variant::Vanilla;
    cfg.T = 2;
    RngStream stream = RngStream::derive(9, {1});
    MlEstimate est = ml_estimate(cfg, rec, m, stream);
    EnkbfRun direct = run_enkbf(Variant::Vanilla, 32, 3, rec, m, stream.child(3));
    REQUIRE(est.estimate == direct.eta);
    REQUIRE(est.terms.size() == 1);
}

TEST_CASE("cost follows the particle-step formula", "[mlmc]") {
    Model m = test::small_model(1, 10);
    ObservationRecord rec = simulate_truth_and_observations(m, 1, 4, RngStream::derive(10, {0}));
    MlConfig cfg;
    cfg.l_start = 3;
    cfg.l_target = 4;
    cfg.particles = {{3, 8}, {4, 4}};
    cfg.variant = Variant::Deterministic;
    cfg.T = 1;
    MlEstimate est = ml_estimate(cfg, rec, m, RngStream::derive(10, {1}));
    REQUIRE(est.cost == 128.0); // 8*8 + 4*16
}

TEST_CASE("multilevel telescope agrees with the single-level filter on average", "[mlmc]") {
    Model m = test::scalar_model(-1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    const int T = 5, seeds = 400;
    ObservationRecord rec = simulate_truth_and_observations(m, T, 4, RngStream::derive(11, {0}));

    MlConfig cfg;
    cfg.l_start = 2;
    cfg.l_target = 4;
    cfg.particles = {{2, 128}, {3, 64}, {4, 32}};
    cfg.variant = Variant::Deterministic;
    cfg.T = T;

    std::vector<double> ml_vals, single_vals;
    for (int s = 0; s < seeds; ++s) {
        RngStream stream = RngStream::derive(12, {static_cast<std::uint64_t>(s)});
        ml_vals.push_back(ml_estimate(cfg, rec, m, stream.child(0)).estimate[0]);
        single_vals.push_back(
            run_enkbf(Variant::Deterministic, 128, 4, rec, m, stream.child(1)).eta[0]);
    }
    const double gap = std::abs(mean_of(ml_vals) - mean_of(single_vals));
    const double se = std::sqrt(stderr_of(ml_vals) * stderr_of(ml_vals) +
                                stderr_of(single_vals) * stderr_of(single_vals));
    REQUIRE(gap < 3.0 * se);
}

TEST_CASE("equipartition allocation matches the closed form", "[mlmc]") {
    auto alloc = allocate_particles(5, 3, 100);
    REQUIRE(alloc.at(3) == 300);
    REQUIRE(alloc.at(4) == 150);
    REQUIRE(alloc.at(5) == 75);

    auto single = allocate_particles(3, 3, 100);
    REQUIRE(single.size() == 1);
    REQUIRE(single.at(3) == 100);

    auto big = allocate_particles(9, 2, 64);
    int prev = 1 << 30;
    for (const auto& [lev, n] : big) {
        REQUIRE(n <= prev);
        prev = n;
    }
}

TEST_CASE("config validation rejects broken setups and warns on odd ones", "[mlmc]") {
    MlConfig cfg;
    cfg.l_start = 3;
    cfg.l_target = 4;
    cfg.particles = {{3, 8}};
    REQUIRE_THROWS_AS(validate_config(cfg), ConfigInvalid); // missing level 4

    cfg.particles = {{3, 8}, {4, 1}};
    REQUIRE_THROWS_AS(validate_config(cfg), ConfigInvalid); // too few particles

    cfg.particles = {{3, 8}, {4, 16}};
    auto warnings = validate_config(cfg);
    REQUIRE(warnings.size() == 1);

    cfg.l_target = 2;
    REQUIRE_THROWS_AS(validate_config(cfg), ConfigInvalid);
}
