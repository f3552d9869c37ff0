#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "enkbf/paths.hpp"
#include "helpers.hpp"

using namespace enkbf;

TEST_CASE("dyadic grid arithmetic is exact", "[paths]") {
    for (int level : {0, 3, 7, 12}) {
        TimeGrid g{level, 10};
        REQUIRE(g.dt() * static_cast<double>(g.n_steps()) == 10.0);
    }
}

TEST_CASE("simulation is deterministic", "[paths]") {
    Model m = test::small_model(2, 4);
    RngStream s = RngStream::derive(123, {0});
    ObservationRecord a = simulate_truth_and_observations(m, 2, 4, s);
    ObservationRecord b = simulate_truth_and_observations(m, 2, 4, s);
    REQUIRE(a.truth.size() == b.truth.size());
    for (std::size_t k = 0; k < a.truth.size(); ++k) REQUIRE(a.truth[k] == b.truth[k]);
    for (std::size_t k = 0; k < a.dY.size(); ++k) REQUIRE(a.dY[k] == b.dY[k]);
    REQUIRE(a.truth.size() == static_cast<std::size_t>(2 * 16 + 1));
    REQUIRE(a.dY.size() == static_cast<std::size_t>(2 * 16));
}

TEST_CASE("frozen dynamics keep the truth at the initial mean", "[paths]") {
    const double eps = 1e-30;
    Matrix A = Matrix::Zero(1, 1), C = Matrix::Zero(1, 1);
    Matrix R1 = eps * Matrix::Identity(1, 1), R2 = Matrix::Identity(1, 1);
    Matrix P0 = eps * Matrix::Identity(1, 1);
    Vector m0(1);
    m0 << 6.0;
    Model m = Model::create(A, C, R1, R2, m0, P0);
    ObservationRecord rec = simulate_truth_and_observations(m, 5, 4, RngStream::derive(9, {0}));
    for (const Vector& x : rec.truth) REQUIRE(std::abs(x[0] - 6.0) < 1e-10);
}

TEST_CASE("one Euler step matches hand evaluation", "[paths]") {
    Model m = test::scalar_model(-1.0, 0.0, 1.0, 1.0, 2.0, 1.0);
    RngStream s = RngStream::derive(77, {5});
    ObservationRecord rec = simulate_truth_and_observations(m, 1, 3, s);

    // replay the generator's own sub-streams
    RngStream init = s.child(0);
    RngStream sig = s.child(1);
    const double x0 = 2.0 + init.next_normal();
    const double g = sig.next_normal();
    const double expected = x0 - x0 / 8.0 + g / std::sqrt(8.0);
    REQUIRE(rec.truth[0][0] == x0);
    REQUIRE(rec.truth[1][0] == Catch::Approx(expected).epsilon(1e-15));
}

TEST_CASE("runaway drift raises a blow-up", "[paths]") {
    Model m = test::scalar_model(10.0, 0.0, 1.0, 1.0, 6.0, 1.0);
    REQUIRE_THROWS_AS(simulate_truth_and_observations(m, 40, 0, RngStream::derive(1, {0})),
                      NumericalBlowUp);
}

TEST_CASE("increment aggregation sums fine blocks", "[paths]") {
    ObservationRecord rec;
    rec.grid = TimeGrid{2, 1}; // 4 steps
    for (double v : {1.0, 2.0, 3.0, 4.0}) {
        Vector x(1);
        x << v;
        rec.dY.push_back(x);
    }
    rec.truth.assign(5, Vector::Zero(1));

    auto pairwise = aggregate_increments(rec, 1);
    REQUIRE(pairwise.size() == 2);
    REQUIRE(pairwise[0][0] == 3.0);
    REQUIRE(pairwise[1][0] == 7.0);

    auto identity = aggregate_increments(rec, 2);
    REQUIRE(identity.size() == 4);
    for (int k = 0; k < 4; ++k) REQUIRE(identity[k] == rec.dY[k]);

    auto full = aggregate_increments(rec, 0);
    REQUIRE(full.size() == 1);
    REQUIRE(full[0][0] == 10.0);

    REQUIRE_THROWS_AS(aggregate_increments(rec, 3), LevelAboveFine);
}

TEST_CASE("aggregation is exactly associative across levels", "[paths]") {
    Model m = test::small_model(2, 8);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        ObservationRecord rec =
            simulate_truth_and_observations(m, 1, 6, RngStream::derive(seed, {0}));
        auto direct = aggregate_increments(rec, 2);

        ObservationRecord mid;
        mid.grid = TimeGrid{4, 1};
        mid.dY = aggregate_increments(rec, 4);
        mid.truth.assign(static_cast<std::size_t>(mid.grid.n_steps() + 1), Vector::Zero(2));
        auto via_mid = aggregate_increments(mid, 2);

        REQUIRE(direct.size() == via_mid.size());
        for (std::size_t k = 0; k < direct.size(); ++k) REQUIRE(direct[k] == via_mid[k]);
    }
}

TEST_CASE("signal increments have Brownian statistics", "[paths]") {
    Model m = test::scalar_model(0.0, 0.0, 1.0, 1.0, 0.0, 1.0);
    const int T = 100000; // level 0: one unit-variance increment per step
    ObservationRecord rec = simulate_truth_and_observations(m, T, 0, RngStream::derive(3, {1}));
    double sum = 0, sq = 0;
    for (long k = 0; k < T; ++k) {
        const double dw = rec.truth[static_cast<std::size_t>(k) + 1][0] -
                          rec.truth[static_cast<std::size_t>(k)][0];
        sum += dw;
        sq += dw * dw;
    }
    const double mean = sum / T;
    const double var = sq / T - mean * mean;
    REQUIRE(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(T)));
    REQUIRE(var == Catch::Approx(1.0).epsilon(0.05));
}
