#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cld/metrics.hpp"

using namespace cld;
using metrics::wasserstein_1d;

namespace {

// independent oracle: sorted pairing for equal-size samples
double w1_sorted_pairing(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

std::vector<double> random_samples(RngStream& rng, int n, double shift = 0.0) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(shift + rng.normal() * rng.uniform(0.5, 2.0));
    return v;
}

}  // namespace

TEST_CASE("wasserstein_1d examples") {
    CHECK(wasserstein_1d({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(wasserstein_1d({0}, {1}) == doctest::Approx(1.0));
    CHECK(wasserstein_1d({0, 1}, {0.5, 1.5}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(wasserstein_1d({}, {1.0}), InvalidInput);
    CHECK_THROWS_AS(wasserstein_1d({1.0}, {}), InvalidInput);
}

TEST_CASE("wasserstein_1d matches the sorted-pairing oracle on 100 random pairs") {
    RngStream rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        int n = rng.uniform_int(1, 60);
        auto a = random_samples(rng, n);
        auto b = random_samples(rng, n, rng.uniform(-1, 1));
        CHECK(std::abs(wasserstein_1d(a, b) - w1_sorted_pairing(a, b)) < 1e-12);
    }
}

TEST_CASE("wasserstein_1d handles unequal sizes (hand-computed quantile integral)") {
    // a = {0, 1}, b = {0}: integral of |F_a^-1 - F_b^-1| = 0.5*|0-0| + 0.5*|1-0|
    CHECK(wasserstein_1d({0, 1}, {0}) == doctest::Approx(0.5));
    // a = {0,0,3}, b = {0,3}: segments (1/3)|0-0| + (1/6)|0-0| + (1/6)|3-0|? no:
    // order stats a: 0,0,3 at thirds; b: 0,3 at halves ->
    // [0,1/3):|0-0| [1/3,1/2):|0-0| [1/2,2/3):|0-3| [2/3,1):|3-3| = (1/6)*3 = 0.5
    CHECK(wasserstein_1d({0, 0, 3}, {0, 3}) == doctest::Approx(0.5));
}

TEST_CASE("metric axioms on random triples") {
    RngStream rng(405);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = random_samples(rng, rng.uniform_int(2, 40));
        auto b = random_samples(rng, rng.uniform_int(2, 40), 0.5);
        auto c = random_samples(rng, rng.uniform_int(2, 40), -0.5);
        double ab = wasserstein_1d(a, b);
        double ba = wasserstein_1d(b, a);
        double ac = wasserstein_1d(a, c);
        double cb = wasserstein_1d(c, b);
        CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        CHECK(ab >= 0.0);
        CHECK(wasserstein_1d(a, a) == doctest::Approx(0.0));
        CHECK(ab <= ac + cb + 1e-12);
    }
}

TEST_CASE("wasserstein translation invariance") {
    RngStream rng(406);
    auto a = random_samples(rng, 37);
    auto b = random_samples(rng, 53, 1.0);
    double base = wasserstein_1d(a, b);
    double c = 17.25;
    auto a2 = a;
    auto b2 = b;
    for (double& x : a2) x += c;
    for (double& x : b2) x += c;
    CHECK(std::abs(wasserstein_1d(a2, b2) - base) < 1e-12);
}

TEST_CASE("realism_score is the mean of the three W1 values") {
    metrics::KinematicsPool gen, ref;
    gen.lon_accel = {0, 1};
    gen.lat_accel = {2, 2};
    gen.jerk = {0};
    ref.lon_accel = {0.5, 1.5};
    ref.lat_accel = {2, 2};
    ref.jerk = {3};

    metrics::RealismBreakdown r = metrics::realism_score(gen, ref);
    CHECK(r.lon_accel == doctest::Approx(wasserstein_1d(gen.lon_accel, ref.lon_accel)));
    CHECK(r.lat_accel == doctest::Approx(0.0));
    CHECK(r.jerk == doctest::Approx(3.0));
    CHECK(r.mean == doctest::Approx((r.lon_accel + r.lat_accel + r.jerk) / 3.0));

    metrics::RealismBreakdown zero = metrics::realism_score(gen, gen);
    CHECK(zero.mean == 0.0);
}

TEST_CASE("failure_rate counting and permutation invariance") {
    std::vector<metrics::RunOutcome> runs = {
        {false, false}, {true, false}, {false, true}, {false, false}};
    CHECK(metrics::failure_rate(runs, metrics::FailureTask::no_collision) == doctest::Approx(0.25));
    CHECK(metrics::failure_rate(runs, metrics::FailureTask::no_offroad) == doctest::Approx(0.25));

    std::swap(runs[0], runs[3]);
    std::swap(runs[1], runs[2]);
    CHECK(metrics::failure_rate(runs, metrics::FailureTask::no_collision) == doctest::Approx(0.25));

    std::vector<metrics::RunOutcome> clean(5);
    CHECK(metrics::failure_rate(clean, metrics::FailureTask::no_collision) == 0.0);
    CHECK_THROWS_AS(metrics::failure_rate({}, metrics::FailureTask::no_collision), InvalidInput);
}
