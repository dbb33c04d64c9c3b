#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cld/dynamics.hpp"

using namespace cld;
namespace dyn = cld::dynamics;

TEST_CASE("step examples") {
    AgentState rest = dyn::step(AgentState(0, 0, 0, 0), AgentAction(0, 0), 0.1);
    CHECK(rest.x == 0.0);
    CHECK(rest.y == 0.0);
    CHECK(rest.v == 0.0);
    CHECK(rest.theta == 0.0);

    AgentState fwd = dyn::step(AgentState(0, 0, 2, 0), AgentAction(0, 0), 0.1);
    CHECK(fwd.x == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(fwd.y == 0.0);
    CHECK(fwd.v == 2.0);

    AgentState clamped = dyn::step(AgentState(0, 0, 1, 0), AgentAction(-20, 0), 0.1);
    CHECK(clamped.v == 0.0);

    CHECK_THROWS_AS(dyn::step(AgentState(), AgentAction(), 0.0), InvalidInput);
}

TEST_CASE("rollout examples") {
    std::vector<AgentAction> zeros(5, AgentAction(0, 0));
    Trajectory t = dyn::rollout(AgentState(0, 0, 1, 0), zeros, 0.1);
    REQUIRE(t.states.size() == 6);
    for (int i = 0; i <= 5; ++i) {
        CHECK(t.states[static_cast<size_t>(i)].x == doctest::Approx(0.1 * i).epsilon(1e-12));
        CHECK(t.states[static_cast<size_t>(i)].y == 0.0);
    }

    Trajectory one = dyn::rollout(AgentState(1, 2, 3, 0.5), {AgentAction(1, -0.2)}, 0.1);
    AgentState expect = dyn::step(AgentState(1, 2, 3, 0.5), AgentAction(1, -0.2), 0.1);
    CHECK(one.states[1].x == expect.x);
    CHECK(one.states[1].v == expect.v);

    std::vector<AgentAction> turn(10, AgentAction(0, 1.0));
    Trajectory circ = dyn::rollout(AgentState(0, 0, 1, 0), turn, 0.1);
    CHECK(circ.states.back().theta == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(dyn::rollout(AgentState(), {}, 0.1), InvalidInput);
}

TEST_CASE("rollout composition property") {
    RngStream rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        AgentState s0(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 6),
                      rng.uniform(-3, 3));
        std::vector<AgentAction> a1, a2;
        for (int i = 0; i < 7; ++i) a1.emplace_back(rng.uniform(-4, 4), rng.uniform(-1, 1));
        for (int i = 0; i < 5; ++i) a2.emplace_back(rng.uniform(-4, 4), rng.uniform(-1, 1));
        std::vector<AgentAction> all = a1;
        all.insert(all.end(), a2.begin(), a2.end());

        Trajectory full = dyn::rollout(s0, all, 0.1);
        Trajectory first = dyn::rollout(s0, a1, 0.1);
        Trajectory second = dyn::rollout(first.states.back(), a2, 0.1);

        for (size_t i = 0; i < second.states.size(); ++i) {
            const AgentState& a = full.states[a1.size() + i];
            const AgentState& b = second.states[i];
            CHECK(a.x == doctest::Approx(b.x).epsilon(1e-12));
            CHECK(a.y == doctest::Approx(b.y).epsilon(1e-12));
            CHECK(a.v == doctest::Approx(b.v).epsilon(1e-12));
            CHECK(a.theta == doctest::Approx(b.theta).epsilon(1e-12));
        }
    }
}

TEST_CASE("axis-aligned motion conserves y") {
    std::vector<AgentAction> acts(30, AgentAction(0.5, 0.0));
    Trajectory t = dyn::rollout(AgentState(0, 3.5, 2, 0), acts, 0.1);
    for (const auto& s : t.states) CHECK(s.y == 3.5);
}

TEST_CASE("rollout satisfies the dynamics-consistency invariant") {
    RngStream rng(29);
    std::vector<AgentAction> acts;
    for (int i = 0; i < 25; ++i) acts.emplace_back(rng.uniform(-4, 4), rng.uniform(-1, 1));
    Trajectory t = dyn::rollout(AgentState(1, -2, 4, 0.3), acts, 0.1);
    CHECK(dyn::consistent_with_dynamics(t));
    t.states[10].x += 1e-6;
    CHECK(!dyn::consistent_with_dynamics(t));
}

TEST_CASE("kinematic_profile examples") {
    std::vector<AgentAction> cruise(5, AgentAction(0, 0));
    Trajectory straight = dyn::rollout(AgentState(0, 0, 3, 0), cruise, 0.1);
    dyn::KinematicProfile p = dyn::kinematic_profile(straight);
    REQUIRE(p.lon_accel.size() == 5);
    REQUIRE(p.lat_accel.size() == 5);
    REQUIRE(p.jerk.size() == 4);
    for (double v : p.lon_accel) CHECK(v == 0.0);
    for (double v : p.lat_accel) CHECK(v == 0.0);
    for (double v : p.jerk) CHECK(v == 0.0);

    Trajectory arc = dyn::rollout(AgentState(0, 0, 2, 0),
                                  {AgentAction(0, 0.5), AgentAction(0, 0.5)}, 0.1);
    dyn::KinematicProfile pa = dyn::kinematic_profile(arc);
    CHECK(pa.lat_accel[0] == doctest::Approx(1.0));

    Trajectory j = dyn::rollout(AgentState(0, 0, 1, 0),
                                {AgentAction(1.0, 0), AgentAction(1.5, 0)}, 0.1);
    dyn::KinematicProfile pj = dyn::kinematic_profile(j);
    REQUIRE(pj.jerk.size() == 1);
    CHECK(pj.jerk[0] == doctest::Approx(5.0));

    Trajectory tooShort = dyn::rollout(AgentState(), {AgentAction(0, 0)}, 0.1);
    CHECK_THROWS_AS(dyn::kinematic_profile(tooShort), InvalidInput);
}
