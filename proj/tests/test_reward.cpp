#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cld/dynamics.hpp"
#include "cld/reward.hpp"

using namespace cld;
using namespace cld::reward;

namespace {

Trajectory straight_traj(double x0, double y0, double v, int steps) {
    std::vector<AgentAction> acts(static_cast<size_t>(steps), AgentAction(0, 0));
    return dynamics::rollout(AgentState(x0, y0, v, 0), acts, 0.1);
}

NeighborTracksView still_neighbor(double x, double y, size_t len) {
    NeighborTracksView v;
    v.tracks.push_back(std::vector<AgentState>(len, AgentState(x, y, 0, 0)));
    return v;
}

SemanticMap rect_map(int h, int w, double res, double ox, double oy) {
    SemanticMap m(h, w, ox, oy, res);
    for (auto& c : m.drivable) c = 1;
    return m;
}

// brute-force all-pairs distance scan
bool any_pair_below(const Trajectory& t, const NeighborTracksView& n, double thr) {
    for (size_t i = 0; i < t.states.size(); ++i)
        for (const auto& track : n.tracks) {
            double d = std::hypot(t.states[i].x - track[i].x, t.states[i].y - track[i].y);
            if (d < thr) return true;
        }
    return false;
}

}  // namespace

TEST_CASE("collision_reward examples") {
    Trajectory t = straight_traj(0, 0, 2, 10);

    NeighborTracksView none;
    CHECK(collision_reward(t, none, 2.0) == 0);

    NeighborTracksView hit = still_neighbor(1.0, 0.0, t.states.size());
    CHECK(collision_reward(t, hit, 2.0) == -1);

    // passes at exactly the threshold: strict inequality keeps reward 0
    NeighborTracksView graze = still_neighbor(0.0, 2.0, t.states.size());
    CHECK(collision_reward(t, graze, 2.0) == 0);
    CHECK(!any_pair_below(t, graze, 2.0));

    NeighborTracksView shortTrack;
    shortTrack.tracks.push_back(std::vector<AgentState>(3, AgentState(50, 50, 0, 0)));
    CHECK_THROWS_AS(collision_reward(t, shortTrack, 2.0), InvalidInput);
}

TEST_CASE("collision_reward agrees with the brute-force scan on random scenes") {
    RngStream rng(808);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<AgentAction> acts;
        for (int i = 0; i < 12; ++i) acts.emplace_back(rng.uniform(-3, 3), rng.uniform(-1, 1));
        Trajectory t = dynamics::rollout(
            AgentState(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 5), rng.uniform(-3, 3)),
            acts, 0.1);
        NeighborTracksView n;
        for (int j = 0; j < 3; ++j) {
            std::vector<AgentState> track;
            AgentState s(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0, 4),
                         rng.uniform(-3, 3));
            for (size_t k = 0; k < t.states.size(); ++k) {
                track.push_back(s);
                s = dynamics::step(s, AgentAction(0, 0), 0.1);
            }
            n.tracks.push_back(track);
        }
        double thr = rng.uniform(0.5, 4.0);
        CHECK((collision_reward(t, n, thr) == -1) == any_pair_below(t, n, thr));
    }
}

TEST_CASE("collision monotonicity in the threshold") {
    RngStream rng(809);
    Trajectory t = straight_traj(0, 0, 3, 15);
    NeighborTracksView n = still_neighbor(2.2, 1.0, t.states.size());
    double prev = -2;  // reward is non-decreasing as the threshold shrinks
    for (double thr : {4.0, 3.0, 2.0, 1.0, 0.5}) {
        double r = collision_reward(t, n, thr);
        CHECK(r >= prev);
        prev = r;
    }
}

TEST_CASE("offroad_reward examples") {
    SemanticMap map = rect_map(20, 60, 0.5, 0.0, 0.0);  // 30 m x 10 m drivable
    Trajectory inside = straight_traj(2.0, 5.0, 2, 20);
    CHECK(offroad_reward(inside, map) == 0);

    Trajectory out = straight_traj(25.0, 5.0, 5, 20);  // exits the east edge
    CHECK(out.states.back().x > 30.0);
    CHECK(offroad_reward(out, map) == -1);

    // brute-force point-in-raster oracle on random states
    RngStream rng(810);
    SemanticMap patchy(16, 16, -4.0, -4.0, 0.5);
    for (auto& c : patchy.drivable) c = rng.uniform() < 0.5 ? 1 : 0;
    for (int trial = 0; trial < 100; ++trial) {
        double x = rng.uniform(-5, 5), y = rng.uniform(-5, 5);
        bool oracle = false;
        {
            int col = static_cast<int>(std::floor((x - patchy.origin_x) / patchy.resolution));
            int row = static_cast<int>(std::floor((y - patchy.origin_y) / patchy.resolution));
            oracle = col >= 0 && col < patchy.w && row >= 0 && row < patchy.h &&
                     patchy.cell(row, col) != 0;
        }
        CHECK(patchy.drivable_at(x, y) == oracle);
    }
}

TEST_CASE("cost_J examples") {
    SemanticMap map = rect_map(20, 60, 0.5, 0.0, 0.0);
    RewardConfig cfg;

    Trajectory clean = straight_traj(2.0, 5.0, 2, 20);
    NeighborTracksView none;
    CHECK(cost_J(clean, none, map, cfg) == 0.0);

    Trajectory bad = straight_traj(25.0, 5.0, 6, 20);
    NeighborTracksView hit = still_neighbor(26.0, 5.0, bad.states.size());
    CHECK(cost_J(bad, hit, map, cfg) == 2.0);

    RewardConfig masked;
    masked.alpha = 1.0;
    masked.beta = 0.0;
    Trajectory offroadOnly = straight_traj(25.0, 5.0, 6, 20);
    CHECK(cost_J(offroadOnly, none, map, masked) == 0.0);
}

TEST_CASE("rewards only take values in {-1, 0} and cost is non-negative") {
    RngStream rng(811);
    SemanticMap map = rect_map(30, 30, 1.0, -15, -15);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<AgentAction> acts;
        for (int i = 0; i < 10; ++i) acts.emplace_back(rng.uniform(-4, 4), rng.uniform(-1, 1));
        Trajectory t = dynamics::rollout(AgentState(rng.uniform(-14, 14), rng.uniform(-14, 14),
                                                    rng.uniform(0, 4), rng.uniform(-3, 3)),
                                         acts, 0.1);
        NeighborTracksView n = still_neighbor(rng.uniform(-14, 14), rng.uniform(-14, 14),
                                              t.states.size());
        int cr = collision_reward(t, n, 2.0);
        int orr = offroad_reward(t, map);
        CHECK((cr == 0 || cr == -1));
        CHECK((orr == 0 || orr == -1));
        CHECK(cost_J(t, n, map, RewardConfig{}) >= 0.0);
    }
}

TEST_CASE("translation invariance of rewards") {
    double dx = 113.0, dy = -57.0;
    SemanticMap map = rect_map(20, 60, 0.5, 0.0, 0.0);
    SemanticMap moved = map;
    moved.origin_x += dx;
    moved.origin_y += dy;

    RngStream rng(812);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<AgentAction> acts;
        for (int i = 0; i < 10; ++i) acts.emplace_back(rng.uniform(-3, 3), rng.uniform(-1, 1));
        AgentState s0(rng.uniform(0, 30), rng.uniform(0, 10), rng.uniform(0, 4), rng.uniform(-3, 3));
        Trajectory t = dynamics::rollout(s0, acts, 0.1);
        Trajectory t2 = dynamics::rollout(AgentState(s0.x + dx, s0.y + dy, s0.v, s0.theta), acts, 0.1);

        NeighborTracksView n, n2;
        std::vector<AgentState> track, track2;
        AgentState ns(rng.uniform(0, 30), rng.uniform(0, 10), 0, 0);
        for (size_t k = 0; k < t.states.size(); ++k) {
            track.push_back(ns);
            track2.push_back(AgentState(ns.x + dx, ns.y + dy, 0, 0));
        }
        n.tracks.push_back(track);
        n2.tracks.push_back(track2);

        CHECK(collision_reward(t, n, 2.0) == collision_reward(t2, n2, 2.0));
        CHECK(offroad_reward(t, map) == offroad_reward(t2, moved));
    }
}
