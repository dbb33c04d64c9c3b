#pragma once

#include <vector>

#include "cld/core_types.hpp"

namespace cld::dynamics {

// One explicit-Euler unicycle step. Position uses the pre-step speed and
// heading; speed is clamped at zero and heading wrapped by AgentState.
inline AgentState step(const AgentState& s, const AgentAction& a, double dt) {
    if (!(dt > 0.0)) throw InvalidInput("dynamics::step: dt must be > 0");
    double x = s.x + s.v * std::cos(s.theta) * dt;
    double y = s.y + s.v * std::sin(s.theta) * dt;
    double v = s.v + a.accel * dt;
    double theta = s.theta + a.yaw_rate * dt;
    return AgentState(x, y, v, theta);
}

inline Trajectory rollout(const AgentState& s0, const std::vector<AgentAction>& actions,
                          double dt) {
    if (actions.empty()) throw InvalidInput("dynamics::rollout: empty action sequence");
    Trajectory traj;
    traj.dt = dt;
    traj.states.reserve(actions.size() + 1);
    traj.actions = actions;
    traj.states.push_back(s0);
    for (const AgentAction& a : actions) traj.states.push_back(step(traj.states.back(), a, dt));
    return traj;
}

struct KinematicProfile {
    std::vector<double> lon_accel;  // T entries, commanded acceleration
    std::vector<double> lat_accel;  // T entries, centripetal v * yaw_rate
    std::vector<double> jerk;       // T-1 entries, finite difference of lon_accel
};

inline KinematicProfile kinematic_profile(const Trajectory& traj) {
    int T = traj.steps();
    if (static_cast<int>(traj.states.size()) < 3 || T < 2)
        throw InvalidInput("kinematic_profile: trajectory too short (need >= 3 states)");
    KinematicProfile p;
    p.lon_accel.reserve(T);
    p.lat_accel.reserve(T);
    p.jerk.reserve(T - 1);
    for (int i = 0; i < T; ++i) {
        p.lon_accel.push_back(traj.actions[static_cast<size_t>(i)].accel);
        p.lat_accel.push_back(traj.states[static_cast<size_t>(i)].v *
                              traj.actions[static_cast<size_t>(i)].yaw_rate);
    }
    for (int i = 0; i + 1 < T; ++i)
        p.jerk.push_back((p.lon_accel[static_cast<size_t>(i + 1)] - p.lon_accel[static_cast<size_t>(i)]) /
                         traj.dt);
    return p;
}

// True when each consecutive state pair reproduces dynamics::step to tol.
inline bool consistent_with_dynamics(const Trajectory& traj, double tol = 1e-9) {
    if (traj.states.size() != traj.actions.size() + 1) return false;
    for (size_t i = 0; i < traj.actions.size(); ++i) {
        AgentState expect = step(traj.states[i], traj.actions[i], traj.dt);
        const AgentState& got = traj.states[i + 1];
        if (std::abs(expect.x - got.x) > tol || std::abs(expect.y - got.y) > tol ||
            std::abs(expect.v - got.v) > tol ||
            std::abs(wrap_angle(expect.theta - got.theta)) > tol)
            return false;
    }
    return true;
}

}  // namespace cld::dynamics
