#pragma once

#include <vector>

#include "cld/core_types.hpp"

namespace cld::reward {

enum class RewardMode { collision_only, offroad_only, combined };

inline RewardMode reward_mode_from_string(const std::string& s) {
    if (s == "collision") return RewardMode::collision_only;
    if (s == "offroad") return RewardMode::offroad_only;
    if (s == "combined") return RewardMode::combined;
    throw InvalidInput("unknown reward mode: " + s + " (expected collision|offroad|combined)");
}

struct RewardConfig {
    double collision_threshold = 2.0;  // [m], strict less-than
    double alpha = 1.0;                // collision weight in the cost
    double beta = 1.0;                 // off-road weight in the cost
    RewardMode mode = RewardMode::combined;
};

// Per-step neighbor positions aligned with a trajectory's states.
struct NeighborTracksView {
    // tracks[j][t] is neighbor j at the trajectory's state index t
    std::vector<std::vector<AgentState>> tracks;
};

// -1 iff some state comes strictly within `threshold` of a neighbor.
inline int collision_reward(const Trajectory& traj, const NeighborTracksView& neighbors,
                            double threshold) {
    if (!(threshold > 0.0)) throw InvalidInput("collision_reward: threshold must be > 0");
    size_t n_states = traj.states.size();
    for (const auto& track : neighbors.tracks)
        if (track.size() < n_states)
            throw InvalidInput("collision_reward: neighbor track shorter than trajectory");
    for (size_t t = 0; t < n_states; ++t) {
        const AgentState& s = traj.states[t];
        for (const auto& track : neighbors.tracks) {
            double dx = s.x - track[t].x;
            double dy = s.y - track[t].y;
            if (std::sqrt(dx * dx + dy * dy) < threshold) return -1;
        }
    }
    return 0;
}

// -1 iff any state lies on a non-drivable or out-of-bounds cell.
inline int offroad_reward(const Trajectory& traj, const SemanticMap& map) {
    for (const AgentState& s : traj.states)
        if (!map.drivable_at(s.x, s.y)) return -1;
    return 0;
}

// J = alpha * 1[collision] + beta * 1[off-road].
inline double cost_J(const Trajectory& traj, const NeighborTracksView& neighbors,
                     const SemanticMap& map, const RewardConfig& cfg) {
    double collided = collision_reward(traj, neighbors, cfg.collision_threshold) == -1 ? 1.0 : 0.0;
    double offroad = offroad_reward(traj, map) == -1 ? 1.0 : 0.0;
    return cfg.alpha * collided + cfg.beta * offroad;
}

// Scalar fine-tuning reward for the configured mode. Values stay in
// {-1, 0} for the single-predicate modes; combined sums the two.
inline double trajectory_reward(const Trajectory& traj, const NeighborTracksView& neighbors,
                                const SemanticMap& map, const RewardConfig& cfg) {
    switch (cfg.mode) {
        case RewardMode::collision_only:
            return collision_reward(traj, neighbors, cfg.collision_threshold);
        case RewardMode::offroad_only:
            return offroad_reward(traj, map);
        case RewardMode::combined:
            return -cost_J(traj, neighbors, map, cfg);
    }
    throw InvalidInput("trajectory_reward: bad mode");
}

}  // namespace cld::reward
