#pragma once

#include <algorithm>
#include <vector>

#include "cld/dynamics.hpp"

namespace cld::metrics {

// W1 between two empirical distributions via the quantile-function
// integral. For equal sizes this reduces to the mean absolute difference
// of sorted order statistics.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw InvalidInput("wasserstein_1d: empty sample list");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    size_t n = a.size(), m = b.size();
    size_t i = 0, j = 0;
    double q = 0.0, acc = 0.0;
    while (i < n && j < m) {
        double qa = static_cast<double>(i + 1) / static_cast<double>(n);
        double qb = static_cast<double>(j + 1) / static_cast<double>(m);
        double q_next = std::min(qa, qb);
        acc += (q_next - q) * std::abs(a[i] - b[j]);
        q = q_next;
        if (qa <= qb) ++i;
        if (qb <= qa) ++j;
    }
    return acc;
}

struct KinematicsPool {
    std::vector<double> lon_accel;
    std::vector<double> lat_accel;
    std::vector<double> jerk;

    void absorb(const dynamics::KinematicProfile& p) {
        lon_accel.insert(lon_accel.end(), p.lon_accel.begin(), p.lon_accel.end());
        lat_accel.insert(lat_accel.end(), p.lat_accel.begin(), p.lat_accel.end());
        jerk.insert(jerk.end(), p.jerk.begin(), p.jerk.end());
    }

    static KinematicsPool from_trajectories(const std::vector<Trajectory>& trajs) {
        KinematicsPool pool;
        for (const Trajectory& t : trajs) pool.absorb(dynamics::kinematic_profile(t));
        return pool;
    }
};

struct RealismBreakdown {
    double lon_accel = 0.0;
    double lat_accel = 0.0;
    double jerk = 0.0;
    double mean = 0.0;
};

// Mean W1 across the pooled distributions of longitudinal acceleration,
// lateral acceleration, and jerk.
inline RealismBreakdown realism_score(const KinematicsPool& generated,
                                      const KinematicsPool& reference) {
    RealismBreakdown r;
    r.lon_accel = wasserstein_1d(generated.lon_accel, reference.lon_accel);
    r.lat_accel = wasserstein_1d(generated.lat_accel, reference.lat_accel);
    r.jerk = wasserstein_1d(generated.jerk, reference.jerk);
    r.mean = (r.lon_accel + r.lat_accel + r.jerk) / 3.0;
    return r;
}

enum class FailureTask { no_collision, no_offroad };

inline FailureTask failure_task_from_string(const std::string& s) {
    if (s == "no-collision") return FailureTask::no_collision;
    if (s == "no-offroad") return FailureTask::no_offroad;
    throw InvalidInput("unknown task: " + s + " (expected no-collision or no-offroad)");
}

struct RunOutcome {
    bool collided = false;
    bool went_offroad = false;
};

inline double failure_rate(const std::vector<RunOutcome>& runs, FailureTask task) {
    if (runs.empty()) throw InvalidInput("failure_rate: no runs");
    int fails = 0;
    for (const RunOutcome& r : runs) {
        bool f = task == FailureTask::no_collision ? r.collided : r.went_offroad;
        if (f) ++fails;
    }
    return static_cast<double>(fails) / static_cast<double>(runs.size());
}

}  // namespace cld::metrics
