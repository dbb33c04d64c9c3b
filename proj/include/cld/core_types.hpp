#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "cld/common.hpp"
#include "cld/tensor.hpp"

namespace cld {

// Wrap an angle into (-pi, pi].
inline double wrap_angle(double theta) {
    require_finite(theta, "wrap_angle");
    double r = std::fmod(theta, kTwoPi);
    if (r > kPi) r -= kTwoPi;
    if (r <= -kPi) r += kTwoPi;
    return r;
}

// Kinematic state of one agent. Heading is always wrapped into (-pi, pi],
// speed is clamped at zero, and every field is finite.
struct AgentState {
    double x = 0.0;      // east position [m]
    double y = 0.0;      // north position [m]
    double v = 0.0;      // speed [m/s]
    double theta = 0.0;  // heading [rad], in (-pi, pi]

    AgentState() = default;

    AgentState(double x_, double y_, double v_, double theta_) {
        require_finite(x_, "AgentState.x");
        require_finite(y_, "AgentState.y");
        require_finite(v_, "AgentState.v");
        x = x_;
        y = y_;
        v = std::max(0.0, v_);
        theta = wrap_angle(theta_);
    }
};

struct ActionBounds {
    double accel_max = 4.0;     // [m/s^2]
    double yaw_rate_max = 1.0;  // [rad/s]
};

struct AgentAction {
    double accel = 0.0;     // longitudinal acceleration [m/s^2]
    double yaw_rate = 0.0;  // [rad/s]

    AgentAction() = default;
    AgentAction(double a, double w) : accel(a), yaw_rate(w) {}

    AgentAction clamped(const ActionBounds& b) const {
        return {std::clamp(accel, -b.accel_max, b.accel_max),
                std::clamp(yaw_rate, -b.yaw_rate_max, b.yaw_rate_max)};
    }

    bool within(const ActionBounds& b, double tol = 1e-12) const {
        return std::abs(accel) <= b.accel_max + tol && std::abs(yaw_rate) <= b.yaw_rate_max + tol;
    }
};

// A rollout: T+1 states, T actions, fixed tick. Built by dynamics::rollout.
struct Trajectory {
    std::vector<AgentState> states;
    std::vector<AgentAction> actions;
    double dt = 0.1;

    int steps() const { return static_cast<int>(actions.size()); }
};

// Boolean drivable-area raster. Cell (row, col) spans
// [origin_x + col*res, origin_x + (col+1)*res) x [origin_y + row*res, ...).
struct SemanticMap {
    int h = 0;
    int w = 0;
    double origin_x = 0.0;
    double origin_y = 0.0;
    double resolution = 1.0;  // meters per cell
    std::vector<uint8_t> drivable;  // h*w, row-major

    SemanticMap() = default;

    SemanticMap(int h_, int w_, double ox, double oy, double res)
        : h(h_), w(w_), origin_x(ox), origin_y(oy), resolution(res) {
        if (h <= 0 || w <= 0) throw InvalidInput("SemanticMap: empty grid");
        if (!(res > 0.0)) throw InvalidInput("SemanticMap: resolution must be > 0");
        drivable.assign(static_cast<size_t>(h) * w, 0);
    }

    uint8_t& cell(int row, int col) { return drivable[static_cast<size_t>(row) * w + col]; }
    uint8_t cell(int row, int col) const { return drivable[static_cast<size_t>(row) * w + col]; }

    // Nearest-cell lookup; points outside the raster are not drivable.
    bool drivable_at(double x, double y) const {
        int col = static_cast<int>(std::floor((x - origin_x) / resolution));
        int row = static_cast<int>(std::floor((y - origin_y) / resolution));
        if (col < 0 || col >= w || row < 0 || row >= h) return false;
        return cell(row, col) != 0;
    }
};

struct CropSpec {
    int channels = 1;
    int h = 32;
    int w = 32;
    double extent_m = 32.0;  // side length of the square crop
};

// Conditioning input: ego-centric map crop plus H recent states of the ego
// and its M nearest neighbors, all expressed in the ego frame at the
// context time (ego at origin, heading along +x).
struct Context {
    Tensor map_crop;      // [C, Hc, Wc], values in [0, 1]
    Tensor history;       // [M+1, H, 4]: (x, y, v, rel_heading); row 0 = ego
    Tensor valid_mask;    // [M+1]: 1 if the row holds a real agent
    AgentState ego_now;   // world frame, anchor for decoding / rollout
    int num_neighbors = 0;  // M
    int history_steps = 0;  // H
};

// Open-loop neighbor script: one state per simulation tick.
struct NeighborTrack {
    std::vector<AgentState> states;
};

struct Scenario {
    std::string kind;      // generator spec name
    uint64_t seed = 0;
    SemanticMap map;
    std::vector<AgentState> agents;         // initial states, ego first
    std::vector<NeighborTrack> neighbors;   // scripted, preroll + run ticks
    std::vector<AgentAction> ego_demo;      // scripted demo actions
    double dt = 0.1;
    double duration_seconds = 20.0;
    int preroll_steps = 9;  // warm-up ticks before the scored window
};

namespace detail {

struct EgoFrame {
    double ex, ey, c, s;  // origin and heading cos/sin

    explicit EgoFrame(const AgentState& ego)
        : ex(ego.x), ey(ego.y), c(std::cos(ego.theta)), s(std::sin(ego.theta)) {}

    void to_local(double x, double y, double& u, double& w) const {
        double dx = x - ex;
        double dy = y - ey;
        u = c * dx + s * dy;
        w = -s * dx + c * dy;
    }

    void to_world(double u, double w, double& x, double& y) const {
        x = ex + c * u - s * w;
        y = ey + s * u + c * w;
    }
};

}  // namespace detail

// Build the conditioning context at step t from per-agent world-frame state
// sequences (ego is row 0). Neighbors are the M nearest at time t, ties
// broken by agent index; missing slots are zero rows with valid_mask 0.
inline Context context_from_history(const std::vector<std::vector<AgentState>>& world_states,
                                    const SemanticMap& map, int t, int H, int M,
                                    const CropSpec& crop) {
    if (world_states.empty()) throw InvalidInput("context_from_history: no agents");
    if (H < 1) throw InvalidInput("context_from_history: H must be >= 1");
    if (t < H - 1) throw InvalidInput("context_from_history: insufficient history (t < H-1)");
    if (static_cast<int>(world_states[0].size()) <= t)
        throw InvalidInput("context_from_history: ego missing at step t");

    const AgentState ego = world_states[0][static_cast<size_t>(t)];
    detail::EgoFrame frame(ego);

    // nearest-M neighbor selection at time t
    struct Cand {
        double d2;
        int idx;
    };
    std::vector<Cand> cands;
    for (int a = 1; a < static_cast<int>(world_states.size()); ++a) {
        if (static_cast<int>(world_states[a].size()) <= t) continue;
        const AgentState& s = world_states[a][static_cast<size_t>(t)];
        double dx = s.x - ego.x, dy = s.y - ego.y;
        cands.push_back({dx * dx + dy * dy, a});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.d2 != b.d2) return a.d2 < b.d2;
        return a.idx < b.idx;
    });

    Context ctx;
    ctx.num_neighbors = M;
    ctx.history_steps = H;
    ctx.ego_now = ego;
    ctx.history = Tensor({M + 1, H, 4});
    ctx.valid_mask = Tensor({M + 1});

    auto fill_row = [&](int row, const std::vector<AgentState>& seq) {
        for (int k = 0; k < H; ++k) {
            const AgentState& s = seq[static_cast<size_t>(t - H + 1 + k)];
            double u, w;
            frame.to_local(s.x, s.y, u, w);
            ctx.history.at(row, k, 0) = u;
            ctx.history.at(row, k, 1) = w;
            ctx.history.at(row, k, 2) = s.v;
            ctx.history.at(row, k, 3) = wrap_angle(s.theta - ego.theta);
        }
        ctx.valid_mask[row] = 1.0;
    };

    fill_row(0, world_states[0]);
    for (int m = 0; m < M && m < static_cast<int>(cands.size()); ++m) {
        int a = cands[static_cast<size_t>(m)].idx;
        if (static_cast<int>(world_states[a].size()) < t + 1 ||
            t - H + 1 < 0)
            continue;
        if (static_cast<int>(world_states[a].size()) < H) continue;
        fill_row(m + 1, world_states[static_cast<size_t>(a)]);
    }

    // ego-centric rotated crop, nearest-cell sampled
    ctx.map_crop = Tensor({crop.channels, crop.h, crop.w});
    double cell_h = crop.extent_m / crop.h;
    double cell_w = crop.extent_m / crop.w;
    for (int i = 0; i < crop.h; ++i) {
        for (int j = 0; j < crop.w; ++j) {
            double u = (j + 0.5) * cell_w - crop.extent_m / 2.0;  // forward
            double lat = (i + 0.5) * cell_h - crop.extent_m / 2.0;
            double x, y;
            frame.to_world(u, lat, x, y);
            ctx.map_crop.at(0, i, j) = map.drivable_at(x, y) ? 1.0 : 0.0;
        }
    }
    return ctx;
}

}  // namespace cld
