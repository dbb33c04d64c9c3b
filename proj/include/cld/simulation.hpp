#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cld/diffusion.hpp"
#include "cld/reward.hpp"
#include "cld/vae.hpp"

namespace cld::simulation {

// ---- center paths ---------------------------------------------------------

// Dense polyline with cumulative arc length; supports lateral offsets and
// point lookup by arc length.
struct CenterPath {
    std::vector<double> xs, ys, cum;

    double length() const { return cum.empty() ? 0.0 : cum.back(); }

    struct Pose {
        double x, y, heading;
    };

    Pose at(double s) const {
        if (xs.size() < 2) throw InvalidInput("CenterPath: too few points");
        s = std::clamp(s, 0.0, length());
        size_t hi = 1;
        while (hi + 1 < cum.size() && cum[hi] < s) ++hi;
        size_t lo = hi - 1;
        double seg = cum[hi] - cum[lo];
        double f = seg > 0 ? (s - cum[lo]) / seg : 0.0;
        double x = xs[lo] + f * (xs[hi] - xs[lo]);
        double y = ys[lo] + f * (ys[hi] - ys[lo]);
        double heading = std::atan2(ys[hi] - ys[lo], xs[hi] - xs[lo]);
        return {x, y, heading};
    }

    // arc length of the closest polyline vertex to (x, y)
    double project(double x, double y) const {
        double best = 1e18;
        size_t best_i = 0;
        for (size_t i = 0; i < xs.size(); ++i) {
            double d = (xs[i] - x) * (xs[i] - x) + (ys[i] - y) * (ys[i] - y);
            if (d < best) {
                best = d;
                best_i = i;
            }
        }
        return cum[best_i];
    }

    CenterPath lateral_offset(double d) const {
        return variable_offset([d](double) { return d; });
    }

    // lateral shift as a function of arc length
    template <typename OffsetFn>
    CenterPath variable_offset(OffsetFn offset) const {
        CenterPath out;
        for (size_t i = 0; i < xs.size(); ++i) {
            size_t a = i == 0 ? 0 : i - 1;
            size_t b = i + 1 < xs.size() ? i + 1 : i;
            double hx = xs[b] - xs[a], hy = ys[b] - ys[a];
            double n = std::hypot(hx, hy);
            if (n < 1e-12) n = 1.0;
            double d = offset(cum[i]);
            out.xs.push_back(xs[i] - d * hy / n);
            out.ys.push_back(ys[i] + d * hx / n);
        }
        out.recompute_cum();
        return out;
    }

    void recompute_cum() {
        cum.assign(xs.size(), 0.0);
        for (size_t i = 1; i < xs.size(); ++i)
            cum[i] = cum[i - 1] + std::hypot(xs[i] - xs[i - 1], ys[i] - ys[i - 1]);
    }

    static CenterPath line(double x0, double y0, double heading, double len, double step = 0.5) {
        CenterPath p;
        int n = std::max(2, static_cast<int>(std::ceil(len / step)) + 1);
        for (int i = 0; i < n; ++i) {
            double s = len * i / (n - 1);
            p.xs.push_back(x0 + s * std::cos(heading));
            p.ys.push_back(y0 + s * std::sin(heading));
        }
        p.recompute_cum();
        return p;
    }

    static CenterPath arc(double cx, double cy, double radius, double a0, double sweep,
                          double step = 0.5) {
        CenterPath p;
        int n = std::max(2, static_cast<int>(std::ceil(std::abs(sweep) * radius / step)) + 1);
        for (int i = 0; i < n; ++i) {
            double a = a0 + sweep * i / (n - 1);
            p.xs.push_back(cx + radius * std::cos(a));
            p.ys.push_back(cy + radius * std::sin(a));
        }
        p.recompute_cum();
        return p;
    }
};

// ---- scripted driver -------------------------------------------------------

// Piecewise-constant target speed: the target holds between knots and
// jumps at them. Knot times and levels are drawn per scenario, so the next
// target change is not recoverable from a short history window; the speed
// controller turns the jumps into smooth acceleration segments.
struct SpeedProfile {
    double base = 4.0;
    std::vector<double> knot_t;  // seconds, ascending, starting at 0
    std::vector<double> knot_v;  // target speed from each knot onward

    static SpeedProfile draw(double base, double horizon_s, RngStream& rng) {
        SpeedProfile p;
        p.base = base;
        double t = 0.0;
        p.knot_t.push_back(0.0);
        p.knot_v.push_back(base * rng.uniform(0.6, 1.4));
        while (t < horizon_s + 10.0) {
            t += rng.uniform(2.2, 5.5);
            p.knot_t.push_back(t);
            // frequent moderate slow-downs, otherwise a fresh cruise level
            double v = rng.uniform() < 0.3 ? base * rng.uniform(0.3, 0.62)
                                           : base * rng.uniform(0.55, 1.5);
            p.knot_v.push_back(v);
        }
        return p;
    }

    double at(double t_seconds) const {
        if (knot_t.empty()) return base;
        double v = knot_v.front();
        for (size_t i = 0; i < knot_t.size(); ++i) {
            if (knot_t[i] <= t_seconds) v = knot_v[i];
            else break;
        }
        return v;
    }
};

// Pure-pursuit steering with a proportional speed controller and a simple
// yield rule: brake when a scripted neighbor is predicted near the ego's
// forward path within the lookahead window.
struct ScriptedDriver {
    CenterPath path;
    SpeedProfile speed;
    ActionBounds bounds{};
    double dt = 0.1;
    double yield_lookahead_s = 3.0;
    double yield_margin = 1.2;         // added to the collision threshold
    double collision_threshold = 2.0;

    AgentAction action(const AgentState& s, int tick,
                       const std::vector<NeighborTrack>& neighbors) const {
        double s_proj = path.project(s.x, s.y);

        // steering
        double lookahead = std::clamp(1.0 * std::max(s.v, 1.0), 2.0, 8.0);
        CenterPath::Pose goal = path.at(s_proj + lookahead);
        double alpha = wrap_angle(std::atan2(goal.y - s.y, goal.x - s.x) - s.theta);
        double curvature = 2.0 * std::sin(alpha) / lookahead;
        double yaw = std::max(s.v, 0.5) * curvature;

        // speed target, reduced to zero when yielding
        double v_des = speed.at(tick * dt);
        if (should_yield(s, s_proj, tick, neighbors)) v_des = 0.0;
        double accel = 1.5 * (v_des - s.v);

        return AgentAction(accel, yaw).clamped(bounds);
    }

    bool should_yield(const AgentState& s, double s_proj, int tick,
                      const std::vector<NeighborTrack>& neighbors) const {
        if (neighbors.empty()) return false;
        int horizon = static_cast<int>(yield_lookahead_s / dt);
        double guard = collision_threshold + yield_margin;
        double v = std::max(s.v, 0.8);
        for (int i = 1; i <= horizon; ++i) {
            CenterPath::Pose me = path.at(s_proj + v * i * dt);
            size_t future = static_cast<size_t>(tick + i);
            for (const NeighborTrack& n : neighbors) {
                if (future >= n.states.size()) continue;
                const AgentState& other = n.states[future];
                if (std::hypot(me.x - other.x, me.y - other.y) < guard + 0.25 * v) return true;
            }
        }
        return false;
    }
};

// ---- procedural generation -------------------------------------------------

struct GeneratorSpec {
    std::string base;  // straight-road | curved-road | four-way-intersection
    bool hard = false;
};

inline GeneratorSpec parse_generator_spec(const std::string& name) {
    GeneratorSpec spec;
    std::string s = name;
    const std::string suffix = ":hard";
    if (s.size() > suffix.size() && s.substr(s.size() - suffix.size()) == suffix) {
        spec.hard = true;
        s = s.substr(0, s.size() - suffix.size());
    }
    if (s != "straight-road" && s != "curved-road" && s != "four-way-intersection")
        throw InvalidInput("unknown scenario spec: " + name);
    spec.base = s;
    return spec;
}

namespace sim_detail {

inline void rasterize_road(SemanticMap& map, const CenterPath& path, double width) {
    double r = width / 2.0;
    int rad_cells = static_cast<int>(std::ceil(r / map.resolution)) + 1;
    double step = map.resolution * 0.5;
    for (double s = 0.0; s <= path.length(); s += step) {
        CenterPath::Pose p = path.at(s);
        int c0 = static_cast<int>(std::floor((p.x - map.origin_x) / map.resolution));
        int r0 = static_cast<int>(std::floor((p.y - map.origin_y) / map.resolution));
        for (int di = -rad_cells; di <= rad_cells; ++di)
            for (int dj = -rad_cells; dj <= rad_cells; ++dj) {
                int row = r0 + di, col = c0 + dj;
                if (row < 0 || row >= map.h || col < 0 || col >= map.w) continue;
                double cx = map.origin_x + (col + 0.5) * map.resolution;
                double cy = map.origin_y + (row + 0.5) * map.resolution;
                if (std::hypot(cx - p.x, cy - p.y) <= r) map.cell(row, col) = 1;
            }
    }
}

inline SemanticMap map_around(const CenterPath& ego_path, double margin, double res) {
    double min_x = 1e18, max_x = -1e18, min_y = 1e18, max_y = -1e18;
    for (size_t i = 0; i < ego_path.xs.size(); ++i) {
        min_x = std::min(min_x, ego_path.xs[i]);
        max_x = std::max(max_x, ego_path.xs[i]);
        min_y = std::min(min_y, ego_path.ys[i]);
        max_y = std::max(max_y, ego_path.ys[i]);
    }
    min_x -= margin;
    min_y -= margin;
    max_x += margin;
    max_y += margin;
    int w = static_cast<int>(std::ceil((max_x - min_x) / res));
    int h = static_cast<int>(std::ceil((max_y - min_y) / res));
    return SemanticMap(h, w, min_x, min_y, res);
}

// arrival time (seconds) at arc length s under the nominal speed profile
inline double arrival_time(const SpeedProfile& profile, double s_target, double dt,
                           double start_s = 0.0) {
    double s = start_s, t = 0.0;
    while (s < s_target && t < 600.0) {
        s += profile.at(t) * dt;
        t += dt;
    }
    return t;
}

inline NeighborTrack track_along(const CenterPath& path, double s0, double v, int ticks,
                                 double dt) {
    NeighborTrack track;
    track.states.reserve(static_cast<size_t>(ticks));
    for (int i = 0; i < ticks; ++i) {
        double s = s0 + v * i * dt;
        CenterPath::Pose p = path.at(s);
        track.states.emplace_back(p.x, p.y, v, p.heading);
    }
    return track;
}

}  // namespace sim_detail

struct GeneratorOptions {
    double dt = 0.1;
    double duration_seconds = 20.0;
    int preroll_steps = 9;  // H - 1 warm-up ticks before the scored window
    double map_resolution = 0.5;
    double collision_threshold = 2.0;
};

// Expanded scenario: demo rolled out, per-agent world-frame sequences ready
// for context building.
struct ScenarioRuntime {
    Scenario scenario;
    std::vector<std::vector<AgentState>> world;  // [0] = demo ego, then neighbors

    int total_ticks() const { return static_cast<int>(world[0].size()); }

    reward::NeighborTracksView neighbor_window(int t0, int len) const {
        reward::NeighborTracksView v;
        for (size_t j = 1; j < world.size(); ++j) {
            std::vector<AgentState> slice;
            for (int i = 0; i <= len; ++i)
                slice.push_back(world[j][static_cast<size_t>(t0 + i)]);
            v.tracks.push_back(std::move(slice));
        }
        return v;
    }
};

inline ScenarioRuntime make_runtime(Scenario scenario) {
    ScenarioRuntime rt;
    Trajectory demo = dynamics::rollout(scenario.agents.at(0), scenario.ego_demo, scenario.dt);
    rt.world.push_back(demo.states);
    for (const NeighborTrack& n : scenario.neighbors) rt.world.push_back(n.states);
    rt.scenario = std::move(scenario);
    return rt;
}

namespace sim_detail {

struct SceneDraft {
    CenterPath ego_path;
    SpeedProfile ego_speed;
    std::vector<CenterPath> roads;   // all drivable roads (ego road first)
    std::vector<double> road_widths;
    std::vector<NeighborTrack> neighbors;
};

inline Scenario finalize_scenario(const GeneratorSpec& spec, const GeneratorOptions& opt,
                                  uint64_t scenario_seed, const SceneDraft& draft) {
    int run_ticks = static_cast<int>(std::llround(opt.duration_seconds / opt.dt));
    int total = opt.preroll_steps + run_ticks;  // number of demo actions

    Scenario sc;
    sc.kind = spec.base + (spec.hard ? ":hard" : "");
    sc.seed = scenario_seed;
    sc.dt = opt.dt;
    sc.duration_seconds = opt.duration_seconds;
    sc.preroll_steps = opt.preroll_steps;

    sc.map = map_around(draft.ego_path, 20.0, opt.map_resolution);
    for (size_t i = 0; i < draft.roads.size(); ++i)
        rasterize_road(sc.map, draft.roads[i], draft.road_widths[i]);

    ScriptedDriver driver;
    driver.path = draft.ego_path;
    driver.speed = draft.ego_speed;
    driver.dt = opt.dt;
    driver.collision_threshold = opt.collision_threshold;

    CenterPath::Pose start = draft.ego_path.at(0.0);
    AgentState ego(start.x, start.y, draft.ego_speed.at(0.0), start.heading);
    sc.agents.push_back(ego);
    for (const NeighborTrack& n : draft.neighbors) {
        sc.agents.push_back(n.states.at(0));
        sc.neighbors.push_back(n);
    }

    AgentState s = ego;
    sc.ego_demo.reserve(static_cast<size_t>(total));
    for (int tick = 0; tick < total; ++tick) {
        AgentAction a = driver.action(s, tick, sc.neighbors);
        sc.ego_demo.push_back(a);
        s = dynamics::step(s, a, opt.dt);
    }

    // generator contract: the demonstration is clean on both predicates
    Trajectory demo = dynamics::rollout(ego, sc.ego_demo, opt.dt);
    reward::NeighborTracksView view;
    for (const NeighborTrack& n : sc.neighbors) view.tracks.push_back(n.states);
    if (reward::collision_reward(demo, view, opt.collision_threshold) != 0)
        throw InvalidInput("generator: demo collides");
    if (reward::offroad_reward(demo, sc.map) != 0)
        throw InvalidInput("generator: demo leaves the road");
    for (const AgentState& a : sc.agents)
        if (!sc.map.drivable_at(a.x, a.y))
            throw InvalidInput("generator: initial position off the drivable area");
    return sc;
}

inline SceneDraft draft_scene(const GeneratorSpec& spec, const GeneratorOptions& opt,
                              RngStream& rng) {
    SceneDraft d;
    int run_ticks = static_cast<int>(std::llround(opt.duration_seconds / opt.dt));
    int total_ticks = opt.preroll_steps + run_ticks + 1 + 25;  // slack for plan lookahead

    double heading = rng.uniform(-kPi, kPi);
    double width = spec.hard ? rng.uniform(3.2, 4.2) : rng.uniform(6.0, 9.0);
    d.ego_speed = SpeedProfile::draw(rng.uniform(2.5, 5.5),
                                     opt.preroll_steps * opt.dt + opt.duration_seconds, rng);

    double path_len = d.ego_speed.base * 1.55 * (opt.duration_seconds + 4.0) + 30.0;

    CenterPath center;
    if (spec.base == "straight-road") {
        center = CenterPath::line(0.0, 0.0, heading, path_len);
    } else if (spec.base == "curved-road") {
        double radius = rng.uniform(18.0, 40.0);
        double sweep = std::min(path_len / radius, 1.5 * kPi) * (rng.uniform() < 0.5 ? 1.0 : -1.0);
        double a0 = rng.uniform(-kPi, kPi);
        center = CenterPath::arc(0.0, 0.0, radius, a0, sweep);
    } else {  // four-way-intersection
        center = CenterPath::line(0.0, 0.0, heading, path_len);
    }

    // piecewise lateral placement; the pure-pursuit lookahead smooths the
    // steps into lane-change-like maneuvers the history cannot foresee
    double max_off = std::min(std::max(0.0, width / 2.0 - 1.4), 1.6);
    std::vector<double> off_s{0.0}, off_v{rng.uniform(-max_off, max_off)};
    while (off_s.back() < center.length()) {
        off_s.push_back(off_s.back() + rng.uniform(14.0, 30.0));
        off_v.push_back(rng.uniform(-max_off, max_off));
    }
    d.ego_path = center.variable_offset([&off_s, &off_v](double s) {
        double v = off_v.front();
        for (size_t i = 0; i < off_s.size(); ++i) {
            if (off_s[i] <= s) v = off_v[i];
            else break;
        }
        return v;
    });
    d.roads.push_back(center);
    d.road_widths.push_back(width);

    if (spec.base == "four-way-intersection") {
        double cross_s = rng.uniform(25.0, 65.0);  // arc length of the crossing point
        CenterPath::Pose cp = center.at(cross_s);
        double cross_heading = heading + kPi / 2.0;
        double cross_len = 400.0;
        CenterPath cross = CenterPath::line(cp.x - (cross_len / 2.0) * std::cos(cross_heading),
                                            cp.y - (cross_len / 2.0) * std::sin(cross_heading),
                                            cross_heading, cross_len);
        double cross_width = spec.hard ? rng.uniform(3.4, 4.4) : rng.uniform(6.0, 8.0);
        d.roads.push_back(cross);
        d.road_widths.push_back(cross_width);

        double ego_arrival = arrival_time(d.ego_speed, cross_s, opt.dt) +
                             opt.preroll_steps * opt.dt;
        int n_cross = spec.hard ? rng.uniform_int(1, 2) : rng.uniform_int(0, 1);
        for (int j = 0; j < n_cross; ++j) {
            double v = rng.uniform(3.0, 7.0);
            double time_gap = spec.hard ? rng.uniform(-1.0, 1.0)
                                        : (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(5.0, 9.0);
            double t_arrive = std::max(1.0, ego_arrival + time_gap + j * (spec.hard ? 2.2 : 6.0));
            double s0 = cross_len / 2.0 - v * t_arrive;
            if (s0 < 0.0) continue;
            d.neighbors.push_back(track_along(cross, s0, v, total_ticks, opt.dt));
        }
    }

    bool lead = spec.base != "four-way-intersection" &&
                (spec.hard ? true : rng.uniform() < 0.6);
    if (lead) {
        double gap = spec.hard ? rng.uniform(14.0, 24.0) : rng.uniform(20.0, 34.0);
        double v = spec.hard ? d.ego_speed.base * rng.uniform(0.35, 0.6)
                             : d.ego_speed.base * rng.uniform(0.85, 1.15);
        d.neighbors.push_back(track_along(center, gap, v, total_ticks, opt.dt));
    }
    return d;
}

}  // namespace sim_detail

// Procedural scenarios with scripted neighbors and a clean scripted ego
// demonstration. Spec names: straight-road, curved-road,
// four-way-intersection; the ":hard" suffix narrows roads and times
// crossing traffic to conflict with the ego's nominal arrival.
inline std::vector<Scenario> generate_scenarios(const std::string& spec_name, int count,
                                                uint64_t seed,
                                                const GeneratorOptions& opt = {}) {
    GeneratorSpec spec = parse_generator_spec(spec_name);
    if (count < 0) throw InvalidInput("generate_scenarios: negative count");
    std::vector<Scenario> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        uint64_t scenario_seed = mix_seed(seed, static_cast<uint64_t>(i));
        bool done = false;
        for (int attempt = 0; attempt < 25 && !done; ++attempt) {
            RngStream rng(mix_seed(scenario_seed, static_cast<uint64_t>(1000 + attempt)));
            try {
                sim_detail::SceneDraft draft = sim_detail::draft_scene(spec, opt, rng);
                out.push_back(sim_detail::finalize_scenario(spec, opt, scenario_seed, draft));
                done = true;
            } catch (const InvalidInput&) {
                // re-draw jitter and retry
            }
        }
        if (!done)
            throw InvalidInput("generate_scenarios: no clean demonstration after retries (spec " +
                               spec_name + ", index " + std::to_string(i) + ")");
    }
    return out;
}

// A mixed suite: equal thirds of the three base specs.
inline std::vector<Scenario> generate_mixed(int count, uint64_t seed, bool hard,
                                            const GeneratorOptions& opt = {}) {
    static const char* kBases[3] = {"straight-road", "curved-road", "four-way-intersection"};
    std::vector<Scenario> out;
    for (int i = 0; i < count; ++i) {
        std::string name = std::string(kBases[i % 3]) + (hard ? ":hard" : "");
        auto one = generate_scenarios(name, 1, mix_seed(seed, static_cast<uint64_t>(i)), opt);
        out.push_back(std::move(one[0]));
    }
    return out;
}

// ---- VAE dataset windows ---------------------------------------------------

inline std::vector<VaeSample> build_vae_dataset(const std::vector<ScenarioRuntime>& runtimes,
                                                int horizon, int history_steps, int neighbors,
                                                const CropSpec& crop, int windows_per_scenario = 3) {
    std::vector<VaeSample> out;
    for (const ScenarioRuntime& rt : runtimes) {
        int preroll = rt.scenario.preroll_steps;
        int last_start = rt.total_ticks() - 1 - horizon;
        for (int wdx = 0; wdx < windows_per_scenario; ++wdx) {
            int t0 = windows_per_scenario == 1
                         ? preroll
                         : preroll + (last_start - preroll) * wdx / (windows_per_scenario - 1);
            VaeSample s;
            s.ctx = context_from_history(rt.world, rt.scenario.map, t0, history_steps, neighbors,
                                         crop);
            Trajectory window;
            window.dt = rt.scenario.dt;
            for (int i = 0; i <= horizon; ++i)
                window.states.push_back(rt.world[0][static_cast<size_t>(t0 + i)]);
            for (int i = 0; i < horizon; ++i)
                window.actions.push_back(rt.scenario.ego_demo[static_cast<size_t>(t0 + i)]);
            out.push_back(std::move(s));
            out.back().traj = std::move(window);
        }
    }
    return out;
}

// ---- closed loop ------------------------------------------------------------

struct ReplanRecord {
    int t_step = 0;        // tick (within the scored window) the plan was made at
    int plan_steps = 0;    // planned horizon length
    AgentState plan_end{};  // last state of the plan, for debugging/plots
};

struct ClosedLoopRun {
    int scenario_index = -1;
    uint64_t seed = 0;
    std::vector<AgentState> ego_states;    // run_ticks + 1
    std::vector<AgentAction> ego_actions;  // run_ticks
    std::vector<ReplanRecord> replans;
    bool collided = false;
    bool went_offroad = false;
};

enum class DriverKind { model, scripted };

struct ClosedLoopOptions {
    int execute_steps = 5;  // l
    int history_steps = 10;
    int num_neighbors = 4;
    CropSpec crop{};
    double collision_threshold = 2.0;
    DriverKind driver = DriverKind::model;
};

// Plan / execute / re-plan over the scored window. The warm-up history is
// the scripted pre-roll carried by the scenario; the scored window itself
// is fully driver-controlled.
inline ClosedLoopRun closed_loop_run(VaeModel& vae, diffusion::DenoiserModel& dm,
                                     const diffusion::DiffusionSchedule& sched,
                                     const ScenarioRuntime& rt, RngStream& rng,
                                     const ClosedLoopOptions& opt) {
    const Scenario& sc = rt.scenario;
    int run_ticks = static_cast<int>(std::llround(sc.duration_seconds / sc.dt));
    int l = opt.execute_steps;
    if (l < 1 || l > vae.cfg.horizon)
        throw InvalidInput("closed_loop_run: execute steps must be in [1, horizon]");
    if (run_ticks % l != 0)
        throw InvalidInput("closed_loop_run: duration not divisible by the execution horizon");
    if (sc.preroll_steps + 1 < opt.history_steps)
        throw InvalidInput("closed_loop_run: scenario pre-roll shorter than history window");

    int preroll = sc.preroll_steps;
    // world history: ego pre-roll comes from the demo, the rest is executed
    std::vector<std::vector<AgentState>> world;
    world.push_back(std::vector<AgentState>(rt.world[0].begin(),
                                            rt.world[0].begin() + preroll + 1));
    for (size_t j = 1; j < rt.world.size(); ++j) world.push_back(rt.world[j]);

    ClosedLoopRun run;
    run.ego_states.push_back(world[0].back());

    int plans = run_ticks / l;
    for (int p = 0; p < plans; ++p) {
        int t_abs = preroll + p * l;
        Context ctx = context_from_history(world, sc.map, t_abs, opt.history_steps,
                                           opt.num_neighbors, opt.crop);

        std::vector<AgentAction> plan;
        if (opt.driver == DriverKind::model) {
            diffusion::SampleResult s = diffusion::sample(dm, sched, ctx, rng);
            Trajectory planned = decode(vae, s.z0, ctx);
            plan = planned.actions;
        } else {
            plan.assign(sc.ego_demo.begin() + t_abs,
                        sc.ego_demo.begin() + std::min<size_t>(sc.ego_demo.size(),
                                                               static_cast<size_t>(t_abs) +
                                                                   vae.cfg.horizon));
        }

        Trajectory plan_traj = dynamics::rollout(world[0].back(), plan, sc.dt);
        run.replans.push_back({p * l, static_cast<int>(plan.size()), plan_traj.states.back()});

        for (int i = 0; i < l; ++i) {
            AgentAction a = plan[static_cast<size_t>(i)];
            AgentState next = dynamics::step(world[0].back(), a, sc.dt);
            world[0].push_back(next);
            run.ego_states.push_back(next);
            run.ego_actions.push_back(a);
        }
    }

    // outcome flags over the full executed window
    for (size_t i = 0; i < run.ego_states.size() && !(run.collided && run.went_offroad); ++i) {
        const AgentState& s = run.ego_states[i];
        if (!run.went_offroad && !sc.map.drivable_at(s.x, s.y)) run.went_offroad = true;
        if (!run.collided) {
            size_t tick = static_cast<size_t>(preroll) + i;
            for (size_t j = 1; j < world.size(); ++j) {
                if (tick >= world[j].size()) continue;
                const AgentState& o = world[j][tick];
                if (std::hypot(s.x - o.x, s.y - o.y) < opt.collision_threshold) {
                    run.collided = true;
                    break;
                }
            }
        }
    }
    return run;
}

}  // namespace cld::simulation
