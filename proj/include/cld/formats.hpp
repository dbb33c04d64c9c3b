#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cld/core_types.hpp"
#include "cld/diffusion.hpp"
#include "cld/simulation.hpp"

namespace cld::formats {

using nlohmann::json;

// ---- run-length encoding for boolean rasters -------------------------------

// [first_value, run_1, run_2, ...]; runs alternate between values.
inline std::vector<int64_t> rle_encode(const std::vector<uint8_t>& cells) {
    std::vector<int64_t> out;
    if (cells.empty()) return out;
    out.push_back(cells[0] ? 1 : 0);
    int64_t run = 1;
    for (size_t i = 1; i < cells.size(); ++i) {
        if ((cells[i] != 0) == (cells[i - 1] != 0)) {
            ++run;
        } else {
            out.push_back(run);
            run = 1;
        }
    }
    out.push_back(run);
    return out;
}

inline std::vector<uint8_t> rle_decode(const std::vector<int64_t>& rle, size_t expected) {
    std::vector<uint8_t> out;
    if (rle.empty()) {
        if (expected != 0) throw SchemaError("rle: empty encoding for non-empty raster");
        return out;
    }
    if (rle.size() < 2) throw SchemaError("rle: truncated encoding");
    uint8_t value = rle[0] ? 1 : 0;
    for (size_t i = 1; i < rle.size(); ++i) {
        if (rle[i] < 0) throw SchemaError("rle: negative run length");
        out.insert(out.end(), static_cast<size_t>(rle[i]), value);
        value = value ? 0 : 1;
    }
    if (out.size() != expected) throw SchemaError("rle: decoded size mismatch");
    return out;
}

// ---- scenario JSONL (cld-scenario-v1) --------------------------------------

inline json state_to_json(const AgentState& s) { return json::array({s.x, s.y, s.v, s.theta}); }

inline AgentState state_from_json(const json& j) {
    return AgentState(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                      j.at(3).get<double>());
}

inline json scenario_to_json(const Scenario& sc) {
    json j;
    j["schema"] = "cld-scenario-v1";
    j["kind"] = sc.kind;
    j["seed"] = sc.seed;
    j["dt_seconds"] = sc.dt;
    j["duration_seconds"] = sc.duration_seconds;
    j["preroll_steps"] = sc.preroll_steps;
    j["map"] = {{"h", sc.map.h},
                {"w", sc.map.w},
                {"origin_x", sc.map.origin_x},
                {"origin_y", sc.map.origin_y},
                {"resolution", sc.map.resolution},
                {"rle", rle_encode(sc.map.drivable)}};
    json agents = json::array();
    for (const AgentState& a : sc.agents) agents.push_back(state_to_json(a));
    j["agents"] = agents;
    json neighbors = json::array();
    for (const NeighborTrack& n : sc.neighbors) {
        json track = json::array();
        for (const AgentState& s : n.states) track.push_back(state_to_json(s));
        neighbors.push_back({{"track", track}});
    }
    j["neighbors"] = neighbors;
    json demo = json::array();
    for (const AgentAction& a : sc.ego_demo) demo.push_back(json::array({a.accel, a.yaw_rate}));
    j["ego_demo"] = demo;
    return j;
}

inline Scenario scenario_from_json(const json& j) {
    if (j.value("schema", "") != "cld-scenario-v1")
        throw SchemaError("scenario schema mismatch: expected cld-scenario-v1, got \"" +
                          j.value("schema", "") + "\"");
    Scenario sc;
    sc.kind = j.value("kind", "");
    sc.seed = j.value("seed", 0ULL);
    sc.dt = j.at("dt_seconds").get<double>();
    sc.duration_seconds = j.at("duration_seconds").get<double>();
    sc.preroll_steps = j.at("preroll_steps").get<int>();
    const json& m = j.at("map");
    sc.map = SemanticMap(m.at("h").get<int>(), m.at("w").get<int>(), m.at("origin_x").get<double>(),
                         m.at("origin_y").get<double>(), m.at("resolution").get<double>());
    sc.map.drivable = rle_decode(m.at("rle").get<std::vector<int64_t>>(),
                                 static_cast<size_t>(sc.map.h) * sc.map.w);
    for (const json& a : j.at("agents")) sc.agents.push_back(state_from_json(a));
    for (const json& n : j.at("neighbors")) {
        NeighborTrack track;
        for (const json& s : n.at("track")) track.states.push_back(state_from_json(s));
        sc.neighbors.push_back(std::move(track));
    }
    for (const json& a : j.at("ego_demo"))
        sc.ego_demo.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
    if (sc.agents.empty()) throw SchemaError("scenario: no agents");
    for (const AgentState& a : sc.agents)
        if (!sc.map.drivable_at(a.x, a.y))
            throw SchemaError("scenario: initial position off the drivable area");
    return sc;
}

inline void write_scenarios(const std::string& path, const std::vector<Scenario>& scenarios) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    for (const Scenario& sc : scenarios) f << scenario_to_json(sc).dump() << "\n";
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<Scenario> read_scenarios(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<Scenario> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaError("scenario file " + path + " line " + std::to_string(line_no) +
                              ": invalid JSON (" + e.what() + ")");
        }
        out.push_back(scenario_from_json(j));
    }
    if (out.empty()) throw SchemaError("scenario file " + path + " contains no scenarios");
    return out;
}

// ---- latent dataset (cld-latents-v1) ---------------------------------------

// JSON header line, then per record the float64 payload:
// [z (dz) | map_crop | history | valid_mask | ego_now(x, y, v, theta)].
inline void write_latents(const std::string& path,
                          const std::vector<diffusion::LatentSample>& samples) {
    if (samples.empty()) throw InvalidInput("write_latents: no samples");
    const Context& c0 = samples[0].ctx;
    json header;
    header["schema"] = "cld-latents-v1";
    header["count"] = samples.size();
    header["latent_dim"] = samples[0].z0.size();
    header["crop_shape"] = c0.map_crop.shape;
    header["history_shape"] = c0.history.shape;
    header["history_steps"] = c0.history_steps;
    header["num_neighbors"] = c0.num_neighbors;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << header.dump() << "\n";
    auto write_all = [&](const std::vector<double>& d) {
        f.write(reinterpret_cast<const char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
    };
    for (const diffusion::LatentSample& s : samples) {
        if (s.z0.size() != samples[0].z0.size() || !s.ctx.map_crop.same_shape(c0.map_crop) ||
            !s.ctx.history.same_shape(c0.history))
            throw InvalidInput("write_latents: inhomogeneous samples");
        write_all(s.z0.data);
        write_all(s.ctx.map_crop.data);
        write_all(s.ctx.history.data);
        write_all(s.ctx.valid_mask.data);
        std::vector<double> ego{s.ctx.ego_now.x, s.ctx.ego_now.y, s.ctx.ego_now.v,
                                s.ctx.ego_now.theta};
        write_all(ego);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<diffusion::LatentSample> read_latents(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("truncated latents file: " + path);
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw SchemaError("latents header is not valid JSON: " + std::string(e.what()));
    }
    if (header.value("schema", "") != "cld-latents-v1")
        throw SchemaError("latents schema mismatch: expected cld-latents-v1 in " + path);

    size_t count = header.at("count").get<size_t>();
    int dz = header.at("latent_dim").get<int>();
    std::vector<int> crop_shape = header.at("crop_shape").get<std::vector<int>>();
    std::vector<int> hist_shape = header.at("history_shape").get<std::vector<int>>();

    auto read_all = [&](std::vector<double>& d) {
        f.read(reinterpret_cast<char*>(d.data()),
               static_cast<std::streamsize>(d.size() * sizeof(double)));
        if (!f) throw IoError("truncated latents payload: " + path);
    };
    std::vector<diffusion::LatentSample> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        diffusion::LatentSample s;
        s.z0 = Tensor({dz});
        read_all(s.z0.data);
        s.ctx.map_crop = Tensor(crop_shape);
        read_all(s.ctx.map_crop.data);
        s.ctx.history = Tensor(hist_shape);
        read_all(s.ctx.history.data);
        s.ctx.valid_mask = Tensor({hist_shape[0]});
        read_all(s.ctx.valid_mask.data);
        std::vector<double> ego(4);
        read_all(ego);
        s.ctx.ego_now = AgentState(ego[0], ego[1], ego[2], ego[3]);
        s.ctx.history_steps = header.at("history_steps").get<int>();
        s.ctx.num_neighbors = header.at("num_neighbors").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

// ---- run logs (cld-run-v1) --------------------------------------------------

inline json run_to_json(const simulation::ClosedLoopRun& run,
                        const simulation::ScenarioRuntime& rt) {
    json j;
    j["schema"] = "cld-run-v1";
    j["scenario_index"] = run.scenario_index;
    j["seed"] = run.seed;
    j["dt_seconds"] = rt.scenario.dt;
    j["collided"] = run.collided;
    j["went_offroad"] = run.went_offroad;
    json ego = json::array();
    for (const AgentState& s : run.ego_states) ego.push_back(state_to_json(s));
    j["ego"] = ego;
    json acts = json::array();
    for (const AgentAction& a : run.ego_actions) acts.push_back(json::array({a.accel, a.yaw_rate}));
    j["ego_actions"] = acts;
    json replans = json::array();
    for (const auto& r : run.replans) replans.push_back({{"t", r.t_step}, {"steps", r.plan_steps}});
    j["replans"] = replans;

    // neighbor positions over the scored window, for plotting
    json neighbors = json::array();
    int preroll = rt.scenario.preroll_steps;
    for (size_t nj = 1; nj < rt.world.size(); ++nj) {
        json track = json::array();
        for (size_t i = 0; i < run.ego_states.size(); ++i) {
            size_t tick = static_cast<size_t>(preroll) + i;
            if (tick < rt.world[nj].size()) {
                const AgentState& s = rt.world[nj][tick];
                track.push_back(json::array({s.x, s.y}));
            }
        }
        neighbors.push_back(track);
    }
    j["neighbors"] = neighbors;
    return j;
}

struct RunRecord {
    int scenario_index = -1;
    uint64_t seed = 0;
    double dt = 0.1;
    bool collided = false;
    bool went_offroad = false;
    Trajectory ego;
    std::vector<std::vector<std::pair<double, double>>> neighbors;
    int replan_count = 0;
};

inline RunRecord run_from_json(const json& j) {
    if (j.value("schema", "") != "cld-run-v1")
        throw SchemaError("run log schema mismatch: expected cld-run-v1, got \"" +
                          j.value("schema", "") + "\"");
    RunRecord r;
    r.scenario_index = j.at("scenario_index").get<int>();
    r.seed = j.value("seed", 0ULL);
    r.dt = j.at("dt_seconds").get<double>();
    r.collided = j.at("collided").get<bool>();
    r.went_offroad = j.at("went_offroad").get<bool>();
    r.ego.dt = r.dt;
    for (const json& s : j.at("ego")) r.ego.states.push_back(state_from_json(s));
    for (const json& a : j.at("ego_actions"))
        r.ego.actions.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
    if (r.ego.states.size() != r.ego.actions.size() + 1)
        throw SchemaError("run log: state/action length mismatch");
    for (const json& n : j.at("neighbors")) {
        std::vector<std::pair<double, double>> track;
        for (const json& p : n) track.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
        r.neighbors.push_back(std::move(track));
    }
    r.replan_count = static_cast<int>(j.at("replans").size());
    return r;
}

inline std::vector<RunRecord> read_runs(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<RunRecord> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaError("run log " + path + " line " + std::to_string(line_no) +
                              ": invalid JSON (" + e.what() + ")");
        }
        out.push_back(run_from_json(j));
    }
    if (out.empty()) throw SchemaError("run log " + path + " contains no runs");
    return out;
}

// ---- flat key-value config --------------------------------------------------

class FlatConfig {
public:
    FlatConfig() = default;

    static FlatConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open config: " + path);
        FlatConfig cfg;
        std::string line;
        size_t line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                size_t a = s.find_first_not_of(" \t\r");
                size_t b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            std::string t = trim(line);
            if (t.empty()) continue;
            size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw SchemaError("config " + path + " line " + std::to_string(line_no) +
                                  ": expected key = value");
            cfg.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw SchemaError("config key " + key + ": not a number (" + it->second + ")");
        }
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoi(it->second);
        } catch (...) {
            throw SchemaError("config key " + key + ": not an integer (" + it->second + ")");
        }
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace cld::formats
