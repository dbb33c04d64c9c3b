#pragma once

#include <atomic>
#include <filesystem>
#include <thread>

#include "cld/checkpoint.hpp"
#include "cld/formats.hpp"
#include "cld/metrics.hpp"
#include "cld/rlft.hpp"

namespace cld::pipeline {

using nlohmann::json;

// One knob set for the whole pipeline; every stage reads the slice it
// needs. Keys in config files carry explicit units (e.g. dt_seconds).
struct PipelineConfig {
    double dt_seconds = 0.1;
    int horizon_steps = 20;
    int history_steps = 10;
    int num_neighbors = 4;
    int crop_cells = 32;
    double crop_extent_meters = 32.0;
    int latent_dim = 16;

    int vae_traj_hidden = 40;
    int vae_hist_hidden = 28;
    int vae_map_feat = 28;
    int vae_dec_hidden = 40;
    double kl_weight = 0.02;
    int vae_epochs = 200;
    double vae_lr = 3e-3;
    int vae_batch = 32;

    int dm_hidden = 112;
    int dm_temb_dim = 16;
    int dm_temb_feat = 32;
    int dm_map_feat = 32;
    int dm_hist_hidden = 32;
    int diffusion_steps = 50;
    double beta_min = 1e-4;
    double beta_max = 0.2;
    int dm_epochs = 800;
    double dm_lr = 2e-3;
    int dm_batch = 32;

    int rl_rollouts = 32;
    int rl_inner_epochs = 2;
    double rl_clip = 0.1;
    double rl_lr = 1e-4;
    int rl_iterations = 200;

    double collision_threshold_meters = 2.0;
    int execute_steps = 5;
    int windows_per_scenario = 5;

    static PipelineConfig from_file(const std::string& path) {
        formats::FlatConfig f = formats::FlatConfig::from_file(path);
        PipelineConfig c;
        c.dt_seconds = f.get_double("dt_seconds", c.dt_seconds);
        c.horizon_steps = f.get_int("horizon_steps", c.horizon_steps);
        c.history_steps = f.get_int("history_steps", c.history_steps);
        c.num_neighbors = f.get_int("num_neighbors", c.num_neighbors);
        c.crop_cells = f.get_int("crop_cells", c.crop_cells);
        c.crop_extent_meters = f.get_double("crop_extent_meters", c.crop_extent_meters);
        c.latent_dim = f.get_int("latent_dim", c.latent_dim);
        c.vae_traj_hidden = f.get_int("vae_traj_hidden", c.vae_traj_hidden);
        c.vae_hist_hidden = f.get_int("vae_hist_hidden", c.vae_hist_hidden);
        c.vae_map_feat = f.get_int("vae_map_feat", c.vae_map_feat);
        c.vae_dec_hidden = f.get_int("vae_dec_hidden", c.vae_dec_hidden);
        c.kl_weight = f.get_double("kl_weight", c.kl_weight);
        c.vae_epochs = f.get_int("vae_epochs", c.vae_epochs);
        c.vae_lr = f.get_double("vae_lr", c.vae_lr);
        c.vae_batch = f.get_int("vae_batch", c.vae_batch);
        c.dm_hidden = f.get_int("dm_hidden", c.dm_hidden);
        c.dm_temb_dim = f.get_int("dm_temb_dim", c.dm_temb_dim);
        c.dm_temb_feat = f.get_int("dm_temb_feat", c.dm_temb_feat);
        c.dm_map_feat = f.get_int("dm_map_feat", c.dm_map_feat);
        c.dm_hist_hidden = f.get_int("dm_hist_hidden", c.dm_hist_hidden);
        c.diffusion_steps = f.get_int("diffusion_steps", c.diffusion_steps);
        c.beta_min = f.get_double("beta_min", c.beta_min);
        c.beta_max = f.get_double("beta_max", c.beta_max);
        c.dm_epochs = f.get_int("dm_epochs", c.dm_epochs);
        c.dm_lr = f.get_double("dm_lr", c.dm_lr);
        c.dm_batch = f.get_int("dm_batch", c.dm_batch);
        c.rl_rollouts = f.get_int("rl_rollouts", c.rl_rollouts);
        c.rl_inner_epochs = f.get_int("rl_inner_epochs", c.rl_inner_epochs);
        c.rl_clip = f.get_double("rl_clip", c.rl_clip);
        c.rl_lr = f.get_double("rl_lr", c.rl_lr);
        c.rl_iterations = f.get_int("rl_iterations", c.rl_iterations);
        c.collision_threshold_meters =
            f.get_double("collision_threshold_meters", c.collision_threshold_meters);
        c.execute_steps = f.get_int("execute_steps", c.execute_steps);
        c.windows_per_scenario = f.get_int("windows_per_scenario", c.windows_per_scenario);
        return c;
    }

    CropSpec crop() const { return CropSpec{1, crop_cells, crop_cells, crop_extent_meters}; }

    VaeConfig vae_config() const {
        VaeConfig v;
        v.latent_dim = latent_dim;
        v.horizon = horizon_steps;
        v.history_steps = history_steps;
        v.num_neighbors = num_neighbors;
        v.crop = crop();
        v.traj_hidden = vae_traj_hidden;
        v.hist_hidden = vae_hist_hidden;
        v.map_feat = vae_map_feat;
        v.dec_hidden = vae_dec_hidden;
        v.kl_weight = kl_weight;
        v.dt = dt_seconds;
        return v;
    }

    diffusion::DenoiserConfig denoiser_config() const {
        diffusion::DenoiserConfig d;
        d.latent_dim = latent_dim;
        d.history_steps = history_steps;
        d.num_neighbors = num_neighbors;
        d.crop = crop();
        d.map_feat = dm_map_feat;
        d.hist_hidden = dm_hist_hidden;
        d.temb_dim = dm_temb_dim;
        d.temb_feat = dm_temb_feat;
        d.hidden = dm_hidden;
        return d;
    }

    diffusion::DiffusionSchedule schedule() const {
        return diffusion::make_schedule(diffusion_steps, beta_min, beta_max);
    }

    simulation::ClosedLoopOptions closed_loop_options() const {
        simulation::ClosedLoopOptions o;
        o.execute_steps = execute_steps;
        o.history_steps = history_steps;
        o.num_neighbors = num_neighbors;
        o.crop = crop();
        o.collision_threshold = collision_threshold_meters;
        return o;
    }
};

// ---- checkpoint metadata ----------------------------------------------------

inline json vae_meta(const VaeConfig& c) {
    return json{{"model", "vae"},
                {"latent_dim", c.latent_dim},
                {"horizon", c.horizon},
                {"history_steps", c.history_steps},
                {"num_neighbors", c.num_neighbors},
                {"crop_cells", c.crop.h},
                {"crop_extent_meters", c.crop.extent_m},
                {"traj_hidden", c.traj_hidden},
                {"hist_hidden", c.hist_hidden},
                {"map_feat", c.map_feat},
                {"dec_hidden", c.dec_hidden},
                {"kl_weight", c.kl_weight},
                {"dt_seconds", c.dt},
                {"accel_max", c.bounds.accel_max},
                {"yaw_rate_max", c.bounds.yaw_rate_max}};
}

inline void save_vae(const std::string& path, const VaeModel& m) {
    save_checkpoint(path, m.params, vae_meta(m.cfg));
}

inline VaeModel load_vae(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("model", "") != "vae")
        throw SchemaError("checkpoint " + path + " is not a vae checkpoint");
    VaeConfig c;
    c.latent_dim = ck.meta.at("latent_dim").get<int>();
    c.horizon = ck.meta.at("horizon").get<int>();
    c.history_steps = ck.meta.at("history_steps").get<int>();
    c.num_neighbors = ck.meta.at("num_neighbors").get<int>();
    c.crop = CropSpec{1, ck.meta.at("crop_cells").get<int>(), ck.meta.at("crop_cells").get<int>(),
                      ck.meta.at("crop_extent_meters").get<double>()};
    c.traj_hidden = ck.meta.at("traj_hidden").get<int>();
    c.hist_hidden = ck.meta.at("hist_hidden").get<int>();
    c.map_feat = ck.meta.at("map_feat").get<int>();
    c.dec_hidden = ck.meta.at("dec_hidden").get<int>();
    c.kl_weight = ck.meta.at("kl_weight").get<double>();
    c.dt = ck.meta.at("dt_seconds").get<double>();
    c.bounds.accel_max = ck.meta.at("accel_max").get<double>();
    c.bounds.yaw_rate_max = ck.meta.at("yaw_rate_max").get<double>();

    VaeModel m = VaeModel::create(c, 0);
    for (auto& [name, e] : m.params.entries()) {
        if (!ck.params.has(name)) throw SchemaError("vae checkpoint missing parameter " + name);
        const Tensor& loaded = ck.params.at(name).value;
        if (loaded.shape != e.value.shape)
            throw SchemaError("vae checkpoint shape mismatch at " + name);
        e.value = loaded;
    }
    return m;
}

inline json denoiser_meta(const diffusion::DenoiserConfig& c,
                          const diffusion::DiffusionSchedule& sched) {
    return json{{"model", "denoiser"},
                {"latent_dim", c.latent_dim},
                {"history_steps", c.history_steps},
                {"num_neighbors", c.num_neighbors},
                {"crop_cells", c.crop.h},
                {"crop_extent_meters", c.crop.extent_m},
                {"map_feat", c.map_feat},
                {"hist_hidden", c.hist_hidden},
                {"temb_dim", c.temb_dim},
                {"temb_feat", c.temb_feat},
                {"hidden", c.hidden},
                {"diffusion_steps", sched.K},
                {"beta_min", sched.beta.front()},
                {"beta_max", sched.beta.back()}};
}

inline json denoiser_meta_with_stats(const diffusion::DenoiserModel& m,
                                     const diffusion::DiffusionSchedule& sched) {
    json j = denoiser_meta(m.cfg, sched);
    if (m.normalizer.fitted()) {
        j["latent_norm_raw"] = m.normalizer.raw_knots;
        j["latent_norm_gauss"] = m.normalizer.gauss_knots;
    }
    j["reverse_variance"] =
        m.var_style == diffusion::ReverseVarStyle::beta ? "beta" : "posterior";
    return j;
}

struct DenoiserBundle {
    diffusion::DenoiserModel model;
    diffusion::DiffusionSchedule sched;
};

inline void save_denoiser(const std::string& path, const diffusion::DenoiserModel& m,
                          const diffusion::DiffusionSchedule& sched) {
    save_checkpoint(path, m.params, denoiser_meta_with_stats(m, sched));
}

inline DenoiserBundle load_denoiser(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("model", "") != "denoiser")
        throw SchemaError("checkpoint " + path + " is not a denoiser checkpoint");
    diffusion::DenoiserConfig c;
    c.latent_dim = ck.meta.at("latent_dim").get<int>();
    c.history_steps = ck.meta.at("history_steps").get<int>();
    c.num_neighbors = ck.meta.at("num_neighbors").get<int>();
    c.crop = CropSpec{1, ck.meta.at("crop_cells").get<int>(), ck.meta.at("crop_cells").get<int>(),
                      ck.meta.at("crop_extent_meters").get<double>()};
    c.map_feat = ck.meta.at("map_feat").get<int>();
    c.hist_hidden = ck.meta.at("hist_hidden").get<int>();
    c.temb_dim = ck.meta.at("temb_dim").get<int>();
    c.temb_feat = ck.meta.at("temb_feat").get<int>();
    c.hidden = ck.meta.at("hidden").get<int>();

    DenoiserBundle b{diffusion::DenoiserModel::create(c, 0),
                     diffusion::make_schedule(ck.meta.at("diffusion_steps").get<int>(),
                                              ck.meta.at("beta_min").get<double>(),
                                              ck.meta.at("beta_max").get<double>())};
    if (ck.meta.value("reverse_variance", "posterior") == "beta")
        b.model.var_style = diffusion::ReverseVarStyle::beta;
    if (ck.meta.contains("latent_norm_raw")) {
        b.model.normalizer.raw_knots =
            ck.meta.at("latent_norm_raw").get<std::vector<std::vector<double>>>();
        b.model.normalizer.gauss_knots =
            ck.meta.at("latent_norm_gauss").get<std::vector<std::vector<double>>>();
        if (static_cast<int>(b.model.normalizer.raw_knots.size()) != c.latent_dim ||
            static_cast<int>(b.model.normalizer.gauss_knots.size()) != c.latent_dim)
            throw SchemaError("denoiser checkpoint latent normalizer has the wrong dimension");
    }
    for (auto& [name, e] : b.model.params.entries()) {
        if (!ck.params.has(name))
            throw SchemaError("denoiser checkpoint missing parameter " + name);
        const Tensor& loaded = ck.params.at(name).value;
        if (loaded.shape != e.value.shape)
            throw SchemaError("denoiser checkpoint shape mismatch at " + name);
        e.value = loaded;
    }
    return b;
}

// ---- stage helpers -----------------------------------------------------------

inline std::vector<simulation::ScenarioRuntime> load_runtimes(const std::string& path) {
    std::vector<simulation::ScenarioRuntime> out;
    for (Scenario& sc : formats::read_scenarios(path))
        out.push_back(simulation::make_runtime(std::move(sc)));
    return out;
}

inline std::vector<VaeSample> dataset_from_runtimes(
    const std::vector<simulation::ScenarioRuntime>& rts, const PipelineConfig& cfg) {
    return simulation::build_vae_dataset(rts, cfg.horizon_steps, cfg.history_steps,
                                         cfg.num_neighbors, cfg.crop(),
                                         cfg.windows_per_scenario);
}

inline std::vector<diffusion::LatentSample> encode_latents(
    VaeModel& vae, const std::vector<VaeSample>& dataset) {
    std::vector<diffusion::LatentSample> out;
    out.reserve(dataset.size());
    for (const VaeSample& s : dataset) {
        auto [mu, sigma] = encode(vae, s.traj, s.ctx);
        out.push_back({mu, s.ctx});
    }
    return out;
}

// deterministic fan-out: results land in run order regardless of threads
template <typename Fn>
void parallel_for(int n, int threads, Fn fn) {
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

struct SimulateResult {
    std::vector<simulation::ClosedLoopRun> runs;
    std::vector<int> scenario_of_run;
};

inline SimulateResult simulate_runs(VaeModel& vae, diffusion::DenoiserModel& dm,
                                    const diffusion::DiffusionSchedule& sched,
                                    const std::vector<simulation::ScenarioRuntime>& rts,
                                    int n_runs, uint64_t seed,
                                    const simulation::ClosedLoopOptions& opt, int threads = 1) {
    if (rts.empty()) throw InvalidInput("simulate: no scenarios");
    if (n_runs < 1) throw InvalidInput("simulate: runs must be >= 1");
    SimulateResult res;
    res.runs.resize(static_cast<size_t>(n_runs));
    res.scenario_of_run.resize(static_cast<size_t>(n_runs));
    parallel_for(n_runs, threads, [&](int i) {
        int sidx = i % static_cast<int>(rts.size());
        RngStream rng(mix_seed(seed, static_cast<uint64_t>(i)));
        simulation::ClosedLoopRun run =
            simulation::closed_loop_run(vae, dm, sched, rts[static_cast<size_t>(sidx)], rng, opt);
        run.scenario_index = sidx;
        run.seed = mix_seed(seed, static_cast<uint64_t>(i));
        res.runs[static_cast<size_t>(i)] = std::move(run);
        res.scenario_of_run[static_cast<size_t>(i)] = sidx;
    });
    return res;
}

inline void write_runs(const std::string& path, const SimulateResult& res,
                       const std::vector<simulation::ScenarioRuntime>& rts) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    for (size_t i = 0; i < res.runs.size(); ++i) {
        const simulation::ScenarioRuntime& rt =
            rts[static_cast<size_t>(res.scenario_of_run[i])];
        f << formats::run_to_json(res.runs[i], rt).dump() << "\n";
    }
    if (!f) throw IoError("write failed: " + path);
}

// ---- evaluation ---------------------------------------------------------------

inline metrics::KinematicsPool reference_pool(const std::vector<simulation::ScenarioRuntime>& rts) {
    metrics::KinematicsPool pool;
    for (const simulation::ScenarioRuntime& rt : rts) {
        Trajectory demo;
        demo.dt = rt.scenario.dt;
        demo.states = rt.world[0];
        demo.actions = rt.scenario.ego_demo;
        pool.absorb(dynamics::kinematic_profile(demo));
    }
    return pool;
}

inline metrics::KinematicsPool generated_pool(const std::vector<formats::RunRecord>& runs) {
    metrics::KinematicsPool pool;
    for (const formats::RunRecord& r : runs) pool.absorb(dynamics::kinematic_profile(r.ego));
    return pool;
}

struct EvaluationReport {
    std::string task;
    double real = 0.0;
    double fail = 0.0;
    int n_runs = 0;
    metrics::RealismBreakdown breakdown;
};

inline EvaluationReport evaluate_runs(const std::vector<formats::RunRecord>& runs,
                                      const metrics::KinematicsPool& reference,
                                      metrics::FailureTask task) {
    std::vector<metrics::RunOutcome> outcomes;
    outcomes.reserve(runs.size());
    for (const formats::RunRecord& r : runs) outcomes.push_back({r.collided, r.went_offroad});
    EvaluationReport rep;
    rep.task = task == metrics::FailureTask::no_collision ? "no-collision" : "no-offroad";
    rep.breakdown = metrics::realism_score(generated_pool(runs), reference);
    rep.real = rep.breakdown.mean;
    rep.fail = metrics::failure_rate(outcomes, task);
    rep.n_runs = static_cast<int>(runs.size());
    return rep;
}

inline json report_to_json(const EvaluationReport& rep) {
    return json{{"schema", "cld-report-v1"},
                {"task", rep.task},
                {"real", rep.real},
                {"fail", rep.fail},
                {"n_runs", rep.n_runs},
                {"per_metric",
                 {{"lon_accel", rep.breakdown.lon_accel},
                  {"lat_accel", rep.breakdown.lat_accel},
                  {"jerk", rep.breakdown.jerk}}}};
}

// ---- plot export ----------------------------------------------------------------

inline void write_run_csv(const std::string& path, const formats::RunRecord& run) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "t,x,y,v,theta\n";
    char buf[160];
    for (size_t i = 0; i < run.ego.states.size(); ++i) {
        const AgentState& s = run.ego.states[i];
        std::snprintf(buf, sizeof(buf), "%.3f,%.9g,%.9g,%.9g,%.9g\n", i * run.dt, s.x, s.y, s.v,
                      s.theta);
        f << buf;
    }
}

// Overhead view: ego path in red, neighbors in muted colors.
inline void write_run_svg(const std::string& path, const formats::RunRecord& run) {
    double min_x = 1e18, max_x = -1e18, min_y = 1e18, max_y = -1e18;
    auto grow = [&](double x, double y) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
    };
    for (const AgentState& s : run.ego.states) grow(s.x, s.y);
    for (const auto& n : run.neighbors)
        for (const auto& [x, y] : n) grow(x, y);
    double margin = 8.0;
    min_x -= margin;
    min_y -= margin;
    max_x += margin;
    max_y += margin;
    double w = max_x - min_x, h = max_y - min_y;
    double px = 640.0, scale = px / std::max(w, h);

    auto sx = [&](double x) { return (x - min_x) * scale; };
    auto sy = [&](double y) { return (max_y - y) * scale; };  // y up

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << static_cast<int>(w * scale)
      << "\" height=\"" << static_cast<int>(h * scale) << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"#f4f4f4\"/>\n";

    static const char* kNeighborColors[] = {"#1f77b4", "#2ca02c", "#9467bd", "#8c564b",
                                            "#e377c2", "#7f7f7f"};
    auto polyline = [&](auto&& points, const char* color, const char* width) {
        f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width
          << "\" points=\"";
        for (const auto& [x, y] : points) f << sx(x) << "," << sy(y) << " ";
        f << "\"/>\n";
    };
    for (size_t j = 0; j < run.neighbors.size(); ++j)
        polyline(run.neighbors[j], kNeighborColors[j % 6], "2");
    std::vector<std::pair<double, double>> ego;
    for (const AgentState& s : run.ego.states) ego.emplace_back(s.x, s.y);
    polyline(ego, "#d62728", "3");
    f << "<circle cx=\"" << sx(ego.front().first) << "\" cy=\"" << sy(ego.front().second)
      << "\" r=\"5\" fill=\"#d62728\"/>\n";
    f << "</svg>\n";
}

inline void export_plots(const std::string& runlog_path, const std::string& out_dir) {
    std::vector<formats::RunRecord> runs = formats::read_runs(runlog_path);
    std::filesystem::create_directories(out_dir);
    for (size_t i = 0; i < runs.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "run_%03zu", i);
        write_run_csv(out_dir + "/" + name + ".csv", runs[i]);
        write_run_svg(out_dir + "/" + name + ".svg", runs[i]);
    }
}

}  // namespace cld::pipeline
