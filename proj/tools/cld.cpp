// Command-line pipeline driver: data generation, two-stage training,
// reward-guided fine-tuning, closed-loop simulation, evaluation, and plot
// export. Every stochastic stage takes an explicit seed; with --threads 1
// (the default) re-running a command reproduces its outputs byte for byte.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "cld/pipeline.hpp"

namespace {

using namespace cld;
using nlohmann::json;

pipeline::PipelineConfig load_config(const std::string& path) {
    if (path.empty()) return pipeline::PipelineConfig{};
    return pipeline::PipelineConfig::from_file(path);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    return f;
}

// JSONL report sink, optional
class ReportWriter {
public:
    explicit ReportWriter(const std::string& path) {
        if (!path.empty()) file_ = std::make_unique<std::ofstream>(open_out(path));
    }

    void row(const json& j) {
        if (file_) *file_ << j.dump() << "\n";
    }

private:
    std::unique_ptr<std::ofstream> file_;
};

int cmd_gen_data(const std::string& spec, int count, uint64_t seed, const std::string& out) {
    auto scenarios = simulation::generate_scenarios(spec, count, seed);
    formats::write_scenarios(out, scenarios);
    std::fprintf(stderr, "wrote %zu scenarios to %s\n", scenarios.size(), out.c_str());
    return 0;
}

int cmd_train_vae(const std::string& data, const std::string& config, uint64_t seed,
                  const std::string& out, const std::string& report) {
    pipeline::PipelineConfig cfg = load_config(config);
    auto runtimes = pipeline::load_runtimes(data);
    auto dataset = pipeline::dataset_from_runtimes(runtimes, cfg);

    VaeModel model = VaeModel::create(cfg.vae_config(), seed);
    TrainOptions opt;
    opt.epochs = cfg.vae_epochs;
    opt.lr = cfg.vae_lr;
    opt.batch_size = cfg.vae_batch;
    opt.seed = seed;

    ReportWriter writer(report);
    train_vae(model, dataset, opt, [&](const EpochRow& r) {
        writer.row(json{{"epoch", r.epoch}, {"loss", r.loss}, {"kl", r.kl}, {"recon", r.recon}});
        if (r.epoch % 10 == 0 || r.epoch == opt.epochs - 1)
            std::fprintf(stderr, "epoch %d loss %.6f recon %.6f kl %.6f\n", r.epoch, r.loss,
                         r.recon, r.kl);
    });
    pipeline::save_vae(out, model);
    std::fprintf(stderr, "position rmse %.4f m\n", vae_position_rmse(model, dataset));
    return 0;
}

int cmd_encode_latents(const std::string& data, const std::string& vae_path,
                       const std::string& config, const std::string& out) {
    pipeline::PipelineConfig cfg = load_config(config);
    VaeModel vae = pipeline::load_vae(vae_path);
    auto runtimes = pipeline::load_runtimes(data);
    auto dataset = pipeline::dataset_from_runtimes(runtimes, cfg);
    auto latents = pipeline::encode_latents(vae, dataset);
    formats::write_latents(out, latents);
    std::fprintf(stderr, "wrote %zu latents to %s\n", latents.size(), out.c_str());
    return 0;
}

int cmd_train_dm(const std::string& latents_path, const std::string& vae_path,
                 const std::string& config, uint64_t seed, const std::string& out,
                 const std::string& report) {
    pipeline::PipelineConfig cfg = load_config(config);
    VaeModel vae = pipeline::load_vae(vae_path);
    auto latents = formats::read_latents(latents_path);
    if (!latents.empty() && latents[0].z0.size() != vae.cfg.latent_dim)
        throw SchemaError("latent dimension mismatch between latents file and vae checkpoint");

    diffusion::DenoiserModel model = diffusion::DenoiserModel::create(cfg.denoiser_config(), seed);
    diffusion::DiffusionSchedule sched = cfg.schedule();
    diffusion::DmTrainOptions opt;
    opt.epochs = cfg.dm_epochs;
    opt.lr = cfg.dm_lr;
    opt.batch_size = cfg.dm_batch;
    opt.seed = seed;

    ReportWriter writer(report);
    diffusion::train_dm(model, latents, sched, opt, [&](const diffusion::DmEpochRow& r) {
        writer.row(json{{"epoch", r.epoch}, {"loss", r.loss}});
        if (r.epoch % 20 == 0 || r.epoch == opt.epochs - 1)
            std::fprintf(stderr, "epoch %d loss %.6f\n", r.epoch, r.loss);
    });
    pipeline::save_denoiser(out, model, sched);
    return 0;
}

int cmd_finetune(const std::string& dm_path, const std::string& vae_path,
                 const std::string& scenarios_path, const std::string& reward_mode,
                 const std::string& config, uint64_t seed, const std::string& out,
                 const std::string& report) {
    pipeline::PipelineConfig cfg = load_config(config);
    VaeModel vae = pipeline::load_vae(vae_path);
    pipeline::DenoiserBundle dm = pipeline::load_denoiser(dm_path);
    auto runtimes = pipeline::load_runtimes(scenarios_path);

    rlft::FinetuneConfig fcfg;
    fcfg.n_rollouts = cfg.rl_rollouts;
    fcfg.inner_epochs = cfg.rl_inner_epochs;
    fcfg.clip_ratio = cfg.rl_clip;
    fcfg.lr = cfg.rl_lr;
    fcfg.iterations = cfg.rl_iterations;
    fcfg.reward.collision_threshold = cfg.collision_threshold_meters;
    fcfg.reward.mode = reward::reward_mode_from_string(reward_mode);

    ReportWriter writer(report);
    rlft::finetune(dm.model, dm.sched, vae, runtimes, fcfg, seed, [&](const rlft::FinetuneRow& r) {
        writer.row(json{{"iteration", r.iteration},
                        {"mean_reward", r.mean_reward},
                        {"mean_ratio_dev", r.mean_ratio_dev},
                        {"grad_norm", r.grad_norm},
                        {"guard_tripped", r.guard_tripped}});
        if (r.iteration % 10 == 0 || r.iteration == fcfg.iterations - 1)
            std::fprintf(stderr, "iteration %d mean reward %.4f\n", r.iteration, r.mean_reward);
    });
    pipeline::save_denoiser(out, dm.model, dm.sched);
    return 0;
}

int cmd_simulate(const std::string& dm_path, const std::string& vae_path,
                 const std::string& scenarios_path, int runs, uint64_t seed,
                 const std::string& config, int threads, const std::string& out) {
    pipeline::PipelineConfig cfg = load_config(config);
    VaeModel vae = pipeline::load_vae(vae_path);
    pipeline::DenoiserBundle dm = pipeline::load_denoiser(dm_path);
    auto runtimes = pipeline::load_runtimes(scenarios_path);

    pipeline::SimulateResult res = pipeline::simulate_runs(
        vae, dm.model, dm.sched, runtimes, runs, seed, cfg.closed_loop_options(), threads);
    pipeline::write_runs(out, res, runtimes);

    int collided = 0, offroad = 0;
    for (const auto& r : res.runs) {
        collided += r.collided ? 1 : 0;
        offroad += r.went_offroad ? 1 : 0;
    }
    std::fprintf(stderr, "%d runs: %d collided, %d off-road\n", runs, collided, offroad);
    return 0;
}

int cmd_evaluate(const std::string& runs_path, const std::string& reference_path,
                 const std::string& task, const std::string& out) {
    auto runs = formats::read_runs(runs_path);
    auto reference = pipeline::reference_pool(pipeline::load_runtimes(reference_path));
    pipeline::EvaluationReport rep =
        pipeline::evaluate_runs(runs, reference, metrics::failure_task_from_string(task));
    json j = pipeline::report_to_json(rep);
    if (out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        auto f = open_out(out);
        f << j.dump(2) << "\n";
    }
    std::fprintf(stderr, "task %s real %.4f fail %.4f over %d runs\n", rep.task.c_str(), rep.real,
                 rep.fail, rep.n_runs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cld: latent-diffusion traffic scenario pipeline"};
    app.require_subcommand(1);

    std::string gd_spec, gd_out;
    int gd_count = 10;
    uint64_t gd_seed = 0;
    auto* gen = app.add_subcommand("gen-data", "generate scenarios + scripted demonstrations");
    gen->add_option("--spec", gd_spec,
                    "straight-road | curved-road | four-way-intersection (+ :hard)")
        ->required();
    gen->add_option("--count", gd_count)->required();
    gen->add_option("--seed", gd_seed)->required();
    gen->add_option("--out", gd_out)->required();

    std::string tv_data, tv_config, tv_out, tv_report;
    uint64_t tv_seed = 0;
    auto* tv = app.add_subcommand("train-vae", "train the trajectory vae");
    tv->add_option("--data", tv_data)->required();
    tv->add_option("--config", tv_config);
    tv->add_option("--seed", tv_seed)->required();
    tv->add_option("--out", tv_out)->required();
    tv->add_option("--report", tv_report);

    std::string el_data, el_vae, el_config, el_out;
    auto* el = app.add_subcommand("encode-latents", "cache encoder means + contexts");
    el->add_option("--data", el_data)->required();
    el->add_option("--vae", el_vae)->required();
    el->add_option("--config", el_config);
    el->add_option("--out", el_out)->required();

    std::string td_latents, td_vae, td_config, td_out, td_report;
    uint64_t td_seed = 0;
    auto* td = app.add_subcommand("train-dm", "train the latent denoiser");
    td->add_option("--latents", td_latents)->required();
    td->add_option("--vae", td_vae)->required();
    td->add_option("--config", td_config);
    td->add_option("--seed", td_seed)->required();
    td->add_option("--out", td_out)->required();
    td->add_option("--report", td_report);

    std::string fr_dm, fr_vae, fr_scenarios, fr_reward, fr_config, fr_out, fr_report;
    uint64_t fr_seed = 0;
    auto* fr = app.add_subcommand("finetune-rl", "reward-guided denoiser fine-tuning");
    fr->add_option("--dm", fr_dm)->required();
    fr->add_option("--vae", fr_vae)->required();
    fr->add_option("--scenarios", fr_scenarios)->required();
    fr->add_option("--reward", fr_reward, "collision | offroad | combined")->required();
    fr->add_option("--config", fr_config);
    fr->add_option("--seed", fr_seed)->required();
    fr->add_option("--out", fr_out)->required();
    fr->add_option("--report", fr_report);

    std::string sm_dm, sm_vae, sm_scenarios, sm_config, sm_out;
    int sm_runs = 10, sm_threads = 1;
    uint64_t sm_seed = 0;
    auto* sm = app.add_subcommand("simulate", "closed-loop runs with 2 Hz re-planning");
    sm->add_option("--dm", sm_dm)->required();
    sm->add_option("--vae", sm_vae)->required();
    sm->add_option("--scenarios", sm_scenarios)->required();
    sm->add_option("--runs", sm_runs)->required();
    sm->add_option("--seed", sm_seed)->required();
    sm->add_option("--config", sm_config);
    sm->add_option("--threads", sm_threads);
    sm->add_option("--out", sm_out)->required();

    std::string ev_runs, ev_reference, ev_task, ev_out;
    auto* ev = app.add_subcommand("evaluate", "realism + failure-rate report");
    ev->add_option("--runs", ev_runs)->required();
    ev->add_option("--reference", ev_reference)->required();
    ev->add_option("--task", ev_task, "no-collision | no-offroad")->required();
    ev->add_option("--out", ev_out);

    std::string ep_runs, ep_out;
    auto* ep = app.add_subcommand("export-plot", "per-run trajectory CSV + SVG overhead view");
    ep->add_option("--runs", ep_runs)->required();
    ep->add_option("--out", ep_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gd_spec, gd_count, gd_seed, gd_out);
        if (tv->parsed()) return cmd_train_vae(tv_data, tv_config, tv_seed, tv_out, tv_report);
        if (el->parsed()) return cmd_encode_latents(el_data, el_vae, el_config, el_out);
        if (td->parsed())
            return cmd_train_dm(td_latents, td_vae, td_config, td_seed, td_out, td_report);
        if (fr->parsed())
            return cmd_finetune(fr_dm, fr_vae, fr_scenarios, fr_reward, fr_config, fr_seed, fr_out,
                                fr_report);
        if (sm->parsed())
            return cmd_simulate(sm_dm, sm_vae, sm_scenarios, sm_runs, sm_seed, sm_config,
                                sm_threads, sm_out);
        if (ev->parsed()) return cmd_evaluate(ev_runs, ev_reference, ev_task, ev_out);
        if (ep->parsed()) {
            pipeline::export_plots(ep_runs, ep_out);
            return 0;
        }
    } catch (const SchemaError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 2;
    } catch (const InvalidInput& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
