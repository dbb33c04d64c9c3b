#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "cld/simulation.hpp"

namespace cld::rlft {

using cld::graph::Tape;
using cld::graph::Var;
using diffusion::DenoisingTrace;

struct RolloutBatch {
    std::vector<DenoisingTrace> traces;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

struct FinetuneConfig {
    int n_rollouts = 32;  // N >= 2
    int inner_epochs = 2;
    double clip_ratio = 0.1;  // epsilon_clip > 0; infinity disables clipping
    double lr = 1e-4;
    int iterations = 200;
    reward::RewardConfig reward{};
    double divergence_guard = 0.5;  // abort inner epochs when mean |ratio-1| exceeds this
};

// Reverse-transition policy seam. Production wraps the denoiser; tests can
// provide enumerable toy policies driven by the same estimator code.
struct ReversePolicy {
    // per-trace preparation on the tape (e.g., the context embedding)
    std::function<Var(Tape&, const DenoisingTrace&)> prepare;
    // mean of p(z^{k-1} | z^k, c) for transition k
    std::function<Var(Tape&, const DenoisingTrace&, Var prepared, int k)> step_mean;
};

inline ReversePolicy denoiser_policy(diffusion::DenoiserModel& dm,
                                     const diffusion::DiffusionSchedule& sched) {
    ReversePolicy pol;
    pol.prepare = [&dm](Tape& t, const DenoisingTrace& trace) {
        return diffusion::denoiser_context(t, dm, trace.context);
    };
    pol.step_mean = [&dm, &sched](Tape& t, const DenoisingTrace& trace, Var ctx_feat, int k) {
        return diffusion::reverse_mean_graph(t, diffusion::bind_denoiser(dm, ctx_feat),
                                             trace.latents[static_cast<size_t>(k)], k, sched);
    };
    return pol;
}

// Batch-normalized terminal rewards: (r - mean) / (std + 1e-8).
inline std::vector<double> normalized_advantages(const std::vector<double>& rewards) {
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rewards.size());
    double sd = std::sqrt(var);
    std::vector<double> adv;
    adv.reserve(rewards.size());
    for (double r : rewards) adv.push_back((r - mean) / (sd + 1e-8));
    return adv;
}

// Sample N single-shot generations at random scenario times, decode, and
// score with the configured reward. Old per-step log-probs come from the
// sampling pass itself (the parameters are the theta_old snapshot).
inline RolloutBatch collect_rollouts(diffusion::DenoiserModel& dm,
                                     const diffusion::DiffusionSchedule& sched, VaeModel& vae,
                                     const std::vector<simulation::ScenarioRuntime>& scenarios,
                                     int n, const reward::RewardConfig& reward_cfg,
                                     RngStream& rng) {
    if (scenarios.empty()) throw InvalidInput("collect_rollouts: no scenarios");
    if (n < 2) throw InvalidInput("collect_rollouts: need N >= 2");
    RolloutBatch batch;
    int T = vae.cfg.horizon;
    int H = vae.cfg.history_steps;
    for (int i = 0; i < n; ++i) {
        const simulation::ScenarioRuntime& rt =
            scenarios[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(scenarios.size()) - 1))];
        int t0 = rng.uniform_int(H - 1, rt.total_ticks() - 1 - T);
        Context ctx = context_from_history(rt.world, rt.scenario.map, t0, H,
                                           vae.cfg.num_neighbors, vae.cfg.crop);
        diffusion::SampleResult s = diffusion::sample(dm, sched, ctx, rng);
        Trajectory plan = decode(vae, s.z0, ctx);
        reward::NeighborTracksView view = rt.neighbor_window(t0, T);
        double r = reward::trajectory_reward(plan, view, rt.scenario.map, reward_cfg);
        batch.traces.push_back(std::move(s.trace));
        batch.rewards.push_back(r);
    }
    batch.advantages = normalized_advantages(batch.rewards);
    return batch;
}

struct SurrogateStats {
    double surrogate = 0.0;       // mean over traces of the clipped objective
    double mean_ratio_dev = 0.0;  // mean |ratio - 1| over all transitions
    double grad_norm = 0.0;
};

// Gradient of the clipped importance-sampling surrogate, accumulated into
// the policy parameters. Maximization is expressed as a negated loss so
// the standard Adam descent step ascends the objective.
inline SurrogateStats accumulate_policy_gradient(const RolloutBatch& batch, ReversePolicy& policy,
                                                 ParameterStore& params, double clip_ratio,
                                                 const std::vector<double>& advantages) {
    size_t n = batch.traces.size();
    if (n == 0) throw InvalidInput("policy gradient: empty batch");
    if (advantages.size() != n) throw InvalidInput("policy gradient: advantage length mismatch");
    double inv_n = 1.0 / static_cast<double>(n);
    bool clipped = std::isfinite(clip_ratio);
    if (clipped && !(clip_ratio > 0.0))
        throw InvalidInput("policy gradient: clip ratio must be > 0");

    SurrogateStats stats;
    long long transition_count = 0;
    for (size_t i = 0; i < n; ++i) {
        const DenoisingTrace& trace = batch.traces[i];
        int K = trace.transitions();
        if (static_cast<int>(trace.logp_old.size()) != K)
            throw InvalidInput("policy gradient: missing old log-probs");
        Tape t(true);
        Var prepared = policy.prepare ? policy.prepare(t, trace) : Var{};
        Var acc = t.scalar_const(0.0);
        for (int k = K; k >= 1; --k) {
            Var mu = policy.step_mean(t, trace, prepared, k);
            Var logp = gaussian_log_prob_graph(t, trace.latents[static_cast<size_t>(k - 1)], mu,
                                               trace.vars[static_cast<size_t>(k - 1)]);
            Var ratio = t.exp_(t.add_scalar(logp, -trace.logp_old[static_cast<size_t>(k - 1)]));
            stats.mean_ratio_dev += std::abs(t.val(ratio)[0] - 1.0);
            transition_count += 1;
            Var term;
            if (clipped) {
                Var unclipped = t.scale(ratio, advantages[i]);
                Var clamped = t.scale(t.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio),
                                      advantages[i]);
                term = t.minimum(unclipped, clamped);
            } else {
                term = t.scale(ratio, advantages[i]);
            }
            acc = t.add(acc, term);
        }
        stats.surrogate += t.val(acc)[0] * inv_n;
        Var loss = t.scale(t.neg(acc), inv_n);
        t.backward(loss);
    }
    stats.mean_ratio_dev /= static_cast<double>(std::max<long long>(1, transition_count));
    stats.grad_norm = params.grad_norm();
    return stats;
}

struct FinetuneRow {
    int iteration = 0;
    double mean_reward = 0.0;
    double mean_ratio_dev = 0.0;
    double grad_norm = 0.0;
    bool guard_tripped = false;
};

using FinetuneSink = std::function<void(const FinetuneRow&)>;

// Inner optimization epochs on one collected batch. Aborts the remaining
// epochs (zeroing pending gradients) when the mean ratio deviation exceeds
// the divergence guard.
inline void finetune_inner(const RolloutBatch& batch, ReversePolicy& policy,
                           ParameterStore& params, const FinetuneConfig& cfg, FinetuneRow& row) {
    for (int e = 0; e < cfg.inner_epochs; ++e) {
        SurrogateStats stats =
            accumulate_policy_gradient(batch, policy, params, cfg.clip_ratio, batch.advantages);
        row.mean_ratio_dev = stats.mean_ratio_dev;
        row.grad_norm = stats.grad_norm;
        if (stats.mean_ratio_dev > cfg.divergence_guard) {
            params.zero_grads();
            row.guard_tripped = true;
            break;
        }
        params.adam_update(cfg.lr);
    }
}

// Algorithm: repeat { collect under theta_old; inner epochs of clipped
// surrogate ascent }. The VAE and dynamics stay frozen; only denoiser
// parameters move.
inline std::vector<FinetuneRow> finetune(diffusion::DenoiserModel& dm,
                                         const diffusion::DiffusionSchedule& sched, VaeModel& vae,
                                         const std::vector<simulation::ScenarioRuntime>& scenarios,
                                         const FinetuneConfig& cfg, uint64_t seed,
                                         const FinetuneSink& sink = {}) {
    if (cfg.n_rollouts < 2) throw InvalidInput("finetune: N >= 2 required");
    if (!(cfg.clip_ratio > 0.0)) throw InvalidInput("finetune: clip ratio must be > 0");
    RngStream rng(mix_seed(seed, 0x6f1e));
    ReversePolicy policy = denoiser_policy(dm, sched);
    std::vector<FinetuneRow> rows;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        RolloutBatch batch =
            collect_rollouts(dm, sched, vae, scenarios, cfg.n_rollouts, cfg.reward, rng);
        FinetuneRow row;
        row.iteration = iter;
        for (double r : batch.rewards) row.mean_reward += r;
        row.mean_reward /= static_cast<double>(batch.rewards.size());

        finetune_inner(batch, policy, dm.params, cfg, row);
        rows.push_back(row);
        if (sink) sink(row);
    }
    return rows;
}

}  // namespace cld::rlft
