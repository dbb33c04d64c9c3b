#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cld/rlft.hpp"
#include "testutil.hpp"

using namespace cld;
using namespace cld::rlft;
using cld::graph::Tape;
using cld::graph::Var;

namespace {

// 1-step 1-D Gaussian policy: z0 ~ N(mu, sigma^2), reward -1[z0 < 0].
// Enumerable oracle for the importance-sampling estimator.
struct ToyPolicy {
    ParameterStore params;
    double sigma;

    explicit ToyPolicy(double mu0, double sigma_) : sigma(sigma_) {
        params.add("mu", Tensor::from_vector({mu0}));
    }

    ReversePolicy policy() {
        ReversePolicy pol;
        pol.step_mean = [this](Tape& t, const diffusion::DenoisingTrace&, Var, int) {
            return t.param(params, "mu");
        };
        return pol;
    }

    RolloutBatch sample_batch(int n, RngStream& rng) {
        RolloutBatch batch;
        double mu = params.at("mu").value[0];
        for (int i = 0; i < n; ++i) {
            double z0 = mu + sigma * rng.normal();
            diffusion::DenoisingTrace tr;
            tr.latents = {Tensor::from_vector({z0}), Tensor::from_vector({rng.normal()})};
            tr.means = {Tensor::from_vector({mu})};
            tr.vars = {Tensor::from_vector({sigma * sigma})};
            tr.logp_old = {gaussian_log_prob(tr.latents[0], tr.means[0], tr.vars[0])};
            batch.traces.push_back(std::move(tr));
            batch.rewards.push_back(z0 < 0.0 ? -1.0 : 0.0);
        }
        batch.advantages = normalized_advantages(batch.rewards);
        return batch;
    }
};

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(kTwoPi); }

struct TinyWorld {
    VaeModel vae;
    diffusion::DenoiserModel dm;
    diffusion::DiffusionSchedule sched;
    std::vector<simulation::ScenarioRuntime> runtimes;

    static TinyWorld create(const std::string& spec = "straight-road") {
        VaeConfig vcfg;
        vcfg.latent_dim = 4;
        vcfg.horizon = 8;
        vcfg.history_steps = 4;
        vcfg.num_neighbors = 2;
        vcfg.crop = CropSpec{1, 11, 11, 16.0};
        vcfg.traj_hidden = 8;
        vcfg.hist_hidden = 6;
        vcfg.map_feat = 6;
        vcfg.dec_hidden = 8;

        diffusion::DenoiserConfig dcfg;
        dcfg.latent_dim = 4;
        dcfg.history_steps = 4;
        dcfg.num_neighbors = 2;
        dcfg.crop = vcfg.crop;
        dcfg.map_feat = 6;
        dcfg.hist_hidden = 6;
        dcfg.temb_dim = 8;
        dcfg.temb_feat = 8;
        dcfg.hidden = 24;

        simulation::GeneratorOptions gopt;
        gopt.preroll_steps = 3;

        TinyWorld w{VaeModel::create(vcfg, 2), diffusion::DenoiserModel::create(dcfg, 3),
                    diffusion::make_schedule(6, 0.01, 0.3), {}};
        for (Scenario& sc : simulation::generate_scenarios(spec, 2, 99, gopt))
            w.runtimes.push_back(simulation::make_runtime(std::move(sc)));
        return w;
    }
};

}  // namespace

TEST_CASE("normalized advantages: centering, zero on ties") {
    std::vector<double> adv = normalized_advantages({-1.0, 0.0, 0.0, -1.0});
    double mean = 0.0;
    for (double a : adv) mean += a;
    CHECK(std::abs(mean) < 1e-12);

    std::vector<double> ties = normalized_advantages({-1.0, -1.0, -1.0});
    for (double a : ties) CHECK(a == 0.0);
}

TEST_CASE("collect_rollouts: reproducible, centered advantages") {
    TinyWorld w = TinyWorld::create();
    reward::RewardConfig rcfg;
    rcfg.mode = reward::RewardMode::collision_only;

    RngStream r1(5), r2(5);
    RolloutBatch a = collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 6, rcfg, r1);
    RolloutBatch b = collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 6, rcfg, r2);
    REQUIRE(a.rewards.size() == 6);
    CHECK(a.rewards == b.rewards);
    CHECK(a.advantages == b.advantages);
    for (size_t i = 0; i < a.traces.size(); ++i)
        CHECK(a.traces[i].latents[0].data == b.traces[i].latents[0].data);

    double mean = 0.0;
    for (double v : a.advantages) mean += v;
    CHECK(std::abs(mean / 6.0) < 1e-12);

    // empty map far from edges, collision-only: every reward 0, advantage 0
    for (double r : a.rewards) CHECK((r == 0.0 || r == -1.0));
    CHECK_THROWS_AS(collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 1, rcfg, r1),
                    InvalidInput);
}

TEST_CASE("at theta == theta_old the surrogate gradient equals REINFORCE") {
    TinyWorld w = TinyWorld::create();
    reward::RewardConfig rcfg;
    rcfg.mode = reward::RewardMode::combined;
    RngStream rng(11);
    RolloutBatch batch = collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 4, rcfg, rng);
    // synthetic advantages so the gradient is non-trivial even if rewards tie
    batch.advantages = {0.7, -1.2, 0.4, 0.1};

    ReversePolicy pol = denoiser_policy(w.dm, w.sched);
    w.dm.params.zero_grads();
    SurrogateStats stats = accumulate_policy_gradient(batch, pol, w.dm.params, 0.1,
                                                      batch.advantages);
    CHECK(stats.mean_ratio_dev < 1e-9);

    std::map<std::string, Tensor> surrogate_grads;
    for (auto& [name, e] : w.dm.params.entries()) surrogate_grads[name] = e.grad;
    w.dm.params.zero_grads();

    // independent route: plain REINFORCE sum of logp * advantage
    double inv_n = 1.0 / static_cast<double>(batch.traces.size());
    for (size_t i = 0; i < batch.traces.size(); ++i) {
        const diffusion::DenoisingTrace& tr = batch.traces[i];
        Tape t(true);
        Var ctx_feat = diffusion::denoiser_context(t, w.dm, tr.context);
        Var acc = t.scalar_const(0.0);
        for (int k = tr.transitions(); k >= 1; --k) {
            Var mu = diffusion::reverse_mean_graph(t, diffusion::bind_denoiser(w.dm, ctx_feat),
                                                   tr.latents[static_cast<size_t>(k)], k, w.sched);
            Var logp = gaussian_log_prob_graph(t, tr.latents[static_cast<size_t>(k - 1)], mu,
                                               tr.vars[static_cast<size_t>(k - 1)]);
            acc = t.add(acc, t.scale(logp, batch.advantages[i]));
        }
        t.backward(t.scale(t.neg(acc), inv_n));
    }
    for (auto& [name, e] : w.dm.params.entries()) {
        const Tensor& got = surrogate_grads[name];
        for (int j = 0; j < e.grad.size(); ++j)
            CHECK(got[j] == doctest::Approx(e.grad[j]).epsilon(1e-7));
    }
}

TEST_CASE("zero advantages give a zero gradient") {
    TinyWorld w = TinyWorld::create();
    reward::RewardConfig rcfg;
    RngStream rng(13);
    RolloutBatch batch = collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 3, rcfg, rng);
    batch.advantages = {0.0, 0.0, 0.0};
    ReversePolicy pol = denoiser_policy(w.dm, w.sched);
    w.dm.params.zero_grads();
    accumulate_policy_gradient(batch, pol, w.dm.params, 0.1, batch.advantages);
    CHECK(w.dm.params.grad_norm() == 0.0);
}

TEST_CASE("missing old log-probs raise invalid-input") {
    TinyWorld w = TinyWorld::create();
    reward::RewardConfig rcfg;
    RngStream rng(14);
    RolloutBatch batch = collect_rollouts(w.dm, w.sched, w.vae, w.runtimes, 2, rcfg, rng);
    batch.traces[0].logp_old.pop_back();
    ReversePolicy pol = denoiser_policy(w.dm, w.sched);
    CHECK_THROWS_AS(accumulate_policy_gradient(batch, pol, w.dm.params, 0.1, batch.advantages),
                    InvalidInput);
}

TEST_CASE("toy Gaussian policy: estimator matches the analytic gradient") {
    double mu = 0.25, sigma = 0.7;
    ToyPolicy toy(mu, sigma);
    ReversePolicy pol = toy.policy();

    int n = 40000;
    RngStream rng(2718);
    RolloutBatch batch = toy.sample_batch(n, rng);

    toy.params.zero_grads();
    // raw rewards as weights, clipping disabled, theta == theta_old
    accumulate_policy_gradient(batch, pol, toy.params,
                               std::numeric_limits<double>::infinity(), batch.rewards);
    // the accumulator builds -surrogate/N, so the estimate flips sign
    double estimate = -toy.params.at("mu").grad[0];

    double analytic = normal_pdf(-mu / sigma) / sigma;  // d/dmu E[-1[z<0]]
    // per-sample variance of (z-mu)/sigma^2 * r
    std::vector<double> per_sample;
    for (size_t i = 0; i < batch.traces.size(); ++i) {
        double z0 = batch.traces[i].latents[0][0];
        per_sample.push_back((z0 - mu) / (sigma * sigma) * batch.rewards[i]);
    }
    double se = std::sqrt(testutil::variance_of(per_sample) / n);
    CHECK(std::abs(estimate - analytic) < 3.0 * se);
}

TEST_CASE("advantage normalization leaves the estimator unbiased (MC)") {
    double mu = 0.25, sigma = 0.7;
    ToyPolicy toy(mu, sigma);
    ReversePolicy pol = toy.policy();
    int n = 40000;
    RngStream rng(3141);
    RolloutBatch batch = toy.sample_batch(n, rng);

    // E[sum grad logp] = 0: a constant shift of the rewards must not move
    // the estimator beyond MC noise
    std::vector<double> shifted = batch.rewards;
    for (double& r : shifted) r -= 0.5;

    toy.params.zero_grads();
    accumulate_policy_gradient(batch, pol, toy.params,
                               std::numeric_limits<double>::infinity(), batch.rewards);
    double raw = -toy.params.at("mu").grad[0];
    toy.params.zero_grads();
    accumulate_policy_gradient(batch, pol, toy.params,
                               std::numeric_limits<double>::infinity(), shifted);
    double shifted_est = -toy.params.at("mu").grad[0];

    // difference = 0.5 * mean(grad logp); its expectation is 0
    std::vector<double> score;
    for (const auto& tr : batch.traces)
        score.push_back((tr.latents[0][0] - mu) / (sigma * sigma));
    double se = 0.5 * std::sqrt(testutil::variance_of(score) / n);
    CHECK(std::abs(raw - shifted_est) < 3.0 * se + 1e-12);
}

TEST_CASE("finetune: lr 0 leaves parameters unchanged and reports flat rewards") {
    TinyWorld w = TinyWorld::create();
    FinetuneConfig cfg;
    cfg.n_rollouts = 4;
    cfg.inner_epochs = 1;
    cfg.iterations = 2;
    cfg.lr = 0.0;
    cfg.reward.mode = reward::RewardMode::collision_only;

    Tensor before = w.dm.params.at("dm.fc1.w").value;
    auto rows = finetune(w.dm, w.sched, w.vae, w.runtimes, cfg, 77);
    CHECK(w.dm.params.at("dm.fc1.w").value.data == before.data);
    REQUIRE(rows.size() == 2);
}

TEST_CASE("finetune: seeded runs produce identical reports") {
    TinyWorld w1 = TinyWorld::create();
    TinyWorld w2 = TinyWorld::create();
    FinetuneConfig cfg;
    cfg.n_rollouts = 4;
    cfg.inner_epochs = 2;
    cfg.iterations = 3;
    cfg.lr = 1e-3;
    cfg.reward.mode = reward::RewardMode::combined;

    auto r1 = finetune(w1.dm, w1.sched, w1.vae, w1.runtimes, cfg, 31);
    auto r2 = finetune(w2.dm, w2.sched, w2.vae, w2.runtimes, cfg, 31);
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) {
        CHECK(r1[i].mean_reward == r2[i].mean_reward);
        CHECK(r1[i].grad_norm == r2[i].grad_norm);
    }
}

TEST_CASE("divergence guard trips on oversized steps and is not fatal") {
    ToyPolicy toy(0.2, 0.4);
    ReversePolicy pol = toy.policy();
    RngStream rng(41);
    RolloutBatch batch = toy.sample_batch(16, rng);

    FinetuneConfig cfg;
    cfg.inner_epochs = 6;
    cfg.lr = 0.5;  // deliberately large
    cfg.divergence_guard = 0.5;

    FinetuneRow row;
    finetune_inner(batch, pol, toy.params, cfg, row);
    CHECK(row.guard_tripped);
    CHECK(row.mean_ratio_dev > 0.5);
    CHECK(toy.params.grad_norm() == 0.0);  // pending gradients dropped

    // a gentle learning rate finishes all inner epochs without the guard
    ToyPolicy calm(0.2, 0.4);
    ReversePolicy calm_pol = calm.policy();
    RngStream rng2(41);
    RolloutBatch batch2 = calm.sample_batch(16, rng2);
    FinetuneConfig cfg2;
    cfg2.inner_epochs = 3;
    cfg2.lr = 1e-4;
    FinetuneRow row2;
    finetune_inner(batch2, calm_pol, calm.params, cfg2, row2);
    CHECK(!row2.guard_tripped);
}
