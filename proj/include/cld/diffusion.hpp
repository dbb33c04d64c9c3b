#pragma once

#include <functional>
#include <vector>

#include "cld/layers.hpp"
#include "cld/vae.hpp"

namespace cld::diffusion {

using cld::graph::Tape;
using cld::graph::Var;

// Forward-process schedule. Vectors are 1-indexed through the *_at(k)
// accessors; alpha_bar is the running product of (1 - beta), and
// posterior_var uses alpha_bar[k-1] with alpha_bar[0] defined as 1.
struct DiffusionSchedule {
    int K = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> posterior_var;

    double beta_at(int k) const { return beta[static_cast<size_t>(k - 1)]; }
    double alpha_at(int k) const { return alpha[static_cast<size_t>(k - 1)]; }
    double alpha_bar_at(int k) const {
        return k == 0 ? 1.0 : alpha_bar[static_cast<size_t>(k - 1)];
    }
    double posterior_var_at(int k) const { return posterior_var[static_cast<size_t>(k - 1)]; }

    void check_step(int k, const char* op) const {
        if (k < 1 || k > K)
            throw InvalidInput(std::string(op) + ": step index out of range [1, K]");
    }
};

inline DiffusionSchedule make_schedule(int K, double beta_min, double beta_max) {
    if (K < 1) throw InvalidInput("make_schedule: K must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw InvalidInput("make_schedule: need 0 < beta_min <= beta_max < 1");
    DiffusionSchedule s;
    s.K = K;
    s.beta.resize(static_cast<size_t>(K));
    s.alpha.resize(static_cast<size_t>(K));
    s.alpha_bar.resize(static_cast<size_t>(K));
    s.posterior_var.resize(static_cast<size_t>(K));
    double abar = 1.0;
    for (int k = 1; k <= K; ++k) {
        double frac = K == 1 ? 0.0 : static_cast<double>(k - 1) / (K - 1);
        double b = beta_min + frac * (beta_max - beta_min);
        double prev_abar = abar;
        abar *= (1.0 - b);
        s.beta[static_cast<size_t>(k - 1)] = b;
        s.alpha[static_cast<size_t>(k - 1)] = 1.0 - b;
        s.alpha_bar[static_cast<size_t>(k - 1)] = abar;
        s.posterior_var[static_cast<size_t>(k - 1)] = b * (1.0 - prev_abar) / (1.0 - abar);
    }
    return s;
}

// Default production schedule. beta_max is sized so the terminal marginal
// is effectively a standard Gaussian (sqrt(1 - alpha_bar_K) > 0.99).
inline DiffusionSchedule default_schedule() { return make_schedule(50, 1e-4, 0.2); }

inline constexpr double kReverseVarFloor = 1e-8;

// Closed-form forward marginal: z^k = sqrt(abar_k) z0 + sqrt(1-abar_k) eps.
inline Tensor q_sample(const Tensor& z0, int k, const Tensor& eps,
                       const DiffusionSchedule& sched) {
    sched.check_step(k, "q_sample");
    if (!z0.same_shape(eps)) throw ShapeError("q_sample: shape mismatch");
    double a = std::sqrt(sched.alpha_bar_at(k));
    double b = std::sqrt(1.0 - sched.alpha_bar_at(k));
    Tensor out = z0;
    for (int i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

struct DenoiserConfig {
    int latent_dim = 16;
    int history_steps = 10;
    int num_neighbors = 4;
    CropSpec crop{};
    int map_feat = 32;
    int hist_hidden = 32;
    int temb_dim = 16;
    int temb_feat = 32;
    int hidden = 96;
    double feature_scale = 0.1;
};

// Rational approximation of the standard normal quantile function
// (Acklam), good to ~1e-9 relative error; used when fitting the latent
// normalizer.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw InvalidInput("normal_quantile: p must be in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00, 2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1 - plow;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    if (p > phigh) {
        q = std::sqrt(-2 * std::log(1 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

// Per-dimension monotone quantile maps between raw encoder latents and the
// chain space. Empirical latent marginals are sharp-centered with heavy
// tails, which a short reverse chain underdisperses; mapped through their
// rank-Gauss transform they become unit Gaussians the chain handles well.
// The knots travel with the denoiser checkpoint.
struct LatentNormalizer {
    std::vector<std::vector<double>> raw_knots;    // [dz][m], ascending
    std::vector<std::vector<double>> gauss_knots;  // [dz][m], ascending

    bool fitted() const { return !raw_knots.empty(); }

    static double interp(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
        size_t m = xs.size();
        if (x <= xs.front()) {
            double slope = (ys[1] - ys[0]) / std::max(1e-12, xs[1] - xs[0]);
            return ys.front() + (x - xs.front()) * slope;
        }
        if (x >= xs.back()) {
            double slope = (ys[m - 1] - ys[m - 2]) / std::max(1e-12, xs[m - 1] - xs[m - 2]);
            return ys.back() + (x - xs.back()) * slope;
        }
        size_t hi = static_cast<size_t>(
            std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
        size_t lo = hi - 1;
        double f = (x - xs[lo]) / std::max(1e-12, xs[hi] - xs[lo]);
        return ys[lo] + f * (ys[hi] - ys[lo]);
    }

    Tensor to_chain(const Tensor& z_raw) const {
        if (!fitted()) return z_raw;
        Tensor z = z_raw;
        for (int d = 0; d < z.size(); ++d)
            z[d] = interp(raw_knots[static_cast<size_t>(d)], gauss_knots[static_cast<size_t>(d)],
                          z_raw[d]);
        return z;
    }

    Tensor to_raw(const Tensor& z_chain) const {
        if (!fitted()) return z_chain;
        Tensor z = z_chain;
        for (int d = 0; d < z.size(); ++d)
            z[d] = interp(gauss_knots[static_cast<size_t>(d)], raw_knots[static_cast<size_t>(d)],
                          z_chain[d]);
        return z;
    }
};

// Reverse-step variance style. The schedule posterior is the exact reverse
// variance for point-mass conditionals and suits strongly multi-modal
// latents; beta_k is exact for unit-Gaussian marginals (which the
// normalizer's rank-Gauss dimensions approach) and avoids the measurable
// under-dispersion the posterior choice produces there. Training picks the
// style whose samples match the training latents better.
enum class ReverseVarStyle { posterior, beta };

// eps_theta(z^k, k, c): context embedding + timestep embedding + MLP trunk.
// The reverse chain runs in the normalizer's chain space.
struct DenoiserModel {
    DenoiserConfig cfg;
    ParameterStore params;
    ContextEncoder ctx_enc;
    DenseLayer temb_fc;
    DenseLayer fc1, fc2, fc3;
    LatentNormalizer normalizer;
    ReverseVarStyle var_style = ReverseVarStyle::posterior;

    static DenoiserModel create(const DenoiserConfig& cfg, uint64_t seed) {
        DenoiserModel m;
        m.cfg = cfg;
        m.ctx_enc = ContextEncoder("dm.ctx", cfg.crop, cfg.num_neighbors + 1, cfg.map_feat,
                                   cfg.hist_hidden);
        m.ctx_enc.feature_scale = cfg.feature_scale;
        m.temb_fc = DenseLayer("dm.temb_fc", cfg.temb_dim, cfg.temb_feat);
        int trunk_in = cfg.latent_dim + cfg.temb_feat + m.ctx_enc.out_dim();
        m.fc1 = DenseLayer("dm.fc1", trunk_in, cfg.hidden);
        m.fc2 = DenseLayer("dm.fc2", cfg.hidden, cfg.hidden);
        m.fc3 = DenseLayer("dm.fc3", cfg.hidden, cfg.latent_dim);

        RngStream rng(mix_seed(seed, 0xd1f));
        m.ctx_enc.init(m.params, rng);
        m.temb_fc.init(m.params, rng);
        m.fc1.init(m.params, rng);
        m.fc2.init(m.params, rng);
        m.fc3.init(m.params, rng);
        return m;
    }
};

inline Var denoiser_context(Tape& t, DenoiserModel& m, const Context& ctx) {
    return m.ctx_enc(t, m.params, ctx);
}

inline Var denoiser_eps(Tape& t, DenoiserModel& m, Var z_k, int k, Var ctx_feat) {
    Var temb = t.constant(sinusoidal_timestep_embedding(k, m.cfg.temb_dim));
    Var tf = t.tanh_(m.temb_fc(t, m.params, temb));
    Var h = t.concat3(z_k, tf, ctx_feat);
    h = t.tanh_(m.fc1(t, m.params, h));
    h = t.tanh_(m.fc2(t, m.params, h));
    return m.fc3(t, m.params, h);
}

// Noise predictor seam: production binds the denoiser + context; tests can
// substitute hard-wired predictors.
using EpsPredictor = std::function<Var(Tape&, Var z_k, int k)>;

inline EpsPredictor bind_denoiser(DenoiserModel& m, Var ctx_feat) {
    return [&m, ctx_feat](Tape& t, Var z_k, int k) {
        return denoiser_eps(t, m, z_k, k, ctx_feat);
    };
}

// || eps - eps_theta(q_sample(z0, k, eps), k, c) ||^2
inline Var dm_loss_graph(Tape& t, const EpsPredictor& predict, const Tensor& z0, int k,
                         const Tensor& eps, const DiffusionSchedule& sched) {
    Tensor z_k = q_sample(z0, k, eps, sched);
    Var eps_hat = predict(t, t.constant(z_k), k);
    Var diff = t.sub(t.constant(eps), eps_hat);
    return t.sum(t.mul(diff, diff));
}

// Loss on a raw encoder latent: mapped into chain coordinates first.
inline double dm_loss(DenoiserModel& m, const Tensor& z0, const Context& ctx, int k,
                      const Tensor& eps, const DiffusionSchedule& sched) {
    Tape t(false);
    Var ctx_feat = denoiser_context(t, m, ctx);
    return t.val(dm_loss_graph(t, bind_denoiser(m, ctx_feat), m.normalizer.to_chain(z0), k, eps,
                               sched))[0];
}

struct ReverseStep {
    Tensor mu;
    Tensor var;  // per-dim, floored
};

// DDPM mean from the eps-parameterization; variance is the schedule
// posterior, floored so the k=1 step stays a proper Gaussian.
inline Var reverse_mean_graph(Tape& t, const EpsPredictor& predict, const Tensor& z_k, int k,
                              const DiffusionSchedule& sched) {
    sched.check_step(k, "reverse_step_params");
    double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(k));
    double coef = sched.beta_at(k) / std::sqrt(1.0 - sched.alpha_bar_at(k));
    Var eps_hat = predict(t, t.constant(z_k), k);
    return t.scale(t.sub(t.constant(z_k), t.scale(eps_hat, coef)), inv_sqrt_alpha);
}

inline Tensor reverse_var(int k, int dim, const DiffusionSchedule& sched,
                          ReverseVarStyle style) {
    double raw = style == ReverseVarStyle::beta ? sched.beta_at(k) : sched.posterior_var_at(k);
    return Tensor::full({dim}, std::max(raw, kReverseVarFloor));
}

inline ReverseStep reverse_step_params(DenoiserModel& m, const Tensor& z_k, int k,
                                       const Context& ctx, const DiffusionSchedule& sched) {
    Tape t(false);
    Var ctx_feat = denoiser_context(t, m, ctx);
    Var mu = reverse_mean_graph(t, bind_denoiser(m, ctx_feat), z_k, k, sched);
    return {t.val(mu), reverse_var(k, z_k.size(), sched, m.var_style)};
}

// One reverse-chain episode in the model's standardized latent space: all
// K+1 latents plus per-transition Gaussian statistics and the log-density
// of each sampled transition.
struct DenoisingTrace {
    std::vector<Tensor> latents;   // latents[k] = z^k, k = 0..K
    std::vector<Tensor> means;     // means[k-1] for transition k
    std::vector<Tensor> vars;      // vars[k-1]
    std::vector<double> logp_old;  // logp_old[k-1]
    Context context;

    int transitions() const { return static_cast<int>(means.size()); }
};

struct SampleResult {
    Tensor z0;  // decodable latent (chain output mapped back to encoder space)
    DenoisingTrace trace;
};

inline SampleResult sample(DenoiserModel& m, const DiffusionSchedule& sched, const Context& ctx,
                           RngStream& rng) {
    int dz = m.cfg.latent_dim;
    Tape t(false);
    Var ctx_feat = denoiser_context(t, m, ctx);
    EpsPredictor predict = bind_denoiser(m, ctx_feat);

    DenoisingTrace trace;
    trace.context = ctx;
    trace.latents.assign(static_cast<size_t>(sched.K + 1), Tensor());
    trace.means.assign(static_cast<size_t>(sched.K), Tensor());
    trace.vars.assign(static_cast<size_t>(sched.K), Tensor());
    trace.logp_old.assign(static_cast<size_t>(sched.K), 0.0);

    Tensor z({dz});
    for (double& v : z.data) v = rng.normal();
    trace.latents[static_cast<size_t>(sched.K)] = z;

    for (int k = sched.K; k >= 1; --k) {
        Tensor mu = t.val(reverse_mean_graph(t, predict, z, k, sched));
        Tensor var = reverse_var(k, dz, sched, m.var_style);
        Tensor next({dz});
        for (int d = 0; d < dz; ++d) next[d] = mu[d] + std::sqrt(var[d]) * rng.normal();
        trace.means[static_cast<size_t>(k - 1)] = mu;
        trace.vars[static_cast<size_t>(k - 1)] = var;
        trace.logp_old[static_cast<size_t>(k - 1)] = gaussian_log_prob(next, mu, var);
        trace.latents[static_cast<size_t>(k - 1)] = next;
        z = next;
    }
    return {m.normalizer.to_raw(z), trace};
}

struct LatentSample {
    Tensor z0;
    Context ctx;
};

// Fit the per-dimension chain maps from the training latents. Heavy-tailed
// dimensions (excess kurtosis above the gate) get full rank-Gauss knots:
// evenly spaced order statistics paired with normal quantiles, duplicates
// merged to keep the map monotone. Everything else gets a two-knot affine
// map (standardization); multi-modal marginals have low kurtosis and the
// chain matches them better untouched.
inline void fit_latent_normalizer(DenoiserModel& m, const std::vector<LatentSample>& dataset,
                                  int max_knots = 65, double kurtosis_gate = 1.0) {
    int dz = m.cfg.latent_dim;
    size_t n = dataset.size();
    if (n < 2) throw InvalidInput("fit_latent_normalizer: need at least 2 samples");
    LatentNormalizer norm;
    norm.raw_knots.resize(static_cast<size_t>(dz));
    norm.gauss_knots.resize(static_cast<size_t>(dz));
    for (int d = 0; d < dz; ++d) {
        std::vector<double> vals;
        vals.reserve(n);
        for (const LatentSample& s : dataset) vals.push_back(s.z0[d]);
        std::sort(vals.begin(), vals.end());

        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(n);
        double m2 = 0.0, m4 = 0.0;
        for (double v : vals) {
            double c = v - mean;
            m2 += c * c;
            m4 += c * c * c * c;
        }
        m2 /= static_cast<double>(n);
        m4 /= static_cast<double>(n);
        double sd = std::max(1e-3, std::sqrt(m2));
        double excess_kurtosis = m2 > 1e-12 ? m4 / (m2 * m2) - 3.0 : 0.0;

        std::vector<double> raw, gauss;
        if (excess_kurtosis > kurtosis_gate) {
            int m_knots = std::min<int>(max_knots, static_cast<int>(n));
            for (int i = 0; i < m_knots; ++i) {
                size_t idx = static_cast<size_t>(
                    std::llround(static_cast<double>(i) * (n - 1) / (m_knots - 1)));
                double q = (static_cast<double>(idx) + 0.5) / static_cast<double>(n);
                double rv = vals[idx];
                double gv = normal_quantile(q);
                if (!raw.empty() && rv <= raw.back() + 1e-12) {
                    gauss.back() = 0.5 * (gauss.back() + gv);
                    continue;
                }
                raw.push_back(rv);
                gauss.push_back(gv);
            }
        }
        if (raw.size() < 2) {  // affine fallback (and near-constant dimensions)
            raw = {mean - sd, mean + sd};
            gauss = {-1.0, 1.0};
        }
        norm.raw_knots[static_cast<size_t>(d)] = std::move(raw);
        norm.gauss_knots[static_cast<size_t>(d)] = std::move(gauss);
    }
    m.normalizer = std::move(norm);
}

struct DmTrainOptions {
    int epochs = 600;
    double lr = 2e-3;
    int batch_size = 32;
    uint64_t seed = 0;
    double lr_decay_per_quarter = 0.5;  // staged decay over four quarters
};

struct DmEpochRow {
    int epoch = 0;
    double loss = 0.0;
};

using DmEpochSink = std::function<void(const DmEpochRow&)>;

inline std::vector<DmEpochRow> train_dm(DenoiserModel& m,
                                        const std::vector<LatentSample>& dataset,
                                        const DiffusionSchedule& sched, const DmTrainOptions& opt,
                                        const DmEpochSink& sink = {}) {
    if (dataset.empty()) throw InvalidInput("train_dm: empty dataset");
    RngStream rng(mix_seed(opt.seed, 0xdd));
    fit_latent_normalizer(m, dataset);
    std::vector<Tensor> chain_coords;
    chain_coords.reserve(dataset.size());
    for (const LatentSample& s : dataset) chain_coords.push_back(m.normalizer.to_chain(s.z0));
    std::vector<DmEpochRow> rows;
    std::vector<int> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        int quarter = std::min(3, 4 * epoch / std::max(1, opt.epochs));
        double lr = opt.lr * std::pow(opt.lr_decay_per_quarter, quarter);
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);
        DmEpochRow row;
        row.epoch = epoch;
        size_t cursor = 0;
        while (cursor < order.size()) {
            size_t batch_n = std::min<size_t>(static_cast<size_t>(opt.batch_size),
                                              order.size() - cursor);
            Tape tape(true);
            Var batch_loss = tape.scalar_const(0.0);
            for (size_t b = 0; b < batch_n; ++b) {
                size_t idx = static_cast<size_t>(order[cursor + b]);
                int k = rng.uniform_int(1, sched.K);
                Tensor eps({m.cfg.latent_dim});
                for (double& e : eps.data) e = rng.normal();
                Var ctx_feat = denoiser_context(tape, m, dataset[idx].ctx);
                Var loss = dm_loss_graph(tape, bind_denoiser(m, ctx_feat), chain_coords[idx], k,
                                         eps, sched);
                batch_loss = tape.add(batch_loss, loss);
                row.loss += tape.val(loss)[0];
            }
            batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(batch_n));
            tape.backward(batch_loss);
            m.params.adam_update(lr);
            cursor += batch_n;
        }
        row.loss /= static_cast<double>(dataset.size());
        rows.push_back(row);
        if (sink) sink(row);
    }

    // variance-style selection: sample under both styles with a fixed
    // internal stream and keep the one whose per-dimension marginals match
    // the training latents better
    {
        int dz = m.cfg.latent_dim;
        int n_eval = std::min<int>(1000, 4 * static_cast<int>(dataset.size()));
        std::vector<std::vector<double>> ref(static_cast<size_t>(dz));
        for (const LatentSample& s : dataset)
            for (int d = 0; d < dz; ++d) ref[static_cast<size_t>(d)].push_back(s.z0[d]);
        auto quantile_w1 = [](std::vector<double> a, std::vector<double> b) {
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            size_t i = 0, j = 0;
            double q = 0.0, acc = 0.0;
            while (i < a.size() && j < b.size()) {
                double qa = static_cast<double>(i + 1) / a.size();
                double qb = static_cast<double>(j + 1) / b.size();
                double qn = std::min(qa, qb);
                acc += (qn - q) * std::abs(a[i] - b[j]);
                q = qn;
                if (qa <= qb) ++i;
                if (qb <= qa) ++j;
            }
            return acc;
        };
        auto worst_w1 = [&](ReverseVarStyle style) {
            m.var_style = style;
            RngStream srng(mix_seed(opt.seed, 0x5e1ec7));
            std::vector<std::vector<double>> gen(static_cast<size_t>(dz));
            for (int i = 0; i < n_eval; ++i) {
                SampleResult r =
                    sample(m, sched, dataset[static_cast<size_t>(i) % dataset.size()].ctx, srng);
                for (int d = 0; d < dz; ++d) gen[static_cast<size_t>(d)].push_back(r.z0[d]);
            }
            double worst = 0.0;
            for (int d = 0; d < dz; ++d)
                worst = std::max(worst, quantile_w1(gen[static_cast<size_t>(d)],
                                                    ref[static_cast<size_t>(d)]));
            return worst;
        };
        double w_posterior = worst_w1(ReverseVarStyle::posterior);
        double w_beta = worst_w1(ReverseVarStyle::beta);
        m.var_style = w_beta < w_posterior ? ReverseVarStyle::beta : ReverseVarStyle::posterior;
    }
    return rows;
}

}  // namespace cld::diffusion
