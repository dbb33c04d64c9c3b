#pragma once

#include <functional>
#include <vector>

#include "cld/dynamics.hpp"
#include "cld/layers.hpp"

namespace cld {

// Conv encoder for the map crop plus an LSTM over the (M+1) x H history
// rows. Masked rows are multiplied by their validity bit, so padded
// neighbors cannot influence the output.
struct ContextEncoder {
    Conv2dLayer conv;
    DenseLayer map_fc;
    LstmLayer hist_lstm;
    int map_feat = 0;
    double feature_scale = 0.1;

    ContextEncoder() = default;

    ContextEncoder(const std::string& prefix, const CropSpec& crop, int agents, int map_feat_,
                   int hist_hidden)
        : conv(prefix + ".map_conv", crop.channels, 4, 5, 3),
          map_fc(prefix + ".map_fc", conv_out_count(crop), map_feat_),
          hist_lstm(prefix + ".hist_lstm", agents * 5, hist_hidden),
          map_feat(map_feat_) {}

    static int conv_out_count(const CropSpec& crop) {
        int ho = (crop.h - 5) / 3 + 1;
        int wo = (crop.w - 5) / 3 + 1;
        return 4 * ho * wo;
    }

    int out_dim() const { return map_feat + hist_lstm.hidden; }

    void init(ParameterStore& ps, RngStream& rng) const {
        conv.init(ps, rng);
        map_fc.init(ps, rng);
        hist_lstm.init(ps, rng);
    }

    Var operator()(Tape& t, ParameterStore& ps, const Context& ctx) const {
        Var crop = t.constant(ctx.map_crop);
        Var mfeat = t.tanh_(map_fc(t, ps, t.flatten(conv(t, ps, crop))));

        int agents = ctx.history.shape[0];
        int steps = ctx.history.shape[1];
        std::vector<Var> seq;
        seq.reserve(static_cast<size_t>(steps));
        for (int k = 0; k < steps; ++k) {
            Tensor feat({agents * 5});
            for (int a = 0; a < agents; ++a) {
                double m = ctx.valid_mask[a];
                feat[a * 5 + 0] = m * feature_scale * ctx.history.at(a, k, 0);
                feat[a * 5 + 1] = m * feature_scale * ctx.history.at(a, k, 1);
                feat[a * 5 + 2] = m * feature_scale * ctx.history.at(a, k, 2);
                feat[a * 5 + 3] = m * ctx.history.at(a, k, 3);
                feat[a * 5 + 4] = m;
            }
            seq.push_back(t.constant(std::move(feat)));
        }
        Var hfeat = hist_lstm.last_hidden(t, ps, seq);
        return t.concat2(mfeat, hfeat);
    }
};

struct VaeConfig {
    int latent_dim = 16;
    int horizon = 20;        // T actions per trajectory
    int history_steps = 10;  // H
    int num_neighbors = 4;   // M
    CropSpec crop{};
    int traj_hidden = 48;
    int hist_hidden = 32;
    int map_feat = 32;
    int dec_hidden = 48;
    double kl_weight = 0.02;
    double sigma_floor = 1e-6;
    double dt = 0.1;
    double feature_scale = 0.1;
    ActionBounds bounds{};
};

struct VaeModel {
    VaeConfig cfg;
    ParameterStore params;
    ContextEncoder ctx_enc;
    LstmLayer traj_lstm;
    DenseLayer enc_mu, enc_logvar;
    DenseLayer dec_init_h, dec_init_c;
    LstmLayer dec_lstm;
    DenseLayer dec_head;

    static VaeModel create(const VaeConfig& cfg, uint64_t seed) {
        VaeModel m;
        m.cfg = cfg;
        m.ctx_enc = ContextEncoder("vae.ctx", cfg.crop, cfg.num_neighbors + 1, cfg.map_feat,
                                   cfg.hist_hidden);
        m.ctx_enc.feature_scale = cfg.feature_scale;
        m.traj_lstm = LstmLayer("vae.traj_lstm", 4, cfg.traj_hidden);
        int enc_in = cfg.traj_hidden + m.ctx_enc.out_dim();
        m.enc_mu = DenseLayer("vae.enc_mu", enc_in, cfg.latent_dim);
        m.enc_logvar = DenseLayer("vae.enc_logvar", enc_in, cfg.latent_dim);
        int dec_in = cfg.latent_dim + m.ctx_enc.out_dim();
        m.dec_init_h = DenseLayer("vae.dec_init_h", dec_in, cfg.dec_hidden);
        m.dec_init_c = DenseLayer("vae.dec_init_c", dec_in, cfg.dec_hidden);
        m.dec_lstm = LstmLayer("vae.dec_lstm", dec_in, cfg.dec_hidden);
        m.dec_head = DenseLayer("vae.dec_head", cfg.dec_hidden, 2);

        RngStream rng(mix_seed(seed, 0x7ae5));
        m.ctx_enc.init(m.params, rng);
        m.traj_lstm.init(m.params, rng);
        m.enc_mu.init(m.params, rng);
        m.enc_logvar.init(m.params, rng);
        m.dec_init_h.init(m.params, rng);
        m.dec_init_c.init(m.params, rng);
        m.dec_lstm.init(m.params, rng);
        m.dec_head.init(m.params, rng);
        return m;
    }
};

namespace vae_detail {

// Trajectory states expressed in the frame of the context ego pose,
// scaled like the history features.
inline std::vector<Tensor> trajectory_features(const Trajectory& traj, const AgentState& ego,
                                               double scale) {
    detail::EgoFrame frame(ego);
    std::vector<Tensor> out;
    out.reserve(traj.states.size());
    for (const AgentState& s : traj.states) {
        double u, w;
        frame.to_local(s.x, s.y, u, w);
        out.push_back(Tensor::from_vector(
            {scale * u, scale * w, scale * s.v, wrap_angle(s.theta - ego.theta)}));
    }
    return out;
}

}  // namespace vae_detail

struct EncodeResult {
    Var mu, sigma;
};

inline EncodeResult encode_graph(Tape& t, VaeModel& m, const Trajectory& traj,
                                 const Context& ctx) {
    if (traj.steps() != m.cfg.horizon)
        throw InvalidInput("encode: trajectory horizon mismatch (expected " +
                           std::to_string(m.cfg.horizon) + " actions, got " +
                           std::to_string(traj.steps()) + ")");
    Var ctx_feat = m.ctx_enc(t, m.params, ctx);
    std::vector<Var> seq;
    for (Tensor& f : vae_detail::trajectory_features(traj, ctx.ego_now, m.cfg.feature_scale))
        seq.push_back(t.constant(std::move(f)));
    Var traj_feat = m.traj_lstm.last_hidden(t, m.params, seq);
    Var joint = t.concat2(traj_feat, ctx_feat);
    Var mu = m.enc_mu(t, m.params, joint);
    Var sigma = t.clamp_min(t.exp_(t.scale(m.enc_logvar(t, m.params, joint), 0.5)),
                            m.cfg.sigma_floor);
    return {mu, sigma};
}

inline std::pair<Tensor, Tensor> encode(VaeModel& m, const Trajectory& traj, const Context& ctx) {
    Tape t(false);
    EncodeResult r = encode_graph(t, m, traj, ctx);
    return {t.val(r.mu), t.val(r.sigma)};
}

// z = mu + sigma (.) noise
inline Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& noise) {
    if (!mu.same_shape(sigma) || !mu.same_shape(noise))
        throw ShapeError("reparameterize: shape mismatch");
    for (double s : sigma.data)
        if (!(s > 0.0)) throw InvalidInput("reparameterize: sigma must be > 0");
    Tensor z = mu;
    for (int i = 0; i < z.size(); ++i) z[i] += sigma[i] * noise[i];
    return z;
}

// Decoder head: T bounded actions as graph vars, given latent + context.
inline std::vector<Var> decode_actions_graph(Tape& t, VaeModel& m, Var z, Var ctx_feat) {
    Var input = t.concat2(z, ctx_feat);
    LstmLayer::State state{t.tanh_(m.dec_init_h(t, m.params, input)),
                           t.tanh_(m.dec_init_c(t, m.params, input))};
    std::vector<Var> actions;
    actions.reserve(static_cast<size_t>(m.cfg.horizon));
    for (int i = 0; i < m.cfg.horizon; ++i) {
        state = m.dec_lstm.step(t, m.params, input, state);
        Var raw = t.tanh_(m.dec_head(t, m.params, state.h));
        Tensor bounds_scale = Tensor::from_vector({m.cfg.bounds.accel_max, m.cfg.bounds.yaw_rate_max});
        actions.push_back(t.cmul(raw, std::move(bounds_scale)));
    }
    return actions;
}

inline Trajectory decode(VaeModel& m, const Tensor& z, const Context& ctx) {
    Tape t(false);
    Var ctx_feat = m.ctx_enc(t, m.params, ctx);
    std::vector<Var> action_vars = decode_actions_graph(t, m, t.constant(z), ctx_feat);
    std::vector<AgentAction> actions;
    actions.reserve(action_vars.size());
    for (Var a : action_vars) actions.emplace_back(t.val(a)[0], t.val(a)[1]);
    return dynamics::rollout(ctx.ego_now, actions, m.cfg.dt);
}

struct VaeLossParts {
    Var loss, recon, kl;
};

// Ego-frame reconstruction error of a decoded action sequence against a
// target trajectory: the actions are re-rolled through the unicycle inside
// the graph, and squared position / speed / wrapped-heading errors are
// averaged over the horizon.
inline Var rollout_error_graph(Tape& t, VaeModel& m, const std::vector<Var>& actions,
                               const Trajectory& target_traj, const Context& ctx) {
    detail::EgoFrame frame(ctx.ego_now);
    double dt = m.cfg.dt;
    Var x = t.scalar_const(0.0);
    Var y = t.scalar_const(0.0);
    Var v = t.scalar_const(ctx.ego_now.v);
    Var th = t.scalar_const(0.0);
    Var err_sum = t.scalar_const(0.0);
    for (int i = 0; i < m.cfg.horizon; ++i) {
        Var accel = t.slice(actions[static_cast<size_t>(i)], 0, 1);
        Var yaw = t.slice(actions[static_cast<size_t>(i)], 1, 1);
        x = t.add(x, t.scale(t.mul(v, t.cos_(th)), dt));
        y = t.add(y, t.scale(t.mul(v, t.sin_(th)), dt));
        v = t.relu(t.add(v, t.scale(accel, dt)));
        th = t.add(th, t.scale(yaw, dt));

        const AgentState& target = target_traj.states[static_cast<size_t>(i + 1)];
        double tu, tw;
        frame.to_local(target.x, target.y, tu, tw);
        double t_th = wrap_angle(target.theta - ctx.ego_now.theta);

        Var dx = t.add_scalar(x, -tu);
        Var dy = t.add_scalar(y, -tw);
        Var dv = t.add_scalar(v, -target.v);
        Var dth = t.wrap_to_pi(t.add_scalar(th, -t_th));
        Var err = t.add(t.add(t.mul(dx, dx), t.mul(dy, dy)),
                        t.add(t.mul(dv, dv), t.mul(dth, dth)));
        err_sum = t.add(err_sum, err);
    }
    return t.scale(err_sum, 1.0 / m.cfg.horizon);
}

inline VaeLossParts vae_loss_graph(Tape& t, VaeModel& m, const Trajectory& traj,
                                   const Context& ctx, const Tensor& noise, double kl_weight) {
    EncodeResult enc = encode_graph(t, m, traj, ctx);
    Var z = t.add(enc.mu, t.mul(enc.sigma, t.constant(noise)));
    Var ctx_feat = m.ctx_enc(t, m.params, ctx);
    std::vector<Var> actions = decode_actions_graph(t, m, z, ctx_feat);

    VaeLossParts parts;
    parts.recon = rollout_error_graph(t, m, actions, traj, ctx);
    parts.kl = kl_standard_normal_graph(t, enc.mu, enc.sigma);
    parts.loss = t.add(parts.recon, t.scale(parts.kl, kl_weight));
    return parts;
}

struct VaeSample {
    Trajectory traj;
    Context ctx;
};

struct TrainOptions {
    int epochs = 200;
    double lr = 3e-3;
    int batch_size = 32;
    uint64_t seed = 0;
    double kl_warmup_frac = 0.1;
};

struct EpochRow {
    int epoch = 0;
    double loss = 0.0;
    double kl = 0.0;
    double recon = 0.0;
};

using EpochSink = std::function<void(const EpochRow&)>;

inline std::vector<EpochRow> train_vae(VaeModel& m, const std::vector<VaeSample>& dataset,
                                       const TrainOptions& opt, const EpochSink& sink = {}) {
    if (dataset.empty()) throw InvalidInput("train_vae: empty dataset");
    RngStream rng(mix_seed(opt.seed, 0x5ae));
    std::vector<EpochRow> rows;
    int warmup = std::max(1, static_cast<int>(opt.kl_warmup_frac * opt.epochs));
    std::vector<int> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        // Fisher-Yates with the run's stream
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

        double kl_w = m.cfg.kl_weight * std::min(1.0, static_cast<double>(epoch + 1) / warmup);
        EpochRow row;
        row.epoch = epoch;
        size_t cursor = 0;
        while (cursor < order.size()) {
            size_t batch_n = std::min<size_t>(static_cast<size_t>(opt.batch_size),
                                              order.size() - cursor);
            Tape tape(true);
            Var batch_loss = tape.scalar_const(0.0);
            for (size_t b = 0; b < batch_n; ++b) {
                const VaeSample& sample = dataset[static_cast<size_t>(order[cursor + b])];
                Tensor noise({m.cfg.latent_dim});
                for (double& n : noise.data) n = rng.normal();
                VaeLossParts parts = vae_loss_graph(tape, m, sample.traj, sample.ctx, noise, kl_w);
                batch_loss = tape.add(batch_loss, parts.loss);
                row.loss += tape.val(parts.loss)[0];
                row.kl += tape.val(parts.kl)[0];
                row.recon += tape.val(parts.recon)[0];
            }
            batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(batch_n));
            tape.backward(batch_loss);
            m.params.adam_update(opt.lr);
            cursor += batch_n;
        }
        row.loss /= static_cast<double>(dataset.size());
        row.kl /= static_cast<double>(dataset.size());
        row.recon /= static_cast<double>(dataset.size());
        rows.push_back(row);
        if (sink) sink(row);
    }
    return rows;
}

// Position RMSE of deterministic (z = mu) reconstructions, in meters.
inline double vae_position_rmse(VaeModel& m, const std::vector<VaeSample>& dataset) {
    if (dataset.empty()) throw InvalidInput("vae_position_rmse: empty dataset");
    double acc = 0.0;
    long long count = 0;
    for (const VaeSample& s : dataset) {
        auto [mu, sigma] = encode(m, s.traj, s.ctx);
        Trajectory rec = decode(m, mu, s.ctx);
        for (size_t i = 1; i < s.traj.states.size(); ++i) {
            double dx = rec.states[i].x - s.traj.states[i].x;
            double dy = rec.states[i].y - s.traj.states[i].y;
            acc += dx * dx + dy * dy;
            count += 1;
        }
    }
    return std::sqrt(acc / static_cast<double>(count));
}

}  // namespace cld
