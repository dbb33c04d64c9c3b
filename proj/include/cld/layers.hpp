#pragma once

#include <string>
#include <vector>

#include "cld/graph.hpp"

namespace cld {

using graph::Tape;
using graph::Var;

struct DenseLayer {
    std::string w_name, b_name;
    int in = 0, out = 0;

    DenseLayer() = default;
    DenseLayer(std::string prefix, int in_, int out_)
        : w_name(prefix + ".w"), b_name(prefix + ".b"), in(in_), out(out_) {}

    void init(ParameterStore& ps, RngStream& rng) const {
        ps.add(w_name, xavier_uniform({out, in}, in, out, rng));
        ps.add(b_name, Tensor::zeros({out}));
    }

    Var operator()(Tape& t, ParameterStore& ps, Var x) const {
        return t.add(t.matvec(t.param(ps, w_name), x), t.param(ps, b_name));
    }
};

struct Conv2dLayer {
    std::string k_name, b_name;
    int in_c = 0, out_c = 0, ksize = 0, stride = 1;

    Conv2dLayer() = default;
    Conv2dLayer(std::string prefix, int in_c_, int out_c_, int ksize_, int stride_)
        : k_name(prefix + ".k"), b_name(prefix + ".b"),
          in_c(in_c_), out_c(out_c_), ksize(ksize_), stride(stride_) {}

    void init(ParameterStore& ps, RngStream& rng) const {
        int fan_in = in_c * ksize * ksize;
        int fan_out = out_c * ksize * ksize;
        ps.add(k_name, xavier_uniform({out_c, in_c, ksize, ksize}, fan_in, fan_out, rng));
        ps.add(b_name, Tensor::zeros({out_c}));
    }

    Var operator()(Tape& t, ParameterStore& ps, Var input) const {
        return t.conv2d(input, t.param(ps, k_name), t.param(ps, b_name), stride);
    }
};

// Single-layer LSTM cell; gate matrix rows ordered [input, forget, output, cell].
// Forget-gate bias starts at 1.
struct LstmLayer {
    std::string wx_name, wh_name, b_name;
    int in = 0, hidden = 0;

    LstmLayer() = default;
    LstmLayer(std::string prefix, int in_, int hidden_)
        : wx_name(prefix + ".wx"), wh_name(prefix + ".wh"), b_name(prefix + ".b"),
          in(in_), hidden(hidden_) {}

    void init(ParameterStore& ps, RngStream& rng) const {
        int fan = in + hidden;
        ps.add(wx_name, xavier_uniform({4 * hidden, in}, fan, hidden, rng));
        ps.add(wh_name, xavier_uniform({4 * hidden, hidden}, fan, hidden, rng));
        Tensor b = Tensor::zeros({4 * hidden});
        for (int i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;
        ps.add(b_name, b);
    }

    struct State {
        Var h, c;
    };

    State initial(Tape& t) const {
        return {t.constant(Tensor::zeros({hidden})), t.constant(Tensor::zeros({hidden}))};
    }

    State step(Tape& t, ParameterStore& ps, Var x, const State& prev) const {
        Var g = t.add(t.add(t.matvec(t.param(ps, wx_name), x),
                            t.matvec(t.param(ps, wh_name), prev.h)),
                      t.param(ps, b_name));
        Var gi = t.sigmoid_(t.slice(g, 0, hidden));
        Var gf = t.sigmoid_(t.slice(g, hidden, hidden));
        Var go = t.sigmoid_(t.slice(g, 2 * hidden, hidden));
        Var gc = t.tanh_(t.slice(g, 3 * hidden, hidden));
        Var c = t.add(t.mul(gf, prev.c), t.mul(gi, gc));
        Var h = t.mul(go, t.tanh_(c));
        return {h, c};
    }

    // final hidden state after consuming xs in order
    Var last_hidden(Tape& t, ParameterStore& ps, const std::vector<Var>& xs) const {
        State s = initial(t);
        for (Var x : xs) s = step(t, ps, x, s);
        return s.h;
    }
};

// Sinusoidal embedding of an integer step index; constant w.r.t. parameters.
inline Tensor sinusoidal_timestep_embedding(int k, int dim) {
    if (dim < 2 || dim % 2 != 0) throw InvalidInput("timestep embedding: dim must be even >= 2");
    Tensor emb({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        emb[2 * i] = std::sin(k * freq);
        emb[2 * i + 1] = std::cos(k * freq);
    }
    return emb;
}

// ---- Gaussian densities ----

// log N(x; mu, diag(var)), summed over dimensions.
inline double gaussian_log_prob(const Tensor& x, const Tensor& mu, const Tensor& var) {
    if (!x.same_shape(mu) || !x.same_shape(var))
        throw ShapeError("gaussian_log_prob: shape mismatch");
    double acc = 0.0;
    for (int d = 0; d < x.size(); ++d) {
        if (!(var[d] > 0.0)) throw InvalidInput("gaussian_log_prob: non-positive variance");
        double diff = x[d] - mu[d];
        acc += -0.5 * std::log(kTwoPi * var[d]) - diff * diff / (2.0 * var[d]);
    }
    return acc;
}

// Graph version with constant x and variance; gradient flows into mu.
inline Var gaussian_log_prob_graph(Tape& t, const Tensor& x, Var mu, const Tensor& var) {
    int d = x.size();
    Tensor inv2v({d});
    double const_part = 0.0;
    for (int i = 0; i < d; ++i) {
        if (!(var[i] > 0.0)) throw InvalidInput("gaussian_log_prob: non-positive variance");
        inv2v[i] = 1.0 / (2.0 * var[i]);
        const_part += -0.5 * std::log(kTwoPi * var[i]);
    }
    Var diff = t.sub(t.constant(x), mu);
    Var quad = t.sum(t.cmul(t.mul(diff, diff), std::move(inv2v)));
    return t.add_scalar(t.neg(quad), const_part);
}

// KL( N(mu, diag(sigma^2)) || N(0, I) ), summed over dimensions.
inline double kl_standard_normal(const Tensor& mu, const Tensor& sigma) {
    if (!mu.same_shape(sigma)) throw ShapeError("kl_standard_normal: shape mismatch");
    double acc = 0.0;
    for (int d = 0; d < mu.size(); ++d) {
        if (!(sigma[d] > 0.0)) throw InvalidInput("kl_standard_normal: non-positive sigma");
        double s2 = sigma[d] * sigma[d];
        acc += 0.5 * (mu[d] * mu[d] + s2 - 1.0 - std::log(s2));
    }
    return acc;
}

inline Var kl_standard_normal_graph(Tape& t, Var mu, Var sigma) {
    for (double s : t.val(sigma).data)
        if (!(s > 0.0)) throw InvalidInput("kl_standard_normal: non-positive sigma");
    Var mu2 = t.mul(mu, mu);
    Var s2 = t.mul(sigma, sigma);
    Var log_s2 = t.scale(t.log_(sigma), 2.0);
    Var terms = t.sub(t.add(mu2, s2), t.add_scalar(log_s2, 1.0));
    return t.scale(t.sum(terms), 0.5);
}

}  // namespace cld
