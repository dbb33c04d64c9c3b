#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "cld/core_types.hpp"
#include "cld/params.hpp"
#include "cld/tensor.hpp"

namespace cld::graph {

struct Var {
    int id = -1;
};

// Dynamic reverse-mode tape. Ops append nodes; backward() walks the node
// list in reverse and accumulates parameter gradients into their store.
// A tape built with track_grads=false skips all backward bookkeeping and
// serves as the plain inference path (same arithmetic, same order).
class Tape {
public:
    explicit Tape(bool track_grads = true) : track_(track_grads) {}

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

    const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

    void reset() {
        nodes_.clear();
        param_nodes_.clear();
        param_cache_.clear();
    }

    size_t node_count() const { return nodes_.size(); }

    Var constant(Tensor t) { return push(std::move(t), false, {}); }

    Var scalar_const(double v) { return constant(Tensor::scalar(v)); }

    Var param(ParameterStore& ps, const std::string& name) {
        ParameterStore::Entry* e = &ps.at(name);
        auto it = param_cache_.find(e);
        if (it != param_cache_.end()) return Var{it->second};
        Var v = push(e->value, track_, {});
        if (track_) param_nodes_.push_back({e, v.id});
        param_cache_[e] = v.id;
        return v;
    }

    // ---- elementwise binary ----

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int i = 0; i < out.size(); ++i) out[i] += vb[i];
        return binary(std::move(out), a, b, [](Tape& t, const Tensor& g, int ia, int ib) {
            t.accum(ia, g);
            t.accum(ib, g);
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return binary(std::move(out), a, b, [](Tape& t, const Tensor& g, int ia, int ib) {
            t.accum(ia, g);
            t.accum_neg(ib, g);
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor out = val(a);
        const Tensor& vb = val(b);
        for (int i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return binary(std::move(out), a, b, [](Tape& t, const Tensor& g, int ia, int ib) {
            const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb2 = t.nodes_[static_cast<size_t>(ib)].value;
            if (t.wants(ia)) {
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
            }
            if (t.wants(ib)) {
                Tensor& gb = t.grad_buf(ib);
                for (int i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    // elementwise min; ties go to the first argument
    Var minimum(Var a, Var b) {
        check_same(a, b, "minimum");
        const Tensor& va = val(a);
        const Tensor& vb = val(b);
        Tensor out = va;
        for (int i = 0; i < out.size(); ++i) out[i] = std::min(va[i], vb[i]);
        return binary(std::move(out), a, b, [](Tape& t, const Tensor& g, int ia, int ib) {
            const Tensor& va2 = t.nodes_[static_cast<size_t>(ia)].value;
            const Tensor& vb2 = t.nodes_[static_cast<size_t>(ib)].value;
            if (t.wants(ia)) {
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < g.size(); ++i)
                    if (va2[i] <= vb2[i]) ga[i] += g[i];
            }
            if (t.wants(ib)) {
                Tensor& gb = t.grad_buf(ib);
                for (int i = 0; i < g.size(); ++i)
                    if (vb2[i] < va2[i]) gb[i] += g[i];
            }
        });
    }

    // ---- elementwise with constants ----

    Var neg(Var a) { return unary_map(a, [](double x) { return -x; },
                                      [](double, double) { return -1.0; }); }

    Var scale(Var a, double c) {
        return unary_map(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
    }

    Var add_scalar(Var a, double c) {
        return unary_map(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
    }

    // elementwise multiply by a constant tensor
    Var cmul(Var a, Tensor w) {
        if (w.shape != val(a).shape) throw ShapeError("cmul: shape mismatch");
        Tensor out = val(a);
        for (int i = 0; i < out.size(); ++i) out[i] *= w[i];
        Var r = push(std::move(out), wants(a.id), {a});
        if (node(r).requires_grad) {
            int ia = a.id, ir = r.id;
            node(r).backward = [ia, ir, w = std::move(w)](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < g.size(); ++i) ga[i] += g[i] * w[i];
            };
        }
        return r;
    }

    // ---- nonlinearities ----

    Var tanh_(Var a) {
        return unary_value(a, [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
    }

    Var sigmoid_(Var a) {
        return unary_value(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                           [](double, double y) { return y * (1.0 - y); });
    }

    Var relu(Var a) {
        return unary_map(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Var exp_(Var a) {
        return unary_value(a, [](double x) { return std::exp(x); },
                           [](double, double y) { return y; });
    }

    Var log_(Var a) {
        return unary_map(a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
    }

    Var cos_(Var a) {
        return unary_map(a, [](double x) { return std::cos(x); },
                         [](double x, double) { return -std::sin(x); });
    }

    Var sin_(Var a) {
        return unary_map(a, [](double x) { return std::sin(x); },
                         [](double x, double) { return std::cos(x); });
    }

    Var clamp_min(Var a, double lo) {
        return unary_map(a, [lo](double x) { return x > lo ? x : lo; },
                         [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
    }

    Var clamp(Var a, double lo, double hi) {
        return unary_map(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                         [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    }

    // wrap into (-pi, pi]; gradient is 1 almost everywhere
    Var wrap_to_pi(Var a) {
        return unary_map(a, [](double x) { return wrap_angle(x); },
                         [](double, double) { return 1.0; });
    }

    // ---- linear algebra ----

    Var matvec(Var w, Var x) {
        const Tensor& vw = val(w);
        const Tensor& vx = val(x);
        if (vw.shape.size() != 2 || vx.shape.size() != 1 || vw.shape[1] != vx.shape[0])
            throw ShapeError("matvec: incompatible shapes " + shape_str(vw.shape) + " x " +
                             shape_str(vx.shape));
        int m = vw.shape[0], n = vw.shape[1];
        Tensor out({m});
        for (int i = 0; i < m; ++i) {
            double acc = 0.0;
            const double* row = vw.data.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) acc += row[j] * vx[j];
            out[i] = acc;
        }
        return binary(std::move(out), w, x, [](Tape& t, const Tensor& g, int iw, int ix) {
            const Tensor& vw2 = t.nodes_[static_cast<size_t>(iw)].value;
            const Tensor& vx2 = t.nodes_[static_cast<size_t>(ix)].value;
            int m = vw2.shape[0], n = vw2.shape[1];
            if (t.wants(iw)) {
                Tensor& gw = t.grad_buf(iw);
                for (int i = 0; i < m; ++i) {
                    double gi = g[i];
                    if (gi == 0.0) continue;
                    double* row = gw.data.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) row[j] += gi * vx2[j];
                }
            }
            if (t.wants(ix)) {
                Tensor& gx = t.grad_buf(ix);
                for (int i = 0; i < m; ++i) {
                    double gi = g[i];
                    if (gi == 0.0) continue;
                    const double* row = vw2.data.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) gx[j] += gi * row[j];
                }
            }
        });
    }

    // Valid-mode strided 2-D convolution: input [C,H,W], kernel [O,C,kh,kw],
    // bias [O] -> [O,Ho,Wo].
    Var conv2d(Var input, Var kernel, Var bias, int stride) {
        const Tensor& vi = val(input);
        const Tensor& vk = val(kernel);
        const Tensor& vb = val(bias);
        if (vi.shape.size() != 3 || vk.shape.size() != 4 || vb.shape.size() != 1)
            throw ShapeError("conv2d: expected input [C,H,W], kernel [O,C,kh,kw], bias [O]");
        int C = vi.shape[0], H = vi.shape[1], W = vi.shape[2];
        int O = vk.shape[0], kh = vk.shape[2], kw = vk.shape[3];
        if (vk.shape[1] != C || vb.shape[0] != O) throw ShapeError("conv2d: channel mismatch");
        if (stride < 1 || H < kh || W < kw) throw ShapeError("conv2d: bad stride or kernel size");
        int Ho = (H - kh) / stride + 1;
        int Wo = (W - kw) / stride + 1;
        Tensor out({O, Ho, Wo});
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    double acc = vb[o];
                    for (int c = 0; c < C; ++c)
                        for (int a = 0; a < kh; ++a)
                            for (int b = 0; b < kw; ++b)
                                acc += vi.at(c, i * stride + a, j * stride + b) * vk.at4(o, c, a, b);
                    out.at(o, i, j) = acc;
                }
        bool req = wants(input.id) || wants(kernel.id) || wants(bias.id);
        Var r = push(std::move(out), req, {input, kernel, bias});
        if (node(r).requires_grad) {
            int ii = input.id, ik = kernel.id, ib = bias.id, ir = r.id;
            node(r).backward = [ii, ik, ib, ir, stride](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                const Tensor& vi2 = t.nodes_[static_cast<size_t>(ii)].value;
                const Tensor& vk2 = t.nodes_[static_cast<size_t>(ik)].value;
                int C = vi2.shape[0];
                int O = vk2.shape[0], kh = vk2.shape[2], kw = vk2.shape[3];
                int Ho = g.shape[1], Wo = g.shape[2];
                Tensor* gi = t.wants(ii) ? &t.grad_buf(ii) : nullptr;
                Tensor* gk = t.wants(ik) ? &t.grad_buf(ik) : nullptr;
                Tensor* gb = t.wants(ib) ? &t.grad_buf(ib) : nullptr;
                for (int o = 0; o < O; ++o)
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            double go = g.at(o, i, j);
                            if (go == 0.0) continue;
                            if (gb) (*gb)[o] += go;
                            for (int c = 0; c < C; ++c)
                                for (int a = 0; a < kh; ++a)
                                    for (int b = 0; b < kw; ++b) {
                                        if (gk)
                                            gk->at4(o, c, a, b) +=
                                                go * vi2.at(c, i * stride + a, j * stride + b);
                                        if (gi)
                                            gi->at(c, i * stride + a, j * stride + b) +=
                                                go * vk2.at4(o, c, a, b);
                                    }
                        }
            };
        }
        return r;
    }

    // ---- shape ops ----

    Var concat(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("concat: empty");
        int total = 0;
        bool req = false;
        for (Var p : parts) {
            if (val(p).shape.size() != 1) throw ShapeError("concat: rank-1 only");
            total += val(p).size();
            req = req || wants(p.id);
        }
        Tensor out({total});
        int off = 0;
        for (Var p : parts) {
            const Tensor& vp = val(p);
            for (int i = 0; i < vp.size(); ++i) out[off + i] = vp[i];
            off += vp.size();
        }
        std::vector<Var> ps(parts.begin(), parts.end());
        Var r = push(std::move(out), req && track_, ps);
        if (node(r).requires_grad) {
            std::vector<int> ids;
            for (Var p : ps) ids.push_back(p.id);
            int ir = r.id;
            node(r).backward = [ids, ir](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                int off2 = 0;
                for (int pid : ids) {
                    int n = t.nodes_[static_cast<size_t>(pid)].value.size();
                    if (t.wants(pid)) {
                        Tensor& gp = t.grad_buf(pid);
                        for (int i = 0; i < n; ++i) gp[i] += g[off2 + i];
                    }
                    off2 += n;
                }
            };
        }
        return r;
    }

    Var concat2(Var a, Var b) {
        Var parts[2] = {a, b};
        return concat(parts);
    }

    Var concat3(Var a, Var b, Var c) {
        Var parts[3] = {a, b, c};
        return concat(parts);
    }

    Var slice(Var a, int begin, int len) {
        const Tensor& va = val(a);
        if (va.shape.size() != 1 || begin < 0 || begin + len > va.shape[0])
            throw ShapeError("slice: out of range");
        Tensor out({len});
        for (int i = 0; i < len; ++i) out[i] = va[begin + i];
        Var r = push(std::move(out), wants(a.id), {a});
        if (node(r).requires_grad) {
            int ia = a.id, ir = r.id;
            node(r).backward = [ia, ir, begin, len](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < len; ++i) ga[begin + i] += g[i];
            };
        }
        return r;
    }

    // view a rank>=1 tensor as rank-1
    Var flatten(Var a) {
        Tensor out({val(a).size()});
        out.data = val(a).data;
        Var r = push(std::move(out), wants(a.id), {a});
        if (node(r).requires_grad) {
            int ia = a.id, ir = r.id;
            node(r).backward = [ia, ir](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < g.size(); ++i) ga.data[static_cast<size_t>(i)] += g[i];
            };
        }
        return r;
    }

    // ---- reductions ----

    Var sum(Var a) {
        const Tensor& va = val(a);
        double acc = 0.0;
        for (int i = 0; i < va.size(); ++i) acc += va[i];
        Var r = push(Tensor::scalar(acc), wants(a.id), {a});
        if (node(r).requires_grad) {
            int ia = a.id, ir = r.id;
            node(r).backward = [ia, ir](Tape& t) {
                double g = t.nodes_[static_cast<size_t>(ir)].grad[0];
                Tensor& ga = t.grad_buf(ia);
                for (double& x : ga.data) x += g;
            };
        }
        return r;
    }

    Var mean(Var a) { return scale(sum(a), 1.0 / val(a).size()); }

    // ---- backward ----

    void backward(Var loss) {
        if (!track_) throw InvalidInput("Tape::backward on a no-grad tape");
        if (val(loss).size() != 1) throw ShapeError("backward: loss must be scalar");
        grad_buf(loss.id)[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || !n.backward) continue;
            if (n.grad.data.empty()) continue;  // not on any path to the loss
            n.backward(*this);
        }
        for (auto& [entry, id] : param_nodes_) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.data.empty()) continue;
            for (size_t i = 0; i < entry->grad.data.size(); ++i)
                entry->grad.data[i] += n.grad.data[i];
        }
    }

    bool tracking() const { return track_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // lazily allocated
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    bool track_;
    std::vector<Node> nodes_;
    std::vector<std::pair<ParameterStore::Entry*, int>> param_nodes_;
    std::unordered_map<const ParameterStore::Entry*, int> param_cache_;

    Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }

    bool wants(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    void accum(int id, const Tensor& g) {
        if (!wants(id)) return;
        Tensor& dst = grad_buf(id);
        for (int i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    void accum_neg(int id, const Tensor& g) {
        if (!wants(id)) return;
        Tensor& dst = grad_buf(id);
        for (int i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }

    Var push(Tensor value, bool needs_grad, std::initializer_list<Var> parents) {
        return push(std::move(value), needs_grad, std::vector<Var>(parents));
    }

    Var push(Tensor value, bool needs_grad, const std::vector<Var>& /*parents*/) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = needs_grad && track_;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void check_same(Var a, Var b, const char* op) {
        if (!val(a).same_shape(val(b)))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) +
                             " vs " + shape_str(val(b).shape));
    }

    template <typename Back>
    Var binary(Tensor out, Var a, Var b, Back back) {
        bool req = wants(a.id) || wants(b.id);
        Var r = push(std::move(out), req, {a, b});
        if (node(r).requires_grad) {
            int ia = a.id, ib = b.id, ir = r.id;
            node(r).backward = [ia, ib, ir, back](Tape& t) {
                back(t, t.nodes_[static_cast<size_t>(ir)].grad, ia, ib);
            };
        }
        return r;
    }

    // derivative given (input, output)
    template <typename F, typename DF>
    Var unary_map(Var a, F f, DF df) {
        const Tensor& va = val(a);
        Tensor out = va;
        for (double& x : out.data) x = f(x);
        Var r = push(std::move(out), wants(a.id), {a});
        if (node(r).requires_grad) {
            int ia = a.id, ir = r.id;
            node(r).backward = [ia, ir, f, df](Tape& t) {
                const Tensor& g = t.nodes_[static_cast<size_t>(ir)].grad;
                const Tensor& va2 = t.nodes_[static_cast<size_t>(ia)].value;
                const Tensor& vr = t.nodes_[static_cast<size_t>(ir)].value;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < g.size(); ++i) ga[i] += g[i] * df(va2[i], vr[i]);
            };
        }
        return r;
    }

    template <typename F, typename DF>
    Var unary_value(Var a, F f, DF df) {
        return unary_map(a, f, df);
    }
};

}  // namespace cld::graph
