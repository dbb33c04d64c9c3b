#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cld/graph.hpp"

namespace cld::testutil {

// Central finite-difference gradient oracle. Rebuilds the loss graph from
// the current store values on every evaluation, so it is independent of the
// backward pass it checks.
struct FdReport {
    double max_rel_err = 0.0;
    int probes = 0;
};

template <typename BuildLoss>
FdReport fd_check_grads(ParameterStore& ps, BuildLoss build, int n_probes, uint64_t seed,
                        double h = 1e-5) {
    ps.zero_grads();
    {
        graph::Tape tape(true);
        graph::Var loss = build(tape);
        tape.backward(loss);
    }
    std::vector<std::pair<std::string, int>> coords;
    for (const auto& [name, e] : ps.entries())
        for (int i = 0; i < e.value.size(); ++i) coords.push_back({name, i});

    auto eval = [&]() {
        graph::Tape tape(false);
        return tape.val(build(tape))[0];
    };

    RngStream rng(seed);
    FdReport rep;
    for (int p = 0; p < n_probes; ++p) {
        auto [name, idx] = coords[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(coords.size()) - 1))];
        auto& entry = ps.at(name);
        double saved = entry.value[idx];
        entry.value[idx] = saved + h;
        double lp = eval();
        entry.value[idx] = saved - h;
        double lm = eval();
        entry.value[idx] = saved;
        double fd = (lp - lm) / (2.0 * h);
        double ad = entry.grad[idx];
        double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
        double rel = std::abs(fd - ad) / denom;
        if (std::abs(fd - ad) < 1e-9) rel = 0.0;  // both effectively zero
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        rep.probes += 1;
    }
    ps.zero_grads();
    return rep;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double variance_of(const std::vector<double>& v) {
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

}  // namespace cld::testutil
