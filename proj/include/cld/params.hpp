#pragma once

#include <map>
#include <string>

#include "cld/common.hpp"
#include "cld/tensor.hpp"

namespace cld {

// Named trainable arrays with gradient slots and Adam moments. Iteration
// order is the sorted name order, which keeps updates and checkpoints
// deterministic.
class ParameterStore {
public:
    struct Entry {
        Tensor value;
        Tensor grad;
        Tensor adam_m;
        Tensor adam_v;
    };

    Entry& add(const std::string& name, Tensor init) {
        if (entries_.count(name)) throw InvalidInput("ParameterStore: duplicate name " + name);
        Entry e;
        e.grad = Tensor::zeros(init.shape);
        e.adam_m = Tensor::zeros(init.shape);
        e.adam_v = Tensor::zeros(init.shape);
        e.value = std::move(init);
        return entries_.emplace(name, std::move(e)).first->second;
    }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw InvalidInput("ParameterStore: unknown name " + name);
        return it->second;
    }

    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw InvalidInput("ParameterStore: unknown name " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [_, e] : entries_) n += e.value.data.size();
        return n;
    }

    void zero_grads() {
        for (auto& [_, e] : entries_)
            for (double& g : e.grad.data) g = 0.0;
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& [_, e] : entries_)
            for (double g : e.grad.data) s += g * g;
        return std::sqrt(s);
    }

    // Copy of parameter values only (fresh grads/moments).
    ParameterStore snapshot_values() const {
        ParameterStore out;
        for (const auto& [name, e] : entries_) out.add(name, e.value);
        out.step_count_ = 0;
        return out;
    }

    int64_t step_count() const { return step_count_; }

    // Standard bias-corrected Adam descent step; zeroes gradients.
    void adam_update(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        step_count_ += 1;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
        for (auto& [name, e] : entries_) {
            for (size_t i = 0; i < e.value.data.size(); ++i) {
                double g = e.grad.data[i];
                e.adam_m.data[i] = beta1 * e.adam_m.data[i] + (1.0 - beta1) * g;
                e.adam_v.data[i] = beta2 * e.adam_v.data[i] + (1.0 - beta2) * g * g;
                double mhat = e.adam_m.data[i] / bc1;
                double vhat = e.adam_v.data[i] / bc2;
                e.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
                e.grad.data[i] = 0.0;
            }
            e.value.check_finite(("adam_update: " + name).c_str());
        }
    }

private:
    std::map<std::string, Entry> entries_;
    int64_t step_count_ = 0;
};

// Xavier-uniform initialization, seeded.
inline Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, RngStream& rng) {
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-a, a);
    return t;
}

}  // namespace cld
