// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lbw/autograd.hpp"

namespace lbw {

/// Ordered, named parameter table.
template <class T>
class ParamStore {
public:
    Var<T> add(const std::string& name, Mat<T> init) {
        LBW_REQUIRE(!index_.count(name), ErrorCode::invalid_argument, "duplicate parameter " + name);
        index_[name] = params_.size();
        params_.push_back({name, parameter(std::move(init))});
        return params_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const Var<T>& get(const std::string& name) const {
        const auto it = index_.find(name);
        LBW_REQUIRE(it != index_.end(), ErrorCode::invalid_argument, "unknown parameter " + name);
        return params_[it->second].second;
    }
    Var<T>& get(const std::string& name) {
        const auto it = index_.find(name);
        LBW_REQUIRE(it != index_.end(), ErrorCode::invalid_argument, "unknown parameter " + name);
        return params_[it->second].second;
    }

    const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }
    std::vector<std::pair<std::string, Var<T>>>& items() { return params_; }
    size_t size() const { return params_.size(); }

    size_t count_scalars() const {
        size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

    /// requires_grad on every parameter whose name starts with prefix.
    void set_trainable(std::string_view prefix, bool on) {
        for (auto& [name, p] : params_)
            if (name.rfind(prefix, 0) == 0) p.set_requires_grad(on);
    }
    void set_all_trainable(bool on) { set_trainable("", on); }

    /// Copies values (not grads or flags) from a store with the same names.
    template <class U>
    void copy_values_from(const ParamStore<U>& other, std::string_view from_prefix = "", std::string_view to_prefix = "") {
        for (auto& [name, p] : params_) {
            if (name.rfind(to_prefix, 0) != 0) continue;
            const std::string src = std::string(from_prefix) + name.substr(to_prefix.size());
            p.mutable_value() = other.get(src).value().template cast<T>();
        }
    }

    /// FNV-1a over names and raw value bytes.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&](const void* data, size_t n) {
            const auto* b = static_cast<const unsigned char*>(data);
            for (size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
        };
        for (const auto& [name, p] : params_) {
            mix(name.data(), name.size());
            mix(p.value().v.data(), p.value().v.size() * sizeof(T));
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

/// Turns requires_grad off for a store while in scope. Keep it alive through
/// backward(): ops read the flag again during the reverse pass.
template <class T>
class FreezeScope {
public:
    explicit FreezeScope(ParamStore<T>& store) : store_(store) {
        for (auto& [_, p] : store_.items()) {
            flags_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~FreezeScope() {
        size_t i = 0;
        for (auto& [_, p] : store_.items()) p.set_requires_grad(flags_[i++]);
    }
    FreezeScope(const FreezeScope&) = delete;
    FreezeScope& operator=(const FreezeScope&) = delete;

private:
    ParamStore<T>& store_;
    std::vector<bool> flags_;
};

template <class T>
Mat<T> normal_init(int rows, int cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, stddev);
    Mat<T> m(rows, cols);
    for (auto& x : m.v) x = static_cast<T>(n(rng));
    return m;
}

/// Adam with bias correction. Steps only parameters that carry a gradient.
template <class T>
class Adam {
public:
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, grad_clip = 0;  // clip on global norm, 0 = off

    Adam() = default;
    explicit Adam(double learning_rate) : lr(learning_rate) {}

    /// Returns the number of parameter tensors updated.
    int step(ParamStore<T>& store) {
        ++t_;
        double scale_by = 1.0;
        if (grad_clip > 0) {
            double sq = 0;
            for (auto& [_, p] : store.items())
                if (p.requires_grad() && p.has_grad())
                    for (T g : p.grad().v) sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > grad_clip) scale_by = grad_clip / norm;
        }
        const double c1 = 1.0 - std::pow(beta1, t_), c2 = 1.0 - std::pow(beta2, t_);
        int updated = 0;
        for (auto& [name, p] : store.items()) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& st = state_[name];
            if (st.m.size() != p.value().size()) st.m.assign(p.value().size(), 0.0), st.v.assign(p.value().size(), 0.0);
            auto& val = p.mutable_value().v;
            const auto& g = p.grad().v;
            for (size_t i = 0; i < val.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * scale_by;
                st.m[i] = beta1 * st.m[i] + (1 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1 - beta2) * gi * gi;
                val[i] -= static_cast<T>(lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps));
            }
            ++updated;
        }
        return updated;
    }

    long steps() const { return t_; }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::unordered_map<std::string, Slot> state_;
    long t_ = 0;
};

}  // namespace lbw
