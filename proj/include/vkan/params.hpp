#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vkan/autodiff.hpp"
#include "vkan/rng.hpp"

namespace vkan {

/// Named registry of leaf tensors (weights and buffers). Names are unique
/// dotted paths; insertion order is preserved so checkpoints and parameter
/// counts are deterministic.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init, bool trainable = true) {
        if (map_.count(name)) {
            throw std::invalid_argument("duplicate parameter name: " + name);
        }
        Var v = leaf(std::move(init), trainable);
        map_.emplace(name, v);
        order_.push_back(name);
        return v;
    }

    const Var& get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }

    std::vector<std::pair<std::string, Var>> entries() const {
        std::vector<std::pair<std::string, Var>> out;
        out.reserve(order_.size());
        for (const auto& n : order_) out.emplace_back(n, map_.at(n));
        return out;
    }

    std::vector<Var> trainable() const {
        std::vector<Var> out;
        for (const auto& n : order_) {
            const Var& v = map_.at(n);
            if (v.node()->trainable) out.push_back(v);
        }
        return out;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [name, v] : map_) n += v.numel();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Var> map_;
};

// Initializers draw from a stream keyed by the parameter name, so the full
// tree is a pure function of (seed, config) regardless of build order.

inline Tensor init_uniform(DType dt, std::vector<std::int64_t> shape, double bound,
                           std::uint64_t seed, const std::string& name) {
    CounterRng rng(seed, name);
    Tensor t(dt, std::move(shape));
    dispatch_float(dt, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.data<T>()) v = static_cast<T>(rng.next_uniform(-bound, bound));
    });
    return t;
}

inline Tensor init_normal(DType dt, std::vector<std::int64_t> shape, double stddev,
                          std::uint64_t seed, const std::string& name) {
    CounterRng rng(seed, name);
    Tensor t(dt, std::move(shape));
    dispatch_float(dt, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.data<T>()) v = static_cast<T>(stddev * rng.next_normal());
    });
    return t;
}

/// Kaiming-style init for conv kernels: normal with std sqrt(2 / fan_in).
inline Tensor init_conv_weight(DType dt, std::vector<std::int64_t> shape, std::uint64_t seed,
                               const std::string& name) {
    const double fan_in =
        static_cast<double>(shape[1]) * static_cast<double>(shape[2]) * static_cast<double>(shape[3]);
    return init_normal(dt, shape, std::sqrt(2.0 / fan_in), seed, name);
}

}  // namespace vkan
