#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/random.hpp"
#include "counsel/tensor.hpp"

namespace counsel {

// Named, ordered collection of trainable tensors. Iteration order is the
// lexicographic name order, which makes checkpoints and init reproducible.
class ParameterStore {
public:
    const Parameter& add(const std::string& name, Tensor t) {
        auto [it, inserted] = params_.emplace(name, make_parameter(std::move(t)));
        if (!inserted) throw std::logic_error("duplicate parameter '" + name + "'");
        return it->second;
    }

    const Parameter& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p->numel();
        return n;
    }

    std::vector<Parameter> list() const {
        std::vector<Parameter> out;
        out.reserve(params_.size());
        for (const auto& [_, p] : params_) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p->zero_grad();
    }

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    // Deep copy with fresh gradient state.
    ParameterStore clone() const {
        ParameterStore out;
        for (const auto& [name, p] : params_) {
            Tensor t(p->shape(), p->values());
            out.add(name, std::move(t));
        }
        return out;
    }

private:
    std::map<std::string, Parameter> params_;
};

// Glorot/Xavier uniform over a [fan_in, fan_out] matrix.
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (double& v : t.data()) v = rng.uniform(-limit, limit);
    return t;
}

inline bool parameters_equal(const ParameterStore& a, const ParameterStore& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        if (ia->second->shape() != ib->second->shape()) return false;
        if (ia->second->values() != ib->second->values()) return false;
    }
    return true;
}

}  // namespace counsel
