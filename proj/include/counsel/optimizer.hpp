#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "counsel/tensor.hpp"

namespace counsel {

enum class Algorithm { sgd, adam };

struct OptimizerConfig {
    Algorithm algorithm = Algorithm::adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class OptimizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Applies one update per step() to every parameter and then zeroes its
// gradient. Adam moments are keyed by the parameter's address, so the same
// parameter list must be passed on every step.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }
    std::size_t steps() const { return step_; }

    void step(std::span<const Parameter> params) {
        for (const Parameter& p : params) {
            if (!p->has_grad()) throw OptimizerError("parameter has no gradient");
        }
        ++step_;
        for (const Parameter& p : params) {
            auto w = p->data();
            auto g = p->grad();
            if (config_.algorithm == Algorithm::sgd) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config_.learning_rate * g[i];
            } else {
                auto& st = moments_[p.get()];
                if (st.m.empty()) {
                    st.m.assign(w.size(), 0.0);
                    st.v.assign(w.size(), 0.0);
                }
                const double b1 = config_.beta1, b2 = config_.beta2;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
                for (std::size_t i = 0; i < w.size(); ++i) {
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                    const double mhat = st.m[i] / c1;
                    const double vhat = st.v[i] / c2;
                    w[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
                }
            }
            p->zero_grad();
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };

    OptimizerConfig config_;
    std::map<const Tensor*, Moments> moments_;
    std::size_t step_ = 0;
};

}  // namespace counsel
