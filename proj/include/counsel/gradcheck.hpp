#pragma once

// Central finite-difference oracle for analytic gradients. It
// touches parameters through their raw data and never calls backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "counsel/parameters.hpp"

namespace counsel::oracle {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;     // "name[index]"
    std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps exact-zero gradients from
// turning rounding noise into huge relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `loss` evaluates the scalar loss without touching gradients.
// `gradients` must leave d(loss)/d(param) in every parameter's grad buffer.
inline GradCheckResult check_gradients(const ParameterStore& params,
                                       const std::function<double()>& loss,
                                       const std::function<void()>& gradients,
                                       double step = 1e-5, double floor = 1e-6) {
    for (const auto& [_, p] : params) p->zero_grad();
    gradients();
    GradCheckResult r;
    for (const auto& [name, p] : params) {
        auto w = p->data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + step;
            const double up = loss();
            w[i] = orig - step;
            const double down = loss();
            w[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = relative_error(p->grad()[i], numeric, floor);
            ++r.checked;
            if (err > r.max_rel_error) {
                r.max_rel_error = err;
                r.worst = name + "[" + std::to_string(i) + "] analytic=" +
                          std::to_string(p->grad()[i]) + " numeric=" + std::to_string(numeric);
            }
        }
    }
    return r;
}

}  // namespace counsel::oracle
