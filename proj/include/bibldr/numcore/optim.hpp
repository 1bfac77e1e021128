#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "bibldr/numcore/tape.hpp"

namespace bibldr::numcore {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Moment accumulators for a fixed, ordered list of parameters.
struct OptimizerState {
    AdamWConfig config;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    long step = 0;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig config) : params_(std::move(params)) {
        state_.config = config;
        for (auto* p : params_) {
            state_.first_moment.emplace_back(p->value.shape());
            state_.second_moment.emplace_back(p->value.shape());
        }
    }

    /// Applies one update with the given learning rate (the schedule lives outside).
    void step(double lr) {
        for (auto* p : params_) {
            if (p->grad.shape() != p->value.shape()) {
                throw DimensionError("gradient of '" + p->name + "' has shape " + shape_str(p->grad.shape()) +
                                     ", parameter has " + shape_str(p->value.shape()));
            }
            if (!p->grad.all_finite()) {
                throw DivergenceError("non-finite gradient in parameter '" + p->name + "' at step " +
                                      std::to_string(state_.step + 1));
            }
        }
        ++state_.step;
        const auto& c = state_.config;
        const double t = static_cast<double>(state_.step);
        const double bc1 = 1.0 - std::pow(c.beta1, t);
        const double bc2 = 1.0 - std::pow(c.beta2, t);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            auto w = p.value.values();
            auto g = p.grad.values();
            auto m = state_.first_moment[k].values();
            auto v = state_.second_moment[k].values();
            const double decay = p.decay ? 1.0 - lr * c.weight_decay : 1.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] *= decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
            }
        }
    }

    void step() { step(state_.config.lr); }

    const OptimizerState& state() const noexcept { return state_; }

private:
    std::vector<Parameter*> params_;
    OptimizerState state_;
};

/// lr_min + (lr0 - lr_min)(1 + cos(pi step / total)) / 2.
inline double cosine_anneal(double lr0, long step, long total_steps, double lr_min = 0.0) {
    if (total_steps <= 0) throw RangeError("cosine_anneal: total_steps must be positive");
    if (step < 0 || step > total_steps) {
        throw RangeError("cosine_anneal: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                         "]");
    }
    if (step == total_steps) return lr_min;
    const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

}  // namespace bibldr::numcore
