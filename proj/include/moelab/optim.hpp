#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff/graph.hpp"

namespace moelab::optim {

using ad::Matrix;

struct AdamWConfig {
    double weight_decay = 3.3e-2;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

/// First and second moment buffers, shaped like the parameters they track.
struct AdamWState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::int64_t step = 0;
};

/// One bias-corrected AdamW update. Decay (lr * wd * theta) is applied to
/// parameters flagged for it, separately from the adaptive step.
inline void adamw_step(std::span<ad::Parameter* const> params, AdamWState& state, double lr, const AdamWConfig& cfg) {
    if (!(lr >= 0.0)) {
        throw InvalidArgument("adamw_step: learning rate must be non-negative");
    }
    if (state.m.empty()) {
        for (const ad::Parameter* p : params) {
            state.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            state.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adamw_step: optimizer state tracks a different parameter list");
    }
    for (const ad::Parameter* p : params) {
        if (!p->grad.allFinite()) {
            throw NumericError("adamw_step: non-finite gradient in " + p->name);
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ad::Parameter& p = *params[i];
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
            throw ShapeError("adamw_step: moment buffer shape differs for " + p.name);
        }
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * p.grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
        if (p.decay && cfg.weight_decay != 0.0) {
            p.value -= (lr * cfg.weight_decay) * p.value;
        }
        p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
    }
}

inline void adamw_step(std::vector<ad::Parameter*> params, AdamWState& state, double lr, const AdamWConfig& cfg) {
    adamw_step(std::span<ad::Parameter* const>(params), state, lr, cfg);
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to `min_lr` at `total`.
inline double lr_schedule(std::int64_t step, std::int64_t warmup, std::int64_t total, double peak, double min_lr) {
    if (step < 0 || step > total) {
        throw InvalidArgument("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    }
    if (step < warmup) {
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total == warmup) {
        return peak;
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_grad_norm(std::span<ad::Parameter* const> params) {
    double sq = 0.0;
    for (const ad::Parameter* p : params) {
        sq += p->grad.squaredNorm();
    }
    return std::sqrt(sq);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<ad::Parameter* const> params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) {
        throw NumericError("gradient norm is not finite");
    }
    if (norm > max_norm) {
        const double factor = max_norm / norm;
        for (ad::Parameter* p : params) {
            p->grad *= factor;
        }
    }
    return norm;
}

}  // namespace moelab::optim
