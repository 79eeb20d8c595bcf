#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/model.hpp"
#include "moelab/routing.hpp"

namespace moelab::losses {

using ad::Index;
using ad::Matrix;
using ad::Tensor;

inline constexpr double kEntropyFloor = 1e-12;

struct LossWeights {
    double lambda_z = 1e-4;    // output z-loss
    double lambda_lbl = 1e-4;  // load balance
    double lambda_dl = 1e-3;   // routing entropy
    double lambda_rz = 0.0;    // router z-loss

    void validate() const {
        for (double v : {lambda_z, lambda_lbl, lambda_dl, lambda_rz}) {
            if (!(std::isfinite(v) && v >= 0.0)) {
                throw ConfigError("loss coefficients must be finite and non-negative");
            }
        }
    }

    static LossWeights zero() { return {0.0, 0.0, 0.0, 0.0}; }
};

struct LossBreakdown {
    double ce = 0.0;
    double lm_z = 0.0;
    double lb = 0.0;
    double dynamic = 0.0;
    double router_z = 0.0;
    double total = 0.0;
};

struct LmLoss {
    Tensor ce;    // mean cross-entropy
    Tensor lm_z;  // lambda_z * mean squared log-partition
};

/// Mean over tokens of -log softmax(z)[y] and lambda_z * logsumexp(z)^2.
inline LmLoss lm_loss(const Tensor& logits, std::span<const int> targets, double lambda_z) {
    const Index m = logits.rows();
    if (static_cast<Index>(targets.size()) != m) {
        throw ShapeError("lm_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) + " rows");
    }
    std::vector<Index> cols;
    cols.reserve(targets.size());
    for (int y : targets) {
        if (y < 0 || y >= logits.cols()) {
            throw InvalidArgument("lm_loss: target " + std::to_string(y) + " outside vocabulary");
        }
        cols.push_back(y);
    }
    Tensor lse = ad::logsumexp_rows(logits);
    Tensor picked = ad::pick_per_row(logits, std::move(cols));
    return {ad::mean(ad::sub(lse, picked)), ad::scale(ad::mean(ad::square(lse)), lambda_z)};
}

/// lambda * N * sum_i f_i * Q_i with f_i the dispatch fraction (constant) and
/// Q_i the mean routing probability of expert i.
inline Tensor load_balance_loss(const routing::RoutingBatch& decisions, const Tensor& probs, double lambda_lbl) {
    const Index m = probs.rows(), n = probs.cols();
    if (static_cast<Index>(decisions.tokens.size()) != m || decisions.experts != n) {
        throw ShapeError("load_balance_loss: " + std::to_string(decisions.tokens.size()) + " decisions for " +
                         std::to_string(m) + " probability rows");
    }
    Matrix f = Matrix::Zero(1, n);
    for (const auto& d : decisions.tokens) {
        for (Index i = 0; i < n; ++i) {
            if (d.weights[static_cast<std::size_t>(i)] > 0.0) {
                f(0, i) += 1.0;
            }
        }
    }
    f /= static_cast<double>(m);
    ad::Graph& g = *probs.graph();
    Tensor q = ad::col_mean(probs);
    return ad::scale(ad::sum(ad::mul(q, g.constant(std::move(f)))), lambda_lbl * static_cast<double>(n));
}

/// lambda * mean over tokens of the routing entropy -sum P log P.
inline Tensor dynamic_loss(const Tensor& probs, double lambda_dl) {
    Tensor plogp = ad::mul(probs, ad::log_clamped(probs, kEntropyFloor));
    return ad::scale(ad::mean(ad::row_sum(plogp)), -lambda_dl);
}

/// lambda * mean over tokens of logsumexp(raw router logits)^2.
inline Tensor router_z_loss(const Tensor& raw_logits, double lambda_rz) {
    return ad::scale(ad::mean(ad::square(ad::logsumexp_rows(raw_logits))), lambda_rz);
}

struct LossTerms {
    Tensor ce, lm_z, lb, dynamic, router_z, total;

    [[nodiscard]] LossBreakdown values() const {
        return {ce.item(), lm_z.item(), lb.item(), dynamic.item(), router_z.item(), total.item()};
    }
};

/// Full objective. Auxiliary routing losses are averaged over MoE layers.
inline LossTerms total_loss(const model::ForwardResult& fwd, std::span<const int> targets, const LossWeights& w) {
    w.validate();
    if (fwd.layers.empty()) {
        throw InvalidArgument("total_loss: forward pass has no MoE layers");
    }
    LossTerms t;
    const LmLoss lm = lm_loss(fwd.logits, targets, w.lambda_z);
    t.ce = lm.ce;
    t.lm_z = lm.lm_z;
    const double inv_layers = 1.0 / static_cast<double>(fwd.layers.size());
    std::optional<Tensor> lb, dyn, rz;
    auto accumulate = [](std::optional<Tensor>& acc, const Tensor& v) { acc = acc ? ad::add(*acc, v) : v; };
    for (const model::MoEOutput& layer : fwd.layers) {
        accumulate(lb, load_balance_loss(layer.routing, layer.probs, w.lambda_lbl));
        accumulate(dyn, dynamic_loss(layer.probs, w.lambda_dl));
        accumulate(rz, router_z_loss(layer.raw_logits, w.lambda_rz));
    }
    t.lb = ad::scale(*lb, inv_layers);
    t.dynamic = ad::scale(*dyn, inv_layers);
    t.router_z = ad::scale(*rz, inv_layers);
    t.total = ad::add(ad::add(ad::add(ad::add(t.ce, t.lm_z), t.lb), t.dynamic), t.router_z);
    return t;
}

}  // namespace moelab::losses
