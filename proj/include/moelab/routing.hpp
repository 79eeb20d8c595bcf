#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"

namespace moelab::routing {

enum class RoutingKind { top_k, top_p_fixed, dtop_p };

enum class NormalizationKind {
    none,                // softmax(z)
    global_temperature,  // softmax(tau * z)
    dynamic,             // softmax(theta_l * standardize(z))
};

struct Normalization {
    NormalizationKind kind = NormalizationKind::none;
    double temperature = 1.0;

    static Normalization none() { return {NormalizationKind::none, 1.0}; }
    static Normalization global(double tau) { return {NormalizationKind::global_temperature, tau}; }
    static Normalization dynamic() { return {NormalizationKind::dynamic, 1.0}; }
};

struct RoutingStrategy {
    RoutingKind kind = RoutingKind::top_k;
    int k = 1;       // top_k only
    double p = 0.5;  // top_p_fixed threshold, or the initial threshold of dtop_p
    Normalization normalization;

    static RoutingStrategy top_k(int k, Normalization n = Normalization::global(1.0)) {
        return {RoutingKind::top_k, k, 0.5, n};
    }
    static RoutingStrategy top_p(double p, Normalization n = Normalization::global(1.0)) {
        return {RoutingKind::top_p_fixed, 1, p, n};
    }
    static RoutingStrategy dtop_p(double p0, Normalization n = Normalization::dynamic()) {
        return {RoutingKind::dtop_p, 1, p0, n};
    }

    [[nodiscard]] bool nucleus() const noexcept { return kind != RoutingKind::top_k; }

    void validate(int experts) const {
        if (kind == RoutingKind::top_k && (k < 1 || k > experts)) {
            throw InvalidArgument("top-k routing needs 1 <= k <= " + std::to_string(experts) + ", got k=" +
                                  std::to_string(k));
        }
        if (nucleus() && !(p > 0.0 && p < 1.0)) {
            throw InvalidArgument("top-p threshold must lie in (0, 1), got " + std::to_string(p));
        }
        if (normalization.kind == NormalizationKind::global_temperature &&
            !(std::isfinite(normalization.temperature) && normalization.temperature > 0.0)) {
            throw InvalidArgument("routing temperature must be positive");
        }
    }
};

inline std::string to_string(RoutingKind k) {
    switch (k) {
        case RoutingKind::top_k: return "topk";
        case RoutingKind::top_p_fixed: return "topp";
        case RoutingKind::dtop_p: return "dtopp";
    }
    return "?";
}

inline std::string to_string(NormalizationKind k) {
    switch (k) {
        case NormalizationKind::none: return "none";
        case NormalizationKind::global_temperature: return "global";
        case NormalizationKind::dynamic: return "dynamic";
    }
    return "?";
}

/// Order used to rank equal probabilities. Only `ascending_index` is a valid
/// routing rule; the other exists so verification can prove it notices.
enum class TieBreak { ascending_index, descending_index };

/// One token's routing: selected experts in descending-probability order and
/// dense weights that are zero outside the selection.
struct RoutingDecision {
    std::vector<int> selected;
    std::vector<double> weights;
    int cutoff = 0;  // k for top-k, k_p for top-p

    friend bool operator==(const RoutingDecision&, const RoutingDecision&) = default;
};

/// Expert indices sorted by descending probability, ties by expert index.
inline std::vector<int> descending_order(std::span<const double> probs, TieBreak tie = TieBreak::ascending_index) {
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)]) {
            return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
        }
        return tie == TieBreak::ascending_index ? a < b : a > b;
    });
    return order;
}

namespace detail {

inline RoutingDecision take_prefix(std::span<const double> probs, const std::vector<int>& order, int count) {
    RoutingDecision d;
    d.cutoff = count;
    d.selected.assign(order.begin(), order.begin() + count);
    d.weights.assign(probs.size(), 0.0);
    double mass = 0.0;
    for (int i : d.selected) {
        mass += probs[static_cast<std::size_t>(i)];
    }
    for (int i : d.selected) {
        d.weights[static_cast<std::size_t>(i)] = probs[static_cast<std::size_t>(i)] / mass;
    }
    return d;
}

}  // namespace detail

inline RoutingDecision select_top_k(std::span<const double> probs, int k, TieBreak tie = TieBreak::ascending_index) {
    const int n = static_cast<int>(probs.size());
    if (k < 1 || k > n) {
        throw InvalidArgument("select_top_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    return detail::take_prefix(probs, descending_order(probs, tie), k);
}

/// Smallest descending-probability prefix whose cumulative mass reaches p.
inline RoutingDecision select_top_p(std::span<const double> probs, double p, TieBreak tie = TieBreak::ascending_index) {
    if (!(p > 0.0 && p < 1.0)) {
        throw InvalidArgument("select_top_p: threshold p=" + std::to_string(p) + " outside (0, 1)");
    }
    if (probs.empty()) {
        throw InvalidArgument("select_top_p: empty probability row");
    }
    const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) {
        throw InvalidArgument("select_top_p: probabilities sum to " + std::to_string(total));
    }
    const std::vector<int> order = descending_order(probs, tie);
    const int n = static_cast<int>(order.size());
    int count = n;
    double mass = 0.0;
    for (int j = 0; j < n; ++j) {
        mass += probs[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
        if (mass >= p) {
            count = j + 1;
            break;
        }
    }
    return detail::take_prefix(probs, order, count);
}

struct ActivationStats {
    double mean = 0.0;
    double std = 0.0;  // population
    std::vector<int> counts;
};

/// Number of experts with nonzero weight per decision, with mean and population std.
inline ActivationStats count_activated(std::span<const RoutingDecision> decisions) {
    if (decisions.empty()) {
        throw InvalidArgument("count_activated: empty batch");
    }
    ActivationStats s;
    s.counts.reserve(decisions.size());
    for (const RoutingDecision& d : decisions) {
        s.counts.push_back(static_cast<int>(std::count_if(d.weights.begin(), d.weights.end(), [](double w) { return w > 0.0; })));
    }
    const double m = static_cast<double>(decisions.size());
    s.mean = std::accumulate(s.counts.begin(), s.counts.end(), 0.0) / m;
    double var = 0.0;
    for (int c : s.counts) {
        var += (c - s.mean) * (c - s.mean);
    }
    s.std = std::sqrt(var / m);
    return s;
}

/// Routing decisions of one layer for a batch of tokens.
struct RoutingBatch {
    int experts = 0;
    std::vector<RoutingDecision> tokens;

    /// 1 where an expert is selected, 0 elsewhere; shape [tokens, experts].
    [[nodiscard]] ad::Matrix mask() const {
        ad::Matrix m = ad::Matrix::Zero(static_cast<ad::Index>(tokens.size()), experts);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            for (int e : tokens[t].selected) {
                m(static_cast<ad::Index>(t), e) = 1.0;
            }
        }
        return m;
    }

    /// Token indices routed to each expert, ascending.
    [[nodiscard]] std::vector<std::vector<ad::Index>> tokens_per_expert() const {
        std::vector<std::vector<ad::Index>> out(static_cast<std::size_t>(experts));
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            for (int e : tokens[t].selected) {
                out[static_cast<std::size_t>(e)].push_back(static_cast<ad::Index>(t));
            }
        }
        return out;
    }

    [[nodiscard]] ActivationStats stats() const { return count_activated(tokens); }
};

/// Applies a strategy to every row of a probability matrix.
inline RoutingBatch route(const ad::Matrix& probs, const RoutingStrategy& strategy, std::optional<double> threshold,
                          TieBreak tie = TieBreak::ascending_index) {
    const int n = static_cast<int>(probs.cols());
    strategy.validate(n);
    if (strategy.nucleus() && !threshold) {
        throw ConfigError("nucleus routing needs a current threshold");
    }
    RoutingBatch batch;
    batch.experts = n;
    batch.tokens.reserve(static_cast<std::size_t>(probs.rows()));
    for (ad::Index r = 0; r < probs.rows(); ++r) {
        const std::span<const double> row(probs.data() + r * probs.cols(), static_cast<std::size_t>(n));
        batch.tokens.push_back(strategy.kind == RoutingKind::top_k ? select_top_k(row, strategy.k, tie)
                                                                   : select_top_p(row, *threshold, tie));
    }
    return batch;
}

inline constexpr double kStandardizeEps = 1e-6;

/// Router probabilities from raw logits under the given normalization.
/// `theta` must be supplied exactly when the normalization is dynamic.
inline ad::Tensor compute_probabilities(const ad::Tensor& logits, const std::optional<ad::Tensor>& theta,
                                        const Normalization& normalization, double eps = kStandardizeEps) {
    if (logits.cols() < 1) {
        throw ShapeError("compute_probabilities: need at least one expert");
    }
    const bool dynamic = normalization.kind == NormalizationKind::dynamic;
    if (dynamic && !theta) {
        throw ConfigError("dynamic routing normalization requires a learnable scale");
    }
    if (!dynamic && theta) {
        throw ConfigError("a learnable routing scale is only used with dynamic normalization");
    }
    switch (normalization.kind) {
        case NormalizationKind::none:
            return ad::softmax_rows(logits);
        case NormalizationKind::global_temperature:
            return ad::softmax_rows(ad::scale(logits, normalization.temperature));
        case NormalizationKind::dynamic:
            return ad::softmax_rows(ad::scale_by(ad::standardize_rows(logits, eps), *theta));
    }
    throw ConfigError("unknown routing normalization");
}

}  // namespace moelab::routing
