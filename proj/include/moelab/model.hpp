#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/routing.hpp"

namespace moelab::model {

using ad::Index;
using ad::Matrix;
using ad::Tensor;

inline constexpr double kInitStd = 0.02;
inline constexpr double kNormEps = 1e-5;

struct ToyModelConfig {
    int layers = 4;
    int hidden = 32;
    int expert_dim = 16;
    int experts = 16;
    int vocab = 64;
    int seq_len = 32;
    bool tie_weights = true;
    routing::RoutingKind strategy = routing::RoutingKind::dtop_p;
    int target = 4;    // k for top-k, target activation for dtop-p
    double p = 0.25;   // fixed threshold for top-p, p0 for dtop-p
    routing::Normalization normalization = routing::Normalization::dynamic();
    std::uint64_t seed = 1;

    [[nodiscard]] routing::RoutingStrategy routing_strategy() const {
        return {strategy, target, p, normalization};
    }

    void validate() const {
        if (layers < 1 || experts < 1 || vocab < 2 || hidden < 1 || expert_dim < 1 || seq_len < 1) {
            throw ConfigError("model needs layers >= 1, experts >= 1, vocab >= 2 and positive dimensions");
        }
        if (target < 1 || target > experts) {
            throw ConfigError("target " + std::to_string(target) + " outside [1, " + std::to_string(experts) + "]");
        }
        try {
            routing_strategy().validate(experts);
        } catch (const InvalidArgument& e) {
            throw ConfigError(e.what());
        }
    }
};

/// Expert feedforward: hidden -> expert_dim -> hidden with a SiLU gate.
struct ExpertFFN {
    std::size_t w_in = 0;   // [expert_dim, hidden]
    std::size_t w_out = 0;  // [hidden, expert_dim]
};

struct MoELayer {
    int index = 0;
    std::size_t router = 0;  // [experts, hidden]
    std::vector<ExpertFFN> experts;
    std::optional<std::size_t> theta;  // [1, 1], present iff dynamic normalization
};

struct AttentionWeights {
    std::size_t wq = 0, wk = 0, wv = 0, wo = 0;  // [hidden, hidden]
};

struct Block {
    AttentionWeights attention;
    MoELayer moe;
};

/// Lazily binds model parameters into one graph so each appears once.
class Binder {
public:
    Binder(ad::Graph& g, std::vector<ad::Parameter>& params) : graph_(g), params_(params), bound_(params.size()) {}

    Tensor operator()(std::size_t index) {
        auto& slot = bound_.at(index);
        if (!slot) {
            slot = graph_.parameter(params_[index]);
        }
        return *slot;
    }

    [[nodiscard]] ad::Graph& graph() const { return graph_; }

private:
    ad::Graph& graph_;
    std::vector<ad::Parameter>& params_;
    std::vector<std::optional<Tensor>> bound_;
};

/// Everything one MoE layer produced during a forward pass.
struct MoEOutput {
    Tensor y;
    Tensor raw_logits;  // W x, before any normalization
    Tensor probs;       // normalized routing distribution
    Tensor weights;     // renormalized r_i, zero outside the selection
    routing::RoutingBatch routing;
};

struct ForwardOptions {
    std::optional<double> threshold;
    /// Replays these selections instead of routing afresh (one per layer).
    const std::vector<routing::RoutingBatch>* forced_routing = nullptr;
    routing::TieBreak tie = routing::TieBreak::ascending_index;
};

inline void check_routing_setup(const MoELayer& layer, const routing::RoutingStrategy& strategy,
                                std::optional<double> threshold) {
    const bool dynamic = strategy.normalization.kind == routing::NormalizationKind::dynamic;
    if (dynamic != layer.theta.has_value()) {
        throw ConfigError("layer " + std::to_string(layer.index) +
                          (dynamic ? " has no routing scale for dynamic normalization"
                                   : " carries a routing scale but normalization is not dynamic"));
    }
    if (strategy.nucleus() && !threshold) {
        throw ConfigError("strategy " + routing::to_string(strategy.kind) + " needs a current threshold");
    }
    if (!strategy.nucleus() && threshold) {
        throw ConfigError("top-k routing does not take a threshold");
    }
}

/// y_j = sum over selected experts i of r_i(x_j) * E_i(x_j). Only experts
/// that received tokens are evaluated, each on its own tokens.
inline MoEOutput moe_forward(Binder& bind, const Tensor& x, const MoELayer& layer,
                             const routing::RoutingStrategy& strategy, std::optional<double> threshold,
                             const routing::RoutingBatch* forced = nullptr,
                             routing::TieBreak tie = routing::TieBreak::ascending_index) {
    check_routing_setup(layer, strategy, threshold);
    ad::Graph& g = bind.graph();
    MoEOutput out;
    out.raw_logits = ad::matmul_nt(x, bind(layer.router));
    std::optional<Tensor> theta;
    if (layer.theta) {
        theta = bind(*layer.theta);
    }
    out.probs = routing::compute_probabilities(out.raw_logits, theta, strategy.normalization);
    if (forced) {
        if (forced->tokens.size() != static_cast<std::size_t>(x.rows()) ||
            forced->experts != static_cast<int>(layer.experts.size())) {
            throw ShapeError("forced routing does not match the layer input");
        }
        out.routing = *forced;
    } else {
        out.routing = routing::route(out.probs.value(), strategy, threshold, tie);
    }
    out.weights = ad::masked_renormalize(out.probs, out.routing.mask());

    const auto assignment = out.routing.tokens_per_expert();
    std::vector<ad::RowBlock> blocks;
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
        const auto& rows = assignment[e];
        if (rows.empty()) {
            continue;
        }
        const ExpertFFN& ffn = layer.experts[e];
        Tensor xe = ad::gather_rows(x, rows);
        Tensor h = ad::silu(ad::matmul_nt(xe, bind(ffn.w_in)));
        Tensor o = ad::matmul_nt(h, bind(ffn.w_out));
        Tensor w = ad::gather_column(out.weights, rows, static_cast<Index>(e));
        blocks.push_back({rows, ad::mul_rows(o, w)});
    }
    out.y = ad::scatter_add_rows(g, x.shape(), std::move(blocks));
    return out;
}

struct ForwardResult {
    Tensor logits;  // [tokens, vocab]
    std::vector<MoEOutput> layers;
};

class ToyModel {
public:
    explicit ToyModel(ToyModelConfig config) : config_(std::move(config)) {
        config_.validate();
        build();
        initialize();
    }

    [[nodiscard]] const ToyModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] std::vector<ad::Parameter>& parameters() noexcept { return params_; }
    [[nodiscard]] const std::vector<ad::Parameter>& parameters() const noexcept { return params_; }
    [[nodiscard]] const std::vector<Block>& blocks() const noexcept { return blocks_; }

    [[nodiscard]] std::vector<ad::Parameter*> parameter_pointers() {
        std::vector<ad::Parameter*> out;
        for (auto& p : params_) {
            out.push_back(&p);
        }
        return out;
    }

    [[nodiscard]] ad::Parameter& parameter(std::size_t i) { return params_.at(i); }
    [[nodiscard]] const ad::Parameter& parameter(std::size_t i) const { return params_.at(i); }

    [[nodiscard]] std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] Index parameter_count() const {
        Index n = 0;
        for (const auto& p : params_) {
            n += p.value.size();
        }
        return n;
    }

    /// Current routing scale of each layer, if dynamic normalization is on.
    [[nodiscard]] std::vector<std::optional<double>> thetas() const {
        std::vector<std::optional<double>> out;
        for (const Block& b : blocks_) {
            out.push_back(b.moe.theta ? std::optional<double>(params_[*b.moe.theta].value(0, 0)) : std::nullopt);
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.zero_grad();
        }
    }

    /// Causal next-token logits for `tokens`, laid out as consecutive sequences
    /// of seq_len ids each.
    ForwardResult forward(ad::Graph& g, std::span<const int> tokens, const ForwardOptions& opts = {}) {
        const Index s = config_.seq_len;
        if (tokens.empty() || static_cast<Index>(tokens.size()) % s != 0) {
            throw InvalidArgument("token batch length " + std::to_string(tokens.size()) +
                                  " is not a positive multiple of seq_len " + std::to_string(s));
        }
        if (opts.forced_routing && opts.forced_routing->size() != blocks_.size()) {
            throw ShapeError("forced routing needs one batch per layer");
        }
        Binder bind(g, params_);
        const routing::RoutingStrategy strategy = config_.routing_strategy();
        ForwardResult result;
        Tensor x = ad::embedding(bind(embedding_), tokens);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const Block& b = blocks_[l];
            Tensor h = ad::standardize_rows(x, kNormEps);
            Tensor q = ad::matmul_nt(h, bind(b.attention.wq));
            Tensor k = ad::matmul_nt(h, bind(b.attention.wk));
            Tensor v = ad::matmul_nt(h, bind(b.attention.wv));
            Tensor a = ad::causal_attention(q, k, v, s);
            x = ad::add(x, ad::matmul_nt(a, bind(b.attention.wo)));
            Tensor h2 = ad::standardize_rows(x, kNormEps);
            const routing::RoutingBatch* forced = opts.forced_routing ? &(*opts.forced_routing)[l] : nullptr;
            MoEOutput moe = moe_forward(bind, h2, b.moe, strategy, opts.threshold, forced, opts.tie);
            x = ad::add(x, moe.y);
            result.layers.push_back(std::move(moe));
        }
        Tensor final_h = ad::standardize_rows(x, kNormEps);
        result.logits = ad::matmul_nt(final_h, bind(head_ ? *head_ : embedding_));
        return result;
    }

private:
    std::size_t add_param(std::string name, Index rows, Index cols, bool decay = true) {
        params_.emplace_back(std::move(name), Matrix::Zero(rows, cols), decay);
        return params_.size() - 1;
    }

    void build() {
        const Index h = config_.hidden, d = config_.expert_dim, n = config_.experts, v = config_.vocab;
        embedding_ = add_param("embedding", v, h);
        for (int l = 0; l < config_.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            Block b;
            b.attention.wq = add_param(pre + "attn.wq", h, h);
            b.attention.wk = add_param(pre + "attn.wk", h, h);
            b.attention.wv = add_param(pre + "attn.wv", h, h);
            b.attention.wo = add_param(pre + "attn.wo", h, h);
            b.moe.index = l;
            b.moe.router = add_param(pre + "router", n, h);
            for (Index e = 0; e < n; ++e) {
                const std::string ep = pre + "expert" + std::to_string(e) + ".";
                ExpertFFN f;
                f.w_in = add_param(ep + "w_in", d, h);
                f.w_out = add_param(ep + "w_out", h, d);
                b.moe.experts.push_back(f);
            }
            if (config_.normalization.kind == routing::NormalizationKind::dynamic) {
                b.moe.theta = add_param(pre + "theta", 1, 1, false);
            }
            blocks_.push_back(std::move(b));
        }
        if (!config_.tie_weights) {
            head_ = add_param("head", v, h);
        }
    }

    void initialize() {
        std::mt19937_64 rng(config_.seed);
        std::normal_distribution<double> normal(0.0, kInitStd);
        for (auto& p : params_) {
            if (p.name.ends_with("theta")) {
                p.value.setConstant(1.0);
                continue;
            }
            for (Index i = 0; i < p.value.size(); ++i) {
                double x = normal(rng);
                while (std::abs(x) > 3.0 * kInitStd) {
                    x = normal(rng);
                }
                p.value.data()[i] = x;
            }
        }
    }

    ToyModelConfig config_;
    std::vector<ad::Parameter> params_;
    std::size_t embedding_ = 0;
    std::optional<std::size_t> head_;
    std::vector<Block> blocks_;
};

}  // namespace moelab::model
