#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moelab/autodiff.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/control.hpp"
#include "moelab/data.hpp"
#include "moelab/losses.hpp"
#include "moelab/model.hpp"
#include "moelab/optim.hpp"
#include "moelab/routing.hpp"
#include "moelab/telemetry.hpp"

namespace moelab::train {

using losses::LossBreakdown;

/// Activation counts of one forward pass, pooled over layers and per layer.
struct ActivationSummary {
    double mean = 0.0;  // a_t: total selected experts / (layers * tokens)
    double std = 0.0;   // population std over every (layer, token) count
    std::vector<double> layer_means;
    std::vector<double> layer_stds;
};

/// Pools per-layer activation counts; every layer must cover the same tokens.
inline ActivationSummary summarize(const std::vector<std::vector<int>>& layer_counts) {
    ActivationSummary s;
    double total = 0.0, n = 0.0;
    for (const auto& c : layer_counts) {
        if (c.empty()) {
            throw InvalidArgument("summarize: layer without routing decisions");
        }
        const double m = std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
        double var = 0.0;
        for (int k : c) {
            var += (k - m) * (k - m);
        }
        s.layer_means.push_back(m);
        s.layer_stds.push_back(std::sqrt(var / static_cast<double>(c.size())));
        total += std::accumulate(c.begin(), c.end(), 0.0);
        n += static_cast<double>(c.size());
    }
    if (n == 0.0) {
        throw InvalidArgument("summarize: no routing decisions");
    }
    s.mean = total / n;
    double var = 0.0;
    for (const auto& c : layer_counts) {
        for (int k : c) {
            var += (k - s.mean) * (k - s.mean);
        }
    }
    s.std = std::sqrt(var / n);
    return s;
}

inline ActivationSummary summarize(const model::ForwardResult& fwd) {
    std::vector<std::vector<int>> counts;
    for (const auto& l : fwd.layers) {
        counts.push_back(l.routing.stats().counts);
    }
    return summarize(counts);
}

struct EvalResult {
    LossBreakdown loss;
    ActivationSummary activation;
};

/// Loss and activation statistics on the first `max_windows` windows of a
/// split. Reads the model only; no parameter or controller state changes.
inline EvalResult evaluate(model::ToyModel& m, const data::WindowSet& split, std::optional<double> threshold,
                           const losses::LossWeights& weights, int batch_seqs, std::size_t max_windows) {
    if (split.empty()) {
        throw InvalidArgument("evaluate: empty split");
    }
    const std::size_t count = std::min(split.size(), max_windows);
    EvalResult out;
    std::vector<std::vector<int>> counts(static_cast<std::size_t>(m.config().layers));
    double tokens = 0.0;
    for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(batch_seqs)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(count, start + static_cast<std::size_t>(batch_seqs)); ++i) {
            idx.push_back(i);
        }
        const data::Batch b = split.gather(idx);
        ad::Graph g;
        const auto fwd = m.forward(g, b.inputs, {threshold});
        const auto v = losses::total_loss(fwd, b.targets, weights).values();
        const double n = static_cast<double>(b.targets.size());
        out.loss.ce += n * v.ce;
        out.loss.lm_z += n * v.lm_z;
        out.loss.lb += n * v.lb;
        out.loss.dynamic += n * v.dynamic;
        out.loss.router_z += n * v.router_z;
        tokens += n;
        for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
            const auto st = fwd.layers[l].routing.stats();
            counts[l].insert(counts[l].end(), st.counts.begin(), st.counts.end());
        }
    }
    out.loss.ce /= tokens;
    out.loss.lm_z /= tokens;
    out.loss.lb /= tokens;
    out.loss.dynamic /= tokens;
    out.loss.router_z /= tokens;
    out.loss.total = out.loss.ce + out.loss.lm_z + out.loss.lb + out.loss.dynamic + out.loss.router_z;

    out.activation = summarize(counts);
    return out;
}

struct StepReport {
    std::int64_t step = 0;
    LossBreakdown loss;
    std::optional<double> threshold;  // threshold used for this batch
    ActivationSummary activation;
    double lr = 0.0;
    double grad_norm = 0.0;  // before clipping
    std::vector<std::optional<double>> thetas;  // per layer, as used for this batch
};

/// Owns model, optimizer and controller for one run.
class Trainer {
public:
    explicit Trainer(config::RunConfig cfg)
        : cfg_(validated(std::move(cfg))),
          corpus_(data::make_corpus(cfg_.train.corpus, cfg_.train.corpus_size, cfg_.train.corpus_seed)),
          train_windows_(split_tokens(true), cfg_.model.seq_len),
          val_windows_(split_tokens(false), cfg_.model.seq_len),
          batcher_(train_windows_, cfg_.train.batch_seqs, cfg_.seed),
          model_(cfg_.model) {
        if (cfg_.model.strategy == routing::RoutingKind::dtop_p) {
            controller_ = control::PIControllerState(cfg_.train.pi.p0, cfg_.train.pi.k_pro, cfg_.train.pi.k_int,
                                                     cfg_.model.target, cfg_.model.experts);
        }
        params_ = model_.parameter_pointers();
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    [[nodiscard]] const config::RunConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] model::ToyModel& model() noexcept { return model_; }
    [[nodiscard]] const std::optional<control::PIControllerState>& controller() const noexcept { return controller_; }
    [[nodiscard]] std::int64_t steps_done() const noexcept { return step_; }
    [[nodiscard]] const data::WindowSet& validation_windows() const noexcept { return val_windows_; }

    /// Threshold the next batch will be routed with; none for top-k.
    [[nodiscard]] std::optional<double> current_threshold() const {
        switch (cfg_.model.strategy) {
            case routing::RoutingKind::top_k: return std::nullopt;
            case routing::RoutingKind::top_p_fixed: return cfg_.train.fixed_p;
            case routing::RoutingKind::dtop_p: return controller_->threshold;
        }
        return std::nullopt;
    }

    /// One batch: forward, controller update, loss, backward, clip, AdamW.
    StepReport step() {
        if (step_ >= cfg_.train.steps) {
            throw InvalidArgument("training already completed " + std::to_string(step_) + " steps");
        }
        const auto& t = cfg_.train;
        StepReport r;
        r.step = ++step_;
        r.lr = optim::lr_schedule(r.step, t.warmup, t.steps, t.peak_lr, t.min_lr);
        r.threshold = current_threshold();
        r.thetas = model_.thetas();

        const data::Batch batch = batcher_.next();
        ad::Graph g;
        const model::ForwardResult fwd = model_.forward(g, batch.inputs, {r.threshold});
        r.activation = summarize(fwd);

        if (controller_ && (t.pi.during_warmup || r.step > t.warmup)) {
            control::pi_update(*controller_, r.activation.mean);
        }

        const losses::LossTerms terms = losses::total_loss(fwd, batch.targets, t.losses);
        r.loss = terms.values();
        if (!std::isfinite(r.loss.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << r.step << " (ce=" << r.loss.ce << ", lm_z=" << r.loss.lm_z
                << ", lb=" << r.loss.lb << ", dynamic=" << r.loss.dynamic << ", router_z=" << r.loss.router_z << ")";
            throw NumericError(msg.str());
        }
        model_.zero_grad();
        g.backward(terms.total);
        r.grad_norm = optim::clip_grad_norm(params_, t.clip_norm);
        optim::adamw_step(params_, adam_, r.lr, t.adamw);
        return r;
    }

    EvalResult evaluate_validation() {
        return evaluate(model_, val_windows_, current_threshold(), cfg_.train.losses, cfg_.train.batch_seqs,
                        static_cast<std::size_t>(cfg_.train.eval_batches) * static_cast<std::size_t>(cfg_.train.batch_seqs));
    }

private:
    static config::RunConfig validated(config::RunConfig c) {
        c.validate();
        return c;
    }

    std::span<const int> split_tokens(bool train) const {
        const std::size_t n = corpus_.size();
        const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(n) * (1.0 - cfg_.train.val_fraction)));
        return train ? std::span<const int>(corpus_.data(), cut) : std::span<const int>(corpus_.data() + cut, n - cut);
    }

    config::RunConfig cfg_;
    std::vector<int> corpus_;
    data::WindowSet train_windows_;
    data::WindowSet val_windows_;
    data::Batcher batcher_;
    model::ToyModel model_;
    std::vector<ad::Parameter*> params_;
    optim::AdamWState adam_;
    std::optional<control::PIControllerState> controller_;
    std::int64_t step_ = 0;
};

inline telemetry::StepRecord to_record(const StepReport& r) {
    telemetry::StepRecord s;
    s.step = r.step;
    s.split = telemetry::Split::train;
    s.ce = r.loss.ce;
    s.lm_z = r.loss.lm_z;
    s.lb = r.loss.lb;
    s.dynamic = r.loss.dynamic;
    s.router_z = r.loss.router_z;
    s.total = r.loss.total;
    s.threshold = r.threshold;
    s.mean_active = r.activation.mean;
    s.std_active = r.activation.std;
    s.lr = r.lr;
    return s;
}

struct RunSummary {
    double final_train_loss = 0.0;  // mean cross-entropy over the last min(100, steps) steps
    double final_val_loss = 0.0;    // cross-entropy of the final validation pass
    double mean_active_final = 0.0; // mean a_t over the last min(100, steps) steps
    std::optional<double> threshold_final;
};

using ProgressFn = std::function<void(const StepReport&)>;

/// Runs every training step, recording telemetry into `sink`. Validation runs
/// every eval_interval steps and after the last step, with the controller frozen.
inline RunSummary train(Trainer& trainer, telemetry::Sink& sink, const ProgressFn& progress = {}) {
    const auto& cfg = trainer.config();
    const std::int64_t steps = cfg.train.steps;
    const std::int64_t tail = std::min<std::int64_t>(100, steps);
    double ce_tail = 0.0, active_tail = 0.0;
    RunSummary summary;
    while (trainer.steps_done() < steps) {
        const StepReport r = trainer.step();
        std::vector<telemetry::LayerRecord> layers;
        for (std::size_t l = 0; l < r.activation.layer_means.size(); ++l) {
            layers.push_back({r.step, static_cast<int>(l), r.activation.layer_means[l], r.thetas[l]});
        }
        sink.record_step(to_record(r), layers);
        if (r.step > steps - tail) {
            ce_tail += r.loss.ce;
            active_tail += r.activation.mean;
        }
        if (progress) {
            progress(r);
        }
        if (r.step % cfg.train.eval_interval == 0 || r.step == steps) {
            const EvalResult e = trainer.evaluate_validation();
            telemetry::StepRecord v;
            v.step = r.step;
            v.split = telemetry::Split::val;
            v.ce = e.loss.ce;
            v.lm_z = e.loss.lm_z;
            v.lb = e.loss.lb;
            v.dynamic = e.loss.dynamic;
            v.router_z = e.loss.router_z;
            v.total = e.loss.total;
            v.threshold = trainer.current_threshold();
            v.mean_active = e.activation.mean;
            v.std_active = e.activation.std;
            v.lr = r.lr;
            sink.record_step(v);
            summary.final_val_loss = e.loss.ce;
        }
    }
    summary.final_train_loss = ce_tail / static_cast<double>(tail);
    summary.mean_active_final = active_tail / static_cast<double>(tail);
    summary.threshold_final = trainer.current_threshold();
    return summary;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

inline constexpr int kManifestSchema = 1;

inline nlohmann::ordered_json make_manifest(const config::RunConfig& cfg, const std::string& started,
                                            const std::string& finished, const std::string& status) {
    nlohmann::ordered_json j;
    j["schema_version"] = kManifestSchema;
    j["seed"] = cfg.seed;
    j["config"] = config::to_json(config::to_ptree(cfg));
    j["artifacts"] = {{"checkpoint", "checkpoint.bin"}, {"metrics", "metrics.csv"}, {"layers", "layers.csv"}};
    j["started_at"] = started;
    j["finished_at"] = finished;
    j["status"] = status;
    return j;
}

/// Trains `cfg` and writes manifest.json, checkpoint.bin, metrics.csv and
/// layers.csv into `out_dir`. The manifest is written first so a failed run
/// still records what was attempted.
inline RunSummary run_experiment(const config::RunConfig& cfg, const std::filesystem::path& out_dir,
                                 const ProgressFn& progress = {}) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    }
    const std::string started = utc_timestamp();
    const auto manifest_path = out_dir / "manifest.json";
    telemetry::write_text(manifest_path, make_manifest(cfg, started, "", "running").dump(2) + "\n");

    Trainer trainer(cfg);
    telemetry::Sink sink(cfg.model.layers);
    sink.attach(out_dir, cfg.train.flush_interval);
    RunSummary summary;
    try {
        summary = train(trainer, sink, progress);
    } catch (const NumericError&) {
        sink.finalize();
        telemetry::write_text(manifest_path, make_manifest(cfg, started, utc_timestamp(), "aborted").dump(2) + "\n");
        throw;
    }
    sink.finalize();
    checkpoint::save(out_dir / "checkpoint.bin", trainer.model(), cfg);
    telemetry::write_text(manifest_path, make_manifest(cfg, started, utc_timestamp(), "ok").dump(2) + "\n");
    return summary;
}

}  // namespace moelab::train
