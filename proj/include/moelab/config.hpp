#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "moelab/data.hpp"
#include "moelab/error.hpp"
#include "moelab/losses.hpp"
#include "moelab/model.hpp"
#include "moelab/optim.hpp"

namespace moelab::config {

using boost::property_tree::ptree;

struct PiConfig {
    double p0 = 0.25;
    double k_pro = 0.1;
    double k_int = 0.1;
    bool during_warmup = true;
};

struct TrainConfig {
    std::int64_t steps = 2000;
    int batch_seqs = 8;
    double peak_lr = 3e-3;
    double min_lr = 3e-5;
    std::int64_t warmup = 100;
    optim::AdamWConfig adamw;
    double clip_norm = 1.0;
    losses::LossWeights losses;
    PiConfig pi;
    double fixed_p = 0.25;
    data::CorpusKind corpus = data::CorpusKind::synthetic_grammar;
    std::int64_t corpus_size = 200000;
    std::uint64_t corpus_seed = 1234;
    double val_fraction = 0.1;
    std::int64_t eval_interval = 200;
    int eval_batches = 4;
    int flush_interval = 100;
};

/// Fully resolved run description: every default expanded.
struct RunConfig {
    model::ToyModelConfig model;
    TrainConfig train;
    std::uint64_t seed = 1;

    void validate() const {
        model.validate();
        train.losses.validate();
        const auto& t = train;
        if (t.steps < 1 || t.batch_seqs < 1 || t.eval_batches < 1 || t.eval_interval < 1) {
            throw ConfigError("steps, batch_seqs, eval_batches and eval_interval must be positive");
        }
        if (t.warmup < 0 || t.warmup > t.steps) {
            throw ConfigError("warmup must lie in [0, steps]");
        }
        if (!(t.min_lr >= 0.0 && t.min_lr <= t.peak_lr)) {
            throw ConfigError("need 0 <= min_lr <= peak_lr");
        }
        if (!(t.clip_norm > 0.0)) {
            throw ConfigError("clip_norm must be positive");
        }
        if (!(t.val_fraction > 0.0 && t.val_fraction < 1.0)) {
            throw ConfigError("val_fraction must lie in (0, 1)");
        }
        if (model.vocab < data::vocab_of(t.corpus)) {
            throw ConfigError("vocab " + std::to_string(model.vocab) + " is smaller than the " +
                              data::to_string(t.corpus) + " alphabet of " + std::to_string(data::vocab_of(t.corpus)));
        }
        if (t.adamw.beta1 < 0.0 || t.adamw.beta1 >= 1.0 || t.adamw.beta2 < 0.0 || t.adamw.beta2 >= 1.0 ||
            !(t.adamw.eps > 0.0) || t.adamw.weight_decay < 0.0) {
            throw ConfigError("invalid AdamW settings");
        }
    }
};

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes" || text == "on") {
            return true;
        }
        if (text == "false" || text == "0" || text == "no" || text == "off") {
            return false;
        }
        throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
        return text;
    } else {
        T v{};
        const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
        if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
            throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
        }
        return v;
    }
}

template <typename T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::string>) {
        return v;
    } else {
        char buf[64];
        const auto res = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, res.ptr);
    }
}

/// Reads a key if present, tracking which keys were consumed.
class Reader {
public:
    explicit Reader(const ptree& pt) : pt_(pt) {}

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (auto v = pt_.get_optional<std::string>(ptree::path_type(key, '.'))) {
            out = parse_value<T>(key, trim(*v));
        }
    }

    [[nodiscard]] bool has(const std::string& key) const {
        return pt_.get_optional<std::string>(ptree::path_type(key, '.')).has_value();
    }

    void reject_unknown() const {
        for (const auto& [section, body] : pt_) {
            if (body.empty()) {
                throw ConfigError("key '" + section + "' is outside any section");
            }
            for (const auto& [key, value] : body) {
                const std::string full = section + "." + key;
                if (!seen_.contains(full)) {
                    throw ConfigError("unknown config key '" + full + "'");
                }
            }
        }
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    }

    const ptree& pt_;
    std::set<std::string> seen_;
};

inline routing::RoutingKind parse_kind(const std::string& s) {
    if (s == "topk") {
        return routing::RoutingKind::top_k;
    }
    if (s == "topp") {
        return routing::RoutingKind::top_p_fixed;
    }
    if (s == "dtopp") {
        return routing::RoutingKind::dtop_p;
    }
    throw ConfigError("unknown strategy '" + s + "' (expected topk, topp or dtopp)");
}

inline routing::NormalizationKind parse_normalization(const std::string& s) {
    if (s == "none") {
        return routing::NormalizationKind::none;
    }
    if (s == "global") {
        return routing::NormalizationKind::global_temperature;
    }
    if (s == "dynamic") {
        return routing::NormalizationKind::dynamic;
    }
    throw ConfigError("unknown normalization '" + s + "' (expected none, global or dynamic)");
}

}  // namespace detail

/// Builds a RunConfig from sectioned key/values; absent keys take defaults.
inline RunConfig resolve(const ptree& pt) {
    detail::Reader r(pt);
    RunConfig c;
    auto& m = c.model;
    auto& t = c.train;

    r.get("model.layers", m.layers);
    r.get("model.hidden", m.hidden);
    r.get("model.expert_dim", m.expert_dim);
    r.get("model.experts", m.experts);
    r.get("model.vocab", m.vocab);
    r.get("model.seq_len", m.seq_len);
    r.get("model.tie_weights", m.tie_weights);

    std::string kind = "dtopp";
    r.get("strategy.kind", kind);
    m.strategy = detail::parse_kind(kind);
    r.get("strategy.target", m.target);
    r.get("strategy.p", t.fixed_p);
    std::string norm;
    r.get("strategy.normalization", norm);
    if (norm.empty()) {
        m.normalization = m.strategy == routing::RoutingKind::dtop_p ? routing::Normalization::dynamic()
                                                                      : routing::Normalization::global(1.0);
    } else {
        m.normalization.kind = detail::parse_normalization(norm);
    }
    r.get("strategy.temperature", m.normalization.temperature);

    r.get("optimizer.steps", t.steps);
    r.get("optimizer.batch_seqs", t.batch_seqs);
    r.get("optimizer.peak_lr", t.peak_lr);
    r.get("optimizer.min_lr", t.min_lr);
    t.warmup = t.steps / 20;
    r.get("optimizer.warmup", t.warmup);
    r.get("optimizer.weight_decay", t.adamw.weight_decay);
    r.get("optimizer.beta1", t.adamw.beta1);
    r.get("optimizer.beta2", t.adamw.beta2);
    r.get("optimizer.eps", t.adamw.eps);
    r.get("optimizer.clip_norm", t.clip_norm);

    r.get("losses.lambda_z", t.losses.lambda_z);
    r.get("losses.lambda_lbl", t.losses.lambda_lbl);
    r.get("losses.lambda_dl", t.losses.lambda_dl);
    r.get("losses.lambda_rz", t.losses.lambda_rz);

    r.get("pi.p0", t.pi.p0);
    r.get("pi.kpro", t.pi.k_pro);
    r.get("pi.kint", t.pi.k_int);
    r.get("pi.during_warmup", t.pi.during_warmup);

    std::string corpus = data::to_string(t.corpus);
    r.get("data.corpus", corpus);
    try {
        t.corpus = data::parse_corpus_kind(corpus);
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    r.get("data.corpus_size", t.corpus_size);
    r.get("data.corpus_seed", t.corpus_seed);
    r.get("data.val_fraction", t.val_fraction);
    r.get("data.eval_interval", t.eval_interval);
    r.get("data.eval_batches", t.eval_batches);

    r.get("run.seed", c.seed);
    r.get("run.flush_interval", t.flush_interval);
    r.reject_unknown();

    if (!pt.get_optional<std::string>(ptree::path_type("model.vocab", '.'))) {
        m.vocab = data::vocab_of(t.corpus);
    }
    m.p = m.strategy == routing::RoutingKind::top_p_fixed ? t.fixed_p : t.pi.p0;
    m.seed = c.seed;
    c.validate();
    return c;
}

/// Inverse of resolve: every field, as strings.
inline ptree to_ptree(const RunConfig& c) {
    using detail::format_value;
    ptree pt;
    const auto& m = c.model;
    const auto& t = c.train;
    auto put = [&pt](const std::string& key, const std::string& v) { pt.put(ptree::path_type(key, '.'), v); };
    put("model.layers", format_value(m.layers));
    put("model.hidden", format_value(m.hidden));
    put("model.expert_dim", format_value(m.expert_dim));
    put("model.experts", format_value(m.experts));
    put("model.vocab", format_value(m.vocab));
    put("model.seq_len", format_value(m.seq_len));
    put("model.tie_weights", format_value(m.tie_weights));
    put("strategy.kind", routing::to_string(m.strategy));
    put("strategy.target", format_value(m.target));
    put("strategy.p", format_value(t.fixed_p));
    put("strategy.normalization", routing::to_string(m.normalization.kind));
    put("strategy.temperature", format_value(m.normalization.temperature));
    put("optimizer.steps", format_value(t.steps));
    put("optimizer.batch_seqs", format_value(t.batch_seqs));
    put("optimizer.peak_lr", format_value(t.peak_lr));
    put("optimizer.min_lr", format_value(t.min_lr));
    put("optimizer.warmup", format_value(t.warmup));
    put("optimizer.weight_decay", format_value(t.adamw.weight_decay));
    put("optimizer.beta1", format_value(t.adamw.beta1));
    put("optimizer.beta2", format_value(t.adamw.beta2));
    put("optimizer.eps", format_value(t.adamw.eps));
    put("optimizer.clip_norm", format_value(t.clip_norm));
    put("losses.lambda_z", format_value(t.losses.lambda_z));
    put("losses.lambda_lbl", format_value(t.losses.lambda_lbl));
    put("losses.lambda_dl", format_value(t.losses.lambda_dl));
    put("losses.lambda_rz", format_value(t.losses.lambda_rz));
    put("pi.p0", format_value(t.pi.p0));
    put("pi.kpro", format_value(t.pi.k_pro));
    put("pi.kint", format_value(t.pi.k_int));
    put("pi.during_warmup", format_value(t.pi.during_warmup));
    put("data.corpus", data::to_string(t.corpus));
    put("data.corpus_size", format_value(t.corpus_size));
    put("data.corpus_seed", format_value(t.corpus_seed));
    put("data.val_fraction", format_value(t.val_fraction));
    put("data.eval_interval", format_value(t.eval_interval));
    put("data.eval_batches", format_value(t.eval_batches));
    put("run.seed", format_value(c.seed));
    put("run.flush_interval", format_value(t.flush_interval));
    return pt;
}

inline nlohmann::ordered_json to_json(const ptree& pt) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [section, body] : pt) {
        for (const auto& [key, value] : body) {
            j[section][key] = value.data();
        }
    }
    return j;
}

inline ptree from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object of sections");
    }
    ptree pt;
    for (const auto& [section, body] : j.items()) {
        if (!body.is_object()) {
            throw ConfigError("config section '" + section + "' is not an object");
        }
        for (const auto& [key, value] : body.items()) {
            const std::string text = value.is_string() ? value.get<std::string>() : value.dump();
            pt.put(ptree::path_type(section + "." + key, '.'), text);
        }
    }
    return pt;
}

/// Reads an INI config file, or the "config" object of a run manifest when
/// the path ends in .json.
inline ptree read_config_tree(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    if (path.extension() == ".json") {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        if (!j.contains("config")) {
            throw ConfigError(path.string() + ": manifest has no config object");
        }
        return from_json(j["config"]);
    }
    ptree pt;
    try {
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(path.string() + ": " + e.message() + " at line " + std::to_string(e.line()));
    }
    return pt;
}

inline void set_key(ptree& pt, const std::string& key, const std::string& value) {
    pt.put(ptree::path_type(key, '.'), value);
}

}  // namespace moelab::config
