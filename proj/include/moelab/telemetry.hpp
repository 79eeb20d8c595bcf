#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/error.hpp"

namespace moelab::telemetry {

inline constexpr std::string_view kMetricsHeader =
    "step,split,ce,lm_z,lb,dynamic,router_z,total,threshold,mean_active,std_active,lr";
inline constexpr std::string_view kLayersHeader = "step,layer,mean_active,theta";

enum class Split { train, val };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "val"; }

struct StepRecord {
    std::int64_t step = 0;
    Split split = Split::train;
    double ce = 0.0;
    double lm_z = 0.0;
    double lb = 0.0;
    double dynamic = 0.0;
    double router_z = 0.0;
    double total = 0.0;
    std::optional<double> threshold;
    double mean_active = 0.0;
    double std_active = 0.0;
    double lr = 0.0;
};

struct LayerRecord {
    std::int64_t step = 0;
    int layer = 0;
    double mean_active = 0.0;
    std::optional<double> theta;
};

/// 9 significant digits, "C" formatting regardless of the global locale.
inline std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
    return std::string(buf, res.ptr);
}

inline std::string format_row(const StepRecord& r) {
    std::string s;
    s.reserve(160);
    s += std::to_string(r.step);
    s += ',';
    s += to_string(r.split);
    for (double v : {r.ce, r.lm_z, r.lb, r.dynamic, r.router_z, r.total}) {
        s += ',';
        s += format_real(v);
    }
    s += ',';
    if (r.threshold) {
        s += format_real(*r.threshold);
    }
    for (double v : {r.mean_active, r.std_active, r.lr}) {
        s += ',';
        s += format_real(v);
    }
    return s;
}

inline std::string format_row(const LayerRecord& r) {
    std::string s = std::to_string(r.step) + "," + std::to_string(r.layer) + "," + format_real(r.mean_active) + ",";
    if (r.theta) {
        s += format_real(*r.theta);
    }
    return s;
}

/// Append-only store of step and layer records. Optionally streams rows to
/// metrics.csv / layers.csv in a directory, flushing every `flush_every` steps.
class Sink {
public:
    explicit Sink(int layers = 0) : layers_(layers) {}

    void attach(const std::filesystem::path& dir, int flush_every) {
        metrics_path_ = dir / "metrics.csv";
        layers_path_ = dir / "layers.csv";
        metrics_.open(metrics_path_, std::ios::binary | std::ios::trunc);
        if (!metrics_) {
            throw IoError("cannot open " + metrics_path_.string() + " for writing");
        }
        layers_out_.open(layers_path_, std::ios::binary | std::ios::trunc);
        if (!layers_out_) {
            throw IoError("cannot open " + layers_path_.string() + " for writing");
        }
        flush_every_ = flush_every;
        metrics_ << kMetricsHeader << '\n';
        layers_out_ << kLayersHeader << '\n';
        for (const auto& r : steps_) {
            metrics_ << format_row(r) << '\n';
        }
        for (const auto& r : layer_records_) {
            layers_out_ << format_row(r) << '\n';
        }
        flush();
    }

    /// Appends one step and its per-layer records. Steps must strictly
    /// increase within a split; layer means must average to the step mean.
    void record_step(const StepRecord& step, const std::vector<LayerRecord>& layers = {}) {
        if (finalized_) {
            throw InvalidArgument("record_step: sink already finalized");
        }
        auto& last = last_step_[step.split];
        if (last && step.step <= *last) {
            throw InvalidArgument("record_step: step " + std::to_string(step.step) + " not after " +
                                  std::to_string(*last) + " in split " + std::string(to_string(step.split)));
        }
        if (!layers.empty()) {
            if (layers_ > 0 && static_cast<int>(layers.size()) != layers_) {
                throw InvalidArgument("record_step: expected " + std::to_string(layers_) + " layer records, got " +
                                      std::to_string(layers.size()));
            }
            double sum = 0.0;
            for (const auto& l : layers) {
                if (l.step != step.step) {
                    throw InvalidArgument("record_step: layer record step differs from its step record");
                }
                sum += l.mean_active;
            }
            if (std::abs(sum / static_cast<double>(layers.size()) - step.mean_active) > 1e-9) {
                throw InvalidArgument("record_step: layer means do not average to the step mean");
            }
        }
        last = step.step;
        steps_.push_back(step);
        layer_records_.insert(layer_records_.end(), layers.begin(), layers.end());
        if (metrics_.is_open()) {
            metrics_ << format_row(step) << '\n';
            for (const auto& l : layers) {
                layers_out_ << format_row(l) << '\n';
            }
            if (flush_every_ > 0 && ++since_flush_ >= flush_every_) {
                flush();
            }
        }
    }

    void flush() {
        if (!metrics_.is_open()) {
            return;
        }
        metrics_.flush();
        layers_out_.flush();
        since_flush_ = 0;
        if (!metrics_ || !layers_out_) {
            throw IoError("write failed on " + metrics_path_.string() + " or " + layers_path_.string());
        }
    }

    void finalize() {
        flush();
        if (metrics_.is_open()) {
            metrics_.close();
            layers_out_.close();
        }
        finalized_ = true;
    }

    [[nodiscard]] bool finalized() const noexcept { return finalized_; }
    [[nodiscard]] const std::vector<StepRecord>& steps() const noexcept { return steps_; }
    [[nodiscard]] const std::vector<LayerRecord>& layer_records() const noexcept { return layer_records_; }

private:
    int layers_;
    std::vector<StepRecord> steps_;
    std::vector<LayerRecord> layer_records_;
    std::map<Split, std::optional<std::int64_t>> last_step_;
    bool finalized_ = false;

    std::filesystem::path metrics_path_, layers_path_;
    std::ofstream metrics_, layers_out_;
    int flush_every_ = 0;
    int since_flush_ = 0;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << text;
    out.flush();
    if (!out) {
        throw IoError("write failed on " + path.string());
    }
}

/// Writes metrics.csv and layers.csv into `dir` from a finalized sink.
inline void export_csv(const Sink& sink, const std::filesystem::path& dir) {
    if (!sink.finalized()) {
        throw InvalidArgument("export_csv: sink not finalized");
    }
    std::string metrics(kMetricsHeader);
    metrics += '\n';
    for (const auto& r : sink.steps()) {
        metrics += format_row(r);
        metrics += '\n';
    }
    std::string layers(kLayersHeader);
    layers += '\n';
    for (const auto& r : sink.layer_records()) {
        layers += format_row(r);
        layers += '\n';
    }
    write_text(dir / "metrics.csv", metrics);
    write_text(dir / "layers.csv", layers);
}

// ---------------------------------------------------------------- parsing

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

inline double parse_real(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw InvalidArgument("not a number: '" + s + "'");
    }
    return v;
}

inline std::optional<double> parse_optional(const std::string& s) {
    return s.empty() ? std::nullopt : std::optional<double>(parse_real(s));
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    return lines;
}

inline std::vector<StepRecord> read_metrics_csv(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    std::size_t i = 0;
    while (i < lines.size() && lines[i].starts_with('#')) {
        ++i;
    }
    if (i >= lines.size() || lines[i] != kMetricsHeader) {
        throw InvalidArgument(path.string() + ": unexpected metrics header");
    }
    std::vector<StepRecord> out;
    for (++i; i < lines.size(); ++i) {
        const auto c = split_csv_line(lines[i]);
        if (c.size() != 12) {
            throw InvalidArgument(path.string() + ": expected 12 fields on line " + std::to_string(i + 1));
        }
        StepRecord r;
        r.step = std::stoll(c[0]);
        if (c[1] != "train" && c[1] != "val") {
            throw InvalidArgument(path.string() + ": bad split '" + c[1] + "'");
        }
        r.split = c[1] == "train" ? Split::train : Split::val;
        r.ce = parse_real(c[2]);
        r.lm_z = parse_real(c[3]);
        r.lb = parse_real(c[4]);
        r.dynamic = parse_real(c[5]);
        r.router_z = parse_real(c[6]);
        r.total = parse_real(c[7]);
        r.threshold = parse_optional(c[8]);
        r.mean_active = parse_real(c[9]);
        r.std_active = parse_real(c[10]);
        r.lr = parse_real(c[11]);
        out.push_back(r);
    }
    return out;
}

inline std::vector<LayerRecord> read_layers_csv(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    std::size_t i = 0;
    while (i < lines.size() && lines[i].starts_with('#')) {
        ++i;
    }
    if (i >= lines.size() || lines[i] != kLayersHeader) {
        throw InvalidArgument(path.string() + ": unexpected layers header");
    }
    std::vector<LayerRecord> out;
    for (++i; i < lines.size(); ++i) {
        const auto c = split_csv_line(lines[i]);
        if (c.size() != 4) {
            throw InvalidArgument(path.string() + ": expected 4 fields on line " + std::to_string(i + 1));
        }
        out.push_back({std::stoll(c[0]), std::stoi(c[1]), parse_real(c[2]), parse_optional(c[3])});
    }
    return out;
}

}  // namespace moelab::telemetry
