#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "moelab/config.hpp"
#include "moelab/model.hpp"

// Checkpoint layout (little-endian):
//   8 bytes   magic "MOELABCK"
//   u32       format version (1)
//   u64       byte length of the JSON header
//   JSON      {"config": {...}, "params": [{"name", "rows", "cols"}, ...]}
//   f64[]     parameter values in header order, row-major

namespace moelab::checkpoint {

inline constexpr std::array<char, 8> kMagic{'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        throw IoError(path.string() + ": truncated checkpoint");
    }
    return v;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const model::ToyModel& m, const config::RunConfig& cfg) {
    nlohmann::ordered_json header;
    header["config"] = config::to_json(config::to_ptree(cfg));
    header["params"] = nlohmann::ordered_json::array();
    for (const auto& p : m.parameters()) {
        header["params"].push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(kMagic.data(), kMagic.size());
    detail::write_pod(out, kVersion);
    detail::write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : m.parameters()) {
        out.write(reinterpret_cast<const char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    out.flush();
    if (!out) {
        throw IoError("write failed on " + path.string());
    }
}

struct Loaded {
    config::RunConfig config;
    model::ToyModel model;
};

inline Loaded load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw IoError(path.string() + ": not a checkpoint (bad magic)");
    }
    const auto version = detail::read_pod<std::uint32_t>(in, path);
    if (version != kVersion) {
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto len = detail::read_pod<std::uint64_t>(in, path);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw IoError(path.string() + ": truncated header");
    }
    const auto header = nlohmann::json::parse(text);
    config::RunConfig cfg = config::resolve(config::from_json(header.at("config")));
    model::ToyModel m(cfg.model);
    const auto& params = header.at("params");
    if (params.size() != m.parameters().size()) {
        throw IoError(path.string() + ": parameter count does not match the stored config");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = m.parameters()[i];
        if (params[i].at("name").get<std::string>() != p.name || params[i].at("rows").get<ad::Index>() != p.value.rows() ||
            params[i].at("cols").get<ad::Index>() != p.value.cols()) {
            throw IoError(path.string() + ": parameter " + std::to_string(i) + " does not match the model layout");
        }
        in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        if (!in) {
            throw IoError(path.string() + ": truncated parameter data");
        }
    }
    return {std::move(cfg), std::move(m)};
}

}  // namespace moelab::checkpoint
