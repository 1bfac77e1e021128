#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bibldr/kvtext.hpp"
#include "bibldr/numcore/tape.hpp"

namespace bibldr::numcore {

inline constexpr int kCheckpointFormatVersion = 1;

// Layout: <dir>/manifest.txt (key=value, UTF-8) and one raw little-endian
// float64 file per parameter.
//
//   format_version=1
//   meta.<key>=<value>
//   param.count=N
//   param.<i>.name / .shape / .file / .offset / .length / .trainable

namespace detail {

inline std::string shape_csv(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(s[i]);
    }
    return out;
}

inline Shape parse_shape(const std::string& text) {
    Shape s;
    if (text.empty()) return s;
    for (const auto& part : split(text, ',')) s.push_back(std::stoul(part));
    return s;
}

inline void write_f64(const std::filesystem::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write '" + path.string() + "'");
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
    } else {
        for (double v : values) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            char buf[8];
            for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
            out.write(buf, 8);
        }
    }
    if (!out) throw CheckpointError("short write to '" + path.string() + "'");
}

inline std::vector<double> read_f64(const std::filesystem::path& path, std::size_t offset, std::size_t count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
    in.seekg(static_cast<std::streamoff>(offset));
    std::vector<unsigned char> raw(count * 8);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw CheckpointError("'" + path.string() + "' is shorter than its manifest entry");
    }
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= std::uint64_t{raw[i * 8 + b]} << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

}  // namespace detail

struct CheckpointContents {
    std::map<std::string, std::string> meta;
    std::vector<Parameter> params;

    const Parameter& param(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return p;
        throw CheckpointError("checkpoint has no parameter '" + name + "'");
    }
};

inline void save_checkpoint(const std::filesystem::path& dir, const ParameterStore& store,
                            const std::map<std::string, std::string>& meta) {
    std::filesystem::create_directories(dir);
    KeyValueText manifest;
    manifest.set("format_version", std::to_string(kCheckpointFormatVersion));
    for (const auto& [k, v] : meta) manifest.set("meta." + k, v);
    manifest.set("param.count", std::to_string(store.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Parameter& p = store[i];
        char idx[16];
        std::snprintf(idx, sizeof idx, "%03zu", i);
        const std::string file = std::string("p") + idx + "_" + p.name + ".f64";
        detail::write_f64(dir / file, p.value.values());
        const std::string key = "param." + std::to_string(i);
        manifest.set(key + ".name", p.name);
        manifest.set(key + ".shape", detail::shape_csv(p.value.shape()));
        manifest.set(key + ".file", file);
        manifest.set(key + ".offset", "0");
        manifest.set(key + ".length", std::to_string(p.value.numel() * 8));
        manifest.set(key + ".trainable", p.trainable ? "1" : "0");
    }
    manifest.save((dir / "manifest.txt").string());
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.txt";
    if (!std::filesystem::exists(manifest_path)) {
        throw CheckpointError("no manifest at '" + manifest_path.string() + "'");
    }
    const KeyValueText manifest = KeyValueText::load(manifest_path.string());
    if (manifest.get_or("format_version", "") != std::to_string(kCheckpointFormatVersion)) {
        throw CheckpointError("unsupported checkpoint format version '" + manifest.get_or("format_version", "") + "'");
    }
    CheckpointContents out;
    for (const auto& [k, v] : manifest.entries())
        if (k.rfind("meta.", 0) == 0) out.meta[k.substr(5)] = v;
    const std::size_t count = std::stoul(manifest.get("param.count"));
    for (std::size_t i = 0; i < count; ++i) {
        const std::string key = "param." + std::to_string(i);
        Parameter p;
        p.name = manifest.get(key + ".name");
        const Shape shape = detail::parse_shape(manifest.get(key + ".shape"));
        const std::size_t length = std::stoul(manifest.get(key + ".length"));
        if (length != shape_numel(shape) * 8) {
            throw CheckpointError("parameter '" + p.name + "': byte length does not match shape");
        }
        auto values = detail::read_f64(dir / manifest.get(key + ".file"), std::stoul(manifest.get(key + ".offset")),
                                       shape_numel(shape));
        p.value = Tensor(shape, std::move(values));
        p.trainable = manifest.get(key + ".trainable") == "1";
        p.grad = Tensor(shape);
        out.params.push_back(std::move(p));
    }
    return out;
}

/// Copies checkpoint values into an existing store; every name and shape must match.
inline void restore_parameters(const CheckpointContents& ckpt, ParameterStore& store) {
    if (ckpt.params.size() != store.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                              std::to_string(store.size()));
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
        Parameter& dst = store[i];
        const Parameter& src = ckpt.param(dst.name);
        if (src.value.shape() != dst.value.shape()) {
            throw CheckpointError("parameter '" + dst.name + "' has shape " + shape_str(src.value.shape()) +
                                  " in checkpoint, model expects " + shape_str(dst.value.shape()));
        }
        const bool rg = dst.value.requires_grad;
        dst.value = src.value;
        dst.value.requires_grad = rg;
    }
}

}  // namespace bibldr::numcore
