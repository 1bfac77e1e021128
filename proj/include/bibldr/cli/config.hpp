#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bibldr/eval/protocols.hpp"
#include "bibldr/kvtext.hpp"

namespace bibldr::cli {

/// Everything a command needs: dataset paths, both stage configs, protocol
/// settings, checkpoint locations and the ranking query.
struct RunConfig {
    data::DatasetPaths data;
    eval::ProtocolConfig protocol;
    std::filesystem::path proto_dir;  // Stage-I checkpoints to reuse
    std::filesystem::path model_dir;  // Stage-II checkpoint for ranking
    std::size_t rank_disease = 0;
    std::size_t rank_k = 10;
    std::uint64_t synthetic_seed = 1;

    std::uint64_t seed() const noexcept { return protocol.seed; }
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_floating_point_v<T>) {
            out += fmt(xs[i]);
        } else {
            out += std::to_string(xs[i]);
        }
    }
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return x;
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_uint_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) out.push_back(parse_uint(key, part));
    return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) out.push_back(parse_double(key, part));
    return out;
}

}  // namespace detail

/// Edit distance used to suggest the nearest valid key.
inline std::size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// One recognised configuration key with its parser and printer.
struct KeySpec {
    std::string name;
    std::string help;
    std::function<void(RunConfig&, const std::string&, const std::filesystem::path&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<KeySpec>& key_specs() {
    using detail::fmt;
    using detail::join;
    using P = std::filesystem::path;
    auto path_key = [](std::string name, std::string help, P RunConfig::*member) {
        return KeySpec{name, std::move(help),
                       [member](RunConfig& c, const std::string& v, const P& base) {
                           if (v.empty()) {
                               c.*member = P();
                           } else {
                               const P p(v);
                               c.*member = std::filesystem::absolute(p.is_absolute() ? p : base / p).lexically_normal();
                           }
                       },
                       [member](const RunConfig& c) { return (c.*member).string(); }};
    };
    auto data_key = [](std::string name, std::string help, P data::DatasetPaths::*member) {
        return KeySpec{name, std::move(help),
                       [member](RunConfig& c, const std::string& v, const P& base) {
                           if (v.empty()) {
                               c.data.*member = P();
                           } else {
                               const P p(v);
                               c.data.*member =
                                   std::filesystem::absolute(p.is_absolute() ? p : base / p).lexically_normal();
                           }
                       },
                       [member](const RunConfig& c) { return (c.data.*member).string(); }};
    };
#define BIBLDR_UINT(KEY, FIELD, HELP)                                                                      \
    KeySpec {                                                                                              \
        KEY, HELP, [](RunConfig& c, const std::string& v, const P&) { c.FIELD = detail::parse_uint(KEY, v); }, \
            [](const RunConfig& c) { return std::to_string(c.FIELD); }                                     \
    }
#define BIBLDR_DOUBLE(KEY, FIELD, HELP)                                                                        \
    KeySpec {                                                                                                  \
        KEY, HELP, [](RunConfig& c, const std::string& v, const P&) { c.FIELD = detail::parse_double(KEY, v); }, \
            [](const RunConfig& c) { return fmt(c.FIELD); }                                                    \
    }
#define BIBLDR_UINTS(KEY, FIELD, HELP)                                                                            \
    KeySpec {                                                                                                     \
        KEY, HELP, [](RunConfig& c, const std::string& v, const P&) { c.FIELD = detail::parse_uint_list(KEY, v); }, \
            [](const RunConfig& c) { return join(c.FIELD); }                                                      \
    }
    static const std::vector<KeySpec> specs{
        data_key("data.association", "binary drug x disease matrix file", &data::DatasetPaths::association),
        data_key("data.drug_similarity", "drug x drug similarity matrix file", &data::DatasetPaths::drug_similarity),
        data_key("data.disease_similarity", "disease x disease similarity matrix file",
                 &data::DatasetPaths::disease_similarity),
        data_key("data.drug_ids", "optional drug identifiers, one per line", &data::DatasetPaths::drug_ids),
        data_key("data.disease_ids", "optional disease identifiers, one per line", &data::DatasetPaths::disease_ids),
        BIBLDR_UINT("data.synthetic_seed", synthetic_seed, "generator seed for make-synthetic"),
        BIBLDR_UINT("seed", protocol.seed, "master seed"),
        BIBLDR_UINT("jobs", protocol.jobs, "parallel protocol units"),

        BIBLDR_UINT("stage1.d0", protocol.stage1.d0, "prototype dimension"),
        BIBLDR_UINTS("stage1.hidden", protocol.stage1.hidden, "encoder hidden widths, comma separated"),
        BIBLDR_DOUBLE("stage1.lr", protocol.stage1.lr, "encoder learning rate"),
        BIBLDR_DOUBLE("stage1.lr_min", protocol.stage1.lr_min, "cosine schedule floor"),
        BIBLDR_DOUBLE("stage1.weight_decay", protocol.stage1.weight_decay, "AdamW decoupled decay"),
        BIBLDR_UINT("stage1.epochs", protocol.stage1.epochs, "encoder epochs"),
        BIBLDR_UINT("stage1.pair_batch", protocol.stage1.pair_batch, "pairs per encoder step"),

        BIBLDR_UINT("stage2.embed_dim", protocol.stage2.embed_dim, "identity embedding width"),
        BIBLDR_DOUBLE("stage2.temperature", protocol.stage2.temperature, "rating-scale temperature"),
        BIBLDR_UINT("stage2.heads", protocol.stage2.heads, "attention heads"),
        BIBLDR_UINT("stage2.max_len", protocol.stage2.max_len, "sequence length per side"),
        BIBLDR_DOUBLE("stage2.lr", protocol.stage2.lr, "model learning rate"),
        BIBLDR_DOUBLE("stage2.lr_min", protocol.stage2.lr_min, "cosine schedule floor"),
        BIBLDR_DOUBLE("stage2.weight_decay", protocol.stage2.weight_decay, "AdamW decoupled decay"),
        KeySpec{"stage2.decay_embeddings", "apply weight decay to identity embeddings",
                [](RunConfig& c, const std::string& v, const P&) {
                    c.protocol.stage2.decay_embeddings = detail::parse_bool("stage2.decay_embeddings", v);
                },
                [](const RunConfig& c) { return std::string(c.protocol.stage2.decay_embeddings ? "true" : "false"); }},
        BIBLDR_UINT("stage2.epochs", protocol.stage2.epochs, "model epochs"),
        BIBLDR_UINT("stage2.batch", protocol.stage2.batch, "minibatch size"),
        KeySpec{"stage2.pooling", "flatten or mean",
                [](RunConfig& c, const std::string& v, const P&) {
                    if (v == "flatten") {
                        c.protocol.stage2.pooling = seqmodel::Pooling::flatten;
                    } else if (v == "mean") {
                        c.protocol.stage2.pooling = seqmodel::Pooling::mean;
                    } else {
                        throw ConfigError("stage2.pooling: expected flatten or mean, got '" + v + "'");
                    }
                },
                [](const RunConfig& c) {
                    return std::string(c.protocol.stage2.pooling == seqmodel::Pooling::flatten ? "flatten" : "mean");
                }},
        BIBLDR_UINTS("stage2.head_hidden", protocol.stage2.head_hidden, "prediction head hidden widths"),
        KeySpec{"stage2.adapter_activation", "relu or none, for fusion and alignment layers",
                [](RunConfig& c, const std::string& v, const P&) {
                    if (v == "relu") {
                        c.protocol.stage2.adapter_activation = numcore::Activation::relu;
                    } else if (v == "none") {
                        c.protocol.stage2.adapter_activation = numcore::Activation::none;
                    } else {
                        throw ConfigError("stage2.adapter_activation: expected relu or none, got '" + v + "'");
                    }
                },
                [](const RunConfig& c) {
                    return std::string(c.protocol.stage2.adapter_activation == numcore::Activation::relu ? "relu"
                                                                                                      : "none");
                }},
        BIBLDR_DOUBLE("stage2.bn_momentum", protocol.stage2.bn_momentum, "batch-norm running-stat momentum"),
        BIBLDR_DOUBLE("stage2.bn_eps", protocol.stage2.bn_eps, "batch-norm epsilon"),

        BIBLDR_UINT("protocol.folds", protocol.folds, "cross-validation folds"),
        BIBLDR_UINT("protocol.repeats", protocol.repeats, "cross-validation repeats"),
        BIBLDR_UINT("protocol.eval_folds", protocol.eval_folds, "folds evaluated per repeat, 0 for all"),
        BIBLDR_UINT("protocol.fold", protocol.fold, "fold used by sparse and sweep"),
        KeySpec{"protocol.lambdas", "sparsity fractions, comma separated",
                [](RunConfig& c, const std::string& v, const P&) {
                    c.protocol.lambdas = detail::parse_double_list("protocol.lambdas", v);
                },
                [](const RunConfig& c) { return join(c.protocol.lambdas); }},
        BIBLDR_UINTS("protocol.grid_d0", protocol.grid_d0, "sweep prototype dimensions"),
        KeySpec{"protocol.grid_temperature", "sweep temperatures",
                [](RunConfig& c, const std::string& v, const P&) {
                    c.protocol.grid_temperature = detail::parse_double_list("protocol.grid_temperature", v);
                },
                [](const RunConfig& c) { return join(c.protocol.grid_temperature); }},
        BIBLDR_UINTS("protocol.drugs", protocol.drugs, "explicit cold-start drug indices"),
        BIBLDR_UINT("protocol.coldstart_drugs", protocol.coldstart_drugs, "size of the seeded cold-start subset"),
        KeySpec{"protocol.all_drugs", "cold start over every drug with a positive",
                [](RunConfig& c, const std::string& v, const P&) {
                    c.protocol.all_drugs = detail::parse_bool("protocol.all_drugs", v);
                },
                [](const RunConfig& c) { return std::string(c.protocol.all_drugs ? "true" : "false"); }},

        path_key("train.proto_dir", "Stage-I checkpoint directory", &RunConfig::proto_dir),
        path_key("rank.model_dir", "Stage-II checkpoint directory", &RunConfig::model_dir),
        BIBLDR_UINT("rank.disease", rank_disease, "disease index to rank drugs for"),
        BIBLDR_UINT("rank.k", rank_k, "number of candidates"),
    };
#undef BIBLDR_UINT
#undef BIBLDR_DOUBLE
#undef BIBLDR_UINTS
    return specs;
}

inline const KeySpec& find_key(const std::string& name) {
    const auto& specs = key_specs();
    for (const auto& s : specs)
        if (s.name == name) return s;
    const KeySpec* best = &specs.front();
    std::size_t best_d = levenshtein(name, best->name);
    for (const auto& s : specs) {
        const std::size_t dist = levenshtein(name, s.name);
        if (dist < best_d) {
            best_d = dist;
            best = &s;
        }
    }
    throw ConfigError("unknown key '" + name + "' (nearest valid key: '" + best->name + "')");
}

/// Applies key=value; relative paths resolve against `base`.
inline void apply(RunConfig& c, const std::string& key, const std::string& value, const std::filesystem::path& base) {
    find_key(key).set(c, value, base);
}

/// Parses a KEY=VALUE override as given to --set.
inline std::pair<std::string, std::string> parse_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || trim(kv.substr(0, eq)).empty())
        throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    return {trim(kv.substr(0, eq)), trim(kv.substr(eq + 1))};
}

/// Reads a config file; relative paths inside resolve against its directory.
inline RunConfig load_config(const std::filesystem::path& path) {
    RunConfig c;
    const auto doc = KeyValueText::load(path.string());
    const auto base = std::filesystem::absolute(path).parent_path();
    for (const auto& [k, v] : doc.entries()) apply(c, k, v, base);
    return c;
}

/// Every key with its effective value; reloading it reproduces the config.
inline KeyValueText resolved(const RunConfig& c) {
    KeyValueText doc;
    for (const auto& s : key_specs()) doc.set(s.name, s.get(c));
    return doc;
}

/// Effective Stage-I and Stage-II configs with seeds and d0 linked.
inline proto::Stage1Config stage1_of(const RunConfig& c) {
    auto s1 = c.protocol.stage1;
    s1.seed = c.seed();
    return s1;
}

inline seqmodel::Stage2Config stage2_of(const RunConfig& c) {
    auto s2 = c.protocol.stage2;
    s2.d0 = c.protocol.stage1.d0;
    s2.seed = c.seed();
    return s2;
}

inline eval::ProtocolConfig protocol_of(const RunConfig& c) {
    auto p = c.protocol;
    p.stage1 = stage1_of(c);
    p.stage2 = stage2_of(c);
    return p;
}

}  // namespace bibldr::cli
