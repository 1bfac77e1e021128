#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bibldr/data/dataset.hpp"
#include "bibldr/numcore.hpp"

namespace bibldr::proto {

using numcore::Tensor;

enum class EntityKind { drug, disease };

inline const char* to_string(EntityKind k) { return k == EntityKind::drug ? "drug" : "disease"; }

inline constexpr double kNormGuard = 1e-8;

struct Stage1Config {
    std::size_t d0 = 1024;
    std::vector<std::size_t> hidden{1024};
    double lr = 0.01;
    double lr_min = 0.0;
    double weight_decay = 0.01;
    std::size_t epochs = 300;
    std::size_t pair_batch = 4096;
    std::uint64_t seed = 0;

    void validate() const {
        if (d0 < 2) throw ConfigError("stage1.d0 must be at least 2, got " + std::to_string(d0));
        if (!(lr > 0.0)) throw ConfigError("stage1.lr must be positive");
        if (lr_min < 0.0 || lr_min > lr) throw ConfigError("stage1.lr_min must lie in [0, stage1.lr]");
        if (pair_batch == 0) throw ConfigError("stage1.pair_batch must be positive");
        for (auto h : hidden)
            if (h == 0) throw ConfigError("stage1.hidden widths must be positive");
    }
};

/// Row (equivalently column) i of the drug or disease similarity matrix.
inline Tensor initial_representation(const data::Dataset& d, EntityKind kind, std::size_t i) {
    const Tensor& s = kind == EntityKind::drug ? d.drug_similarity : d.disease_similarity;
    if (i >= s.rows()) {
        throw RangeError(std::string(to_string(kind)) + " index " + std::to_string(i) + " out of range (" +
                         std::to_string(s.rows()) + " entities)");
    }
    auto row = s.row(i);
    return Tensor::vector(std::vector<double>(row.begin(), row.end()));
}

/// Feed-forward encoder from a similarity row to a d0-dimensional prototype.
/// One parameter set per domain: both branches of the Siamese pair call the same weights.
class PrototypeEncoder {
public:
    PrototypeEncoder() = default;

    PrototypeEncoder(EntityKind kind, std::size_t input_extent, const Stage1Config& config, std::uint64_t seed)
        : kind_(kind), input_extent_(input_extent), d0_(config.d0), hidden_(config.hidden) {
        config.validate();
        numcore::Rng rng(seed);
        std::vector<std::size_t> widths{input_extent};
        widths.insert(widths.end(), hidden_.begin(), hidden_.end());
        widths.push_back(d0_);
        net_ = numcore::Mlp::create(params_, std::string("encoder.") + to_string(kind), widths,
                                    numcore::Activation::none, rng);
    }

    EntityKind kind() const noexcept { return kind_; }
    std::size_t input_extent() const noexcept { return input_extent_; }
    std::size_t d0() const noexcept { return d0_; }
    const std::vector<std::size_t>& hidden() const noexcept { return hidden_; }
    numcore::ParameterStore& params() noexcept { return params_; }
    const numcore::ParameterStore& params() const noexcept { return params_; }

    numcore::Var forward(numcore::Tape& tape, numcore::Var rows) { return net_(tape, params_, rows); }

    /// Prototype of one similarity row.
    Tensor encode(std::span<const double> row) const {
        if (row.size() != input_extent_) {
            throw DimensionError("encoder expects input extent " + std::to_string(input_extent_) + ", got " +
                                 std::to_string(row.size()));
        }
        Tensor x(numcore::Shape{1, input_extent_}, std::vector<double>(row.begin(), row.end()));
        return encode_rows(x).reshaped({d0_});
    }

    /// Prototypes of every row of a matrix (n x input_extent -> n x d0).
    Tensor encode_rows(const Tensor& rows) const {
        if (rows.rank() != 2 || rows.cols() != input_extent_) {
            throw DimensionError("encoder expects rows of extent " + std::to_string(input_extent_) + ", got " +
                                 numcore::shape_str(rows.shape()));
        }
        numcore::Tape tape;
        numcore::ParameterStore frozen = params_;
        for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i].trainable = false;
        return net_(tape, frozen, tape.constant_ref(rows)).value();
    }

    void save(const std::filesystem::path& dir) const {
        std::string widths;
        for (std::size_t i = 0; i < hidden_.size(); ++i) widths += (i ? "," : "") + std::to_string(hidden_[i]);
        numcore::save_checkpoint(dir, params_,
                                 {{"kind", "prototype_encoder"},
                                  {"domain", to_string(kind_)},
                                  {"d0", std::to_string(d0_)},
                                  {"input_extent", std::to_string(input_extent_)},
                                  {"hidden", widths}});
    }

    static PrototypeEncoder load(const std::filesystem::path& dir) {
        const auto ckpt = numcore::read_checkpoint(dir);
        auto meta = [&](const std::string& k) {
            auto it = ckpt.meta.find(k);
            if (it == ckpt.meta.end()) throw CheckpointError("encoder checkpoint lacks meta." + k);
            return it->second;
        };
        if (meta("kind") != "prototype_encoder") throw CheckpointError("'" + dir.string() + "' is not an encoder checkpoint");
        Stage1Config cfg;
        cfg.d0 = std::stoul(meta("d0"));
        cfg.hidden.clear();
        if (!meta("hidden").empty())
            for (const auto& w : split(meta("hidden"), ',')) cfg.hidden.push_back(std::stoul(w));
        const EntityKind kind = meta("domain") == "drug" ? EntityKind::drug : EntityKind::disease;
        PrototypeEncoder enc(kind, std::stoul(meta("input_extent")), cfg, 0);
        numcore::restore_parameters(ckpt, enc.params_);
        return enc;
    }

private:
    EntityKind kind_ = EntityKind::drug;
    std::size_t input_extent_ = 0;
    std::size_t d0_ = 0;
    std::vector<std::size_t> hidden_;
    numcore::ParameterStore params_;
    numcore::Mlp net_;
};

inline Tensor encode(const PrototypeEncoder& enc, std::span<const double> sim_row) { return enc.encode(sim_row); }

/// p.q / (|p||q|); zero-norm prototypes are rejected.
inline double cosine_sim(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("cosine_sim extents differ: " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
    }
    double dot = 0.0, np = 0.0, nq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        dot += p[i] * q[i];
        np += p[i] * p[i];
        nq += q[i] * q[i];
    }
    if (np == 0.0 || nq == 0.0) throw DegeneratePrototypeError("cosine similarity of a zero-norm prototype");
    return dot / (std::sqrt(np) * std::sqrt(nq));
}

/// Every (i, j) with i < j.
inline std::vector<std::pair<std::size_t, std::size_t>> all_pairs(std::size_t n) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(n * (n > 0 ? n - 1 : 0) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out.emplace_back(i, j);
    return out;
}

/// Sum over pairs of (S_ij - cos(f(row_i), f(row_j)))^2.
inline double stage1_loss(const PrototypeEncoder& enc, const Tensor& similarity,
                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    if (pairs.empty()) throw ContractError("stage1_loss needs a non-empty pair set");
    for (const auto& [i, j] : pairs)
        if (!(i < j)) throw ContractError("stage1_loss pairs must satisfy i < j");
    const Tensor protos = enc.encode_rows(similarity);
    double loss = 0.0;
    for (const auto& [i, j] : pairs) {
        const double e = similarity(i, j) - cosine_sim(protos.row(i), protos.row(j));
        loss += e * e;
    }
    return loss;
}

struct Stage1Result {
    PrototypeEncoder encoder;
    std::vector<double> epoch_losses;  // mean per-pair loss of each epoch
    double final_loss = 0.0;
};

/// Fits the encoder so cosine similarity of prototypes regresses onto S.
/// Pairs are reshuffled every epoch and consumed in minibatches; AdamW with
/// a cosine-annealed learning rate over all steps.
inline Stage1Result train_stage1(const Tensor& similarity, const Stage1Config& config, EntityKind kind) {
    config.validate();
    const std::size_t n = similarity.rows();
    if (similarity.rank() != 2 || similarity.cols() != n) throw DimensionError("similarity matrix must be square");
    Stage1Result result{PrototypeEncoder(kind, n, config, numcore::derive_seed(config.seed, {1, n})), {}, 0.0};
    auto pairs = all_pairs(n);
    if (pairs.empty() || config.epochs == 0) return result;

    PrototypeEncoder& enc = result.encoder;
    numcore::AdamWConfig opt_cfg;
    opt_cfg.lr = config.lr;
    opt_cfg.weight_decay = config.weight_decay;
    numcore::AdamW opt(enc.params().trainable(), opt_cfg);
    numcore::Rng rng(numcore::derive_seed(config.seed, {2, n}));

    const std::size_t batch = std::min(config.pair_batch, pairs.size());
    const std::size_t steps_per_epoch = (pairs.size() + batch - 1) / batch;
    const long total_steps = static_cast<long>(steps_per_epoch * config.epochs);
    long step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(pairs.begin(), pairs.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = s * batch, hi = std::min(pairs.size(), lo + batch);
            std::vector<std::pair<std::size_t, std::size_t>> chunk(pairs.begin() + lo, pairs.begin() + hi);
            Tensor target(numcore::Shape{chunk.size()});
            for (std::size_t p = 0; p < chunk.size(); ++p) target[p] = similarity(chunk[p].first, chunk[p].second);
            try {
                numcore::Tape tape;
                enc.params().zero_grad();
                auto protos = enc.forward(tape, tape.constant_ref(similarity));
                auto cos = numcore::pair_cosine(protos, chunk, kNormGuard);
                auto sse = numcore::squared_error_sum(cos, target);
                epoch_loss += sse.value().item();
                auto loss = numcore::scale(sse, 1.0 / static_cast<double>(chunk.size()));
                tape.backward(loss);
                opt.step(numcore::cosine_anneal(config.lr, step, total_steps, config.lr_min));
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(to_string(kind)) + " encoder diverged at epoch " +
                                      std::to_string(epoch) + ": " + e.what());
            }
            ++step;
        }
        epoch_loss /= static_cast<double>(pairs.size());
        if (!std::isfinite(epoch_loss)) {
            throw DivergenceError(std::string(to_string(kind)) + " encoder loss is non-finite at epoch " +
                                  std::to_string(epoch));
        }
        result.epoch_losses.push_back(epoch_loss);
    }
    result.final_loss = result.epoch_losses.back();
    return result;
}

/// Frozen prototype tables of every drug and disease.
struct PrototypeBank {
    Tensor drug;     // drugs x d0
    Tensor disease;  // diseases x d0

    std::size_t d0() const { return drug.cols(); }
};

struct EncoderPair {
    PrototypeEncoder drug;
    PrototypeEncoder disease;
    std::vector<double> drug_losses;
    std::vector<double> disease_losses;
};

/// Trains the two domain encoders independently (separate parameter sets).
inline EncoderPair train_encoders(const data::Dataset& d, const Stage1Config& config) {
    Stage1Config cu = config, cv = config;
    cu.seed = numcore::derive_seed(config.seed, {0xd2});
    cv.seed = numcore::derive_seed(config.seed, {0xd3});
    auto ru = train_stage1(d.drug_similarity, cu, EntityKind::drug);
    auto rv = train_stage1(d.disease_similarity, cv, EntityKind::disease);
    return {std::move(ru.encoder), std::move(rv.encoder), std::move(ru.epoch_losses), std::move(rv.epoch_losses)};
}

inline PrototypeBank make_bank(const EncoderPair& enc, const data::Dataset& d) {
    if (enc.drug.input_extent() != d.drugs() || enc.disease.input_extent() != d.diseases()) {
        throw CheckpointError("encoder input extents " + std::to_string(enc.drug.input_extent()) + "/" +
                              std::to_string(enc.disease.input_extent()) + " do not match dataset " +
                              std::to_string(d.drugs()) + "x" + std::to_string(d.diseases()));
    }
    if (enc.drug.d0() != enc.disease.d0()) throw CheckpointError("drug and disease encoders disagree on d0");
    return {enc.drug.encode_rows(d.drug_similarity), enc.disease.encode_rows(d.disease_similarity)};
}

inline void save_encoders(const std::filesystem::path& dir, const EncoderPair& enc) {
    enc.drug.save(dir / "drug");
    enc.disease.save(dir / "disease");
}

inline EncoderPair load_encoders(const std::filesystem::path& dir) {
    EncoderPair e{PrototypeEncoder::load(dir / "drug"), PrototypeEncoder::load(dir / "disease"), {}, {}};
    if (e.drug.kind() != EntityKind::drug || e.disease.kind() != EntityKind::disease) {
        throw CheckpointError("encoder checkpoints under '" + dir.string() + "' have swapped domains");
    }
    return e;
}

}  // namespace bibldr::proto
