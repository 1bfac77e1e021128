#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bibldr/data/behavior.hpp"
#include "bibldr/numcore.hpp"
#include "bibldr/proto/encoder.hpp"

namespace bibldr::seqmodel {

using data::BehaviorSample;
using data::Cell;
using data::Dataset;
using numcore::Activation;
using numcore::BatchNormMode;
using numcore::Shape;
using numcore::Tape;
using numcore::Tensor;
using numcore::Var;

enum class Side { drug, disease };
enum class Pooling { flatten, mean };

struct Stage2Config {
    std::size_t d0 = 1024;
    std::size_t embed_dim = 64;
    double temperature = 2.0;
    std::size_t heads = 4;
    std::size_t max_len = 32;
    double lr = 1e-4;
    double lr_min = 0.0;
    double weight_decay = 0.01;
    bool decay_embeddings = true;
    std::size_t epochs = 30;
    std::size_t batch = 128;
    std::uint64_t seed = 0;
    Pooling pooling = Pooling::flatten;
    std::vector<std::size_t> head_hidden{256, 64};
    Activation adapter_activation = Activation::relu;  // fusion and alignment layers
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    std::size_t model_dim() const noexcept { return d0 + embed_dim; }
    std::size_t seq_rows() const noexcept { return 2 * max_len; }
    std::size_t head_input() const noexcept {
        return pooling == Pooling::flatten ? model_dim() * (2 + seq_rows()) : 3 * model_dim();
    }

    void validate() const {
        if (d0 < 2) throw ConfigError("stage2 d0 must be at least 2");
        if (embed_dim == 0) throw ConfigError("stage2.embed_dim must be positive");
        if (heads == 0 || model_dim() % heads != 0) {
            throw ConfigError("d0 + embed_dim = " + std::to_string(model_dim()) + " is not divisible by " +
                              std::to_string(heads) + " heads");
        }
        if (!(temperature >= 0.0)) throw ConfigError("stage2.temperature must be non-negative");
        if (max_len == 0) throw ConfigError("stage2.max_len must be at least 1");
        if (!(lr > 0.0)) throw ConfigError("stage2.lr must be positive");
        if (lr_min < 0.0 || lr_min > lr) throw ConfigError("stage2.lr_min must lie in [0, stage2.lr]");
        if (batch == 0) throw ConfigError("stage2.batch must be positive");
        for (auto h : head_hidden)
            if (h == 0) throw ConfigError("stage2.head_hidden widths must be positive");
    }
};

/// Constant vector s * 1 of extent d0.
inline Tensor sim_pad(double s, std::size_t d0) {
    if (!(s >= 0.0 && s <= 1.0)) throw RangeError("similarity " + std::to_string(s) + " outside [0,1]");
    return Tensor(Shape{d0}, s);
}

/// h * e^{T a}.
inline Tensor rating_scale(const Tensor& h, int label, double temperature) {
    if (label != 0 && label != 1) throw ValidationError("rating label must be 0 or 1");
    Tensor out = h;
    const double f = std::exp(temperature * label);
    for (auto& v : out.values()) v *= f;
    return out;
}

/// Keeps the max_len elements most similar to the target entity (ties by
/// ascending index), then restores ascending-index order.
inline BehaviorSample truncate(const BehaviorSample& s, const Dataset& d, std::size_t max_len) {
    auto pick = [max_len](std::vector<data::SequenceElement> seq, auto sim) {
        if (seq.size() <= max_len) return seq;
        std::stable_sort(seq.begin(), seq.end(), [&](const auto& a, const auto& b) {
            const double sa = sim(a.index), sb = sim(b.index);
            if (sa != sb) return sa > sb;
            return a.index < b.index;
        });
        seq.resize(max_len);
        std::sort(seq.begin(), seq.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
        return seq;
    };
    BehaviorSample out = s;
    const auto k = s.target.drug, m = s.target.disease;
    out.drug_seq = pick(s.drug_seq, [&](std::size_t j) { return d.disease_similarity(m, j); });
    out.disease_seq = pick(s.disease_seq, [&](std::size_t i) { return d.drug_similarity(k, i); });
    return out;
}

/// Transformer input of one sample: drug-side rows then disease-side rows.
struct PackedSequence {
    Tensor x;                 // seq_rows x model_dim
    std::vector<bool> valid;  // one flag per row
};

struct TransformerOutput {
    Tensor out;
    bool cold_path = false;  // no valid row: attention skipped, output all zero
};

class Stage2Model {
public:
    Stage2Model() = default;

    Stage2Model(const Stage2Config& config, const proto::PrototypeBank& bank, const Dataset& d) : config_(config) {
        config_.validate();
        if (bank.drug.rows() != d.drugs() || bank.disease.rows() != d.diseases()) {
            throw DimensionError("prototype bank does not cover the dataset's entities");
        }
        if (bank.drug.cols() != config_.d0 || bank.disease.cols() != config_.d0) {
            throw DimensionError("prototype extent " + std::to_string(bank.drug.cols()) + " differs from d0 = " +
                                 std::to_string(config_.d0));
        }
        drugs_ = d.drugs();
        diseases_ = d.diseases();
        fingerprint_ = d.fingerprint();
        numcore::Rng rng(numcore::derive_seed(config_.seed, {0x5eed}));
        const std::size_t d0 = config_.d0, dw = config_.embed_dim, d1 = config_.model_dim();
        auto& p = params_;

        proto_drug_ = p.size();
        p.add("proto.drug", bank.drug, false);
        proto_disease_ = p.size();
        p.add("proto.disease", bank.disease, false);

        embed_drug_ = p.size();
        p.add("embed.drug", numcore::normal_tensor(Shape{drugs_, dw}, 0.0, 1.0, rng));
        embed_disease_ = p.size();
        p.add("embed.disease", numcore::normal_tensor(Shape{diseases_, dw}, 0.0, 1.0, rng));
        p[embed_drug_].decay = p[embed_disease_].decay = config_.decay_embeddings;

        fuse_drug_ = numcore::Dense::create(p, "fuse.drug", 2 * d0, d0, config_.adapter_activation, rng);
        fuse_disease_ = numcore::Dense::create(p, "fuse.disease", 2 * d0, d0, config_.adapter_activation, rng);

        const double bound = 1.0 / std::sqrt(static_cast<double>(d1));
        wq_ = p.size();
        p.add("attn.query", numcore::uniform_tensor(Shape{d1, d1}, -bound, bound, rng));
        wk_ = p.size();
        p.add("attn.key", numcore::uniform_tensor(Shape{d1, d1}, -bound, bound, rng));
        wv_ = p.size();
        p.add("attn.value", numcore::uniform_tensor(Shape{d1, d1}, -bound, bound, rng));
        wo_ = p.size();
        p.add("attn.output", numcore::uniform_tensor(Shape{d1, d1}, -bound, bound, rng));

        add_bn("bn1", bn1_);
        ffn_ = numcore::Dense::create(p, "ffn", d1, d1, Activation::relu, rng);
        add_bn("bn2", bn2_);

        align_drug_ = numcore::Dense::create(p, "align.drug", d0 + dw, d1, config_.adapter_activation, rng);
        align_disease_ = numcore::Dense::create(p, "align.disease", d0 + dw, d1, config_.adapter_activation, rng);

        std::vector<std::size_t> widths{config_.head_input()};
        widths.insert(widths.end(), config_.head_hidden.begin(), config_.head_hidden.end());
        widths.push_back(1);
        head_ = numcore::Mlp::create(p, "head", widths, Activation::none, rng);
    }

    const Stage2Config& config() const noexcept { return config_; }
    numcore::ParameterStore& params() noexcept { return params_; }
    const numcore::ParameterStore& params() const noexcept { return params_; }
    std::size_t drugs() const noexcept { return drugs_; }
    std::size_t diseases() const noexcept { return diseases_; }
    const std::string& fingerprint() const noexcept { return fingerprint_; }

    const Tensor& drug_prototypes() const { return params_[proto_drug_].value; }
    const Tensor& disease_prototypes() const { return params_[proto_disease_].value; }

    numcore::Dense& fusion(Side s) { return s == Side::drug ? fuse_drug_ : fuse_disease_; }
    numcore::Dense& alignment(Side s) { return s == Side::drug ? align_drug_ : align_disease_; }
    numcore::Mlp& head() { return head_; }

    // ---- batched graph pieces -------------------------------------------------

    /// Packed transformer input for a batch, [B * seq_rows x model_dim].
    Var sequence_rows(Tape& tape, std::span<const BehaviorSample> samples, const Dataset& d,
                      std::vector<bool>& valid) {
        const std::size_t B = samples.size(), L = config_.max_len, d0 = config_.d0;
        std::vector<std::size_t> ent_u(B * L, 0), ent_v(B * L, 0);
        std::vector<double> sim_u(B * L, 0.0), sim_v(B * L, 0.0), fac_u(B * L, 1.0), fac_v(B * L, 1.0);
        std::vector<bool> ok_u(B * L, false), ok_v(B * L, false);
        for (std::size_t b = 0; b < B; ++b) {
            check_target(samples[b].target);
            const BehaviorSample s = truncate(samples[b], d, L);
            const auto k = s.target.drug, m = s.target.disease;
            for (std::size_t r = 0; r < s.drug_seq.size(); ++r) {
                const auto& e = s.drug_seq[r];
                const std::size_t slot = b * L + r;
                ent_u[slot] = e.index;
                sim_u[slot] = d.disease_similarity(m, e.index);
                fac_u[slot] = std::exp(config_.temperature * e.label);
                ok_u[slot] = true;
            }
            for (std::size_t r = 0; r < s.disease_seq.size(); ++r) {
                const auto& e = s.disease_seq[r];
                const std::size_t slot = b * L + r;
                ent_v[slot] = e.index;
                sim_v[slot] = d.drug_similarity(k, e.index);
                fac_v[slot] = std::exp(config_.temperature * e.label);
                ok_v[slot] = true;
            }
        }
        auto side_rows = [&](Side side, const std::vector<std::size_t>& ent, const std::vector<double>& sim,
                             std::vector<double> fac, std::vector<bool> ok) {
            // drug side holds diseases: disease prototypes and embeddings
            const std::size_t table = side == Side::drug ? proto_disease_ : proto_drug_;
            const std::size_t embed = side == Side::drug ? embed_disease_ : embed_drug_;
            Var protos = numcore::gather_rows(tape.parameter(params_[table]), ent);
            Tensor pad(Shape{ent.size(), d0});
            for (std::size_t i = 0; i < ent.size(); ++i)
                std::fill_n(pad.data() + i * d0, d0, sim[i]);
            Var fused = fusion(side)(tape, params_, numcore::concat_cols({protos, tape.constant(std::move(pad))}));
            Var emb = numcore::gather_rows(tape.parameter(params_[embed]), ent);
            Var x = numcore::scale_rows(numcore::concat_cols({fused, emb}), std::move(fac));
            return numcore::mask_rows(x, std::move(ok));
        };
        Var xu = side_rows(Side::drug, ent_u, sim_u, fac_u, ok_u);
        Var xv = side_rows(Side::disease, ent_v, sim_v, fac_v, ok_v);

        std::vector<std::size_t> perm;
        perm.reserve(2 * B * L);
        valid.assign(2 * B * L, false);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t r = 0; r < L; ++r) {
                valid[b * 2 * L + r] = ok_u[b * L + r];
                perm.push_back(b * L + r);
            }
            for (std::size_t r = 0; r < L; ++r) {
                valid[b * 2 * L + L + r] = ok_v[b * L + r];
                perm.push_back(B * L + b * L + r);
            }
        }
        return numcore::gather_rows(numcore::concat_rows({xu, xv}), std::move(perm));
    }

    /// One multi-head attention layer with residual batch-norm blocks and a
    /// feed-forward block. Invalid rows come out as exact zeros.
    Var transformer(Tape& tape, Var x, const std::vector<bool>& valid, BatchNormMode mode,
                    Tensor* attention_weights = nullptr) {
        const std::size_t L = config_.seq_rows();
        std::size_t count = 0;
        for (bool v : valid) count += v;
        // Too few rows for batch statistics: normalise with the running estimates instead.
        if (mode == BatchNormMode::train && count < 2) mode = BatchNormMode::inference;

        Var q = numcore::matmul(x, tape.parameter(params_[wq_]));
        Var k = numcore::matmul(x, tape.parameter(params_[wk_]));
        Var v = numcore::matmul(x, tape.parameter(params_[wv_]));
        Var heads = numcore::multihead_attention(q, k, v, config_.heads, L, valid, attention_weights);
        Var mh = numcore::matmul(heads, tape.parameter(params_[wo_]));
        Var o = batch_norm(tape, bn1_, numcore::add(x, mh), valid, mode);
        Var f = ffn_(tape, params_, o);
        return batch_norm(tape, bn2_, numcore::add(o, f), valid, mode);
    }

    /// M = align_drug(P_k + W_k) ++ pooled(O) ++ align_disease(P_m + W_m), one row per sample.
    Var assemble(Tape& tape, Var o, const std::vector<bool>& valid, std::span<const Cell> targets) {
        const std::size_t B = targets.size();
        std::vector<std::size_t> ks(B), ms(B);
        for (std::size_t b = 0; b < B; ++b) {
            ks[b] = targets[b].drug;
            ms[b] = targets[b].disease;
        }
        Var pu = numcore::gather_rows(tape.parameter(params_[proto_drug_]), ks);
        Var wu = numcore::gather_rows(tape.parameter(params_[embed_drug_]), ks);
        Var pv = numcore::gather_rows(tape.parameter(params_[proto_disease_]), ms);
        Var wv = numcore::gather_rows(tape.parameter(params_[embed_disease_]), ms);
        Var au = align_drug_(tape, params_, numcore::concat_cols({pu, wu}));
        Var av = align_disease_(tape, params_, numcore::concat_cols({pv, wv}));
        Var pooled = config_.pooling == Pooling::flatten
                         ? numcore::reshape(o, Shape{B, config_.seq_rows() * config_.model_dim()})
                         : numcore::masked_segment_mean(o, config_.seq_rows(), valid);
        return numcore::concat_cols({au, pooled, av});
    }

    /// Head logits, shape [B].
    Var logits(Tape& tape, Var m) {
        if (m.cols() != config_.head_input()) {
            throw DimensionError("head expects " + std::to_string(config_.head_input()) + " features, got " +
                                 std::to_string(m.cols()));
        }
        Var z = head_(tape, params_, m);
        return numcore::reshape(z, Shape{m.rows()});
    }

    /// Full batched forward to logits.
    Var forward(Tape& tape, std::span<const BehaviorSample> samples, const Dataset& d, BatchNormMode mode) {
        std::vector<bool> valid;
        Var x = sequence_rows(tape, samples, d, valid);
        Var o = transformer(tape, x, valid, mode);
        std::vector<Cell> targets;
        targets.reserve(samples.size());
        for (const auto& s : samples) targets.push_back(s.target);
        return logits(tape, assemble(tape, o, valid, targets));
    }

    // ---- checkpoints -------------------------------------------------------------

    std::map<std::string, std::string> metadata() const {
        std::map<std::string, std::string> m{
            {"kind", "stage2"},
            {"dataset.fingerprint", fingerprint_},
            {"dataset.drugs", std::to_string(drugs_)},
            {"dataset.diseases", std::to_string(diseases_)},
            {"stage2.d0", std::to_string(config_.d0)},
            {"stage2.embed_dim", std::to_string(config_.embed_dim)},
            {"stage2.temperature", fmt_double(config_.temperature)},
            {"stage2.heads", std::to_string(config_.heads)},
            {"stage2.max_len", std::to_string(config_.max_len)},
            {"stage2.lr", fmt_double(config_.lr)},
            {"stage2.lr_min", fmt_double(config_.lr_min)},
            {"stage2.weight_decay", fmt_double(config_.weight_decay)},
            {"stage2.decay_embeddings", config_.decay_embeddings ? "true" : "false"},
            {"stage2.epochs", std::to_string(config_.epochs)},
            {"stage2.batch", std::to_string(config_.batch)},
            {"stage2.seed", std::to_string(config_.seed)},
            {"stage2.pooling", config_.pooling == Pooling::flatten ? "flatten" : "mean"},
            {"stage2.adapter_activation", config_.adapter_activation == Activation::relu ? "relu" : "none"},
            {"stage2.bn_momentum", fmt_double(config_.bn_momentum)},
            {"stage2.bn_eps", fmt_double(config_.bn_eps)},
        };
        std::string hh;
        for (std::size_t i = 0; i < config_.head_hidden.size(); ++i)
            hh += (i ? "," : "") + std::to_string(config_.head_hidden[i]);
        m["stage2.head_hidden"] = hh;
        return m;
    }

    void save(const std::filesystem::path& dir) const { numcore::save_checkpoint(dir, params_, metadata()); }

    /// Loads a model; the dataset must match the fingerprint it was trained against.
    static Stage2Model load(const std::filesystem::path& dir, const Dataset& d) {
        const auto ckpt = numcore::read_checkpoint(dir);
        auto meta = [&](const std::string& k) {
            auto it = ckpt.meta.find(k);
            if (it == ckpt.meta.end()) throw CheckpointError("model checkpoint lacks meta." + k);
            return it->second;
        };
        if (meta("kind") != "stage2") throw CheckpointError("'" + dir.string() + "' is not a stage-2 checkpoint");
        if (meta("dataset.fingerprint") != d.fingerprint()) {
            throw CheckpointError("checkpoint was trained on dataset " + meta("dataset.fingerprint") +
                                  ", loaded against " + d.fingerprint());
        }
        Stage2Config c;
        c.d0 = std::stoul(meta("stage2.d0"));
        c.embed_dim = std::stoul(meta("stage2.embed_dim"));
        c.temperature = std::stod(meta("stage2.temperature"));
        c.heads = std::stoul(meta("stage2.heads"));
        c.max_len = std::stoul(meta("stage2.max_len"));
        c.lr = std::stod(meta("stage2.lr"));
        c.lr_min = std::stod(meta("stage2.lr_min"));
        c.weight_decay = std::stod(meta("stage2.weight_decay"));
        c.decay_embeddings = meta("stage2.decay_embeddings") == "true";
        c.epochs = std::stoul(meta("stage2.epochs"));
        c.batch = std::stoul(meta("stage2.batch"));
        c.seed = std::stoull(meta("stage2.seed"));
        c.pooling = meta("stage2.pooling") == "mean" ? Pooling::mean : Pooling::flatten;
        c.adapter_activation = meta("stage2.adapter_activation") == "none" ? Activation::none : Activation::relu;
        c.bn_momentum = std::stod(meta("stage2.bn_momentum"));
        c.bn_eps = std::stod(meta("stage2.bn_eps"));
        c.head_hidden.clear();
        if (!meta("stage2.head_hidden").empty())
            for (const auto& w : split(meta("stage2.head_hidden"), ',')) c.head_hidden.push_back(std::stoul(w));
        proto::PrototypeBank bank{ckpt.param("proto.drug").value, ckpt.param("proto.disease").value};
        Stage2Model model(c, bank, d);
        numcore::restore_parameters(ckpt, model.params_);
        return model;
    }

    static std::string fmt_double(double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

private:
    struct BatchNormLayer {
        std::size_t gamma = 0, beta = 0, mean = 0, var = 0;
    };

    void add_bn(const std::string& name, BatchNormLayer& layer) {
        const std::size_t d1 = config_.model_dim();
        layer.gamma = params_.size();
        params_.add(name + ".gamma", Tensor(Shape{d1}, 1.0));
        layer.beta = params_.size();
        params_.add(name + ".beta", Tensor(Shape{d1}, 0.0));
        layer.mean = params_.size();
        params_.add(name + ".running_mean", Tensor(Shape{d1}, 0.0), false);
        layer.var = params_.size();
        params_.add(name + ".running_var", Tensor(Shape{d1}, 1.0), false);
    }

    Var batch_norm(Tape& tape, const BatchNormLayer& layer, Var x, const std::vector<bool>& valid,
                   BatchNormMode mode) {
        numcore::BatchNormStats stats{&params_[layer.mean].value, &params_[layer.var].value, config_.bn_momentum,
                                      config_.bn_eps};
        return numcore::batch_norm(x, tape.parameter(params_[layer.gamma]), tape.parameter(params_[layer.beta]), stats,
                                   mode, &valid);
    }

    void check_target(Cell c) const {
        if (c.drug >= drugs_ || c.disease >= diseases_) {
            throw RangeError("target cell (" + std::to_string(c.drug) + ", " + std::to_string(c.disease) +
                             ") outside the model's " + std::to_string(drugs_) + "x" + std::to_string(diseases_) +
                             " grid");
        }
    }

    Stage2Config config_;
    numcore::ParameterStore params_;
    std::size_t drugs_ = 0, diseases_ = 0;
    std::string fingerprint_;
    std::size_t proto_drug_ = 0, proto_disease_ = 0, embed_drug_ = 0, embed_disease_ = 0;
    std::size_t wq_ = 0, wk_ = 0, wv_ = 0, wo_ = 0;
    numcore::Dense fuse_drug_, fuse_disease_, ffn_, align_drug_, align_disease_;
    BatchNormLayer bn1_, bn2_;
    numcore::Mlp head_;
};

// ---- single-sample operations ------------------------------------------------------

/// f_side(prototype ++ simvec) through the side's fusion layer.
inline Tensor fuse(Stage2Model& model, Side side, std::span<const double> prototype, std::span<const double> simvec) {
    const std::size_t d0 = model.config().d0;
    if (prototype.size() != d0 || simvec.size() != d0) {
        throw DimensionError("fuse expects two vectors of extent " + std::to_string(d0));
    }
    std::vector<double> in(prototype.begin(), prototype.end());
    in.insert(in.end(), simvec.begin(), simvec.end());
    Tape tape;
    Var out = model.fusion(side)(tape, model.params(), tape.constant(Tensor(Shape{1, 2 * d0}, std::move(in))));
    return out.value().reshaped({d0});
}

inline PackedSequence build_sequence_input(Stage2Model& model, const BehaviorSample& sample, const Dataset& d) {
    Tape tape;
    std::vector<bool> valid;
    Var x = model.sequence_rows(tape, std::span<const BehaviorSample>(&sample, 1), d, valid);
    return {x.value(), std::move(valid)};
}

inline TransformerOutput transformer_forward(Stage2Model& model, const PackedSequence& packed, BatchNormMode mode,
                                             Tensor* attention_weights = nullptr) {
    const bool cold = std::none_of(packed.valid.begin(), packed.valid.end(), [](bool v) { return v; });
    if (cold) return {Tensor(packed.x.shape()), true};
    Tape tape;
    Var o = model.transformer(tape, tape.constant(packed.x), packed.valid, mode, attention_weights);
    return {o.value(), false};
}

inline Tensor assemble(Stage2Model& model, const Tensor& o_tl, std::size_t drug, std::size_t disease,
                       const std::vector<bool>& valid) {
    const auto& c = model.config();
    if (o_tl.rows() != c.seq_rows() || o_tl.cols() != c.model_dim()) {
        throw DimensionError("transformer output must be " + std::to_string(c.seq_rows()) + "x" +
                             std::to_string(c.model_dim()) + ", got " + numcore::shape_str(o_tl.shape()));
    }
    Tape tape;
    const Cell target{drug, disease};
    Var m = model.assemble(tape, tape.constant(o_tl), valid, std::span<const Cell>(&target, 1));
    return m.value().reshaped({m.value().numel()});
}

inline double predict_logit(Stage2Model& model, const Tensor& features) {
    Tape tape;
    Var z = model.logits(tape, tape.constant(features.reshaped({1, features.numel()})));
    return z.value()[0];
}

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Score from an already packed input (inference mode).
inline double score_packed(Stage2Model& model, const PackedSequence& packed, Cell target) {
    const auto o = transformer_forward(model, packed, BatchNormMode::inference);
    return sigmoid(predict_logit(model, assemble(model, o.out, target.drug, target.disease, packed.valid)));
}

/// build_sequence_input -> transformer_forward -> assemble -> predict_logit -> sigmoid.
inline double forward_sample(Stage2Model& model, const BehaviorSample& sample, const Dataset& d) {
    return score_packed(model, build_sequence_input(model, sample, d), sample.target);
}

}  // namespace bibldr::seqmodel
