#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bibldr/seqmodel/model.hpp"

namespace bibldr::seqmodel {

struct Stage2Result {
    Stage2Model model;
    std::vector<double> epoch_losses;  // mean per-sample loss of each epoch
    double final_loss = 0.0;
};

/// Training samples for every train cell; each sequence excludes the cell itself
/// and every non-train cell.
inline std::vector<BehaviorSample> training_samples(const Dataset& d, const data::CellSplit& split) {
    const data::SequenceIndex index(split);
    std::vector<BehaviorSample> out;
    out.reserve(split.train().size());
    for (const auto& c : split.train()) out.push_back(data::build_sample_unchecked(d, index, c));
    return out;
}

inline Stage2Result train_stage2(const Dataset& d, const data::CellSplit& split, const proto::PrototypeBank& bank,
                                 const Stage2Config& config) {
    data::require_trainable(split, d);
    Stage2Result result{Stage2Model(config, bank, d), {}, 0.0};
    Stage2Model& model = result.model;
    const auto samples = training_samples(d, split);
    const std::size_t n = samples.size(), bs = config.batch;
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;
    const long total = static_cast<long>(steps_per_epoch * config.epochs);

    numcore::AdamW opt(model.params().trainable(),
                       {config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
    numcore::Rng rng(numcore::derive_seed(config.seed, {0x7a1a}));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    long step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t len = std::min(bs, n - start);
            std::vector<BehaviorSample> batch;
            Tensor labels(Shape{len});
            batch.reserve(len);
            for (std::size_t i = 0; i < len; ++i) {
                batch.push_back(samples[order[start + i]]);
                labels[i] = batch.back().label;
            }
            model.params().zero_grad();
            double loss_value = 0.0;
            try {
                Tape tape;
                Var z = model.forward(tape, batch, d, BatchNormMode::train);
                Var loss = numcore::bce_with_logits(z, labels);
                loss_value = loss.value().item();
                tape.backward(loss);
                opt.step(numcore::cosine_anneal(config.lr, step, total, config.lr_min));
            } catch (const DivergenceError& e) {
                throw DivergenceError("stage-2 training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                                      std::to_string(step + 1) + ": " + e.what());
            }
            loss_sum += loss_value * static_cast<double>(len);
            ++step;
        }
        result.epoch_losses.push_back(loss_sum / static_cast<double>(n));
    }
    result.final_loss = result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back();
    return result;
}

/// Scores for explicit samples, evaluated in inference mode in fixed-size batches.
inline std::vector<double> score_samples(Stage2Model& model, const Dataset& d, std::span<const BehaviorSample> samples,
                                         std::size_t batch = 0) {
    if (batch == 0) batch = model.config().batch;
    std::vector<double> out;
    out.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        const auto chunk = samples.subspan(start, std::min(batch, samples.size() - start));
        Tape tape;
        Var z = model.forward(tape, chunk, d, BatchNormMode::inference);
        for (double v : z.value().values()) out.push_back(sigmoid(v));
    }
    return out;
}

struct ScoredCell {
    Cell cell;
    double score = 0.0;
};

/// One score per cell; sequences come from train cells only. Cells must lie
/// outside the training set.
inline std::vector<ScoredCell> score_cells(Stage2Model& model, const Dataset& d, const data::CellSplit& split,
                                           std::span<const Cell> cells) {
    const data::SequenceIndex index(split);
    std::vector<BehaviorSample> samples;
    samples.reserve(cells.size());
    for (const auto& c : cells) {
        if (c.drug >= d.drugs() || c.disease >= d.diseases()) throw RangeError("scored cell outside the grid");
        if (split.in_train(c)) {
            throw ContractError("cell (" + std::to_string(c.drug) + ", " + std::to_string(c.disease) +
                                ") is a training cell");
        }
        samples.push_back(data::build_sample_unchecked(d, index, c));
    }
    const auto scores = score_samples(model, d, samples);
    std::vector<ScoredCell> out;
    out.reserve(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) out.push_back({cells[i], scores[i]});
    return out;
}

}  // namespace bibldr::seqmodel
