#pragma once

#include <algorithm>
#include <vector>

#include "bibldr/data/splits.hpp"

namespace bibldr::data {

struct SequenceElement {
    std::size_t index = 0;  // disease index on the drug side, drug index on the disease side
    int label = 0;
    friend bool operator==(const SequenceElement&, const SequenceElement&) = default;
};

/// One prediction task: target cell, both behaviour sequences and the label.
struct BehaviorSample {
    Cell target;
    std::vector<SequenceElement> drug_seq;     // training cells in the target's row
    std::vector<SequenceElement> disease_seq;  // training cells in the target's column
    int label = 0;
};

/// Per-row and per-column lists of training cells, ascending.
class SequenceIndex {
public:
    SequenceIndex(const CellSplit& split) : rows_(split.drugs()), cols_(split.diseases()) {
        for (const auto& c : split.train()) {
            rows_[c.drug].push_back(c.disease);
            cols_[c.disease].push_back(c.drug);
        }
        for (auto& r : cols_) std::sort(r.begin(), r.end());
    }

    const std::vector<std::size_t>& row(std::size_t drug) const { return rows_[drug]; }
    const std::vector<std::size_t>& col(std::size_t disease) const { return cols_[disease]; }

private:
    std::vector<std::vector<std::size_t>> rows_;
    std::vector<std::vector<std::size_t>> cols_;
};

/// Sequences for a target cell, drawn from training cells only and never
/// containing the target itself. Works for training targets too.
inline BehaviorSample build_sample_unchecked(const Dataset& d, const SequenceIndex& index, Cell target) {
    BehaviorSample s;
    s.target = target;
    s.label = d.label(target.drug, target.disease);
    for (std::size_t j : index.row(target.drug))
        if (j != target.disease) s.drug_seq.push_back({j, d.label(target.drug, j)});
    for (std::size_t i : index.col(target.disease))
        if (i != target.drug) s.disease_seq.push_back({i, d.label(i, target.disease)});
    return s;
}

/// Sample for a held-out cell; the target must not be a training cell.
inline BehaviorSample build_sample(const Dataset& d, const CellSplit& split, Cell target) {
    if (target.drug >= split.drugs() || target.disease >= split.diseases()) {
        throw RangeError("target cell outside the grid");
    }
    if (split.in_train(target)) {
        throw ContractError("target cell (" + std::to_string(target.drug) + ", " + std::to_string(target.disease) +
                            ") belongs to the training set");
    }
    return build_sample_unchecked(d, SequenceIndex(split), target);
}

}  // namespace bibldr::data
