#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bibldr/data/dataset.hpp"
#include "bibldr/numcore/random.hpp"

namespace bibldr::data {

struct Cell {
    std::size_t drug = 0;
    std::size_t disease = 0;
    friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// Disjoint train/test cell sets over a fixed drugs x diseases grid.
/// Both lists are kept sorted (drug-major) so splits compare and serialise stably.
class CellSplit {
public:
    CellSplit() = default;

    CellSplit(std::size_t drugs, std::size_t diseases, std::vector<Cell> train, std::vector<Cell> test)
        : drugs_(drugs), diseases_(diseases), train_(std::move(train)), test_(std::move(test)),
          role_(drugs * diseases, 0) {
        std::sort(train_.begin(), train_.end());
        std::sort(test_.begin(), test_.end());
        auto mark = [&](const std::vector<Cell>& cells, std::uint8_t role, const char* what) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                const Cell c = cells[i];
                if (c.drug >= drugs_ || c.disease >= diseases_) {
                    throw SplitError(std::string(what) + " cell (" + std::to_string(c.drug) + ", " +
                                     std::to_string(c.disease) + ") outside the grid");
                }
                auto& r = role_[c.drug * diseases_ + c.disease];
                if (r == role) {
                    throw SplitError(std::string("duplicate ") + what + " cell (" + std::to_string(c.drug) + ", " +
                                     std::to_string(c.disease) + ")");
                }
                if (r != 0) {
                    throw SplitError("cell (" + std::to_string(c.drug) + ", " + std::to_string(c.disease) +
                                     ") is in both train and test");
                }
                r = role;
            }
        };
        mark(train_, 1, "train");
        mark(test_, 2, "test");
    }

    const std::vector<Cell>& train() const noexcept { return train_; }
    const std::vector<Cell>& test() const noexcept { return test_; }
    std::size_t drugs() const noexcept { return drugs_; }
    std::size_t diseases() const noexcept { return diseases_; }

    bool in_train(Cell c) const { return role_[c.drug * diseases_ + c.disease] == 1; }
    bool in_test(Cell c) const { return role_[c.drug * diseases_ + c.disease] == 2; }

    friend bool operator==(const CellSplit& a, const CellSplit& b) {
        return a.drugs_ == b.drugs_ && a.diseases_ == b.diseases_ && a.train_ == b.train_ && a.test_ == b.test_;
    }

private:
    std::size_t drugs_ = 0;
    std::size_t diseases_ = 0;
    std::vector<Cell> train_;
    std::vector<Cell> test_;
    std::vector<std::uint8_t> role_;  // 0 unused, 1 train, 2 test
};

/// Throws unless the split has at least one positive and one negative training cell.
inline void require_trainable(const CellSplit& split, const Dataset& d) {
    std::size_t pos = 0, neg = 0;
    for (const auto& c : split.train()) (d.label(c.drug, c.disease) ? pos : neg)++;
    if (pos == 0 || neg == 0) {
        throw SplitError("split is not trainable: " + std::to_string(pos) + " train positives, " + std::to_string(neg) +
                         " train negatives");
    }
}

inline std::vector<Cell> cells_with_label(const Dataset& d, int label) {
    std::vector<Cell> out;
    for (std::size_t i = 0; i < d.drugs(); ++i)
        for (std::size_t j = 0; j < d.diseases(); ++j)
            if (d.label(i, j) == label) out.push_back({i, j});
    return out;
}

struct FoldPlan {
    std::vector<std::vector<Cell>> positive_folds;
    std::vector<std::vector<Cell>> negative_folds;
    std::uint64_t seed = 0;
    std::size_t drugs = 0;
    std::size_t diseases = 0;

    std::size_t folds() const noexcept { return positive_folds.size(); }
};

/// Shuffles positives into n near-equal folds and pairs each with an equally
/// sized fold of uniformly sampled zero cells.
inline FoldPlan split_folds(const Dataset& d, std::uint64_t seed, std::size_t n_folds = 10) {
    auto pos = cells_with_label(d, 1);
    auto neg = cells_with_label(d, 0);
    if (n_folds == 0 || pos.size() < n_folds) {
        throw SplitError("need at least " + std::to_string(n_folds) + " positive cells for " + std::to_string(n_folds) +
                         " folds, dataset has " + std::to_string(pos.size()));
    }
    if (neg.size() < pos.size()) {
        throw SplitError("not enough zero cells (" + std::to_string(neg.size()) + ") to match " +
                         std::to_string(pos.size()) + " positives");
    }
    numcore::Rng rng(numcore::derive_seed(seed, {0xf01d}));
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(pos.size());

    FoldPlan plan;
    plan.seed = seed;
    plan.drugs = d.drugs();
    plan.diseases = d.diseases();
    const std::size_t base = pos.size() / n_folds, extra = pos.size() % n_folds;
    std::size_t off = 0;
    for (std::size_t f = 0; f < n_folds; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        plan.positive_folds.emplace_back(pos.begin() + off, pos.begin() + off + len);
        plan.negative_folds.emplace_back(neg.begin() + off, neg.begin() + off + len);
        std::sort(plan.positive_folds.back().begin(), plan.positive_folds.back().end());
        std::sort(plan.negative_folds.back().begin(), plan.negative_folds.back().end());
        off += len;
    }
    return plan;
}

/// Fold test_fold is the test set; all other folds form the training set.
inline CellSplit cv_split(const FoldPlan& plan, std::size_t test_fold) {
    if (test_fold >= plan.folds()) {
        throw RangeError("fold index " + std::to_string(test_fold) + " outside [0, " + std::to_string(plan.folds()) + ")");
    }
    std::vector<Cell> train, test;
    for (std::size_t f = 0; f < plan.folds(); ++f) {
        auto& dst = f == test_fold ? test : train;
        dst.insert(dst.end(), plan.positive_folds[f].begin(), plan.positive_folds[f].end());
        dst.insert(dst.end(), plan.negative_folds[f].begin(), plan.negative_folds[f].end());
    }
    return CellSplit(plan.drugs, plan.diseases, std::move(train), std::move(test));
}

/// Holds out every cell of one drug's row. Train holds the remaining positives
/// and as many sampled zero cells (fewer only when fewer exist). Returns
/// nullopt (skip) when the drug has no positive association.
inline std::optional<CellSplit> coldstart_split(const Dataset& d, std::size_t drug, std::uint64_t seed) {
    if (drug >= d.drugs()) throw RangeError("drug index " + std::to_string(drug) + " out of range");
    if (d.drugs() < 2) throw SplitError("cold start needs at least two drugs");
    bool any = false;
    for (std::size_t j = 0; j < d.diseases(); ++j) any = any || d.label(drug, j);
    if (!any) return std::nullopt;

    std::vector<Cell> test, pos, zeros;
    for (std::size_t j = 0; j < d.diseases(); ++j) test.push_back({drug, j});
    for (std::size_t i = 0; i < d.drugs(); ++i) {
        if (i == drug) continue;
        for (std::size_t j = 0; j < d.diseases(); ++j) (d.label(i, j) ? pos : zeros).push_back({i, j});
    }
    if (pos.empty()) throw SplitError("no positives remain outside drug " + std::to_string(drug));
    numcore::Rng rng(numcore::derive_seed(seed, {0xc01d, drug}));
    std::shuffle(zeros.begin(), zeros.end(), rng);
    zeros.resize(std::min(zeros.size(), pos.size()));  // dense datasets keep every zero cell
    pos.insert(pos.end(), zeros.begin(), zeros.end());
    return CellSplit(d.drugs(), d.diseases(), std::move(pos), std::move(test));
}

/// Keeps ceil(lambda * #train positives) train positives, chosen uniformly.
inline CellSplit sparsify(const CellSplit& split, const Dataset& d, double lambda, std::uint64_t seed) {
    if (!(lambda > 0.0 && lambda <= 1.0)) {
        throw RangeError("sparsity fraction " + std::to_string(lambda) + " outside (0, 1]");
    }
    std::vector<Cell> pos, kept;
    for (const auto& c : split.train()) (d.label(c.drug, c.disease) ? pos : kept).push_back(c);
    if (pos.empty()) throw SplitError("sparsify needs at least one train positive");
    if (lambda == 1.0) return split;
    const auto keep = static_cast<std::size_t>(std::ceil(lambda * static_cast<double>(pos.size()) - 1e-9));
    numcore::Rng rng(numcore::derive_seed(seed, {0x5a25}));
    std::shuffle(pos.begin(), pos.end(), rng);
    kept.insert(kept.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(keep));
    return CellSplit(split.drugs(), split.diseases(), std::move(kept), split.test());
}

/// Training split over every positive plus an equal number of sampled zero
/// cells (capped by the zeros available); nothing is held out. Used to fit the model that ranks candidates.
inline CellSplit full_training_split(const Dataset& d, std::uint64_t seed) {
    auto pos = cells_with_label(d, 1);
    auto zeros = cells_with_label(d, 0);
    if (pos.empty()) throw SplitError("a full training split needs at least one positive");
    numcore::Rng rng(numcore::derive_seed(seed, {0xf0117}));
    std::shuffle(zeros.begin(), zeros.end(), rng);
    zeros.resize(std::min(zeros.size(), pos.size()));
    pos.insert(pos.end(), zeros.begin(), zeros.end());
    return CellSplit(d.drugs(), d.diseases(), std::move(pos), {});
}

/// Text manifest for exact replay: header key=value lines, then one
/// "train <drug> <disease>" or "test <drug> <disease>" line per cell.
inline void write_split_manifest(const std::filesystem::path& path, const CellSplit& split, const std::string& protocol,
                                 std::uint64_t seed, long fold) {
    std::ofstream out(path);
    if (!out) throw SplitError("cannot write '" + path.string() + "'");
    out << "protocol=" << protocol << "\nseed=" << seed << "\nfold=" << fold << "\ndrugs=" << split.drugs()
        << "\ndiseases=" << split.diseases() << "\n";
    for (const auto& c : split.train()) out << "train " << c.drug << ' ' << c.disease << '\n';
    for (const auto& c : split.test()) out << "test " << c.drug << ' ' << c.disease << '\n';
}

inline CellSplit read_split_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SplitError("cannot open '" + path.string() + "'");
    std::size_t drugs = 0, diseases = 0;
    std::vector<Cell> train, test;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (auto eq = line.find('='); eq != std::string::npos) {
            const auto key = line.substr(0, eq);
            if (key == "drugs") drugs = std::stoul(line.substr(eq + 1));
            if (key == "diseases") diseases = std::stoul(line.substr(eq + 1));
            continue;
        }
        std::istringstream ls(line);
        std::string role;
        Cell c;
        if (!(ls >> role >> c.drug >> c.disease)) throw SplitError("malformed split line '" + line + "'");
        (role == "train" ? train : test).push_back(c);
    }
    return CellSplit(drugs, diseases, std::move(train), std::move(test));
}

}  // namespace bibldr::data
