#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

#include "bibldr/error.hpp"

namespace bibldr::eval {

/// Parallel scores and binary labels.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;

    std::size_t size() const noexcept { return scores.size(); }
    std::size_t positives() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    }
    std::size_t negatives() const { return size() - positives(); }

    void append(const ScoredSet& other) {
        scores.insert(scores.end(), other.scores.begin(), other.scores.end());
        labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    }

    void check() const {
        if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
        for (int l : labels)
            if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
    }
};

namespace detail {

/// Indices by descending score; equal scores keep ascending index order.
inline std::vector<std::size_t> descending_order(const std::vector<double>& s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    return idx;
}

}  // namespace detail

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks.
inline double auroc(const ScoredSet& s) {
    s.check();
    const std::size_t p = s.positives(), n = s.negatives();
    if (p == 0 || n == 0) {
        throw MetricUndefinedError("AUROC needs both classes (" + std::to_string(p) + " positives, " +
                                   std::to_string(n) + " negatives)");
    }
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
    // Twice the positive rank sum keeps midranks integral.
    long double rank2_sum = 0.0L;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) ++j;
        const long double midrank2 = static_cast<long double>(i + 1 + j);  // 2 * (i+1 + j)/2
        for (std::size_t t = i; t < j; ++t)
            if (s.labels[idx[t]] == 1) rank2_sum += midrank2;
        i = j;
    }
    const long double pp = static_cast<long double>(p);
    const long double u2 = rank2_sum - pp * (pp + 1.0L);
    return static_cast<double>(u2 / (2.0L * pp * static_cast<long double>(n)));
}

/// Average precision: mean over positives of precision at each positive's
/// rank in descending-score order. Ties are ordered by ascending index.
inline double auprc(const ScoredSet& s) {
    s.check();
    const std::size_t p = s.positives();
    if (p == 0) throw MetricUndefinedError("AUPRC needs at least one positive");
    const auto order = detail::descending_order(s.scores);
    double total = 0.0;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (s.labels[order[r]] == 1) {
            ++tp;
            total += static_cast<double>(tp) / static_cast<double>(r + 1);
        }
    }
    return total / static_cast<double>(p);
}

using CurvePoints = std::vector<std::pair<double, double>>;

/// ROC points (fpr, tpr) from (0,0) to (1,1), one step per distinct score.
inline CurvePoints roc_curve(const ScoredSet& s) {
    s.check();
    const std::size_t p = s.positives(), n = s.negatives();
    if (p == 0 || n == 0) throw MetricUndefinedError("ROC curve needs both classes");
    const auto order = detail::descending_order(s.scores);
    CurvePoints out{{0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) {
            (s.labels[order[j]] == 1 ? tp : fp)++;
            ++j;
        }
        out.emplace_back(static_cast<double>(fp) / static_cast<double>(n), static_cast<double>(tp) / static_cast<double>(p));
        i = j;
    }
    return out;
}

/// Precision-recall points (recall, precision) at every rank holding a positive.
inline CurvePoints pr_curve(const ScoredSet& s) {
    s.check();
    const std::size_t p = s.positives();
    if (p == 0) throw MetricUndefinedError("PR curve needs at least one positive");
    const auto order = detail::descending_order(s.scores);
    CurvePoints out;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (s.labels[order[r]] != 1) continue;
        ++tp;
        out.emplace_back(static_cast<double>(tp) / static_cast<double>(p),
                         static_cast<double>(tp) / static_cast<double>(r + 1));
    }
    return out;
}

}  // namespace bibldr::eval
