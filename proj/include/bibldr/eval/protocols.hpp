#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "bibldr/eval/metrics.hpp"
#include "bibldr/eval/report.hpp"
#include "bibldr/seqmodel/train.hpp"

namespace bibldr::eval {

using data::Cell;
using data::CellSplit;
using data::Dataset;

struct ProtocolConfig {
    proto::Stage1Config stage1;
    seqmodel::Stage2Config stage2;  // stage2.d0 follows stage1.d0
    std::size_t folds = 10;
    std::size_t repeats = 10;
    std::size_t eval_folds = 0;  // rotations evaluated per repeat; 0 means all
    std::size_t fold = 0;        // fold used by the sparse and sweep protocols
    std::vector<double> lambdas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<std::size_t> grid_d0{64, 128, 256, 512, 1024};
    std::vector<double> grid_temperature{1, 2, 3, 4, 5};
    std::vector<std::size_t> drugs;  // explicit cold-start drugs; empty means a seeded subset
    std::size_t coldstart_drugs = 20;
    bool all_drugs = false;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;

    void validate() const {
        stage1.validate();
        seqmodel::Stage2Config s2 = stage2;
        s2.d0 = stage1.d0;
        s2.validate();
        if (folds < 2) throw ConfigError("protocol.folds must be at least 2");
        if (repeats == 0) throw ConfigError("protocol.repeats must be positive");
        if (eval_folds > folds) throw ConfigError("protocol.eval_folds exceeds protocol.folds");
        if (fold >= folds) throw ConfigError("protocol.fold must lie in [0, protocol.folds)");
        for (double l : lambdas)
            if (!(l > 0.0 && l <= 1.0)) throw ConfigError("protocol.lambdas entries must lie in (0, 1]");
        for (std::size_t d0 : grid_d0) {
            s2.d0 = d0;
            s2.validate();
        }
        for (double t : grid_temperature)
            if (!(t >= 0.0)) throw ConfigError("protocol.grid_temperature entries must be non-negative");
        if (jobs == 0) throw ConfigError("--jobs must be positive");
    }
};

/// Seed for the stage-2 model of fold `fold` in repeat `repeat`; shared by
/// every protocol so equal units train equal models.
inline std::uint64_t unit_seed(std::uint64_t seed, std::size_t repeat, std::size_t fold) {
    return numcore::derive_seed(seed, {0x5eed2, repeat, fold});
}

inline std::uint64_t plan_seed(std::uint64_t seed, std::size_t repeat) {
    return numcore::derive_seed(seed, {0xf01d5, repeat});
}

/// Runs task(i) for i in [0, n) on up to `jobs` threads; results land by index.
template <typename T>
std::vector<T> run_units(std::size_t n, std::size_t jobs, const std::function<T(std::size_t)>& task) {
    std::vector<std::optional<T>> slots(n);
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                slots[i] = task(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), std::max<std::size_t>(n, 1));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<T> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

/// Trains stage 2 on split.train(), scores split.test(), fills metrics.
inline UnitResult evaluate_split(const Dataset& d, const CellSplit& split, const proto::PrototypeBank& bank,
                                 seqmodel::Stage2Config s2) {
    s2.d0 = bank.d0();
    auto trained = seqmodel::train_stage2(d, split, bank, s2);
    const auto scored = seqmodel::score_cells(trained.model, d, split, split.test());
    UnitResult u;
    u.final_loss = trained.final_loss;
    for (const auto& sc : scored) {
        u.scored.scores.push_back(sc.score);
        u.scored.labels.push_back(d.label(sc.cell.drug, sc.cell.disease));
    }
    u.test_cells = u.scored.size();
    u.test_positives = u.scored.positives();
    if (u.scored.positives() > 0) u.auprc = auprc(u.scored);
    if (u.scored.positives() > 0 && u.scored.negatives() > 0) {
        u.auroc = auroc(u.scored);
    } else {
        u.note = "single-class test set";
    }
    return u;
}

inline proto::PrototypeBank bank_for(const Dataset& d, const proto::Stage1Config& s1) {
    return proto::make_bank(proto::train_encoders(d, s1), d);
}

inline Json config_json(const ProtocolConfig& c) {
    Json j;
    j["stage1.d0"] = c.stage1.d0;
    j["stage1.hidden"] = c.stage1.hidden;
    j["stage1.lr"] = c.stage1.lr;
    j["stage1.epochs"] = c.stage1.epochs;
    j["stage1.pair_batch"] = c.stage1.pair_batch;
    j["stage2.embed_dim"] = c.stage2.embed_dim;
    j["stage2.temperature"] = c.stage2.temperature;
    j["stage2.heads"] = c.stage2.heads;
    j["stage2.max_len"] = c.stage2.max_len;
    j["stage2.lr"] = c.stage2.lr;
    j["stage2.epochs"] = c.stage2.epochs;
    j["stage2.batch"] = c.stage2.batch;
    j["stage2.weight_decay"] = c.stage2.weight_decay;
    j["stage2.pooling"] = c.stage2.pooling == seqmodel::Pooling::flatten ? "flatten" : "mean";
    j["protocol.folds"] = c.folds;
    j["seed"] = c.seed;
    return j;
}

namespace detail {

inline void add_summaries(ExperimentReport& r, const std::string& prefix, const std::vector<double>& auroc_values,
                          const std::vector<double>& auprc_values) {
    r.aggregate[prefix + "auroc"] = summarize(auroc_values).to_json();
    r.aggregate[prefix + "auprc"] = summarize(auprc_values).to_json();
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace detail

/// Repeated k-fold cross validation. Aggregates both the mean of per-repeat
/// means and the mean over all evaluated folds.
inline ExperimentReport run_cv(const Dataset& d, const ProtocolConfig& cfg,
                               const proto::PrototypeBank* bank = nullptr) {
    cfg.validate();
    detail::Stopwatch clock;
    const proto::PrototypeBank local = bank ? proto::PrototypeBank{} : bank_for(d, cfg.stage1);
    const proto::PrototypeBank& pb = bank ? *bank : local;
    const std::size_t per_repeat = cfg.eval_folds ? cfg.eval_folds : cfg.folds;

    std::vector<data::FoldPlan> plans;
    for (std::size_t r = 0; r < cfg.repeats; ++r) plans.push_back(data::split_folds(d, plan_seed(cfg.seed, r), cfg.folds));

    ExperimentReport report;
    report.protocol = "cv";
    report.config = config_json(cfg);
    report.config["protocol.repeats"] = cfg.repeats;
    report.config["protocol.eval_folds"] = per_repeat;
    report.seeds = {cfg.seed};
    report.units = run_units<UnitResult>(cfg.repeats * per_repeat, cfg.jobs, [&](std::size_t i) {
        const std::size_t r = i / per_repeat, f = i % per_repeat;
        auto s2 = cfg.stage2;
        s2.seed = unit_seed(cfg.seed, r, f);
        UnitResult u = evaluate_split(d, data::cv_split(plans[r], f), pb, s2);
        u.id = "repeat" + std::to_string(r) + "_fold" + std::to_string(f);
        u.info = Json{{"repeat", r}, {"fold", f}};
        return u;
    });

    std::vector<double> repeat_auroc, repeat_auprc;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        std::vector<double> a, p;
        for (std::size_t f = 0; f < per_repeat; ++f) {
            const auto& u = report.units[r * per_repeat + f];
            if (u.auroc) a.push_back(*u.auroc);
            if (u.auprc) p.push_back(*u.auprc);
        }
        repeat_auroc.push_back(summarize(a).mean);
        repeat_auprc.push_back(summarize(p).mean);
    }
    detail::add_summaries(report, "fold_", report.metric("auroc"), report.metric("auprc"));
    detail::add_summaries(report, "repeat_", repeat_auroc, repeat_auprc);
    report.wall_seconds = clock.seconds();
    return report;
}

/// Drugs evaluated by the cold-start protocol.
inline std::vector<std::size_t> coldstart_drugs(const Dataset& d, const ProtocolConfig& cfg) {
    if (!cfg.drugs.empty()) {
        for (auto k : cfg.drugs)
            if (k >= d.drugs()) throw RangeError("cold-start drug " + std::to_string(k) + " out of range");
        return cfg.drugs;
    }
    std::vector<std::size_t> eligible;
    for (std::size_t k = 0; k < d.drugs(); ++k) {
        bool any = false;
        for (std::size_t j = 0; j < d.diseases() && !any; ++j) any = d.label(k, j) == 1;
        if (any) eligible.push_back(k);
    }
    if (cfg.all_drugs || eligible.size() <= cfg.coldstart_drugs) return eligible;
    numcore::Rng rng(numcore::derive_seed(cfg.seed, {0xc01d5}));
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(cfg.coldstart_drugs);
    std::sort(eligible.begin(), eligible.end());
    return eligible;
}

/// Holds out each selected drug's full row in turn. Headline figures are
/// per-drug means; pooled-score metrics are reported alongside.
inline ExperimentReport run_coldstart(const Dataset& d, const ProtocolConfig& cfg,
                                      const proto::PrototypeBank* bank = nullptr) {
    cfg.validate();
    detail::Stopwatch clock;
    const proto::PrototypeBank local = bank ? proto::PrototypeBank{} : bank_for(d, cfg.stage1);
    const proto::PrototypeBank& pb = bank ? *bank : local;
    const auto drugs = coldstart_drugs(d, cfg);

    ExperimentReport report;
    report.protocol = "coldstart";
    report.config = config_json(cfg);
    report.seeds = {cfg.seed};
    report.units = run_units<UnitResult>(drugs.size(), cfg.jobs, [&](std::size_t i) {
        const std::size_t k = drugs[i];
        UnitResult u;
        const auto split = data::coldstart_split(d, k, numcore::derive_seed(cfg.seed, {0xc01d, k}));
        if (!split) {
            u.note = "drug has no positive association; skipped";
        } else {
            auto s2 = cfg.stage2;
            s2.seed = numcore::derive_seed(cfg.seed, {0xc01d2, k});
            u = evaluate_split(d, *split, pb, s2);
        }
        u.id = "drug" + std::to_string(k);
        u.info = Json{{"drug", k}, {"drug_id", d.drug_ids[k]}};
        return u;
    });

    ScoredSet pooled;
    std::size_t excluded = 0;
    std::vector<double> base_rates;
    for (const auto& u : report.units) {
        pooled.append(u.scored);
        if (!u.auroc) {
            ++excluded;
            continue;
        }
        base_rates.push_back(static_cast<double>(u.test_positives) / static_cast<double>(u.test_cells));
    }
    std::vector<double> auprc_defined;
    for (const auto& u : report.units)
        if (u.auroc && u.auprc) auprc_defined.push_back(*u.auprc);
    detail::add_summaries(report, "drug_", report.metric("auroc"), auprc_defined);
    report.aggregate["excluded_drugs"] = excluded;
    report.aggregate["positive_rate_baseline"] = summarize(base_rates).mean;
    if (pooled.positives() > 0 && pooled.negatives() > 0) {
        report.aggregate["pooled_auroc"] = auroc(pooled);
        report.aggregate["pooled_auprc"] = auprc(pooled);
    }
    report.wall_seconds = clock.seconds();
    return report;
}

/// Sparsifies the training part of one fixed fold at each lambda and retrains.
inline ExperimentReport run_sparse(const Dataset& d, const ProtocolConfig& cfg,
                                   const proto::PrototypeBank* bank = nullptr) {
    cfg.validate();
    detail::Stopwatch clock;
    const proto::PrototypeBank local = bank ? proto::PrototypeBank{} : bank_for(d, cfg.stage1);
    const proto::PrototypeBank& pb = bank ? *bank : local;
    const auto plan = data::split_folds(d, plan_seed(cfg.seed, 0), cfg.folds);
    const CellSplit base = data::cv_split(plan, cfg.fold);

    ExperimentReport report;
    report.protocol = "sparse";
    report.config = config_json(cfg);
    report.config["protocol.fold"] = cfg.fold;
    report.seeds = {cfg.seed};
    report.units = run_units<UnitResult>(cfg.lambdas.size(), cfg.jobs, [&](std::size_t i) {
        const double lambda = cfg.lambdas[i];
        const CellSplit split = data::sparsify(base, d, lambda, numcore::derive_seed(cfg.seed, {0x5a25, cfg.fold}));
        auto s2 = cfg.stage2;
        s2.seed = unit_seed(cfg.seed, 0, cfg.fold);
        UnitResult u = evaluate_split(d, split, pb, s2);
        char name[32];
        std::snprintf(name, sizeof name, "lambda%.4g", lambda);
        u.id = name;
        std::size_t kept = 0;
        for (const auto& c : split.train()) kept += d.label(c.drug, c.disease);
        u.info = Json{{"lambda", lambda}, {"fold", cfg.fold}, {"train_positives", kept}};
        return u;
    });
    detail::add_summaries(report, "lambda_", report.metric("auroc"), report.metric("auprc"));
    report.wall_seconds = clock.seconds();
    return report;
}

/// One fold evaluation per (d0, temperature) grid point. Stage-I encoders are
/// trained once per d0 value.
inline ExperimentReport run_sweep(const Dataset& d, const ProtocolConfig& cfg) {
    cfg.validate();
    if (cfg.grid_d0.empty() || cfg.grid_temperature.empty()) throw ConfigError("sweep grid is empty");
    detail::Stopwatch clock;
    std::map<std::size_t, proto::PrototypeBank> banks;
    for (std::size_t d0 : cfg.grid_d0) {
        if (banks.count(d0)) continue;
        auto s1 = cfg.stage1;
        s1.d0 = d0;
        banks.emplace(d0, bank_for(d, s1));
    }
    const auto plan = data::split_folds(d, plan_seed(cfg.seed, 0), cfg.folds);
    const CellSplit split = data::cv_split(plan, cfg.fold);
    const std::size_t nt = cfg.grid_temperature.size();

    ExperimentReport report;
    report.protocol = "sweep";
    report.config = config_json(cfg);
    report.config["protocol.fold"] = cfg.fold;
    report.config["protocol.grid_d0"] = cfg.grid_d0;
    report.config["protocol.grid_temperature"] = cfg.grid_temperature;
    report.seeds = {cfg.seed};
    report.units = run_units<UnitResult>(cfg.grid_d0.size() * nt, cfg.jobs, [&](std::size_t i) {
        const std::size_t d0 = cfg.grid_d0[i / nt];
        const double t = cfg.grid_temperature[i % nt];
        auto s2 = cfg.stage2;
        s2.temperature = t;
        s2.seed = unit_seed(cfg.seed, 0, cfg.fold);
        UnitResult u = evaluate_split(d, split, banks.at(d0), s2);
        char name[48];
        std::snprintf(name, sizeof name, "d0_%zu_T%.4g", d0, t);
        u.id = name;
        u.info = Json{{"d0", d0}, {"temperature", t}, {"fold", cfg.fold}};
        return u;
    });
    detail::add_summaries(report, "grid_", report.metric("auroc"), report.metric("auprc"));
    report.wall_seconds = clock.seconds();
    return report;
}

struct RankedDrug {
    std::size_t drug = 0;
    std::string id;
    double score = 0.0;
};

struct Ranking {
    std::size_t disease = 0;
    std::vector<RankedDrug> entries;
    bool truncated = false;  // K exceeded the candidate count; all candidates returned
};

/// Scores every drug not already a training positive for disease m and
/// returns the top K, ties by ascending drug index.
inline Ranking rank_candidates(seqmodel::Stage2Model& model, const Dataset& d, const CellSplit& split,
                               std::size_t disease, std::size_t k) {
    if (k == 0) throw RangeError("K must be at least 1");
    if (disease >= d.diseases()) throw RangeError("disease index " + std::to_string(disease) + " out of range");
    const data::SequenceIndex index(split);
    std::vector<data::BehaviorSample> samples;
    for (std::size_t i = 0; i < d.drugs(); ++i) {
        const Cell c{i, disease};
        if (split.in_train(c) && d.label(i, disease) == 1) continue;
        samples.push_back(data::build_sample_unchecked(d, index, c));
    }
    const auto scores = seqmodel::score_samples(model, d, samples);
    Ranking out;
    out.disease = disease;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto drug = samples[i].target.drug;
        out.entries.push_back({drug, d.drug_ids[drug], scores[i]});
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const RankedDrug& a, const RankedDrug& b) { return a.score > b.score; });
    if (k > out.entries.size()) {
        out.truncated = true;
    } else {
        out.entries.resize(k);
    }
    return out;
}

}  // namespace bibldr::eval
