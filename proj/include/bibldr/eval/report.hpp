#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bibldr/eval/metrics.hpp"
#include "json.hpp"

namespace bibldr::eval {

using Json = nlohmann::ordered_json;

/// Outcome of one protocol unit (a fold, a drug, a sparsity level, a grid point).
struct UnitResult {
    std::string id;
    Json info = Json::object();  // unit coordinates: repeat, fold, drug, lambda, ...
    std::optional<double> auroc;
    std::optional<double> auprc;
    std::size_t test_cells = 0;
    std::size_t test_positives = 0;
    double final_loss = 0.0;
    std::string note;  // why a metric is missing
    ScoredSet scored;  // kept for curve export, not serialised

    Json to_json() const {
        Json j;
        j["record"] = "unit";
        j["id"] = id;
        for (const auto& [k, v] : info.items()) j[k] = v;
        j["auroc"] = auroc ? Json(*auroc) : Json(nullptr);
        j["auprc"] = auprc ? Json(*auprc) : Json(nullptr);
        j["test_cells"] = test_cells;
        j["test_positives"] = test_positives;
        j["final_loss"] = final_loss;
        if (!note.empty()) j["note"] = note;
        return j;
    }
};

struct Summary {
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation

    Json to_json() const { return Json{{"count", count}, {"mean", mean}, {"std", stddev}}; }
};

inline Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.count = values.size();
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size()));
    return s;
}

/// Structured result of a protocol run. The payload (header, units, aggregate)
/// is a pure function of inputs; wall-clock time is kept apart.
struct ExperimentReport {
    std::string protocol;
    Json config = Json::object();
    std::vector<std::uint64_t> seeds;
    std::vector<UnitResult> units;
    Json aggregate = Json::object();
    double wall_seconds = 0.0;

    std::vector<double> metric(const std::string& name) const {
        std::vector<double> out;
        for (const auto& u : units) {
            const auto& m = name == "auroc" ? u.auroc : u.auprc;
            if (m) out.push_back(*m);
        }
        return out;
    }

    /// One JSON record per line: header, units in order, aggregate.
    std::string payload() const {
        std::ostringstream out;
        Json header;
        header["record"] = "header";
        header["protocol"] = protocol;
        header["seeds"] = seeds;
        header["config"] = config;
        out << header.dump() << '\n';
        for (const auto& u : units) out << u.to_json().dump() << '\n';
        Json agg;
        agg["record"] = "aggregate";
        for (const auto& [k, v] : aggregate.items()) agg[k] = v;
        out << agg.dump() << '\n';
        return out.str();
    }
};

inline void write_curve(const std::filesystem::path& path, const CurvePoints& pts) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out.precision(17);
    for (const auto& [x, y] : pts) out << x << ' ' << y << '\n';
}

/// Writes report.jsonl, timing.txt and per-unit ROC/PR curves into dir.
inline void write_report(const std::filesystem::path& dir, const ExperimentReport& r, bool curves = true) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "report.jsonl");
        if (!out) throw Error("cannot write report into '" + dir.string() + "'");
        out << r.payload();
    }
    {
        std::ofstream out(dir / "timing.txt");
        out << "wall_seconds=" << r.wall_seconds << '\n';
    }
    if (!curves) return;
    const auto cdir = dir / "curves";
    for (const auto& u : r.units) {
        const auto& s = u.scored;
        if (s.positives() == 0) continue;
        std::filesystem::create_directories(cdir);
        write_curve(cdir / (u.id + ".pr.txt"), pr_curve(s));
        if (s.negatives() > 0) write_curve(cdir / (u.id + ".roc.txt"), roc_curve(s));
    }
}

}  // namespace bibldr::eval
