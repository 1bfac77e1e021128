#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bibldr/cli/config.hpp"
#include "bibldr/data/synthetic.hpp"

namespace bibldr::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"validate", "train-proto", "train",  "cv",           "coldstart",
                                                "sparse",   "sweep",       "rank",   "make-synthetic"};
    return names;
}

/// Parsed command line.
struct Invocation {
    std::string command;
    fs::path config;
    std::vector<std::string> sets;
    std::optional<std::size_t> jobs;
    std::optional<std::uint64_t> seed;
    fs::path out = "runs";
};

/// Config file, then --set overrides in order, then --seed and --jobs.
inline RunConfig resolve(const Invocation& inv) {
    RunConfig c = inv.config.empty() ? RunConfig{} : load_config(inv.config);
    for (const auto& kv : inv.sets) {
        const auto [k, v] = parse_override(kv);
        apply(c, k, v, fs::current_path());
    }
    if (inv.seed) c.protocol.seed = *inv.seed;
    if (inv.jobs) c.protocol.jobs = *inv.jobs;
    return c;
}

struct Check {
    std::string name;
    bool ok = true;
    std::string detail;
};

/// Runs every validation check, continuing past failures.
inline std::vector<Check> validation_checks(const RunConfig& c) {
    std::vector<Check> checks;
    auto run = [&](const std::string& name, const std::function<std::string()>& body) {
        try {
            checks.push_back({name, true, body()});
        } catch (const std::exception& e) {
            checks.push_back({name, false, e.what()});
        }
    };
    bool paths_ok = true;
    auto path_check = [&](const std::string& key, const fs::path& p, bool required) {
        run("path " + key, [&]() -> std::string {
            if (p.empty()) {
                if (required) throw ConfigError("required key is not set");
                return "not set (optional)";
            }
            if (!fs::is_regular_file(p)) throw ConfigError("file '" + p.string() + "' does not exist");
            return p.string();
        });
        paths_ok = paths_ok && checks.back().ok;
    };
    path_check("data.association", c.data.association, true);
    path_check("data.drug_similarity", c.data.drug_similarity, true);
    path_check("data.disease_similarity", c.data.disease_similarity, true);
    path_check("data.drug_ids", c.data.drug_ids, false);
    path_check("data.disease_ids", c.data.disease_ids, false);

    std::optional<data::Dataset> d;
    if (paths_ok) {
        run("dataset", [&]() -> std::string {
            d = data::load_dataset(c.data);
            std::size_t pos = 0;
            for (double v : d->association.values()) pos += v != 0.0;
            return std::to_string(d->drugs()) + " drugs x " + std::to_string(d->diseases()) + " diseases, " +
                   std::to_string(pos) + " positives";
        });
    }
    run("stage1", [&]() -> std::string {
        stage1_of(c).validate();
        return "d0=" + std::to_string(c.protocol.stage1.d0);
    });
    run("stage2", [&]() -> std::string {
        const auto s2 = stage2_of(c);
        s2.validate();
        return "d0 + embed_dim = " + std::to_string(s2.model_dim()) + " = " + std::to_string(s2.heads) + " heads x " +
               std::to_string(s2.model_dim() / s2.heads);
    });
    run("protocol", [&]() -> std::string {
        protocol_of(c).validate();
        return std::to_string(c.protocol.folds) + " folds x " + std::to_string(c.protocol.repeats) + " repeats";
    });
    if (d) {
        run("protocol.drugs", [&]() -> std::string {
            for (auto k : c.protocol.drugs)
                if (k >= d->drugs()) throw RangeError("protocol.drugs: index " + std::to_string(k) + " out of range");
            return c.protocol.drugs.empty() ? "seeded subset" : std::to_string(c.protocol.drugs.size()) + " drugs";
        });
        run("rank", [&]() -> std::string {
            if (c.rank_disease >= d->diseases())
                throw RangeError("rank.disease: index " + std::to_string(c.rank_disease) + " out of range");
            if (c.rank_k == 0) throw RangeError("rank.k must be at least 1");
            return "disease " + std::to_string(c.rank_disease) + ", K=" + std::to_string(c.rank_k);
        });
    }
    auto dir_check = [&](const std::string& key, const fs::path& p) {
        if (p.empty()) return;
        run("path " + key, [&]() -> std::string {
            if (!fs::is_directory(p)) throw ConfigError("directory '" + p.string() + "' does not exist");
            return p.string();
        });
    };
    dir_check("train.proto_dir", c.proto_dir);
    dir_check("rank.model_dir", c.model_dir);
    return checks;
}

/// Fresh directory out/<command>-<UTC timestamp>[-n]; never reuses an existing one.
inline fs::path make_run_dir(const fs::path& out, const std::string& command) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    const std::string base = command + "-" + stamp;
    fs::create_directories(out);
    fs::path dir = out / base;
    for (int n = 2; fs::exists(dir); ++n) dir = out / (base + "-" + std::to_string(n));
    fs::create_directory(dir);
    return dir;
}

/// Accepts either a checkpoint directory or a run directory holding it under `sub`.
inline fs::path checkpoint_dir(const fs::path& dir, const std::string& sub) {
    return fs::is_directory(dir / sub) ? dir / sub : dir;
}

inline void write_losses(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream out(path);
    for (std::size_t e = 0; e < losses.size(); ++e) out << e << ' ' << detail::fmt(losses[e]) << '\n';
}

class Runner {
public:
    Runner(Invocation inv, std::ostream& out) : inv_(std::move(inv)), out_(out), config_(resolve(inv_)) {}

    int run() {
        const std::string& cmd = inv_.command;
        if (cmd == "validate") return validate();
        if (cmd == "make-synthetic") return make_synthetic();
        prepare();
        if (cmd == "train-proto") return train_proto();
        if (cmd == "train") return train();
        if (cmd == "rank") return rank();
        return protocol();
    }

    const fs::path& run_dir() const { return run_dir_; }

private:
    int validate() {
        bool ok = true;
        for (const auto& c : validation_checks(config_)) {
            out_ << (c.ok ? "ok   " : "FAIL ") << c.name << ": " << c.detail << '\n';
            ok = ok && c.ok;
        }
        out_ << (ok ? "configuration valid\n" : "configuration invalid\n");
        return ok ? 0 : 1;
    }

    int make_synthetic() {
        const auto d = data::make_block_dataset(config_.synthetic_seed);
        data::save_dataset(inv_.out, d);
        out_ << "wrote " << d.drugs() << "x" << d.diseases() << " block dataset to " << inv_.out.string() << '\n';
        return 0;
    }

    void prepare() {
        protocol_of(config_).validate();
        if (inv_.command == "train" && config_.proto_dir.empty())
            throw ConfigError("train requires Stage-I checkpoints: set train.proto_dir (produced by train-proto)");
        if (inv_.command == "rank" && config_.model_dir.empty())
            throw ConfigError("rank requires rank.model_dir (produced by train)");
        dataset_ = data::load_dataset(config_.data);
        run_dir_ = make_run_dir(inv_.out, inv_.command);
        resolved(config_).save((run_dir_ / "config.conf").string());
        out_ << "run directory " << run_dir_.string() << '\n';
    }

    proto::PrototypeBank bank() {
        if (config_.proto_dir.empty()) {
            out_ << "training Stage-I encoders\n";
            return eval::bank_for(*dataset_, stage1_of(config_));
        }
        auto b = proto::make_bank(proto::load_encoders(checkpoint_dir(config_.proto_dir, "proto")), *dataset_);
        if (b.d0() != config_.protocol.stage1.d0) {
            throw ConfigError("train.proto_dir holds d0=" + std::to_string(b.d0()) + " encoders but stage1.d0=" +
                              std::to_string(config_.protocol.stage1.d0));
        }
        return b;
    }

    int train_proto() {
        const auto pair = proto::train_encoders(*dataset_, stage1_of(config_));
        proto::save_encoders(run_dir_ / "proto", pair);
        write_losses(run_dir_ / "proto" / "drug_losses.txt", pair.drug_losses);
        write_losses(run_dir_ / "proto" / "disease_losses.txt", pair.disease_losses);
        out_ << "saved encoders to " << (run_dir_ / "proto").string() << '\n';
        return 0;
    }

    int train() {
        const auto pb = bank();
        const auto split = data::full_training_split(*dataset_, config_.seed());
        auto r = seqmodel::train_stage2(*dataset_, split, pb, stage2_of(config_));
        const auto dir = run_dir_ / "model";
        r.model.save(dir);
        data::write_split_manifest(dir / "split.txt", split, "full", config_.seed(), -1);
        write_losses(run_dir_ / "losses.txt", r.epoch_losses);
        out_ << "final loss " << detail::fmt(r.final_loss) << "; saved model to " << dir.string() << '\n';
        return 0;
    }

    int rank() {
        const auto dir = checkpoint_dir(config_.model_dir, "model");
        auto model = seqmodel::Stage2Model::load(dir, *dataset_);
        const auto split = data::read_split_manifest(dir / "split.txt");
        const auto r = eval::rank_candidates(model, *dataset_, split, config_.rank_disease, config_.rank_k);
        std::ofstream file(run_dir_ / "ranking.txt");
        for (std::size_t i = 0; i < r.entries.size(); ++i) {
            const auto& e = r.entries[i];
            const std::string line =
                std::to_string(i + 1) + '\t' + std::to_string(e.drug) + '\t' + e.id + '\t' + detail::fmt(e.score);
            file << line << '\n';
            out_ << line << '\n';
        }
        if (r.truncated)
            out_ << "note: K=" << config_.rank_k << " exceeds the " << r.entries.size()
                 << " candidates; all candidates returned\n";
        return 0;
    }

    int protocol() {
        const auto cfg = protocol_of(config_);
        eval::ExperimentReport report;
        if (inv_.command == "sweep") {
            report = eval::run_sweep(*dataset_, cfg);
        } else {
            const auto pb = bank();
            if (inv_.command == "cv") {
                report = eval::run_cv(*dataset_, cfg, &pb);
            } else if (inv_.command == "coldstart") {
                report = eval::run_coldstart(*dataset_, cfg, &pb);
            } else {
                report = eval::run_sparse(*dataset_, cfg, &pb);
            }
        }
        eval::write_report(run_dir_, report);
        for (const auto& [k, v] : report.aggregate.items()) out_ << k << ' ' << v.dump() << '\n';
        return 0;
    }

    Invocation inv_;
    std::ostream& out_;
    RunConfig config_;
    std::optional<data::Dataset> dataset_;
    fs::path run_dir_;
};

/// Entry point shared by the executable and the tests. Exit codes: 0 success,
/// 1 runtime failure, 2 usage or configuration error.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Two-stage drug-disease association model: training, evaluation protocols and ranking", "bibldr"};
    Invocation inv;
    std::string commands;
    for (const auto& n : command_names()) commands += (commands.empty() ? "" : ", ") + n;
    app.add_option("command", inv.command, "one of: " + commands)->required()->check(CLI::IsMember(command_names()));
    app.add_option("--config", inv.config, "flat key=value config file");
    app.add_option("--set", inv.sets, "override KEY=VALUE (repeatable)")->take_all();
    app.add_option("--jobs", inv.jobs, "parallel protocol units");
    app.add_option("--out", inv.out, "output root (make-synthetic: dataset directory)");
    app.add_option("--seed", inv.seed, "master seed");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 2;
    }
    try {
        return Runner(inv, out).run();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace bibldr::cli
