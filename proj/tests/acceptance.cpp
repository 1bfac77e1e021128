// Acceptance runner: one PASS/FAIL line per criterion.
//
//   bibldr_acceptance [--gdataset DIR] [criterion ...]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bibldr/bibldr.hpp"
#include "bibldr/cli/commands.hpp"
#include "op_cases.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace bibldr;
using numcore::Shape;
using numcore::Tensor;

namespace {

const fs::path kSource = BIBLDR_SOURCE_DIR;
fs::path g_gdataset = BIBLDR_GDATASET_DIR;

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

proto::PrototypeBank random_bank(const data::Dataset& d, std::size_t d0, std::uint64_t seed) {
    numcore::Rng rng(seed);
    return {numcore::uniform_tensor(Shape{d.drugs(), d0}, -1, 1, rng),
            numcore::uniform_tensor(Shape{d.diseases(), d0}, -1, 1, rng)};
}

seqmodel::Stage2Config tiny(std::size_t max_len) {
    seqmodel::Stage2Config c;
    c.d0 = 4;
    c.embed_dim = 4;
    c.heads = 2;
    c.max_len = max_len;
    c.batch = 8;
    c.seed = 11;
    return c;
}

// Pushes batch-norm running statistics away from their initial values.
void warm_batch_norm(seqmodel::Stage2Model& model, const data::Dataset& d, const data::CellSplit& split) {
    auto samples = seqmodel::training_samples(d, split);
    numcore::Tape tape;
    model.forward(tape, samples, d, numcore::BatchNormMode::train);
}

/// Settings of the shipped synthetic configuration.
eval::ProtocolConfig synthetic_protocol() {
    return cli::protocol_of(cli::load_config(kSource / "configs" / "synthetic.conf"));
}

// ---- 1 ---------------------------------------------------------------------

Verdict gradient_fidelity() {
    double worst = 0.0;
    std::string where;
    std::size_t checked = 0;
    for (const auto& c : oracle::op_cases()) {
        const auto r = oracle::check_op(c.fn, c.inputs);
        checked += r.checked;
        if (r.max_rel > worst) {
            worst = r.max_rel;
            where = std::string(c.name) + " " + r.worst;
        }
    }
    numcore::Rng rng(41);
    const auto d = oracle::random_dataset(5, 4, 0.5, rng);
    const auto split = oracle::random_split(d, 0.7, 0.3, rng);
    seqmodel::Stage2Model m(tiny(2), random_bank(d, 4, 42), d);
    std::vector<data::BehaviorSample> samples;
    Tensor labels(Shape{split.test().size()});
    for (const auto& c : split.test()) {
        labels[samples.size()] = d.label(c.drug, c.disease);
        samples.push_back(data::build_sample(d, split, c));
    }
    const auto full = oracle::check_parameters(m.params(), [&](numcore::Tape& tape) {
        return numcore::bce_with_logits(m.forward(tape, samples, d, numcore::BatchNormMode::train), labels);
    });
    checked += full.checked;
    if (full.max_rel > worst) {
        worst = full.max_rel;
        where = "full forward " + full.worst;
    }
    return {worst < 1e-4, std::to_string(oracle::op_cases().size()) + " operations + full forward, " +
                              std::to_string(checked) + " entries, max rel error " + sci(worst) + " at " + where};
}

// ---- 2 ---------------------------------------------------------------------

Verdict metric_oracles() {
    const auto set = [](std::vector<double> s, std::vector<int> y) { return eval::ScoredSet{std::move(s), std::move(y)}; };
    const double hand_roc = eval::auroc(set({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}));
    const double hand_pr = eval::auprc(set({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}));
    bool ok = hand_roc == 0.75 && std::abs(hand_pr - 5.0 / 6.0) < 1e-12;
    std::mt19937_64 rng(7001);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + rng() % 199;
        const bool ties = t % 2 == 0;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = ties ? static_cast<double>(rng() % 5) / 5.0 : std::uniform_real_distribution<double>(-2, 2)(rng);
            y[i] = static_cast<int>(rng() % 2);
        }
        const std::size_t pos = rng() % n;
        y[pos] = 1;
        y[(pos + 1 + rng() % (n - 1)) % n] = 0;
        const auto ss = set(s, y);
        worst = std::max({worst, std::abs(eval::auroc(ss) - oracle::brute_auroc(s, y)),
                          std::abs(eval::auprc(ss) - oracle::brute_auprc(s, y))});
    }
    ok = ok && worst <= 1e-12;
    return {ok, "hand values " + num(hand_roc) + " / " + num(hand_pr) + ", 1000 instances max |diff| " + sci(worst)};
}

// ---- 3 ---------------------------------------------------------------------

Verdict sequence_oracle() {
    numcore::Rng rng(3003);
    std::size_t samples = 0, violations = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const double density = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
        const double train = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
        const auto d = oracle::random_dataset(20, 15, density, rng);
        const auto split = oracle::random_split(d, train, 1.0 - train, rng);
        for (const auto& c : split.test()) {
            ++samples;
            const auto got = data::build_sample(d, split, c);
            const auto want = oracle::enumerate_sample(d, split, c);
            bool ok = oracle::same_elements(got.drug_seq, want.drug_seq) &&
                      oracle::same_elements(got.disease_seq, want.disease_seq) && got.label == want.label;
            for (const auto& e : got.drug_seq) ok = ok && e.index != c.disease && split.in_train({c.drug, e.index});
            for (const auto& e : got.disease_seq)
                ok = ok && e.index != c.drug && split.in_train({e.index, c.disease});
            violations += !ok;
        }
    }
    return {violations == 0, "200 matrices, " + std::to_string(samples) + " targets, " + std::to_string(violations) +
                                 " mismatches"};
}

// ---- 4 ---------------------------------------------------------------------

Verdict stage1_fit() {
    const std::size_t n = 50, dim = 64;
    const Tensor s = data::unit_vector_similarity(n, dim, 404);
    proto::Stage1Config cfg;
    cfg.d0 = dim;
    cfg.hidden = {128};
    cfg.lr = 0.01;
    cfg.epochs = 600;
    cfg.pair_batch = n * (n - 1) / 2;
    cfg.seed = 4;
    const auto r = proto::train_stage1(s, cfg, proto::EntityKind::drug);
    const Tensor protos = r.encoder.encode_rows(s);
    double mae = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            mae += std::abs(proto::cosine_sim(protos.row(i), protos.row(j)) - s(i, j));
            ++count;
        }
    mae /= static_cast<double>(count);
    return {mae < 0.05, "50 unit vectors in R^64, cosine MAE " + num(mae)};
}

// ---- 5 ---------------------------------------------------------------------

Verdict learnability() {
    const auto d = data::make_block_dataset(1);
    auto cfg = synthetic_protocol();
    cfg.eval_folds = 1;
    const auto report = eval::run_cv(d, cfg);
    const auto& u = report.units.at(0);
    const bool ok = u.auroc && *u.auroc > 0.95;
    return {ok, "20x15 block dataset, fold 0 test AUROC " + (u.auroc ? num(*u.auroc) : std::string("undefined"))};
}

// ---- 6 to 8 ----------------------------------------------------------------

std::optional<cli::RunConfig> gdataset_config(std::string& why) {
    auto c = cli::load_config(kSource / "configs" / "gdataset.conf");
    c.data.association = g_gdataset / "association.txt";
    c.data.drug_similarity = g_gdataset / "drug_similarity.txt";
    c.data.disease_similarity = g_gdataset / "disease_similarity.txt";
    c.data.drug_ids = fs::exists(g_gdataset / "drug_ids.txt") ? g_gdataset / "drug_ids.txt" : fs::path{};
    c.data.disease_ids = fs::exists(g_gdataset / "disease_ids.txt") ? g_gdataset / "disease_ids.txt" : fs::path{};
    for (const auto& p : {c.data.association, c.data.drug_similarity, c.data.disease_similarity})
        if (!fs::exists(p)) {
            why = "dataset not available (" + p.string() + " missing)";
            return std::nullopt;
        }
    return c;
}

Verdict gdataset_cv() {
    std::string why;
    const auto c = gdataset_config(why);
    if (!c) return {false, why};
    const auto d = data::load_dataset(c->data);
    auto cfg = cli::protocol_of(*c);
    cfg.repeats = 1;
    const auto r = eval::run_cv(d, cfg);
    const double roc = r.aggregate["fold_auroc"]["mean"], pr = r.aggregate["fold_auprc"]["mean"];
    return {roc >= 0.90 && pr >= 0.90, "10-fold CV mean AUROC " + num(roc) + ", AUPRC " + num(pr) + " in " +
                                           num(r.wall_seconds / 60.0, 1) + " min"};
}

Verdict gdataset_coldstart() {
    std::string why;
    const auto c = gdataset_config(why);
    if (!c) return {false, why};
    const auto d = data::load_dataset(c->data);
    auto cfg = cli::protocol_of(*c);
    cfg.coldstart_drugs = 20;
    cfg.all_drugs = false;
    cfg.drugs.clear();
    const auto r = eval::run_coldstart(d, cfg);
    const double roc = r.aggregate["drug_auroc"]["mean"], pr = r.aggregate["drug_auprc"]["mean"];
    const double base = r.aggregate["positive_rate_baseline"];
    return {roc >= 0.80 && pr >= 5.0 * base, "per-drug AUROC " + num(roc) + ", AUPRC " + num(pr) + " vs baseline " +
                                                 num(base) + " (x" + num(pr / base, 1) + ")"};
}

Verdict gdataset_sparsity() {
    std::string why;
    const auto c = gdataset_config(why);
    if (!c) return {false, why};
    const auto d = data::load_dataset(c->data);
    auto cfg = cli::protocol_of(*c);
    cfg.lambdas = {0.1, 0.5, 1.0};
    const auto r = eval::run_sparse(d, cfg);
    const auto roc = r.metric("auroc");
    if (roc.size() != 3) return {false, "a sparsity level produced no AUROC"};
    return {roc[1] >= 0.85 && roc[2] > roc[0],
            "AUROC at lambda 0.1 / 0.5 / 1.0: " + num(roc[0]) + " / " + num(roc[1]) + " / " + num(roc[2])};
}

// ---- 9 ---------------------------------------------------------------------

Verdict temperature_properties() {
    const auto d = data::make_block_dataset(1);
    auto cfg = synthetic_protocol();
    auto s2 = cfg.stage2;
    s2.d0 = cfg.stage1.d0;
    s2.temperature = 0.0;
    const auto bank = random_bank(d, s2.d0, 9);
    seqmodel::Stage2Model m(s2, bank, d);
    const auto split = data::full_training_split(d, 9);
    std::size_t compared = 0, differ = 0;
    for (const auto& sample : seqmodel::training_samples(d, split)) {
        auto flipped = sample;
        for (auto& e : flipped.drug_seq) e.label = 1 - e.label;
        for (auto& e : flipped.disease_seq) e.label = 1 - e.label;
        ++compared;
        differ += !(seqmodel::build_sequence_input(m, sample, d).x == seqmodel::build_sequence_input(m, flipped, d).x);
    }
    cfg.grid_d0 = {cfg.stage1.d0};
    cfg.grid_temperature = {0, 2, 5};
    cfg.fold = 0;
    const auto r = eval::run_sweep(d, cfg);
    std::string surface;
    bool complete = r.units.size() == 3;
    for (const auto& u : r.units) {
        complete = complete && u.auroc && u.auprc;
        surface += " " + u.id + "=" + (u.auroc ? num(*u.auroc, 3) : std::string("n/a"));
    }
    return {differ == 0 && complete, "T=0 label flips changed " + std::to_string(differ) + " of " +
                                         std::to_string(compared) + " inputs; sweep AUROC" + surface};
}

// ---- 10 --------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path cli_cv(const fs::path& out, const std::string& jobs) {
    const std::string conf = (kSource / "configs" / "synthetic.conf").string(), o = out.string();
    const std::vector<const char*> argv{"bibldr", "cv",      "--config",         conf.c_str(), "--out",
                                        o.c_str(), "--jobs", jobs.c_str(),       "--set",      "stage1.epochs=20",
                                        "--set",   "stage2.epochs=3"};
    std::ostringstream sink, err;
    if (cli::main(static_cast<int>(argv.size()), argv.data(), sink, err) != 0)
        throw std::runtime_error("cv command failed: " + err.str());
    const std::string tag = "run directory ";
    const auto text = sink.str();
    const auto at = text.find(tag);
    return fs::path(text.substr(at + tag.size(), text.find('\n', at) - at - tag.size()));
}

Verdict determinism() {
    const auto out = fs::temp_directory_path() / "bibldr_acceptance_runs";
    fs::remove_all(out);
    const auto a = slurp(cli_cv(out, "1") / "report.jsonl");
    const auto b = slurp(cli_cv(out, "1") / "report.jsonl");
    const auto c = slurp(cli_cv(out, "2") / "report.jsonl");
    fs::remove_all(out);
    const bool same = !a.empty() && a == b && a == c;

    numcore::Rng rng(1010);
    std::size_t scores = 0, changed = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto d = oracle::random_dataset(8, 7, 0.35, rng);
        const auto split = oracle::random_split(d, 0.6, 0.4, rng);
        seqmodel::Stage2Model m(tiny(3), random_bank(d, 4, 1011 + trial), d);
        warm_batch_norm(m, d, split);
        for (const auto& cell : split.test()) {
            const auto packed = seqmodel::build_sequence_input(m, data::build_sample(d, split, cell), d);
            for (int rep = 0; rep < 5; ++rep) {
                auto mutated = packed;
                for (std::size_t r = 0; r < mutated.valid.size(); ++r)
                    if (!mutated.valid[r])
                        for (auto& v : mutated.x.row(r)) v = std::uniform_real_distribution<double>(-1e3, 1e3)(rng);
                ++scores;
                changed += seqmodel::score_packed(m, packed, cell) != seqmodel::score_packed(m, mutated, cell);
            }
        }
    }
    return {same && changed == 0, std::string("cv report reruns (jobs 1, 1, 2) ") +
                                      (same ? "byte-identical" : "DIFFER") + "; masked-row mutation changed " +
                                      std::to_string(changed) + " of " + std::to_string(scores) + " scores"};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "gradient fidelity", gradient_fidelity},
        {2, "metric oracles", metric_oracles},
        {3, "sequence construction", sequence_oracle},
        {4, "prototype fit", stage1_fit},
        {5, "end-to-end learnability", learnability},
        {6, "Gdataset cross validation", gdataset_cv},
        {7, "Gdataset cold start", gdataset_coldstart},
        {8, "Gdataset sparsity trend", gdataset_sparsity},
        {9, "temperature properties", temperature_properties},
        {10, "determinism", determinism},
    };
    const std::vector<double> limits{60, 0, 0, 300, 120, 0, 0, 0, 0, 0};  // seconds; 0 means no limit

    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--gdataset" && i + 1 < argc) {
            g_gdataset = argv[++i];
        } else {
            try {
                selected.push_back(std::stoi(a));
            } catch (const std::exception&) {
                std::cerr << "usage: bibldr_acceptance [--gdataset DIR] [criterion ...]\n";
                return 2;
            }
        }
    }

    int failures = 0;
    for (const auto& c : all) {
        if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const double limit = limits[static_cast<std::size_t>(c.id - 1)];
        if (limit > 0 && secs >= limit) {
            v.pass = false;
            v.detail += "; over the " + num(limit, 0) + " s budget";
        }
        failures += !v.pass;
        std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << c.id << " " << c.name << ": " << v.detail << " ("
                  << num(secs, 1) << " s)" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
