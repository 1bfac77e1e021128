#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "bibldr/error.hpp"
#include "bibldr/kvtext.hpp"
#include "bibldr/numcore/tensor.hpp"

namespace bibldr::data {

using numcore::Shape;
using numcore::Tensor;

inline constexpr double kSymmetryTolerance = 1e-9;

/// Drug-disease association matrix plus the two similarity matrices.
/// Immutable after construction; validated by make_dataset/load_dataset.
struct Dataset {
    Tensor association;         // drugs x diseases, entries in {0,1}
    Tensor drug_similarity;     // drugs x drugs, [0,1], symmetric
    Tensor disease_similarity;  // diseases x diseases, [0,1], symmetric
    std::vector<std::string> drug_ids;
    std::vector<std::string> disease_ids;
    std::vector<std::string> warnings;

    std::size_t drugs() const noexcept { return association.rows(); }
    std::size_t diseases() const noexcept { return association.cols(); }
    int label(std::size_t drug, std::size_t disease) const {
        return association(drug, disease) != 0.0 ? 1 : 0;
    }

    std::size_t positives() const {
        std::size_t n = 0;
        for (double v : association.values()) n += v != 0.0;
        return n;
    }

    double sparsity() const {
        return static_cast<double>(positives()) / static_cast<double>(association.numel());
    }

    /// "<drugs>x<diseases>:<fnv1a-64 of all matrix bytes>"
    std::string fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const Tensor& t) {
            for (double v : t.values()) {
                unsigned char b[8];
                std::memcpy(b, &v, 8);
                for (unsigned char c : b) {
                    h ^= c;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        feed(association);
        feed(drug_similarity);
        feed(disease_similarity);
        std::ostringstream os;
        os << drugs() << 'x' << diseases() << ':' << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }
};

namespace detail {

inline std::string coord(std::size_t r, std::size_t c) {
    return "(row " + std::to_string(r) + ", column " + std::to_string(c) + ")";
}

inline std::vector<std::string> default_ids(const std::string& prefix, std::size_t n) {
    std::vector<std::string> ids;
    ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
    return ids;
}

inline void validate_similarity(const Tensor& s, std::size_t n, const std::string& what) {
    if (s.rank() != 2 || s.rows() != n || s.cols() != n) {
        throw LoadError(what + " similarity must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                        numcore::shape_str(s.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v = s(i, j);
            if (!(v >= 0.0 && v <= 1.0)) {
                throw LoadError(what + " similarity value " + std::to_string(v) + " outside [0,1] at " + coord(i, j));
            }
            if (j > i && std::abs(v - s(j, i)) > kSymmetryTolerance) {
                throw LoadError(what + " similarity is asymmetric at " + coord(i, j) + ": " + std::to_string(v) +
                                " vs " + std::to_string(s(j, i)));
            }
        }
    }
}

}  // namespace detail

/// Validates and assembles a dataset. Empty id lists get generated ids.
inline Dataset make_dataset(Tensor association, Tensor drug_similarity, Tensor disease_similarity,
                            std::vector<std::string> drug_ids = {}, std::vector<std::string> disease_ids = {}) {
    if (association.rank() != 2) throw LoadError("association must be a matrix");
    const std::size_t nu = association.rows(), nv = association.cols();
    for (std::size_t i = 0; i < nu; ++i) {
        for (std::size_t j = 0; j < nv; ++j) {
            const double v = association(i, j);
            if (v != 0.0 && v != 1.0) {
                throw LoadError("association value " + std::to_string(v) + " is not binary at " + detail::coord(i, j));
            }
        }
    }
    detail::validate_similarity(drug_similarity, nu, "drug");
    detail::validate_similarity(disease_similarity, nv, "disease");
    if (drug_ids.empty()) drug_ids = detail::default_ids("drug", nu);
    if (disease_ids.empty()) disease_ids = detail::default_ids("disease", nv);
    if (drug_ids.size() != nu) {
        throw LoadError("drug id list has " + std::to_string(drug_ids.size()) + " entries, association has " +
                        std::to_string(nu) + " rows");
    }
    if (disease_ids.size() != nv) {
        throw LoadError("disease id list has " + std::to_string(disease_ids.size()) + " entries, association has " +
                        std::to_string(nv) + " columns");
    }
    Dataset d{std::move(association), std::move(drug_similarity), std::move(disease_similarity), std::move(drug_ids),
              std::move(disease_ids), {}};
    if (d.positives() == 0) d.warnings.push_back("association matrix has no positive entries");
    return d;
}

/// Reads a numeric text matrix: one row per line, whitespace- or comma-separated.
inline Tensor read_matrix(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open matrix file '" + path.string() + "'");
    std::vector<double> values;
    std::size_t cols = 0, rows = 0, lineno = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++lineno;
        for (char& c : line)
            if (c == ',' || c == '\t' || c == ';') c = ' ';
        std::istringstream ls(line);
        std::string tok;
        std::size_t n = 0;
        while (ls >> tok) {
            char* end = nullptr;
            const double v = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0') {
                throw LoadError(path.string() + ": unparsable value '" + tok + "' at " + detail::coord(rows, n));
            }
            values.push_back(v);
            ++n;
        }
        if (n == 0) continue;
        if (rows == 0) cols = n;
        else if (n != cols) {
            throw LoadError(path.string() + ": ragged row " + std::to_string(rows) + " (line " + std::to_string(lineno) +
                            ") has " + std::to_string(n) + " values, expected " + std::to_string(cols));
        }
        ++rows;
    }
    if (rows == 0) throw LoadError(path.string() + ": empty matrix file");
    return Tensor(Shape{rows, cols}, std::move(values));
}

inline std::vector<std::string> read_ids(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open id file '" + path.string() + "'");
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        auto t = trim(line);
        if (!t.empty()) ids.push_back(std::move(t));
    }
    return ids;
}

inline void write_matrix(const std::filesystem::path& path, const Tensor& m) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write '" + path.string() + "'");
    out << std::setprecision(17);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << m(i, j);
        }
        out << '\n';
    }
}

inline void write_ids(const std::filesystem::path& path, const std::vector<std::string>& ids) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write '" + path.string() + "'");
    for (const auto& id : ids) out << id << '\n';
}

struct DatasetPaths {
    std::filesystem::path association;
    std::filesystem::path drug_similarity;
    std::filesystem::path disease_similarity;
    std::filesystem::path drug_ids;     // optional
    std::filesystem::path disease_ids;  // optional
};

inline Dataset load_dataset(const DatasetPaths& paths) {
    auto a = read_matrix(paths.association);
    auto su = read_matrix(paths.drug_similarity);
    auto sv = read_matrix(paths.disease_similarity);
    std::vector<std::string> du, dv;
    if (!paths.drug_ids.empty()) du = read_ids(paths.drug_ids);
    if (!paths.disease_ids.empty()) dv = read_ids(paths.disease_ids);
    try {
        return make_dataset(std::move(a), std::move(su), std::move(sv), std::move(du), std::move(dv));
    } catch (const LoadError& e) {
        throw LoadError(paths.association.parent_path().string() + ": " + e.what());
    }
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
    std::filesystem::create_directories(dir);
    write_matrix(dir / "association.txt", d.association);
    write_matrix(dir / "drug_similarity.txt", d.drug_similarity);
    write_matrix(dir / "disease_similarity.txt", d.disease_similarity);
    write_ids(dir / "drug_ids.txt", d.drug_ids);
    write_ids(dir / "disease_ids.txt", d.disease_ids);
}

inline std::string describe(const Dataset& d) {
    std::ostringstream os;
    os << "drugs=" << d.drugs() << " diseases=" << d.diseases() << " associations=" << d.positives()
       << " sparsity=" << std::fixed << std::setprecision(4) << d.sparsity();
    return os.str();
}

}  // namespace bibldr::data
