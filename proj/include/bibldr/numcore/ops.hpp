#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bibldr/numcore/kernels.hpp"
#include "bibldr/numcore/tape.hpp"
#include "bibldr/numcore/tensor.hpp"

namespace bibldr::numcore {

enum class Activation { none, relu };

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
    if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

inline void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

/// C = A * B for A [m x k] and B [k x n].
inline Var matmul(Var a, Var b) {
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix(av, "matmul");
    detail::require_matrix(bv, "matmul");
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k) {
        throw DimensionError("matmul inner extents differ: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    }
    Tensor out(Shape{m, n});
    kernels::gemm_acc(av.data(), bv.data(), out.data(), m, k, n);
    Tape& tape = *a.tape;
    const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
    return tape.record(std::move(out), ng, [ai = a.id, bi = b.id, m, k, n](Tape& t, const Tensor& g) {
        if (t.needs_grad(ai)) kernels::gemm_nt_acc(g.data(), t.value(bi).data(), t.grad(ai).data(), m, n, k);
        if (t.needs_grad(bi)) kernels::gemm_tn_acc(t.value(ai).data(), g.data(), t.grad(bi).data(), m, k, n);
    });
}

/// Elementwise sum of equally shaped tensors.
inline Var add(Var a, Var b) {
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape() != bv.shape()) {
        throw DimensionError("add shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Tensor out = av;
    detail::accumulate(out, bv);
    Tape& tape = *a.tape;
    const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
    return tape.record(std::move(out), ng, [ai = a.id, bi = b.id](Tape& t, const Tensor& g) {
        if (t.needs_grad(ai)) detail::accumulate(t.grad(ai), g);
        if (t.needs_grad(bi)) detail::accumulate(t.grad(bi), g);
    });
}

/// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
    detail::require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.shape() != bv.shape()) {
        throw DimensionError("mul shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    Tape& tape = *a.tape;
    const bool ng = tape.needs_grad(a.id) || tape.needs_grad(b.id);
    return tape.record(std::move(out), ng, [ai = a.id, bi = b.id](Tape& t, const Tensor& g) {
        if (t.needs_grad(ai)) {
            Tensor& ga = t.grad(ai);
            const Tensor& bv = t.value(bi);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.needs_grad(bi)) {
            Tensor& gb = t.grad(bi);
            const Tensor& av = t.value(ai);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

/// Sum of all elements as a scalar.
inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    Tape& tape = *x.tape;
    return tape.record(Tensor::scalar(s), tape.needs_grad(x.id), [xi = x.id](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(xi);
        for (auto& v : gx.values()) v += g[0];
    });
}

/// Multiplies every element by a constant.
inline Var scale(Var x, double factor) {
    Tensor out = x.value();
    for (auto& v : out.values()) v *= factor;
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id), [xi = x.id, factor](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(xi);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * factor;
    });
}

inline Var relu(Var x) {
    Tensor out = x.value();
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id), [xi = x.id](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(xi);
        const Tensor& xv = t.value(xi);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

/// Adds a bias vector of extent cols to every row.
inline Var add_bias(Var x, Var bias) {
    detail::require_same_tape(x, bias);
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (bv.numel() != c) {
        throw DimensionError("bias of shape " + shape_str(bv.shape()) + " does not broadcast over " + shape_str(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) += bv[j];
    Tape& tape = *x.tape;
    const bool ng = tape.needs_grad(x.id) || tape.needs_grad(bias.id);
    return tape.record(std::move(out), ng, [xi = x.id, bi = bias.id, r, c](Tape& t, const Tensor& g) {
        if (t.needs_grad(xi)) detail::accumulate(t.grad(xi), g);
        if (t.needs_grad(bi)) {
            Tensor& gb = t.grad(bi);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g(i, j);
        }
    });
}

/// X W + b (broadcast over rows), optionally followed by relu.
inline Var affine(Var x, Var w, Var b, Activation act = Activation::none) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() || b.value().numel() != wv.cols()) {
        throw DimensionError("affine shape mismatch: X " + shape_str(xv.shape()) + ", W " + shape_str(wv.shape()) +
                             ", b " + shape_str(b.value().shape()));
    }
    Var y = add_bias(matmul(x, w), b);
    return act == Activation::relu ? relu(y) : y;
}

/// Row-wise softmax. -inf entries act as masks and map to exactly 0.
inline Var softmax_rows(Var m) {
    const Tensor& mv = m.value();
    const std::size_t r = mv.rows(), c = mv.cols();
    Tensor out(mv.shape());
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, mv(i, j));
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw MaskingError("softmax row " + std::to_string(i) + " is fully masked");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = mv(i, j) == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(mv(i, j) - mx);
            out(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
    }
    Tape& tape = *m.tape;
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), tape.needs_grad(m.id), [mi = m.id, out_id, r, c](Tape& t, const Tensor& g) {
        const Tensor& p = t.value(out_id);
        Tensor& gm = t.grad(mi);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * p(i, j);
            for (std::size_t j = 0; j < c; ++j) gm(i, j) += p(i, j) * (g(i, j) - dot);
        }
    });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of nothing");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_same_tape(parts[0], p);
        if (p.rows() != r) {
            throw DimensionError("concat_cols row mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        total += p.cols();
    }
    Tensor out(Shape{r, total});
    std::vector<std::size_t> ids, widths;
    bool ng = false;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const Tensor& pv = p.value();
        const std::size_t w = pv.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(pv.data() + i * w, w, out.data() + i * total + off);
        off += w;
        ids.push_back(p.id);
        widths.push_back(w);
        ng = ng || p.tape->needs_grad(p.id);
    }
    Tape& tape = *parts[0].tape;
    return tape.record(std::move(out), ng, [ids, widths, r, total](Tape& t, const Tensor& g) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t w = widths[k];
            if (t.needs_grad(ids[k])) {
                Tensor& gp = t.grad(ids[k]);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + o + j];
            }
            o += w;
        }
    });
}

/// Vertical concatenation of matrices with equal column counts.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows of nothing");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        detail::require_same_tape(parts[0], p);
        if (p.cols() != c) {
            throw DimensionError("concat_rows column mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        }
        total += p.rows();
        ng = ng || p.tape->needs_grad(p.id);
    }
    Tensor out(Shape{total, c});
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const Tensor& pv = p.value();
        std::copy(pv.values().begin(), pv.values().end(), out.data() + off * c);
        ids.push_back(p.id);
        offsets.push_back(off * c);
        off += pv.rows();
    }
    Tape& tape = *parts[0].tape;
    return tape.record(std::move(out), ng, [ids, offsets](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.needs_grad(ids[k])) continue;
            Tensor& gp = t.grad(ids[k]);
            for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] += g[offsets[k] + i];
        }
    });
}

/// Row lookup (embedding gather); gradients scatter-add back.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
    const Tensor& tv = table.value();
    const std::size_t n = tv.rows(), c = tv.cols();
    if (index.empty()) throw ContractError("gather_rows with no indices");
    Tensor out(Shape{index.size(), c});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) {
            throw RangeError("gather_rows index " + std::to_string(index[i]) + " out of range for " + shape_str(tv.shape()));
        }
        std::copy_n(tv.data() + index[i] * c, c, out.data() + i * c);
    }
    Tape& tape = *table.tape;
    return tape.record(std::move(out), tape.needs_grad(table.id),
                       [ti = table.id, index = std::move(index), c](Tape& t, const Tensor& g) {
                           Tensor& gt = t.grad(ti);
                           for (std::size_t i = 0; i < index.size(); ++i)
                               for (std::size_t j = 0; j < c; ++j) gt[index[i] * c + j] += g[i * c + j];
                       });
}

/// Multiplies row i by factors[i].
inline Var scale_rows(Var x, std::vector<double> factors) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (factors.size() != r) {
        throw DimensionError("scale_rows needs " + std::to_string(r) + " factors, got " + std::to_string(factors.size()));
    }
    Tensor out = xv;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) *= factors[i];
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id),
                       [xi = x.id, factors = std::move(factors), r, c](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad(xi);
                           for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gx(i, j) += g(i, j) * factors[i];
                       });
}

/// Writes literal zeros into rows whose flag is false; those rows pass no gradient.
inline Var mask_rows(Var x, std::vector<bool> valid) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (valid.size() != r) throw DimensionError("mask_rows needs one flag per row");
    Tensor out = xv;
    for (std::size_t i = 0; i < r; ++i)
        if (!valid[i])
            for (std::size_t j = 0; j < c; ++j) out(i, j) = 0.0;
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id),
                       [xi = x.id, valid = std::move(valid), r, c](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad(xi);
                           for (std::size_t i = 0; i < r; ++i)
                               if (valid[i])
                                   for (std::size_t j = 0; j < c; ++j) gx(i, j) += g(i, j);
                       });
}

inline Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id), [xi = x.id](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad(xi);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
}

/// Mean over the valid rows of each consecutive block of seq_len rows.
/// Blocks with no valid row produce a zero row.
inline Var masked_segment_mean(Var x, std::size_t seq_len, std::vector<bool> valid) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), c = xv.cols();
    if (seq_len == 0 || r % seq_len != 0 || valid.size() != r) {
        throw DimensionError("masked_segment_mean: " + shape_str(xv.shape()) + " not divisible into blocks of " +
                             std::to_string(seq_len));
    }
    const std::size_t blocks = r / seq_len;
    Tensor out(Shape{blocks, c});
    std::vector<double> inv(blocks, 0.0);
    for (std::size_t b = 0; b < blocks; ++b) {
        std::size_t cnt = 0;
        for (std::size_t s = 0; s < seq_len; ++s) {
            const std::size_t i = b * seq_len + s;
            if (!valid[i]) continue;
            ++cnt;
            for (std::size_t j = 0; j < c; ++j) out(b, j) += xv(i, j);
        }
        if (cnt) {
            inv[b] = 1.0 / static_cast<double>(cnt);
            for (std::size_t j = 0; j < c; ++j) out(b, j) *= inv[b];
        }
    }
    Tape& tape = *x.tape;
    return tape.record(std::move(out), tape.needs_grad(x.id),
                       [xi = x.id, valid = std::move(valid), inv = std::move(inv), seq_len, c](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad(xi);
                           for (std::size_t i = 0; i < valid.size(); ++i) {
                               if (!valid[i]) continue;
                               const std::size_t b = i / seq_len;
                               for (std::size_t j = 0; j < c; ++j) gx(i, j) += g(b, j) * inv[b];
                           }
                       });
}

/// Mean binary cross-entropy on raw logits, in the log-sum-exp form.
inline Var bce_with_logits(Var logits, const Tensor& labels) {
    const Tensor& lv = logits.value();
    const std::size_t n = lv.numel();
    if (labels.numel() != n) {
        throw DimensionError("bce_with_logits: " + std::to_string(n) + " logits vs " + std::to_string(labels.numel()) +
                             " labels");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != 0.0 && labels[i] != 1.0) {
            throw ValidationError("bce_with_logits: label " + std::to_string(labels[i]) + " at position " +
                                  std::to_string(i) + " is not binary");
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = lv[i];
        // -[y log s(x) + (1-y) log(1-s(x))] = max(x,0) - x y + log(1 + e^{-|x|})
        total += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
    }
    Tape& tape = *logits.tape;
    return tape.record(Tensor::scalar(total / static_cast<double>(n)), tape.needs_grad(logits.id),
                       [li = logits.id, labels, n](Tape& t, const Tensor& g) {
                           const Tensor& lv = t.value(li);
                           Tensor& gl = t.grad(li);
                           for (std::size_t i = 0; i < n; ++i) {
                               const double x = lv[i];
                               const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                               gl[i] += g[0] * (s - labels[i]) / static_cast<double>(n);
                           }
                       });
}

enum class BatchNormMode { train, inference };

/// Running statistics and hyperparameters of one batch-norm layer.
struct BatchNormStats {
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-column batch normalisation over rows, scaled by gamma and shifted by beta.
///
/// With a row mask, masked rows are excluded from the statistics and come out
/// as exact zeros. Train mode updates the running statistics in place
/// (running_var takes the unbiased batch variance).
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats stats, BatchNormMode mode,
                      const std::vector<bool>* row_valid = nullptr) {
    const Tensor& xv = x.value();
    const std::size_t r = xv.rows(), d = xv.cols();
    if (gamma.value().numel() != d || beta.value().numel() != d) {
        throw DimensionError("batch_norm: gamma/beta extent must equal " + std::to_string(d));
    }
    if (row_valid && row_valid->size() != r) throw DimensionError("batch_norm: mask length differs from row count");
    auto valid = [&](std::size_t i) { return !row_valid || (*row_valid)[i]; };
    std::size_t count = 0;
    for (std::size_t i = 0; i < r; ++i) count += valid(i) ? 1 : 0;

    std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
    if (mode == BatchNormMode::train) {
        if (count < 2) {
            throw BatchSizeError("batch_norm in train mode needs at least 2 rows, got " + std::to_string(count));
        }
        std::vector<double> var(d, 0.0);
        for (std::size_t i = 0; i < r; ++i)
            if (valid(i))
                for (std::size_t j = 0; j < d; ++j) mean[j] += xv(i, j);
        for (auto& m : mean) m /= static_cast<double>(count);
        for (std::size_t i = 0; i < r; ++i)
            if (valid(i))
                for (std::size_t j = 0; j < d; ++j) {
                    const double z = xv(i, j) - mean[j];
                    var[j] += z * z;
                }
        for (std::size_t j = 0; j < d; ++j) {
            var[j] /= static_cast<double>(count);
            inv_std[j] = 1.0 / std::sqrt(var[j] + stats.eps);
        }
        if (stats.running_mean && stats.running_var) {
            const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
            for (std::size_t j = 0; j < d; ++j) {
                (*stats.running_mean)[j] = (1.0 - stats.momentum) * (*stats.running_mean)[j] + stats.momentum * mean[j];
                (*stats.running_var)[j] =
                    (1.0 - stats.momentum) * (*stats.running_var)[j] + stats.momentum * var[j] * unbias;
            }
        }
    } else {
        if (!stats.running_mean || !stats.running_var) {
            throw ContractError("batch_norm inference mode needs running statistics");
        }
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] = (*stats.running_mean)[j];
            inv_std[j] = 1.0 / std::sqrt((*stats.running_var)[j] + stats.eps);
        }
    }

    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < r; ++i) {
        if (!valid(i)) continue;
        for (std::size_t j = 0; j < d; ++j) {
            xhat(i, j) = (xv(i, j) - mean[j]) * inv_std[j];
            out(i, j) = gv[j] * xhat(i, j) + bv[j];
        }
    }

    std::vector<bool> mask = row_valid ? *row_valid : std::vector<bool>(r, true);
    Tape& tape = *x.tape;
    const bool ng = tape.needs_grad(x.id) || tape.needs_grad(gamma.id) || tape.needs_grad(beta.id);
    const bool batch_stats = mode == BatchNormMode::train;
    return tape.record(
        std::move(out), ng,
        [xi = x.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std),
         mask = std::move(mask), count, r, d, batch_stats](Tape& t, const Tensor& g) {
            const Tensor& gv = t.value(gi);
            std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                if (!mask[i]) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    sum_g[j] += g(i, j);
                    sum_gx[j] += g(i, j) * xhat(i, j);
                }
            }
            if (t.needs_grad(gi)) {
                Tensor& gg = t.grad(gi);
                for (std::size_t j = 0; j < d; ++j) gg[j] += sum_gx[j];
            }
            if (t.needs_grad(bi)) {
                Tensor& gb = t.grad(bi);
                for (std::size_t j = 0; j < d; ++j) gb[j] += sum_g[j];
            }
            if (t.needs_grad(xi)) {
                Tensor& gx = t.grad(xi);
                const double nc = static_cast<double>(count);
                for (std::size_t i = 0; i < r; ++i) {
                    if (!mask[i]) continue;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double scale = gv[j] * inv_std[j];
                        if (batch_stats) {
                            gx(i, j) += scale * (g(i, j) - sum_g[j] / nc - xhat(i, j) * sum_gx[j] / nc);
                        } else {
                            gx(i, j) += scale * g(i, j);
                        }
                    }
                }
            }
        });
}

/// Multi-head scaled dot-product self-attention over packed sequences.
///
/// q, k, v are [B*L x d]; head h uses columns [h*d/heads, (h+1)*d/heads).
/// Keys whose row flag is false get -inf logits. A sequence with no valid
/// key yields zero output rows. Optionally returns the attention weights,
/// laid out as [B*heads*L x L].
inline Var multihead_attention(Var q, Var k, Var v, std::size_t heads, std::size_t seq_len,
                               const std::vector<bool>& key_valid, Tensor* weights_out = nullptr) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t rows = qv.rows(), d = qv.cols();
    if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
        throw DimensionError("attention operands differ in shape: " + shape_str(qv.shape()) + ", " +
                             shape_str(kv.shape()) + ", " + shape_str(vv.shape()));
    }
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    }
    if (seq_len == 0 || rows % seq_len != 0 || key_valid.size() != rows) {
        throw DimensionError("attention rows " + std::to_string(rows) + " do not pack into sequences of " +
                             std::to_string(seq_len));
    }
    const std::size_t batch = rows / seq_len;
    const std::size_t dk = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

    // probs[((b*heads + h)*L + i)*L + j]
    std::vector<double> probs(batch * heads * seq_len * seq_len, 0.0);
    Tensor out(Shape{rows, d});
    std::vector<double> logit(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * seq_len;
        bool any = false;
        for (std::size_t j = 0; j < seq_len; ++j) any = any || key_valid[base + j];
        if (!any) continue;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dk;
            for (std::size_t i = 0; i < seq_len; ++i) {
                const double* qi = qv.data() + (base + i) * d + c0;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_valid[base + j]) continue;
                    const double* kj = kv.data() + (base + j) * d + c0;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
                    logit[j] = s * inv_sqrt;
                    mx = std::max(mx, logit[j]);
                }
                double* p = probs.data() + ((b * heads + h) * seq_len + i) * seq_len;
                double z = 0.0;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_valid[base + j]) continue;
                    p[j] = std::exp(logit[j] - mx);
                    z += p[j];
                }
                double* oi = out.data() + (base + i) * d + c0;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (!key_valid[base + j]) continue;
                    p[j] /= z;
                    const double* vj = vv.data() + (base + j) * d + c0;
                    for (std::size_t c = 0; c < dk; ++c) oi[c] += p[j] * vj[c];
                }
            }
        }
    }
    if (weights_out) *weights_out = Tensor(Shape{batch * heads * seq_len, seq_len}, probs);

    Tape& tape = *q.tape;
    const bool ng = tape.needs_grad(q.id) || tape.needs_grad(k.id) || tape.needs_grad(v.id);
    return tape.record(
        std::move(out), ng,
        [qi_ = q.id, ki_ = k.id, vi_ = v.id, probs = std::move(probs), key_valid, heads, seq_len, batch, d, dk,
         inv_sqrt](Tape& t, const Tensor& g) {
            const Tensor& qv = t.value(qi_);
            const Tensor& kv = t.value(ki_);
            const Tensor& vv = t.value(vi_);
            Tensor* gq = t.needs_grad(qi_) ? &t.grad(qi_) : nullptr;
            Tensor* gk = t.needs_grad(ki_) ? &t.grad(ki_) : nullptr;
            Tensor* gv = t.needs_grad(vi_) ? &t.grad(vi_) : nullptr;
            std::vector<double> dp(seq_len);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t base = b * seq_len;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dk;
                    for (std::size_t i = 0; i < seq_len; ++i) {
                        const double* p = probs.data() + ((b * heads + h) * seq_len + i) * seq_len;
                        const double* gi = g.data() + (base + i) * d + c0;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (!key_valid[base + j]) continue;
                            const double* vj = vv.data() + (base + j) * d + c0;
                            double s = 0.0;
                            for (std::size_t c = 0; c < dk; ++c) s += gi[c] * vj[c];
                            dp[j] = s;
                            dot += s * p[j];
                            if (gv) {
                                double* gvj = gv->data() + (base + j) * d + c0;
                                for (std::size_t c = 0; c < dk; ++c) gvj[c] += p[j] * gi[c];
                            }
                        }
                        const double* qrow = qv.data() + (base + i) * d + c0;
                        for (std::size_t j = 0; j < seq_len; ++j) {
                            if (!key_valid[base + j]) continue;
                            const double dz = p[j] * (dp[j] - dot) * inv_sqrt;
                            if (dz == 0.0) continue;
                            const double* krow = kv.data() + (base + j) * d + c0;
                            if (gq) {
                                double* gqi = gq->data() + (base + i) * d + c0;
                                for (std::size_t c = 0; c < dk; ++c) gqi[c] += dz * krow[c];
                            }
                            if (gk) {
                                double* gkj = gk->data() + (base + j) * d + c0;
                                for (std::size_t c = 0; c < dk; ++c) gkj[c] += dz * qrow[c];
                            }
                        }
                    }
                }
            }
        });
}

/// Cosine similarity of row pairs of P. With guard > 0, norms below guard
/// are bumped by guard; with guard == 0 a zero norm is an error.
inline Var pair_cosine(Var prototypes, const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double guard) {
    const Tensor& pv = prototypes.value();
    const std::size_t n = pv.rows(), d = pv.cols();
    if (pairs.empty()) throw ContractError("pair_cosine needs at least one pair");
    std::vector<double> norm(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += pv(i, c) * pv(i, c);
        norm[i] = std::sqrt(s);
        if (norm[i] < guard) norm[i] += guard;
    }
    Tensor out(Shape{pairs.size()});
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [i, j] = pairs[p];
        if (i >= n || j >= n) throw RangeError("pair index out of range");
        if (norm[i] == 0.0 || norm[j] == 0.0) {
            throw DegeneratePrototypeError("zero-norm prototype in pair (" + std::to_string(i) + ", " +
                                           std::to_string(j) + ")");
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += pv(i, c) * pv(j, c);
        out[p] = dot / (norm[i] * norm[j]);
    }
    Tape& tape = *prototypes.tape;
    const std::size_t out_id = tape.size();
    return tape.record(std::move(out), tape.needs_grad(prototypes.id),
                       [pi = prototypes.id, pairs, norm = std::move(norm), d, out_id](Tape& t, const Tensor& g) {
                           const Tensor& pv = t.value(pi);
                           const Tensor& cosv = t.value(out_id);
                           Tensor& gp = t.grad(pi);
                           for (std::size_t p = 0; p < pairs.size(); ++p) {
                               const auto [i, j] = pairs[p];
                               const double gp_ = g[p];
                               if (gp_ == 0.0) continue;
                               const double c = cosv[p];
                               // d cos / d p_i = p_j/(|p_i||p_j|) - cos * p_i/|p_i|^2
                               // (exact when no guard is active; the guard branch treats the bump as constant)
                               const double a = 1.0 / (norm[i] * norm[j]);
                               const double bi = c / (norm[i] * norm[i]);
                               const double bj = c / (norm[j] * norm[j]);
                               for (std::size_t k = 0; k < d; ++k) {
                                   const double xi = pv(i, k), xj = pv(j, k);
                                   gp(i, k) += gp_ * (xj * a - xi * bi);
                                   gp(j, k) += gp_ * (xi * a - xj * bj);
                               }
                           }
                       });
}

/// Sum of squared differences between pred and a constant target.
inline Var squared_error_sum(Var pred, const Tensor& target) {
    const Tensor& pv = pred.value();
    if (pv.numel() != target.numel()) throw DimensionError("squared_error_sum extent mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < pv.numel(); ++i) {
        const double e = pv[i] - target[i];
        s += e * e;
    }
    Tape& tape = *pred.tape;
    return tape.record(Tensor::scalar(s), tape.needs_grad(pred.id), [xi = pred.id, target](Tape& t, const Tensor& g) {
        const Tensor& pv = t.value(xi);
        Tensor& gx = t.grad(xi);
        for (std::size_t i = 0; i < pv.numel(); ++i) gx[i] += g[0] * 2.0 * (pv[i] - target[i]);
    });
}

}  // namespace bibldr::numcore
