#include "libra/num/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "libra/error.hpp"

namespace libra::num {

namespace {

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ContractViolation(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ContractViolation(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                                to_string(b.shape()));
}

template <class F>
Tensor unary(const char* op, const Tensor& a, F&& f, BackwardFn bw) {
    std::vector<double> out(a.size());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return make_result(op, a.shape(), std::move(out), {a}, std::move(bw));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ContractViolation("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
    std::vector<double> c(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return make_result("matmul", {m, n}, std::move(c), {a, b},
                       [m, k, n](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                           const double* A = self.inputs[0]->value.data();
                           const double* B = self.inputs[1]->value.data();
                           if (!gi[0].empty()) {
                               // Same per-element summation order as a j-ascending dot product,
                               // laid out so the inner loop runs over p.
                               double* dA = gi[0].data();
                               std::vector<double> bt(n * k);
                               for (std::size_t p = 0; p < k; ++p)
                                   for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
                               std::vector<double> acc(k);
                               for (std::size_t i = 0; i < m; ++i) {
                                   std::fill(acc.begin(), acc.end(), 0.0);
                                   const double* grow = g.data() + i * n;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double gv = grow[j];
                                       const double* brow = bt.data() + j * k;
                                       for (std::size_t p = 0; p < k; ++p) acc[p] += gv * brow[p];
                                   }
                                   double* drow = dA + i * k;
                                   for (std::size_t p = 0; p < k; ++p) drow[p] += acc[p];
                               }
                           }
                           if (!gi[1].empty()) {
                               double* dB = gi[1].data();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       const double av = A[i * k + p];
                                       const double* grow = g.data() + i * n;
                                       double* drow = dB + p * n;
                                       for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                                   }
                           }
                       });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw ContractViolation("matmul_nt: inner dimensions differ " + to_string(a.shape()) + " x " +
                                to_string(b.shape()) + "^T");
    std::vector<double> c(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = bt.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return make_result("matmul_nt", {m, n}, std::move(c), {a, b},
                       [m, k, n](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                           const double* A = self.inputs[0]->value.data();
                           const double* B = self.inputs[1]->value.data();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gv = g[i * n + j];
                                   if (gv == 0.0) continue;
                                   if (!gi[0].empty())
                                       for (std::size_t p = 0; p < k; ++p) gi[0][i * k + p] += gv * B[j * k + p];
                                   if (!gi[1].empty())
                                       for (std::size_t p = 0; p < k; ++p) gi[1][j * k + p] += gv * A[i * k + p];
                               }
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result("add", a.shape(), std::move(out), {a, b},
                       [](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (auto& d : gi)
                               if (!d.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result("sub", a.shape(), std::move(out), {a, b},
                       [](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           if (!gi[0].empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           if (!gi[1].empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result("mul", a.shape(), std::move(out), {a, b},
                       [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                           const auto& x = self.inputs[0]->value;
                           const auto& y = self.inputs[1]->value;
                           if (!gi[0].empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
                           if (!gi[1].empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * x[i];
                       });
}

Tensor scale(const Tensor& a, double s) {
    return unary("scale", a, [s](double x) { return x * s; },
                 [s](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
                 });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
    require_rank2(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (row.size() != n)
        throw ContractViolation("add_row: row of shape " + to_string(row.shape()) + " cannot broadcast over " +
                                to_string(a.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + row[j];
    return make_result("add_row", a.shape(), std::move(out), {a, row},
                       [m, n](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           if (!gi[0].empty())
                               for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           if (!gi[1].empty())
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gi[1][j] += g[i * n + j];
                       });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::vector<std::size_t> widths;
    std::size_t n = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m)
            throw ContractViolation("concat_cols: row counts differ " + to_string(parts[0].shape()) + " vs " +
                                    to_string(p.shape()));
        widths.push_back(p.cols());
        n += p.cols();
    }
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < parts.size(); ++t) {
            const auto src = parts[t].data().subspan(i * widths[t], widths[t]);
            std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n + off));
            off += widths[t];
        }
    }
    return make_result("concat_cols", {m, n}, std::move(out), parts,
                       [m, n, widths](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           std::size_t off = 0;
                           for (std::size_t t = 0; t < widths.size(); ++t) {
                               if (!gi[t].empty())
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < widths[t]; ++j)
                                           gi[t][i * widths[t] + j] += g[i * n + off + j];
                               off += widths[t];
                           }
                       });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
    require_rank2(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (start + width > n)
        throw ContractViolation("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + width) +
                                ") out of range for " + to_string(a.shape()));
    std::vector<double> out(m * width);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < width; ++j) out[i * width + j] = a[i * n + start + j];
    return make_result("slice_cols", {m, width}, std::move(out), {a},
                       [m, n, start, width](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < width; ++j) gi[0][i * n + start + j] += g[i * width + j];
                       });
}

std::vector<Tensor> split_cols(const Tensor& a, std::span<const std::size_t> widths) {
    std::size_t total = 0;
    for (auto w : widths) total += w;
    if (total != a.cols())
        throw ContractViolation("split_cols: widths sum to " + std::to_string(total) + " but tensor has shape " +
                                to_string(a.shape()));
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (auto w : widths) {
        out.push_back(slice_cols(a, off, w));
        off += w;
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractViolation("concat_rows: no inputs");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != n)
            throw ContractViolation("concat_rows: column counts differ " + to_string(parts[0].shape()) + " vs " +
                                    to_string(p.shape()));
        m += p.rows();
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return make_result("concat_rows", {m, n}, std::move(out), parts,
                       [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                           std::size_t off = 0;
                           for (std::size_t t = 0; t < gi.size(); ++t) {
                               const std::size_t len = self.inputs[t]->value.size();
                               if (!gi[t].empty())
                                   for (std::size_t i = 0; i < len; ++i) gi[t][i] += g[off + i];
                               off += len;
                           }
                       });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    require_rank2(a, "slice_rows");
    const std::size_t n = a.cols();
    if (start + count > a.rows())
        throw ContractViolation("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                ") out of range for " + to_string(a.shape()));
    const auto src = a.data().subspan(start * n, count * n);
    return make_result("slice_rows", {count, n}, std::vector<double>(src.begin(), src.end()), {a},
                       [start, n](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < g.size(); ++i) gi[0][start * n + i] += g[i];
                       });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_rank2(table, "gather_rows");
    const std::size_t n = table.cols(), rows = table.rows();
    std::vector<double> out(ids.size() * n);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= rows)
            throw ContractViolation("gather_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                                    to_string(table.shape()));
        const auto src = table.data().subspan(ids[i] * n, n);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return make_result("gather_rows", {ids.size(), n}, std::move(out), {table},
                       [idx = std::move(idx), n](const Node&, std::span<const double> g,
                                                 std::span<const std::span<double>> gi) {
                           for (std::size_t i = 0; i < idx.size(); ++i)
                               for (std::size_t j = 0; j < n; ++j) gi[0][idx[i] * n + j] += g[i * n + j];
                       });
}

Tensor merge_rows(const Tensor& a, const Tensor& b, std::span<const bool> take_a) {
    require_rank2(a, "merge_rows");
    require_rank2(b, "merge_rows");
    const std::size_t count_a = static_cast<std::size_t>(std::count(take_a.begin(), take_a.end(), true));
    if (count_a != a.rows() || take_a.size() - count_a != b.rows() || (a.rows() && b.rows() && a.cols() != b.cols()))
        throw ContractViolation("merge_rows: mask selects " + std::to_string(count_a) + "/" +
                                std::to_string(take_a.size() - count_a) + " rows but got " + to_string(a.shape()) +
                                " and " + to_string(b.shape()));
    const std::size_t n = a.rows() ? a.cols() : b.cols();
    std::vector<double> out(take_a.size() * n);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < take_a.size(); ++i) {
        const auto src = take_a[i] ? a.data().subspan(ia++ * n, n) : b.data().subspan(ib++ * n, n);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<bool> mask(take_a.begin(), take_a.end());
    return make_result("merge_rows", {take_a.size(), n}, std::move(out), {a, b},
                       [mask = std::move(mask), n](const Node&, std::span<const double> g,
                                                   std::span<const std::span<double>> gi) {
                           std::size_t ia = 0, ib = 0;
                           for (std::size_t i = 0; i < mask.size(); ++i) {
                               const std::size_t t = mask[i] ? 0 : 1;
                               const std::size_t r = mask[i] ? ia++ : ib++;
                               if (!gi[t].empty())
                                   for (std::size_t j = 0; j < n; ++j) gi[t][r * n + j] += g[i * n + j];
                           }
                       });
}

Tensor tril_mask(const Tensor& scores) {
    require_rank2(scores, "tril_mask");
    const std::size_t m = scores.rows(), n = scores.cols();
    std::vector<double> out(scores.data().begin(), scores.data().end());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = -std::numeric_limits<double>::infinity();
    return make_result(
        "tril_mask", scores.shape(), std::move(out), {scores},
        [m, n](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j <= i && j < n; ++j) gi[0][i * n + j] += g[i * n + j];
        },
        /*allow_neg_inf=*/true);
}

Tensor softmax_rows(const Tensor& a) {
    require_rank2(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double* y = out.data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::isinf(x[j]) ? 0.0 : std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return make_result("softmax_rows", a.shape(), std::move(out), {a},
                       [m, n](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                           const auto& y = self.value;
                           for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                               for (std::size_t j = 0; j < n; ++j) gi[0][i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                           }
                       });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require_rank2(x, "rms_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n)
        throw ContractViolation("rms_norm: gain of shape " + to_string(gain.shape()) + " does not match " +
                                to_string(x.shape()));
    std::vector<double> out(x.size());
    std::vector<double> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
        inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv[i] * gain[j];
    }
    return make_result("rms_norm", x.shape(), std::move(out), {x, gain},
                       [m, n, inv = std::move(inv)](const Node& self, std::span<const double> g,
                                                    std::span<const std::span<double>> gi) {
                           const auto& X = self.inputs[0]->value;
                           const auto& G = self.inputs[1]->value;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double r = inv[i];
                               if (!gi[1].empty())
                                   for (std::size_t j = 0; j < n; ++j) gi[1][j] += g[i * n + j] * X[i * n + j] * r;
                               if (!gi[0].empty()) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * G[j] * X[i * n + j];
                                   const double c = r * r * r * dot / static_cast<double>(n);
                                   for (std::size_t j = 0; j < n; ++j)
                                       gi[0][i * n + j] += r * G[j] * g[i * n + j] - c * X[i * n + j];
                               }
                           }
                       });
}

Tensor silu(const Tensor& a) {
    return unary("silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                     const auto& X = self.inputs[0]->value;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                         const double s = 1.0 / (1.0 + std::exp(-X[i]));
                         gi[0][i] += g[i] * (s + X[i] * s * (1.0 - s));
                     }
                 });
}

Tensor gelu(const Tensor& a) {
    return unary("gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                 [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                     const auto& X = self.inputs[0]->value;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = X[i];
                         const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                         const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                         gi[0][i] += g[i] * (cdf + x * pdf);
                     }
                 });
}

Tensor sigmoid(const Tensor& a) {
    return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                         const double y = self.value[i];
                         gi[0][i] += g[i] * y * (1.0 - y);
                     }
                 });
}

Tensor binary_entropy(const Tensor& p) {
    static constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
    return unary(
        "binary_entropy", p,
        [](double x) {
            const double q = std::clamp(x, lo, hi);
            return -q * std::log(q) - (1.0 - q) * std::log(1.0 - q);
        },
        [](const Node& self, std::span<const double> g, std::span<const std::span<double>> gi) {
            const auto& P = self.inputs[0]->value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (P[i] <= lo || P[i] >= hi) continue;
                gi[0][i] += g[i] * (std::log(1.0 - P[i]) - std::log(P[i]));
            }
        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
    require_rank2(logits, "cross_entropy");
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m || weights.size() != m)
        throw ContractViolation("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                                std::to_string(weights.size()) + " weights for logits " + to_string(logits.shape()));
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (weights[i] == 0.0) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n)
            throw ContractViolation("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " +
                                    std::to_string(n) + " classes");
        const double* x = logits.data().data() + i * n;
        const double mx = *std::max_element(x, x + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
        total += weights[i] * (mx + std::log(s) - x[targets[i]]);
    }
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return make_result("cross_entropy", {}, {total}, {logits},
                       [m, n, tg = std::move(tg), w = std::move(w)](const Node& self, std::span<const double> g,
                                                                  std::span<const std::span<double>> gi) {
                           const auto& X = self.inputs[0]->value;
                           for (std::size_t i = 0; i < m; ++i) {
                               if (w[i] == 0.0) continue;
                               const double* x = X.data() + i * n;
                               const double mx = *std::max_element(x, x + n);
                               double s = 0.0;
                               for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
                               const double c = g[0] * w[i];
                               for (std::size_t j = 0; j < n; ++j) gi[0][i * n + j] += c * std::exp(x[j] - mx) / s;
                               gi[0][i * n + static_cast<std::size_t>(tg[i])] -= c;
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    std::vector<double> w(targets.size(), targets.empty() ? 0.0 : 1.0 / static_cast<double>(targets.size()));
    return cross_entropy(logits, targets, w);
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result("sum", {}, {s}, {a},
                       [](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (auto& d : gi[0]) d += g[0];
                       });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractViolation("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor col_mean(const Tensor& a) {
    require_rank2(a, "col_mean");
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ContractViolation("col_mean of a tensor with no rows");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
    for (auto& v : out) v /= static_cast<double>(m);
    return make_result("col_mean", {1, n}, std::move(out), {a},
                       [m, n](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           const double inv = 1.0 / static_cast<double>(m);
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gi[0][i * n + j] += g[j] * inv;
                       });
}

namespace {

struct RopeTable {
    double theta = 0.0;
    std::size_t dh = 0;
    std::size_t positions = 0;
    std::vector<double> cos, sin;
};

// Per-thread cache of cos/sin rows, position-major, dh/2 entries per row.
const RopeTable& rope_table(double theta, std::size_t dh, std::size_t positions) {
    thread_local std::vector<RopeTable> tables;
    RopeTable* t = nullptr;
    for (auto& cand : tables)
        if (cand.theta == theta && cand.dh == dh) t = &cand;
    if (t == nullptr) {
        tables.push_back(RopeTable{theta, dh, 0, {}, {}});
        t = &tables.back();
    }
    const std::size_t half = dh / 2;
    if (t->positions < positions) {
        t->cos.resize(positions * half);
        t->sin.resize(positions * half);
        for (std::size_t r = t->positions; r < positions; ++r)
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double ang = static_cast<double>(r) * freq;
                t->cos[r * half + i] = std::cos(ang);
                t->sin[r * half + i] = std::sin(ang);
            }
        t->positions = positions;
    }
    return *t;
}

}  // namespace

Tensor rope(const Tensor& x, std::size_t heads, std::size_t offset, double theta) {
    require_rank2(x, "rope");
    const std::size_t m = x.rows(), n = x.cols();
    if (heads == 0 || n % heads != 0 || (n / heads) % 2 != 0)
        throw ContractViolation("rope: width " + std::to_string(n) + " not splittable into " + std::to_string(heads) +
                                " even-width heads");
    const std::size_t dh = n / heads, half = dh / 2;
    const RopeTable& table = rope_table(theta, dh, offset + m);
    std::vector<double> cs(table.cos.begin() + static_cast<std::ptrdiff_t>(offset * half),
                           table.cos.begin() + static_cast<std::ptrdiff_t>((offset + m) * half));
    std::vector<double> sn(table.sin.begin() + static_cast<std::ptrdiff_t>(offset * half),
                           table.sin.begin() + static_cast<std::ptrdiff_t>((offset + m) * half));
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t a = r * n + h * dh + 2 * i;
                const double c = cs[r * half + i], s = sn[r * half + i];
                out[a] = x[a] * c - x[a + 1] * s;
                out[a + 1] = x[a] * s + x[a + 1] * c;
            }
    return make_result("rope", x.shape(), std::move(out), {x},
                       [m, n, heads, dh, half, cs = std::move(cs), sn = std::move(sn)](
                           const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                           for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t h = 0; h < heads; ++h)
                                   for (std::size_t i = 0; i < half; ++i) {
                                       const std::size_t a = r * n + h * dh + 2 * i;
                                       const double c = cs[r * half + i], s = sn[r * half + i];
                                       gi[0][a] += g[a] * c + g[a + 1] * s;
                                       gi[0][a + 1] += -g[a] * s + g[a + 1] * c;
                                   }
                       });
}

Tensor sign_straight_through(const Tensor& z) {
    return unary("sign_straight_through", z, [](double v) { return v > 0.0 ? 1.0 : -1.0; },
                 [](const Node&, std::span<const double> g, std::span<const std::span<double>> gi) {
                     for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                 });
}

}  // namespace libra::num
