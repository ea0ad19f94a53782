#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "libra/num/tensor.hpp"

// Differentiable primitives. Matrix ops take rank-2 tensors; row vectors
// (gains, biases) are shaped (1, n). All reductions accumulate in ascending
// index order, so two routes that perform the same per-element sums produce
// bit-identical results.
namespace libra::num {

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// (m, n) + (1, n) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width);
std::vector<Tensor> split_cols(const Tensor& a, std::span<const std::size_t> widths);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);

/// Row lookup: out[i] = table[ids[i]]. Also serves as embedding lookup.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// Interleaves rows: row i comes from `a` (in order) where take_a[i], else from `b`.
Tensor merge_rows(const Tensor& a, const Tensor& b, std::span<const bool> take_a);

/// Entries above the diagonal become -inf (lower-triangular causal mask).
Tensor tril_mask(const Tensor& scores);
/// Row-wise softmax; -inf entries get probability exactly 0.
Tensor softmax_rows(const Tensor& a);
/// x / sqrt(mean(x²) + eps) * gain, per row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// -p ln p - (1-p) ln(1-p), with p clamped away from {0, 1}.
Tensor binary_entropy(const Tensor& p);

/// Σ_i weight[i] · (logsumexp(logits_i) - logits_i[target_i]); rows with zero
/// weight are skipped and their targets are never read.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> weights);
/// Unweighted mean over rows.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column means over rows: (m, n) -> (1, n).
Tensor col_mean(const Tensor& a);

/// Rotary position embedding over `heads` contiguous column groups; row r sits
/// at position `offset + r`.
Tensor rope(const Tensor& x, std::size_t heads, std::size_t offset = 0, double theta = 10000.0);

/// Forward: +1 where z > 0, -1 otherwise. Backward: identity.
Tensor sign_straight_through(const Tensor& z);

}  // namespace libra::num
