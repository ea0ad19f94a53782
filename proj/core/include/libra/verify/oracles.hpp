#pragma once

#include <span>
#include <vector>

#include "libra/routed/routed.hpp"

namespace libra::verify {

using routed::RoutedConfig;
using routed::RoutedLayerParams;
using routed::Tensor;

/// Dense row-major matrix used by the loop-level references.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;
    double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

Mat to_mat(const Tensor& t);
double max_abs_diff(const Mat& a, const Tensor& b);

/// Routed attention computed pair by pair with plain loops: every projection
/// row is formed with the weight picked by its modality, every (q, k) score
/// tests the pair's modalities explicitly, and no library op is reused.
/// `probs`, when given, receives one L x L matrix per head.
Mat brute_force_routed_attention(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                                 const RoutedConfig& cfg, std::vector<Mat>* probs = nullptr);

/// Row-by-row FFN reference.
Mat brute_force_routed_ffn(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p);

/// Layer with routed projections, norms and FFN but a single key/value set
/// for all pairs (no bridge). Built from library ops in the plain block layout.
Tensor simple_expert_layer(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                           const RoutedConfig& cfg);

/// Copy of `p` with every bridge B' factor zeroed.
RoutedLayerParams without_bridge(const RoutedLayerParams& p);
/// Copy of `p` whose language projections equal the composed expert ones,
/// with FFN_I := FFN_T, vision norms := language norms and no bridge.
RoutedLayerParams experts_tied(const RoutedLayerParams& p);

/// Every tensor of a layer in a fixed order, and the inverse mapping.
std::vector<Tensor> flatten(const RoutedLayerParams& p);
RoutedLayerParams unflatten(std::span<const Tensor> tensors);

/// Rank by Gaussian elimination with partial pivoting.
std::size_t matrix_rank(const Mat& m, double tol = 1e-9);

}  // namespace libra::verify
