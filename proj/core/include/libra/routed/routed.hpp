#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "libra/num/param_store.hpp"
#include "libra/num/tensor.hpp"
#include "libra/rng.hpp"

namespace libra::routed {

using num::Tensor;

struct RoutedConfig {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 128;
    std::size_t expert_rank = 0;  // 0 selects d_model / 4
    std::size_t bridge_rank = 8;
    bool route_output_proj = true;
    bool route_norms = true;
    double rope_theta = 10000.0;

    std::size_t head_dim() const { return d_model / heads; }
    std::size_t rank() const { return expert_rank ? expert_rank : d_model / 4; }
    void validate() const;
};

struct LowRank {
    Tensor a;  // D x r
    Tensor b;  // r x D
};

/// SwiGLU: down(silu(x gate) * (x up)).
struct Ffn {
    Tensor gate, up, down;
};

/// One layer's parameters. Language tensors are plain matrices; vision-expert
/// projections and bridge rewrites are low-rank factor pairs.
struct RoutedLayerParams {
    Tensor attn_norm_t, ffn_norm_t;
    Tensor attn_norm_i, ffn_norm_i;  // unused unless route_norms
    Tensor wq_t, wk_t, wv_t, wo_t;
    LowRank q_i, k_i, v_i, o_i;  // o_i unused unless route_output_proj
    LowRank bridge_k_i, bridge_v_i, bridge_k_t, bridge_v_t;
    Ffn ffn_t, ffn_i;
};

/// W = A·B.
Tensor compose_low_rank(const Tensor& a, const Tensor& b);
Tensor compose_low_rank(const LowRank& f);

/// Row l takes X[l]·w_vision where is_vision[l], else X[l]·w_language.
Tensor routed_project(const Tensor& x, std::span<const bool> is_vision, const Tensor& w_language,
                      const Tensor& w_vision);

struct Qkv {
    Tensor q, k, v;
};
Qkv routed_qkv(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p);

struct BridgedPair {
    Tensor inner;  // used for same-modality pairs
    Tensor cross;  // used for cross-modality pairs
};
/// cross = K + (vision rows: X W'_I^K, language rows: X W'_T^K).
BridgedPair bridge_keys(const Tensor& k, const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p);
/// cross = V + (vision rows: X W'_I^V, language rows: X W'_T^V).
BridgedPair bridge_values(const Tensor& v, const Tensor& x, std::span<const bool> is_vision,
                          const RoutedLayerParams& p);

/// scores[q][k] = <Q_q, same(q,k) ? K_k : Kc_k> * scale, same = is_vision[q] == is_vision[k].
Tensor pair_select_scores(const Tensor& q, const Tensor& k, const Tensor& k_cross, std::span<const bool> is_vision,
                          double scale);
/// out[q] = Σ_k P[q][k] * (same(q,k) ? V_k : Vc_k).
Tensor pair_select_apply(const Tensor& probs, const Tensor& v, const Tensor& v_cross, std::span<const bool> is_vision);

/// Per-head attention probabilities (L x L, causal) of one layer.
using AttentionCapture = std::vector<Tensor>;

/// Routed causal multi-head attention on an already normalized input.
Tensor routed_attention(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                        const RoutedConfig& cfg, AttentionCapture* capture = nullptr);

Tensor ffn(const Tensor& x, const Ffn& f);
Tensor routed_ffn(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p);

/// RMS norm with per-modality gains (language gains everywhere unless route_norms).
Tensor routed_norm(const Tensor& x, std::span<const bool> is_vision, const Tensor& gain_t, const Tensor& gain_i,
                   const RoutedConfig& cfg);

/// Pre-norm block: x + attn(norm(x)), then + ffn(norm(.)).
Tensor routed_layer(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                    const RoutedConfig& cfg, AttentionCapture* capture = nullptr);

/// Plain causal attention with one set of projections; the language path.
Tensor causal_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                        const RoutedConfig& cfg, AttentionCapture* capture = nullptr);
Tensor plain_layer(const Tensor& x, const RoutedLayerParams& p, const RoutedConfig& cfg);

// Parameter naming inside a ParamStore.
std::string lm_layer_prefix(std::size_t layer);
std::string vis_layer_prefix(std::size_t layer);
/// Language tensors of one layer: random projections, unit norm gains.
void init_language_layer(num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg, Rng& rng);
/// Vision tensors of one layer: A ~ N(0, 1/sqrt(D)), B = 0, bridge B' = 0,
/// FFN_I and vision norm gains copied from the language layer.
void init_vision_layer(num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg, Rng& rng);
RoutedLayerParams layer_view(const num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg);
/// Language part only; vision fields left empty.
RoutedLayerParams language_layer_view(const num::ParamStore& ps, std::size_t layer);

/// Random parameters with every factor nonzero; used by oracles and tests.
RoutedLayerParams random_layer(const RoutedConfig& cfg, Rng& rng, double scale = 0.5);

}  // namespace libra::routed
