#include "libra/routed/routed.hpp"

#include <algorithm>
#include <cmath>

#include "libra/error.hpp"
#include "libra/num/ops.hpp"

namespace libra::routed {

void RoutedConfig::validate() const {
    if (heads == 0 || d_model % heads != 0 || head_dim() % 2 != 0)
        throw ConfigError("routed: d_model " + std::to_string(d_model) + " must split into " + std::to_string(heads) +
                          " heads of even width");
    if (rank() == 0 || rank() > d_model) throw ConfigError("routed: expert rank must be in [1, d_model]");
    if (bridge_rank == 0 || bridge_rank > d_model) throw ConfigError("routed: bridge rank must be in [1, d_model]");
}

Tensor compose_low_rank(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ContractViolation("compose_low_rank: factors " + num::to_string(a.shape()) + " and " +
                                num::to_string(b.shape()) + " do not chain");
    return num::matmul(a, b);
}

Tensor compose_low_rank(const LowRank& f) { return compose_low_rank(f.a, f.b); }

namespace {

struct Split {
    std::vector<std::size_t> vision, language;
};

Split split_rows(std::span<const bool> is_vision) {
    Split s;
    for (std::size_t i = 0; i < is_vision.size(); ++i) (is_vision[i] ? s.vision : s.language).push_back(i);
    return s;
}

void require_rows(const Tensor& x, std::span<const bool> is_vision, const char* op) {
    if (x.rank() != 2 || x.rows() != is_vision.size())
        throw ContractViolation(std::string(op) + ": input " + num::to_string(x.shape()) + " vs modality mask of " +
                                std::to_string(is_vision.size()));
}

/// Row-routed map: f_vision on vision rows, f_language on the rest.
template <class FV, class FL>
Tensor route_rows(const Tensor& x, std::span<const bool> is_vision, FV f_vision, FL f_language) {
    const auto s = split_rows(is_vision);
    if (s.vision.empty()) return f_language(x);
    if (s.language.empty()) return f_vision(x);
    return num::merge_rows(f_vision(num::gather_rows(x, s.vision)), f_language(num::gather_rows(x, s.language)),
                           is_vision);
}

}  // namespace

Tensor routed_project(const Tensor& x, std::span<const bool> is_vision, const Tensor& w_language,
                      const Tensor& w_vision) {
    require_rows(x, is_vision, "routed_project");
    return route_rows(
        x, is_vision, [&](const Tensor& r) { return num::matmul(r, w_vision); },
        [&](const Tensor& r) { return num::matmul(r, w_language); });
}

Qkv routed_qkv(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p) {
    require_rows(x, is_vision, "routed_qkv");
    return {routed_project(x, is_vision, p.wq_t, compose_low_rank(p.q_i)),
            routed_project(x, is_vision, p.wk_t, compose_low_rank(p.k_i)),
            routed_project(x, is_vision, p.wv_t, compose_low_rank(p.v_i))};
}

namespace {

BridgedPair bridge(const Tensor& base, const Tensor& x, std::span<const bool> is_vision, const LowRank& vis,
                   const LowRank& lang) {
    require_rows(x, is_vision, "bridge");
    if (base.shape() != x.shape())
        throw ContractViolation("bridge: projection " + num::to_string(base.shape()) + " vs input " +
                                num::to_string(x.shape()));
    const auto delta = route_rows(
        x, is_vision, [&](const Tensor& r) { return num::matmul(r, compose_low_rank(vis)); },
        [&](const Tensor& r) { return num::matmul(r, compose_low_rank(lang)); });
    return {base, num::add(base, delta)};
}

}  // namespace

BridgedPair bridge_keys(const Tensor& k, const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p) {
    return bridge(k, x, is_vision, p.bridge_k_i, p.bridge_k_t);
}

BridgedPair bridge_values(const Tensor& v, const Tensor& x, std::span<const bool> is_vision,
                          const RoutedLayerParams& p) {
    return bridge(v, x, is_vision, p.bridge_v_i, p.bridge_v_t);
}

namespace {

Tensor heads_attention(const Tensor& q, const Tensor& k, const Tensor& v, const RoutedConfig& cfg,
                       AttentionCapture* capture) {
    const std::size_t dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto qh = num::slice_cols(q, h * dh, dh);
        const auto kh = num::slice_cols(k, h * dh, dh);
        const auto probs = num::softmax_rows(num::tril_mask(num::scale(num::matmul_nt(qh, kh), scale)));
        if (capture) capture->push_back(probs.detach());
        outs.push_back(num::matmul(probs, num::slice_cols(v, h * dh, dh)));
    }
    return outs.size() == 1 ? outs[0] : num::concat_cols(outs);
}

}  // namespace

Tensor causal_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                        const RoutedConfig& cfg, AttentionCapture* capture) {
    if (x.rank() != 2 || x.rows() == 0) throw InputError("attention: empty sequence");
    const auto q = num::rope(num::matmul(x, wq), cfg.heads, 0, cfg.rope_theta);
    const auto k = num::rope(num::matmul(x, wk), cfg.heads, 0, cfg.rope_theta);
    const auto v = num::matmul(x, wv);
    return num::matmul(heads_attention(q, k, v, cfg, capture), wo);
}

Tensor routed_attention(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                        const RoutedConfig& cfg, AttentionCapture* capture) {
    if (x.rank() != 2 || x.rows() == 0) throw InputError("routed_attention: empty sequence");
    require_rows(x, is_vision, "routed_attention");

    const auto qkv = routed_qkv(x, is_vision, p);
    const auto keys = bridge_keys(qkv.k, x, is_vision, p);
    const auto values = bridge_values(qkv.v, x, is_vision, p);
    const auto q = num::rope(qkv.q, cfg.heads, 0, cfg.rope_theta);
    const auto k = num::rope(keys.inner, cfg.heads, 0, cfg.rope_theta);
    const auto kc = num::rope(keys.cross, cfg.heads, 0, cfg.rope_theta);

    const std::size_t dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto scores = pair_select_scores(num::slice_cols(q, h * dh, dh), num::slice_cols(k, h * dh, dh),
                                               num::slice_cols(kc, h * dh, dh), is_vision, scale);
        const auto probs = num::softmax_rows(num::tril_mask(scores));
        if (capture) capture->push_back(probs.detach());
        outs.push_back(pair_select_apply(probs, num::slice_cols(values.inner, h * dh, dh),
                                         num::slice_cols(values.cross, h * dh, dh), is_vision));
    }
    const auto heads = outs.size() == 1 ? outs[0] : num::concat_cols(outs);
    if (!cfg.route_output_proj) return num::matmul(heads, p.wo_t);
    return routed_project(heads, is_vision, p.wo_t, compose_low_rank(p.o_i));
}

Tensor ffn(const Tensor& x, const Ffn& f) {
    return num::matmul(num::mul(num::silu(num::matmul(x, f.gate)), num::matmul(x, f.up)), f.down);
}

Tensor routed_ffn(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p) {
    require_rows(x, is_vision, "routed_ffn");
    return route_rows(
        x, is_vision, [&](const Tensor& r) { return ffn(r, p.ffn_i); }, [&](const Tensor& r) { return ffn(r, p.ffn_t); });
}

Tensor routed_norm(const Tensor& x, std::span<const bool> is_vision, const Tensor& gain_t, const Tensor& gain_i,
                   const RoutedConfig& cfg) {
    if (!cfg.route_norms) return num::rms_norm(x, gain_t);
    require_rows(x, is_vision, "routed_norm");
    return route_rows(
        x, is_vision, [&](const Tensor& r) { return num::rms_norm(r, gain_i); },
        [&](const Tensor& r) { return num::rms_norm(r, gain_t); });
}

Tensor routed_layer(const Tensor& x, std::span<const bool> is_vision, const RoutedLayerParams& p,
                    const RoutedConfig& cfg, AttentionCapture* capture) {
    const auto h = num::add(x, routed_attention(routed_norm(x, is_vision, p.attn_norm_t, p.attn_norm_i, cfg),
                                                is_vision, p, cfg, capture));
    return num::add(h, routed_ffn(routed_norm(h, is_vision, p.ffn_norm_t, p.ffn_norm_i, cfg), is_vision, p));
}

Tensor plain_layer(const Tensor& x, const RoutedLayerParams& p, const RoutedConfig& cfg) {
    const auto h =
        num::add(x, causal_attention(num::rms_norm(x, p.attn_norm_t), p.wq_t, p.wk_t, p.wv_t, p.wo_t, cfg));
    return num::add(h, ffn(num::rms_norm(h, p.ffn_norm_t), p.ffn_t));
}

std::string lm_layer_prefix(std::size_t layer) { return "lm.layers." + std::to_string(layer) + "."; }
std::string vis_layer_prefix(std::size_t layer) { return "vis.layers." + std::to_string(layer) + "."; }

namespace {

std::vector<double> normal(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
    return rng.normal_vector(rows * cols, sd);
}

void copy_param(num::ParamStore& ps, const std::string& from, const std::string& to) {
    const auto& src = ps.get(from);
    ps.add(to, src.shape(), std::vector<double>(src.data().begin(), src.data().end()));
}

}  // namespace

void init_language_layer(num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::string p = lm_layer_prefix(layer);
    const std::size_t D = cfg.d_model, F = cfg.ffn_hidden;
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    ps.add(p + "attn_norm", {1, D}, std::vector<double>(D, 1.0));
    ps.add(p + "ffn_norm", {1, D}, std::vector<double>(D, 1.0));
    for (const char* m : {"wq", "wk", "wv", "wo"}) ps.add(p + m, {D, D}, normal(rng, D, D, sd));
    ps.add(p + "ffn.gate", {D, F}, normal(rng, D, F, sd));
    ps.add(p + "ffn.up", {D, F}, normal(rng, D, F, sd));
    ps.add(p + "ffn.down", {F, D}, normal(rng, F, D, 1.0 / std::sqrt(static_cast<double>(F))));
}

void init_vision_layer(num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::string lp = lm_layer_prefix(layer), p = vis_layer_prefix(layer);
    const std::size_t D = cfg.d_model, r = cfg.rank(), rb = cfg.bridge_rank;
    const double sd = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<const char*> proj{"q", "k", "v"};
    if (cfg.route_output_proj) proj.push_back("o");
    for (const char* m : proj) {
        ps.add(p + m + ".a", {D, r}, normal(rng, D, r, sd));
        ps.add(p + m + ".b", {r, D}, std::vector<double>(r * D, 0.0));
    }
    for (const char* m : {"bridge.k_i", "bridge.v_i", "bridge.k_t", "bridge.v_t"}) {
        ps.add(p + m + ".a", {D, rb}, normal(rng, D, rb, sd));
        ps.add(p + m + ".b", {rb, D}, std::vector<double>(rb * D, 0.0));
    }
    for (const char* m : {"ffn.gate", "ffn.up", "ffn.down"}) copy_param(ps, lp + m, p + m);
    if (cfg.route_norms) {
        copy_param(ps, lp + "attn_norm", p + "attn_norm");
        copy_param(ps, lp + "ffn_norm", p + "ffn_norm");
    }
}

RoutedLayerParams language_layer_view(const num::ParamStore& ps, std::size_t layer) {
    const std::string p = lm_layer_prefix(layer);
    RoutedLayerParams v;
    v.attn_norm_t = ps.get(p + "attn_norm");
    v.ffn_norm_t = ps.get(p + "ffn_norm");
    v.wq_t = ps.get(p + "wq");
    v.wk_t = ps.get(p + "wk");
    v.wv_t = ps.get(p + "wv");
    v.wo_t = ps.get(p + "wo");
    v.ffn_t = {ps.get(p + "ffn.gate"), ps.get(p + "ffn.up"), ps.get(p + "ffn.down")};
    return v;
}

RoutedLayerParams layer_view(const num::ParamStore& ps, std::size_t layer, const RoutedConfig& cfg) {
    auto v = language_layer_view(ps, layer);
    const std::string p = vis_layer_prefix(layer);
    auto lr = [&](const std::string& m) { return LowRank{ps.get(p + m + ".a"), ps.get(p + m + ".b")}; };
    v.q_i = lr("q");
    v.k_i = lr("k");
    v.v_i = lr("v");
    if (cfg.route_output_proj) v.o_i = lr("o");
    v.bridge_k_i = lr("bridge.k_i");
    v.bridge_v_i = lr("bridge.v_i");
    v.bridge_k_t = lr("bridge.k_t");
    v.bridge_v_t = lr("bridge.v_t");
    v.ffn_i = {ps.get(p + "ffn.gate"), ps.get(p + "ffn.up"), ps.get(p + "ffn.down")};
    if (cfg.route_norms) {
        v.attn_norm_i = ps.get(p + "attn_norm");
        v.ffn_norm_i = ps.get(p + "ffn_norm");
    }
    return v;
}

RoutedLayerParams random_layer(const RoutedConfig& cfg, Rng& rng, double scale) {
    const std::size_t D = cfg.d_model, F = cfg.ffn_hidden, r = cfg.rank(), rb = cfg.bridge_rank;
    auto m = [&](std::size_t a, std::size_t b) { return Tensor::parameter({a, b}, rng.normal_vector(a * b, scale)); };
    auto gain = [&] {
        auto g = rng.normal_vector(D, 0.1);
        for (auto& x : g) x += 1.0;
        return Tensor::parameter({1, D}, g);
    };
    auto lr = [&](std::size_t rank) { return LowRank{m(D, rank), m(rank, D)}; };
    RoutedLayerParams p;
    p.attn_norm_t = gain();
    p.ffn_norm_t = gain();
    p.attn_norm_i = gain();
    p.ffn_norm_i = gain();
    p.wq_t = m(D, D);
    p.wk_t = m(D, D);
    p.wv_t = m(D, D);
    p.wo_t = m(D, D);
    p.q_i = lr(r);
    p.k_i = lr(r);
    p.v_i = lr(r);
    p.o_i = lr(r);
    p.bridge_k_i = lr(rb);
    p.bridge_v_i = lr(rb);
    p.bridge_k_t = lr(rb);
    p.bridge_v_t = lr(rb);
    p.ffn_t = {m(D, F), m(D, F), m(F, D)};
    p.ffn_i = {m(D, F), m(D, F), m(F, D)};
    return p;
}

}  // namespace libra::routed
