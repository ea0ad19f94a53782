#include "libra/verify/suites.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "libra/error.hpp"
#include "libra/imgtok/tokenizer_train.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/grad_check.hpp"
#include "libra/num/ops.hpp"
#include "libra/seqio/synth.hpp"
#include "libra/train/loss.hpp"
#include "libra/train/trainer.hpp"
#include "libra/verify/oracles.hpp"

namespace libra::verify {

using num::Tensor;
using routed::RoutedConfig;

namespace {

RoutedConfig small_routed(std::size_t d, std::size_t heads) {
    RoutedConfig cfg;
    cfg.d_model = d;
    cfg.heads = heads;
    cfg.ffn_hidden = 6;
    cfg.expert_rank = 2;
    cfg.bridge_rank = 2;
    return cfg;
}

imgtok::TokenizerConfig tiny_tokenizer() {
    imgtok::TokenizerConfig t;
    t.d_c = 4;
    t.encoder_layers = 1;
    t.encoder_heads = 1;
    t.encoder_ffn = 4;
    t.d_b = 2;
    t.codebook_bits = 3;
    t.decoder_width = 4;
    t.decoder_layers = 1;
    t.decoder_heads = 1;
    t.decoder_ffn = 4;
    return t;
}

Tensor random_x(Rng& rng, std::size_t l, std::size_t d) { return Tensor::matrix(l, d, rng.normal_vector(l * d, 1.0)); }

// std::vector<bool> has no contiguous storage; keep masks as bool arrays.
struct Mask {
    std::vector<char> v;
    explicit Mask(const std::vector<bool>& m) : v(m.begin(), m.end()) {}
    operator std::span<const bool>() const { return {reinterpret_cast<const bool*>(v.data()), v.size()}; }
};

std::vector<bool> random_mask(Rng& rng, std::size_t l) {
    std::vector<bool> m(l);
    for (std::size_t i = 0; i < l; ++i) m[i] = rng.uniform() < 0.5;
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const auto x = a.data(), y = b.data();
    return std::equal(x.begin(), x.end(), y.begin());
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

imgtok::ToyImage random_image(Rng& rng) {
    imgtok::ToyImage img(16, 16);
    for (double& v : img.pixels) v = rng.uniform();
    return img;
}

std::string random_text(Rng& rng, std::size_t n) {
    static constexpr std::string_view chars = "abcdefghijklmnopqrstuvwxyz ";
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(chars[rng.index(chars.size())]);
    return s;
}

/// Random subset of small trainable tensors, returned by name.
std::vector<std::string> pick_params(const model::LibraModel& m, model::Stage stage, Rng& rng, std::size_t k) {
    std::vector<std::string> pool;
    for (const auto& n : m.trainable_params(stage))
        if (m.params().get(n).size() <= 160) pool.push_back(n);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k && !pool.empty(); ++i) {
        const std::size_t j = rng.index(pool.size());
        out.push_back(pool[j]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    return out;
}

double loss_gradient_check(const model::LibraModel& base, model::Stage stage,
                           const std::vector<seqio::MultimodalSequence>& batch, Rng& rng) {
    const auto names = pick_params(base, stage, rng, 3);
    std::vector<Tensor> params;
    for (const auto& n : names) params.push_back(base.params().get(n));
    auto f = [&](const std::vector<Tensor>& ts) {
        model::LibraModel m = base;
        for (std::size_t i = 0; i < names.size(); ++i) m.mutable_params().put(names[i], ts[i]);
        return stage == model::Stage::pretrain ? train::pretrain_loss(m, batch).total
                                               : train::sft_loss(m, batch).total;
    };
    return num::finite_diff_check(f, params);
}

double lfq_gradient_check(std::uint64_t seed) {
    Rng rng(seed, "verify.lfq");
    const auto cfg = tiny_tokenizer();
    imgtok::LfqTokenizer tok(cfg, rng.next_u64());
    const std::vector<imgtok::ToyImage> images{random_image(rng)};
    std::vector<std::string> names;
    for (const auto& n : tok.params().names())
        if (tok.params().get(n).size() <= 160 && n.rfind("bank", 0) != 0) names.push_back(n);
    std::vector<std::string> chosen;
    for (int i = 0; i < 3; ++i) {
        const std::size_t j = rng.index(names.size());
        chosen.push_back(names[j]);
        names.erase(names.begin() + static_cast<std::ptrdiff_t>(j));
    }
    chosen.push_back("quant.w");
    std::vector<Tensor> params;
    for (const auto& n : chosen) params.push_back(tok.params().get(n));
    imgtok::TokenizerTrainConfig plain;
    plain.entropy_bonus = false;

    auto store_with = [&](const std::vector<Tensor>& ts) {
        auto ps = tok.params();
        for (std::size_t i = 0; i < chosen.size(); ++i) ps.put(chosen[i], ts[i]);
        return ps;
    };
    auto latents = [&](const num::ParamStore& ps) {
        const auto e_c = imgtok::LfqTokenizer::encode_batch(cfg, ps, images);
        return num::add_row(num::matmul(e_c, ps.get("quant.w")), ps.get("quant.b"));
    };
    // z0 and sign(z0) at the evaluation point, held constant in the surrogate.
    Tensor z0;
    {
        num::NoGradGuard guard;
        z0 = latents(tok.params());
    }
    std::vector<double> s0(z0.data().begin(), z0.data().end());
    for (double& v : s0) v = v > 0.0 ? 1.0 : -1.0;
    const Tensor signs0 = Tensor::constant(z0.shape(), s0);
    const Tensor z0c = Tensor::constant(z0.shape(), {z0.data().begin(), z0.data().end()});
    std::vector<double> target;
    for (const auto& img : images) {
        auto p = imgtok::patchify(img, cfg.patch);
        target.insert(target.end(), p.begin(), p.end());
    }

    auto analytic = [&](const std::vector<Tensor>& ts) {
        return imgtok::tokenizer_loss(cfg, store_with(ts), images, plain);
    };
    auto surrogate = [&](const std::vector<Tensor>& ts) {
        const auto ps = store_with(ts);
        const auto st = num::add(signs0, num::sub(latents(ps), z0c));
        const auto recon = imgtok::LfqTokenizer::decode_signs(cfg, ps, st, images.size());
        const auto diff = num::sub(recon, Tensor::matrix(recon.rows(), recon.cols(), target));
        return num::mean(num::mul(diff, diff));
    };
    return num::finite_diff_check(analytic, surrogate, params);
}

seqio::MultimodalSequence short_pretrain(const model::LibraModel& m, Rng& rng) {
    return seqio::build_pretrain_sequence(m.vocab(), m.vision_tokens(random_image(rng)), random_text(rng, 4),
                                          m.sequence_options());
}

seqio::MultimodalSequence short_sft(const model::LibraModel& m, Rng& rng) {
    return seqio::build_sft_sequence(m.vocab(), m.vision_tokens(random_image(rng)), random_text(rng, 3),
                                     random_text(rng, 3), "sys", m.sequence_options());
}

}  // namespace

model::LibraModel tiny_model(std::uint64_t seed) {
    model::ModelConfig c;
    c.routed = small_routed(8, 2);
    c.routed.ffn_hidden = 8;
    c.layers = 2;
    c.tokenizer = tiny_tokenizer();
    imgtok::LfqTokenizer tok(c.tokenizer, derive_seed(seed, "verify.tokenizer"));
    tok.freeze();
    return model::LibraModel(c, tok, seed);
}

void randomize_vision(model::LibraModel& m, std::uint64_t seed, double scale) {
    Rng rng(seed, "verify.vision");
    for (const auto& name : m.params().names()) {
        if (name.rfind("vis.", 0) != 0) continue;
        m.mutable_params().set(name, rng.normal_vector(m.params().get(name).size(), scale));
    }
}

SuiteResult gradient_suite(std::uint64_t seed, std::size_t seeds, double tol) {
    SuiteResult r{"gradients", true, 0, 0.0, ""};
    const auto cfg = small_routed(4, 2);
    std::vector<std::pair<std::string, double>> worst;
    auto record = [&](const std::string& target, double err) {
        auto it = std::find_if(worst.begin(), worst.end(), [&](const auto& w) { return w.first == target; });
        if (it == worst.end()) it = worst.insert(worst.end(), {target, 0.0});
        it->second = std::max(it->second, err);
        r.worst = std::max(r.worst, err);
        ++r.checks;
    };
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(seed + s, "verify.grad");
        const auto layer = routed::random_layer(cfg, rng);
        const std::size_t L = 2 + rng.index(5);
        const Mask mask(random_mask(rng, L));
        const auto readout = Tensor::matrix(L, 4, rng.normal_vector(L * 4, 1.0));
        auto params = flatten(layer);
        params.push_back(random_x(rng, L, 4));
        auto with = [&](auto body) {
            return [&, body](const std::vector<Tensor>& ts) {
                const auto p = unflatten(std::span(ts).first(ts.size() - 1));
                return num::sum(num::mul(body(ts.back(), p), readout));
            };
        };
        record("routed_qkv", num::finite_diff_check(with([&](const Tensor& x, const routed::RoutedLayerParams& p) {
                                                       const auto qkv = routed::routed_qkv(x, mask, p);
                                                       return num::add(num::add(qkv.q, qkv.k), num::scale(qkv.v, 0.5));
                                                   }),
                                                   params));
        record("bridge", num::finite_diff_check(with([&](const Tensor& x, const routed::RoutedLayerParams& p) {
                                                   const auto qkv = routed::routed_qkv(x, mask, p);
                                                   return num::add(routed::bridge_keys(qkv.k, x, mask, p).cross,
                                                                   routed::bridge_values(qkv.v, x, mask, p).cross);
                                               }),
                                               params));
        record("routed_attention", num::finite_diff_check(with([&](const Tensor& x, const routed::RoutedLayerParams& p) {
                                                             return routed::routed_attention(x, mask, p, cfg);
                                                         }),
                                                         params));
        record("routed_ffn", num::finite_diff_check(with([&](const Tensor& x, const routed::RoutedLayerParams& p) {
                                                       return routed::routed_ffn(x, mask, p);
                                                   }),
                                                   params));

        auto m = tiny_model(seed + s);
        randomize_vision(m, seed + s);
        record("pretrain_loss", loss_gradient_check(m, model::Stage::pretrain, {short_pretrain(m, rng)}, rng));
        record("sft_loss", loss_gradient_check(m, model::Stage::sft, {short_sft(m, rng)}, rng));
        record("lfq_straight_through", lfq_gradient_check(seed + s));
    }
    for (const auto& [target, err] : worst) {
        r.detail += (r.detail.empty() ? "" : " ") + target + "=" + fmt("%.3g", err);
        if (!(err < tol)) r.passed = false;
    }
    return r;
}

SuiteResult block_oracle_suite(std::uint64_t seed, std::size_t configs, double tol) {
    SuiteResult r{"block_oracle", true, 0, 0.0, ""};
    for (std::size_t s = 0; s < configs; ++s) {
        Rng rng(seed + s, "verify.block");
        auto cfg = small_routed(4 * (1 + rng.index(3)), 1 + rng.index(2));
        cfg.route_output_proj = rng.uniform() < 0.7;
        const auto p = routed::random_layer(cfg, rng);
        const std::size_t L = 1 + rng.index(8);
        const auto x = random_x(rng, L, cfg.d_model);
        const Mask mask(random_mask(rng, L));
        const double err = max_abs_diff(brute_force_routed_attention(x, mask, p, cfg), routed_attention(x, mask, p, cfg));
        r.worst = std::max(r.worst, err);
        ++r.checks;
        if (!(err <= tol)) r.passed = false;
    }
    r.detail = "max_abs_err=" + fmt("%.3g", r.worst);
    return r;
}

SuiteResult ablation_suite(std::uint64_t seed, std::size_t trials) {
    SuiteResult r{"ablations", true, 0, 0.0, ""};
    std::size_t fail_e = 0, fail_d = 0;
    for (std::size_t s = 0; s < trials; ++s) {
        Rng rng(seed + s, "verify.ablation");
        auto cfg = small_routed(8, 2);
        cfg.route_output_proj = s % 2 == 0;
        cfg.route_norms = s % 3 != 0;
        const std::size_t L = 1 + rng.index(8);
        const auto x = random_x(rng, L, 8);
        const Mask mask(random_mask(rng, L));
        const auto pe = without_bridge(routed::random_layer(cfg, rng));
        if (!bit_equal(routed::routed_layer(x, mask, pe, cfg), simple_expert_layer(x, mask, pe, cfg))) ++fail_e;
        const auto pd = experts_tied(routed::random_layer(cfg, rng));
        if (!bit_equal(routed::routed_layer(x, mask, pd, cfg), routed::plain_layer(x, pd, cfg))) ++fail_d;
        r.checks += 2;
    }
    r.passed = fail_e == 0 && fail_d == 0;
    r.detail = "zero_bridge_mismatches=" + std::to_string(fail_e) + " tied_expert_mismatches=" + std::to_string(fail_d);
    return r;
}

SuiteResult frozen_lm_suite(std::uint64_t seed, std::size_t trials, std::size_t steps) {
    SuiteResult r{"frozen_lm", true, 0, 0.0, ""};
    auto m = tiny_model(seed);
    Rng rng(seed, "verify.frozen");
    for (std::size_t t = 0; t < trials; ++t) {
        randomize_vision(m, seed + t, 1.0);
        const auto seq = seqio::build_text_sequence(m.vocab(), random_text(rng, 3 + rng.index(20)));
        const auto a = m.forward(seq).lang, b = m.backbone_logits(seq.tokens);
        for (std::size_t i = 0; i < a.size(); ++i) r.worst = std::max(r.worst, std::fabs(a[i] - b[i]));
        ++r.checks;
    }
    const bool logits_ok = r.worst <= 1e-12;

    auto fresh = tiny_model(seed + 1);
    std::vector<seqio::MultimodalSequence> data;
    for (int i = 0; i < 8; ++i) data.push_back(short_pretrain(fresh, rng));
    const auto before = fresh.backbone_checksum();
    train::TrainConfig tc;
    tc.opt.total_steps = steps;
    tc.opt.warmup_steps = steps / 10;
    tc.opt.lr = 1e-2;
    tc.batch = 2;
    tc.seed = seed;
    train::train_stage(fresh, model::Stage::pretrain, data, tc);
    const bool checksum_ok = fresh.backbone_checksum() == before;
    ++r.checks;
    r.passed = logits_ok && checksum_ok;
    r.detail = "max_abs_logit_diff=" + fmt("%.3g", r.worst) + " checksum_after_" + std::to_string(steps) +
               "_steps=" + (checksum_ok ? "unchanged" : "CHANGED");
    return r;
}

SuiteResult causality_suite(std::uint64_t seed, std::size_t sequences) {
    SuiteResult r{"causality", true, 0, 0.0, ""};
    auto m = tiny_model(seed);
    randomize_vision(m, seed);
    Rng rng(seed, "verify.causal");
    std::size_t unchanged_self = 0;
    for (std::size_t s = 0; s < sequences; ++s) {
        const auto seq = short_pretrain(m, rng);
        const std::size_t j = rng.index(seq.size());
        auto pert = seq;
        if (pert.is_patch[j]) {
            const std::uint32_t n = static_cast<std::uint32_t>(m.config().tokenizer.codebook_size());
            pert.codes[j].id1 = (pert.codes[j].id1 + 1) % n;
            pert.codes[j].id2 = (pert.codes[j].id2 + 3) % n;
        } else {
            pert.tokens[j] = (pert.tokens[j] + 1) % m.vocab().char_count();
        }
        const auto a = m.forward(seq), b = m.forward(pert);
        double change_at_j = 0.0;
        for (const auto* pair : {&a.lang, &a.vis1, &a.vis2}) {
            const Tensor& x = *pair;
            const Tensor& y = pair == &a.lang ? b.lang : pair == &a.vis1 ? b.vis1 : b.vis2;
            const std::size_t w = x.cols();
            for (std::size_t i = 0; i < j * w; ++i) r.worst = std::max(r.worst, std::fabs(x[i] - y[i]));
            for (std::size_t i = j * w; i < (j + 1) * w; ++i) change_at_j += std::fabs(x[i] - y[i]);
        }
        if (change_at_j == 0.0) ++unchanged_self;
        ++r.checks;
    }
    r.passed = r.worst == 0.0 && unchanged_self == 0;
    r.detail = "max_change_before_j=" + fmt("%.3g", r.worst) + " perturbations_without_effect_at_j=" +
               std::to_string(unchanged_self);
    return r;
}

SuiteResult inertness_suite(std::uint64_t seed, std::size_t trials) {
    SuiteResult r{"text_value_bridge_inert", true, 0, 0.0, ""};
    Rng rng(seed, "verify.inert");
    for (std::size_t t = 0; t < trials; ++t) {
        auto m = tiny_model(seed + t);
        randomize_vision(m, seed + t);
        const auto seq = short_pretrain(m, rng);
        const auto before = m.forward(seq);
        for (const auto& name : m.params().names())
            if (name.find("bridge.v_t") != std::string::npos)
                m.mutable_params().set(name, rng.normal_vector(m.params().get(name).size(), 3.0));
        const auto after = m.forward(seq);
        for (const auto& [x, y] : {std::pair{&before.lang, &after.lang}, std::pair{&before.vis1, &after.vis1},
                                   std::pair{&before.vis2, &after.vis2}})
            for (std::size_t i = 0; i < x->size(); ++i) r.worst = std::max(r.worst, std::fabs((*x)[i] - (*y)[i]));
        ++r.checks;
    }
    r.passed = r.worst == 0.0;
    r.detail = "max_output_change=" + fmt("%.3g", r.worst);
    return r;
}

SuiteResult masking_suite(std::uint64_t seed, std::size_t trials) {
    SuiteResult r{"masking", true, 0, 0.0, ""};
    Rng rng(seed, "verify.mask");
    std::size_t violations = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        auto m = tiny_model(seed + t);
        randomize_vision(m, seed + t);
        for (const bool sft : {false, true}) {
            const auto seq = sft ? short_sft(m, rng) : short_pretrain(m, rng);
            const auto f = m.forward(seq);
            const auto labels = train::next_token_labels(seq);
            const double base = train::masked_loss(f, seq, labels, 1.0, !sft).total.item();
            for (std::size_t l = 0; l + 1 < seq.size(); ++l) {
                // Pretraining leaves only the newline target unsupervised.
                if (seq.supervised[l] || seq.is_patch[l + 1]) continue;
                auto p = labels;
                p[l] = static_cast<int>(rng.index(static_cast<std::size_t>(m.vocab().size())));
                if (train::masked_loss(f, seq, p, 1.0, !sft).total.item() != base) ++violations;
                ++r.checks;
            }
            if (sft) {
                const auto g = num::backward(train::sft_loss(m, std::span(&seq, 1)).total);
                for (const char* head : {"vis.head1", "vis.head2"})
                    for (double v : g.dense(m.params().get(head))) r.worst = std::max(r.worst, std::fabs(v));
                ++r.checks;
            }
        }
    }
    r.passed = violations == 0 && r.worst == 0.0;
    r.detail = "label_violations=" + std::to_string(violations) + " max_vision_head_grad=" + fmt("%.3g", r.worst);
    return r;
}

std::vector<SuiteResult> run_all_suites(std::uint64_t seed) {
    return {gradient_suite(seed),  block_oracle_suite(seed), ablation_suite(seed),  frozen_lm_suite(seed),
            causality_suite(seed), inertness_suite(seed),    masking_suite(seed)};
}

}  // namespace libra::verify
