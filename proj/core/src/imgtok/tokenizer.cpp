#include "libra/imgtok/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "libra/error.hpp"
#include "libra/num/ops.hpp"
#include "libra/rng.hpp"

namespace libra::imgtok {

using num::Tensor;

void TokenizerConfig::validate() const {
    if (patch == 0 || image_height % patch != 0 || image_width % patch != 0)
        throw ConfigError("tokenizer: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " not divisible by patch " + std::to_string(patch));
    if (codebook_bits == 0 || codebook_bits > 16) throw ConfigError("tokenizer: codebook_bits must be in [1, 16]");
    if (encoder_heads == 0 || d_c % encoder_heads != 0) throw ConfigError("tokenizer: d_c not divisible by heads");
    if (decoder_heads == 0 || decoder_width % decoder_heads != 0)
        throw ConfigError("tokenizer: decoder_width not divisible by heads");
}

PatchCode lfq_code(std::span<const double> z, std::size_t bits) {
    if (z.size() != 2 * bits)
        throw ContractViolation("lfq_code: latent of width " + std::to_string(z.size()) + ", expected " +
                                std::to_string(2 * bits));
    PatchCode code;
    for (std::size_t i = 0; i < bits; ++i) {
        if (z[i] > 0.0) code.id1 |= std::uint32_t{1} << i;
        if (z[bits + i] > 0.0) code.id2 |= std::uint32_t{1} << i;
    }
    return code;
}

std::vector<double> code_signs(PatchCode code, std::size_t bits) {
    std::vector<double> s(2 * bits);
    for (std::size_t i = 0; i < bits; ++i) {
        s[i] = (code.id1 >> i) & 1U ? 1.0 : -1.0;
        s[bits + i] = (code.id2 >> i) & 1U ? 1.0 : -1.0;
    }
    return s;
}

Tensor embed_discrete(const Tensor& bank1, const Tensor& bank2, std::span<const PatchCode> codes) {
    std::vector<std::size_t> i1, i2;
    i1.reserve(codes.size());
    i2.reserve(codes.size());
    for (const auto& c : codes) {
        if (c.id1 >= bank1.rows() || c.id2 >= bank2.rows())
            throw ContractViolation("embed_discrete: code (" + std::to_string(c.id1) + ", " + std::to_string(c.id2) +
                                    ") out of range for banks of " + std::to_string(bank1.rows()) + "/" +
                                    std::to_string(bank2.rows()) + " rows");
        i1.push_back(c.id1);
        i2.push_back(c.id2);
    }
    return num::concat_cols({num::gather_rows(bank1, i1), num::gather_rows(bank2, i2)});
}

Tensor assemble_hybrid(const Tensor& e_c, const Tensor& e_d, bool disable_contiguous, const Tensor& proj_w,
                       const Tensor& proj_b) {
    if (e_c.rows() != e_d.rows())
        throw ContractViolation("assemble_hybrid: " + std::to_string(e_c.rows()) + " contiguous rows vs " +
                                std::to_string(e_d.rows()) + " discrete rows");
    const Tensor contiguous = disable_contiguous ? Tensor::zeros(e_c.shape()) : e_c;
    return num::add_row(num::matmul(num::concat_cols({contiguous, e_d}), proj_w), proj_b);
}

namespace {

struct BlockShape {
    std::size_t width, heads, ffn;
};

void init_linear(num::ParamStore& ps, Rng& rng, const std::string& name, std::size_t in, std::size_t out, bool bias) {
    ps.add(name + ".w", {in, out}, rng.normal_vector(in * out, 1.0 / std::sqrt(static_cast<double>(in))));
    if (bias) ps.add(name + ".b", {1, out}, std::vector<double>(out, 0.0));
}

void init_block(num::ParamStore& ps, Rng& rng, const std::string& p, const BlockShape& s) {
    ps.add(p + ".norm1", {1, s.width}, std::vector<double>(s.width, 1.0));
    for (const char* m : {"wq", "wk", "wv", "wo"}) init_linear(ps, rng, p + "." + m, s.width, s.width, false);
    ps.add(p + ".norm2", {1, s.width}, std::vector<double>(s.width, 1.0));
    init_linear(ps, rng, p + ".fc1", s.width, s.ffn, true);
    init_linear(ps, rng, p + ".fc2", s.ffn, s.width, true);
}

Tensor linear(const num::ParamStore& ps, const std::string& name, const Tensor& x) {
    auto y = num::matmul(x, ps.get(name + ".w"));
    if (ps.contains(name + ".b")) y = num::add_row(y, ps.get(name + ".b"));
    return y;
}

// Pre-norm bidirectional block; attention stays within each image's rows.
Tensor block(const num::ParamStore& ps, const std::string& p, const Tensor& x, std::size_t images,
             std::size_t per_image, const BlockShape& s) {
    const auto h = num::rms_norm(x, ps.get(p + ".norm1"));
    const auto q = num::matmul(h, ps.get(p + ".wq.w"));
    const auto k = num::matmul(h, ps.get(p + ".wk.w"));
    const auto v = num::matmul(h, ps.get(p + ".wv.w"));
    const std::size_t dh = s.width / s.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> per_img;
    per_img.reserve(images);
    for (std::size_t i = 0; i < images; ++i) {
        const auto qi = num::slice_rows(q, i * per_image, per_image);
        const auto ki = num::slice_rows(k, i * per_image, per_image);
        const auto vi = num::slice_rows(v, i * per_image, per_image);
        std::vector<Tensor> heads;
        for (std::size_t hd = 0; hd < s.heads; ++hd) {
            const auto qh = num::slice_cols(qi, hd * dh, dh);
            const auto kh = num::slice_cols(ki, hd * dh, dh);
            const auto vh = num::slice_cols(vi, hd * dh, dh);
            const auto probs = num::softmax_rows(num::scale(num::matmul_nt(qh, kh), scale));
            heads.push_back(num::matmul(probs, vh));
        }
        per_img.push_back(heads.size() == 1 ? heads[0] : num::concat_cols(heads));
    }
    const auto attn = per_img.size() == 1 ? per_img[0] : num::concat_rows(per_img);
    auto y = num::add(x, num::matmul(attn, ps.get(p + ".wo.w")));
    const auto h2 = num::rms_norm(y, ps.get(p + ".norm2"));
    return num::add(y, linear(ps, p + ".fc2", num::gelu(linear(ps, p + ".fc1", h2))));
}

Tensor tile_rows(const Tensor& pos, std::size_t times) {
    if (times == 1) return pos;
    return num::concat_rows(std::vector<Tensor>(times, pos));
}

}  // namespace

LfqTokenizer::LfqTokenizer(TokenizerConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, "tokenizer.init");
    const std::size_t P = cfg_.patches(), bits = cfg_.codebook_bits;
    init_linear(params_, rng, "enc.patch", cfg_.patch_dim(), cfg_.d_c, true);
    params_.add("enc.pos", {P, cfg_.d_c}, rng.normal_vector(P * cfg_.d_c, 0.1));
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l)
        init_block(params_, rng, "enc.blocks." + std::to_string(l), {cfg_.d_c, cfg_.encoder_heads, cfg_.encoder_ffn});
    params_.add("enc.norm", {1, cfg_.d_c}, std::vector<double>(cfg_.d_c, 1.0));
    init_linear(params_, rng, "quant", cfg_.d_c, 2 * bits, true);

    const std::size_t K = cfg_.codebook_size();
    params_.add("bank1", {K, cfg_.d_b}, rng.normal_vector(K * cfg_.d_b, 1.0));
    params_.add("bank2", {K, cfg_.d_b}, rng.normal_vector(K * cfg_.d_b, 1.0));

    init_linear(params_, rng, "dec.in", 2 * bits, cfg_.decoder_width, true);
    params_.add("dec.pos", {P, cfg_.decoder_width}, rng.normal_vector(P * cfg_.decoder_width, 0.1));
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l)
        init_block(params_, rng, "dec.blocks." + std::to_string(l),
                   {cfg_.decoder_width, cfg_.decoder_heads, cfg_.decoder_ffn});
    params_.add("dec.norm", {1, cfg_.decoder_width}, std::vector<double>(cfg_.decoder_width, 1.0));
    init_linear(params_, rng, "dec.out", cfg_.decoder_width, cfg_.patch_dim(), true);
}

LfqTokenizer::LfqTokenizer(TokenizerConfig cfg, num::ParamStore params, bool frozen)
    : cfg_(cfg), params_(std::move(params)), frozen_(frozen) {
    cfg_.validate();
    LfqTokenizer reference(cfg_, 0);
    for (const auto& [name, t] : reference.params().items()) {
        if (!params_.contains(name)) throw ConfigError("tokenizer checkpoint lacks array '" + name + "'");
        if (params_.get(name).shape() != t.shape())
            throw ConfigError("tokenizer array '" + name + "' has shape " + num::to_string(params_.get(name).shape()) +
                              ", config expects " + num::to_string(t.shape()));
    }
}

num::ParamStore& LfqTokenizer::mutable_params() {
    if (frozen_) throw ContractViolation("tokenizer is frozen");
    return params_;
}

Tensor LfqTokenizer::encode_batch(const TokenizerConfig& cfg, const num::ParamStore& ps,
                                  std::span<const ToyImage> images) {
    if (images.empty()) throw InputError("encode: no images");
    std::vector<double> rows;
    for (const auto& img : images) {
        if (img.height != cfg.image_height || img.width != cfg.image_width)
            throw InputError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             " does not match tokenizer input " + std::to_string(cfg.image_height) + "x" +
                             std::to_string(cfg.image_width));
        auto p = patchify(img, cfg.patch);
        rows.insert(rows.end(), p.begin(), p.end());
    }
    const std::size_t n = images.size(), P = cfg.patches();
    auto x = linear(ps, "enc.patch", Tensor::matrix(n * P, cfg.patch_dim(), std::move(rows)));
    x = num::add(x, tile_rows(ps.get("enc.pos"), n));
    for (std::size_t l = 0; l < cfg.encoder_layers; ++l)
        x = block(ps, "enc.blocks." + std::to_string(l), x, n, P, {cfg.d_c, cfg.encoder_heads, cfg.encoder_ffn});
    return num::rms_norm(x, ps.get("enc.norm"));
}

Tensor LfqTokenizer::decode_signs(const TokenizerConfig& cfg, const num::ParamStore& ps, const Tensor& signs,
                                  std::size_t images) {
    const std::size_t P = cfg.patches();
    if (signs.rows() != images * P || signs.cols() != 2 * cfg.codebook_bits)
        throw ContractViolation("decode: latent signs of shape " + num::to_string(signs.shape()) + " for " +
                                std::to_string(images) + " images of " + std::to_string(P) + " patches");
    auto x = num::add(linear(ps, "dec.in", signs), tile_rows(ps.get("dec.pos"), images));
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l)
        x = block(ps, "dec.blocks." + std::to_string(l), x, images, P,
                  {cfg.decoder_width, cfg.decoder_heads, cfg.decoder_ffn});
    return num::sigmoid(linear(ps, "dec.out", num::rms_norm(x, ps.get("dec.norm"))));
}

Tensor LfqTokenizer::encode_image(const ToyImage& image) const {
    num::NoGradGuard guard;
    return encode_batch(cfg_, params_, std::span<const ToyImage>(&image, 1));
}

Tensor LfqTokenizer::quant_latents(const Tensor& e_c) const {
    if (e_c.rank() != 2 || e_c.cols() != cfg_.d_c)
        throw ContractViolation("quantize: features of shape " + num::to_string(e_c.shape()) + ", expected width " +
                                std::to_string(cfg_.d_c));
    return linear(params_, "quant", e_c);
}

std::vector<PatchCode> LfqTokenizer::lfq_quantize(const Tensor& e_c) const {
    num::NoGradGuard guard;
    const auto z = quant_latents(e_c);
    const std::size_t width = 2 * cfg_.codebook_bits;
    std::vector<PatchCode> out;
    out.reserve(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) out.push_back(lfq_code(z.data().subspan(r * width, width), cfg_.codebook_bits));
    return out;
}

std::vector<PatchCode> LfqTokenizer::tokenize(const ToyImage& image) const { return lfq_quantize(encode_image(image)); }

Tensor LfqTokenizer::embed_discrete(std::span<const PatchCode> codes) const {
    return imgtok::embed_discrete(params_.get("bank1"), params_.get("bank2"), codes);
}

ToyImage LfqTokenizer::decode_tokens(std::span<const PatchCode> codes) const {
    if (codes.size() != cfg_.patches())
        throw ContractViolation("decode_tokens: " + std::to_string(codes.size()) + " codes for " +
                                std::to_string(cfg_.patches()) + " patches");
    num::NoGradGuard guard;
    const std::size_t width = 2 * cfg_.codebook_bits;
    std::vector<double> signs;
    signs.reserve(codes.size() * width);
    for (const auto& c : codes) {
        if (c.id1 >= cfg_.codebook_size() || c.id2 >= cfg_.codebook_size())
            throw ContractViolation("decode_tokens: code out of range");
        auto s = code_signs(c, cfg_.codebook_bits);
        signs.insert(signs.end(), s.begin(), s.end());
    }
    const auto pixels = decode_signs(cfg_, params_, Tensor::matrix(codes.size(), width, std::move(signs)), 1);
    std::vector<double> flat(pixels.data().begin(), pixels.data().end());
    for (auto& v : flat) v = std::clamp(v, 0.0, 1.0);
    return unpatchify(flat, cfg_.image_height, cfg_.image_width, cfg_.patch);
}

std::uint64_t LfqTokenizer::encoder_checksum() const {
    return params_.checksum([](const std::string& n) { return n.rfind("enc.", 0) == 0 || n.rfind("quant.", 0) == 0; });
}

}  // namespace libra::imgtok
