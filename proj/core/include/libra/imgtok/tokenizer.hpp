#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "libra/imgtok/image.hpp"
#include "libra/num/param_store.hpp"
#include "libra/num/tensor.hpp"

namespace libra::imgtok {

struct TokenizerConfig {
    std::size_t image_height = 16;
    std::size_t image_width = 16;
    std::size_t patch = 4;
    std::size_t d_c = 32;  // encoder feature width
    std::size_t encoder_layers = 2;
    std::size_t encoder_heads = 2;
    std::size_t encoder_ffn = 64;
    std::size_t codebook_bits = 5;  // bits per codebook; two codebooks
    std::size_t d_b = 8;            // width of each discrete embedding bank
    std::size_t decoder_width = 64;
    std::size_t decoder_layers = 2;
    std::size_t decoder_heads = 2;
    std::size_t decoder_ffn = 128;

    std::size_t grid_h() const { return image_height / patch; }
    std::size_t grid_w() const { return image_width / patch; }
    std::size_t patches() const { return grid_h() * grid_w(); }
    std::size_t patch_dim() const { return patch * patch * 3; }
    std::size_t codebook_size() const { return std::size_t{1} << codebook_bits; }
    /// Channel width of concat(E_c, E_d) before projection.
    std::size_t hybrid_width() const { return d_c + 2 * d_b; }

    void validate() const;
};

/// Token ids of one patch, one per codebook.
struct PatchCode {
    std::uint32_t id1 = 0;
    std::uint32_t id2 = 0;
    auto operator<=>(const PatchCode&) const = default;
};

/// Sign-bit lookup-free quantization of one latent row of length 2·bits:
/// bit i of id1 is set iff z[i] > 0, bit i of id2 iff z[bits + i] > 0.
PatchCode lfq_code(std::span<const double> z, std::size_t bits);

/// ±1 latent pattern encoded by a code (inverse of lfq_code on signs).
std::vector<double> code_signs(PatchCode code, std::size_t bits);

/// E_d = concat(bank1[id1], bank2[id2]) per patch.
num::Tensor embed_discrete(const num::Tensor& bank1, const num::Tensor& bank2, std::span<const PatchCode> codes);

/// X_I = concat(E_c, E_d) · W + b. With `disable_contiguous`, E_c is replaced
/// by zeros of the same shape before concatenation.
num::Tensor assemble_hybrid(const num::Tensor& e_c, const num::Tensor& e_d, bool disable_contiguous,
                            const num::Tensor& proj_w, const num::Tensor& proj_b);

/// Patch encoder Φ, LFQ projection over two codebooks, embedding banks E1/E2
/// and a small patch decoder.
class LfqTokenizer {
public:
    LfqTokenizer(TokenizerConfig cfg, std::uint64_t seed);
    LfqTokenizer(TokenizerConfig cfg, num::ParamStore params, bool frozen);

    const TokenizerConfig& config() const { return cfg_; }
    const num::ParamStore& params() const { return params_; }
    /// Throws once the tokenizer is frozen.
    num::ParamStore& mutable_params();
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    /// E_c = Φ(image), one row per patch.
    num::Tensor encode_image(const ToyImage& image) const;
    /// LFQ latents z = E_c · W_q + b_q, width 2·bits.
    num::Tensor quant_latents(const num::Tensor& e_c) const;
    std::vector<PatchCode> lfq_quantize(const num::Tensor& e_c) const;
    std::vector<PatchCode> tokenize(const ToyImage& image) const;
    num::Tensor embed_discrete(std::span<const PatchCode> codes) const;
    ToyImage decode_tokens(std::span<const PatchCode> codes) const;

    /// Checksum over the encoder and quantizer projection.
    std::uint64_t encoder_checksum() const;

    // Graph builders shared with training. `images` rows are stacked patch-major.
    static num::Tensor encode_batch(const TokenizerConfig& cfg, const num::ParamStore& params,
                                    std::span<const ToyImage> images);
    static num::Tensor decode_signs(const TokenizerConfig& cfg, const num::ParamStore& params,
                                    const num::Tensor& signs, std::size_t images);

private:
    TokenizerConfig cfg_;
    num::ParamStore params_;
    bool frozen_ = false;
};

}  // namespace libra::imgtok
