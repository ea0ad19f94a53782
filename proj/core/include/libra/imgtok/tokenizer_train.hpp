#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "libra/imgtok/tokenizer.hpp"

namespace libra::imgtok {

struct TokenizerTrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double lr = 3e-3;
    std::size_t warmup_steps = 100;
    /// Per-sample bit entropy minus batch-marginal bit entropy, on p = σ(temperature·z).
    bool entropy_bonus = true;
    double entropy_weight = 0.05;
    double entropy_temperature = 4.0;
    std::uint64_t seed = 0;
};

struct TokenizerStep {
    std::size_t step;
    double loss;
    double mse;
};

/// Reconstruction loss of decode(sign(z)) against the patches of `images`,
/// plus the optional entropy term. Gradients flow through the sign as identity.
num::Tensor tokenizer_loss(const TokenizerConfig& cfg, const num::ParamStore& params,
                           std::span<const ToyImage> images, const TokenizerTrainConfig& train, double* mse_out = nullptr);

/// Trains encoder, quantizer projection and decoder; the returned tokenizer is
/// frozen. Banks E1/E2 are left at their initial values for downstream stages.
LfqTokenizer train_tokenizer(std::span<const ToyImage> images, const TokenizerConfig& cfg,
                             const TokenizerTrainConfig& train,
                             const std::function<void(const TokenizerStep&)>& on_step = {});

/// Mean per-pixel MSE of decode(tokenize(img)) over `images`.
double reconstruction_mse(const LfqTokenizer& tok, std::span<const ToyImage> images);

/// Fraction of ids of each codebook emitted at least once over `images`.
struct CodeUsage {
    double codebook1 = 0.0;
    double codebook2 = 0.0;
};
CodeUsage code_usage(const LfqTokenizer& tok, std::span<const ToyImage> images);

}  // namespace libra::imgtok
