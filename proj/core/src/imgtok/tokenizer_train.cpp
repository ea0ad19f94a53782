#include "libra/imgtok/tokenizer_train.hpp"

#include <set>

#include "libra/error.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/ops.hpp"
#include "libra/rng.hpp"
#include "libra/train/optimizer.hpp"

namespace libra::imgtok {

using num::Tensor;

num::Tensor tokenizer_loss(const TokenizerConfig& cfg, const num::ParamStore& params,
                           std::span<const ToyImage> images, const TokenizerTrainConfig& train, double* mse_out) {
    const auto e_c = LfqTokenizer::encode_batch(cfg, params, images);
    auto z = num::add_row(num::matmul(e_c, params.get("quant.w")), params.get("quant.b"));
    const auto recon = LfqTokenizer::decode_signs(cfg, params, num::sign_straight_through(z), images.size());

    std::vector<double> target;
    target.reserve(recon.size());
    for (const auto& img : images) {
        auto p = patchify(img, cfg.patch);
        target.insert(target.end(), p.begin(), p.end());
    }
    const auto diff = num::sub(recon, Tensor::matrix(recon.rows(), recon.cols(), std::move(target)));
    const auto mse = num::mean(num::mul(diff, diff));
    if (mse_out) *mse_out = mse.item();
    if (!train.entropy_bonus) return mse;

    const auto p = num::sigmoid(num::scale(z, train.entropy_temperature));
    const auto per_sample = num::mean(num::binary_entropy(p));
    const auto marginal = num::mean(num::binary_entropy(num::col_mean(p)));
    return num::add(mse, num::scale(num::sub(per_sample, marginal), train.entropy_weight));
}

LfqTokenizer train_tokenizer(std::span<const ToyImage> images, const TokenizerConfig& cfg,
                             const TokenizerTrainConfig& train, const std::function<void(const TokenizerStep&)>& on_step) {
    if (images.empty()) throw InputError("train_tokenizer: empty dataset");
    if (train.batch == 0 || train.steps == 0) throw ConfigError("train_tokenizer: batch and steps must be positive");
    LfqTokenizer tok(cfg, derive_seed(train.seed, "tokenizer.params"));
    auto& params = tok.mutable_params();

    train::OptimizerConfig oc;
    oc.lr = train.lr;
    oc.warmup_steps = std::min(train.warmup_steps, train.steps - 1);
    oc.total_steps = train.steps;
    train::AdamW opt(oc);
    Rng rng(train.seed, "tokenizer.batches");

    std::vector<std::string> trainable;
    for (const auto& name : params.names())
        if (name != "bank1" && name != "bank2") trainable.push_back(name);

    std::vector<ToyImage> batch(train.batch);
    for (std::size_t step = 0; step < train.steps; ++step) {
        for (auto& img : batch) img = images[rng.index(images.size())];
        double mse = 0.0;
        const auto loss = tokenizer_loss(cfg, params, batch, train, &mse);
        const auto grads = num::backward(loss);
        train::GradMap gm;
        for (const auto& name : trainable) gm[name] = grads.dense(params.get(name));
        opt.step(params, gm, step + 1);
        if (on_step) on_step({step, loss.item(), mse});
    }
    tok.freeze();
    return tok;
}

double reconstruction_mse(const LfqTokenizer& tok, std::span<const ToyImage> images) {
    if (images.empty()) throw InputError("reconstruction_mse: empty dataset");
    double total = 0.0;
    for (const auto& img : images) total += mse(img, tok.decode_tokens(tok.tokenize(img)));
    return total / static_cast<double>(images.size());
}

CodeUsage code_usage(const LfqTokenizer& tok, std::span<const ToyImage> images) {
    std::set<std::uint32_t> seen1, seen2;
    for (const auto& img : images)
        for (const auto& c : tok.tokenize(img)) {
            seen1.insert(c.id1);
            seen2.insert(c.id2);
        }
    const double k = static_cast<double>(tok.config().codebook_size());
    return {static_cast<double>(seen1.size()) / k, static_cast<double>(seen2.size()) / k};
}

}  // namespace libra::imgtok
