#include <benchmark/benchmark.h>

#include "libra/imgtok/tokenizer.hpp"
#include "libra/model/model.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/ops.hpp"
#include "libra/routed/routed.hpp"
#include "libra/seqio/synth.hpp"
#include "libra/train/loss.hpp"

using namespace libra;
using num::Tensor;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) { return Tensor::matrix(r, c, rng.normal_vector(r * c, 1.0)); }

struct MaskBuf {
    std::unique_ptr<bool[]> v;
    std::span<const bool> span;
    explicit MaskBuf(std::size_t n, std::size_t vision) : v(new bool[n]) {
        for (std::size_t i = 0; i < n; ++i) v[i] = i < vision;
        span = {v.get(), n};
    }
};

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const auto a = random_matrix(rng, n, n), b = random_matrix(rng, n, n);
    num::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_RoutedAttentionForward(benchmark::State& state) {
    const auto L = static_cast<std::size_t>(state.range(0));
    routed::RoutedConfig cfg;
    Rng rng(2);
    const auto p = routed::random_layer(cfg, rng);
    const auto x = random_matrix(rng, L, cfg.d_model);
    const MaskBuf mask(L, 18);
    num::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(routed::routed_attention(x, mask.span, p, cfg));
}
BENCHMARK(BM_RoutedAttentionForward)->Arg(32)->Arg(64)->Arg(128);

void BM_RoutedAttentionBackward(benchmark::State& state) {
    const auto L = static_cast<std::size_t>(state.range(0));
    routed::RoutedConfig cfg;
    Rng rng(3);
    const auto p = routed::random_layer(cfg, rng);
    const auto x = Tensor::parameter({L, cfg.d_model}, rng.normal_vector(L * cfg.d_model, 1.0));
    const MaskBuf mask(L, 18);
    for (auto _ : state) {
        const auto y = num::sum(routed::routed_attention(x, mask.span, p, cfg));
        benchmark::DoNotOptimize(num::backward(y));
    }
}
BENCHMARK(BM_RoutedAttentionBackward)->Arg(32)->Arg(64);

void BM_Tokenize(benchmark::State& state) {
    const imgtok::LfqTokenizer tok(imgtok::TokenizerConfig{}, 4);
    const auto img = seqio::synth_dataset(5, 1)[0].image;
    num::NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(tok.tokenize(img));
}
BENCHMARK(BM_Tokenize);

void BM_PretrainStepSequence(benchmark::State& state) {
    const model::ModelConfig cfg;
    const model::LibraModel m(cfg, imgtok::LfqTokenizer(cfg.tokenizer, 6), 7);
    const auto s = seqio::synth_dataset(8, 1)[0];
    const auto seq = seqio::build_pretrain_sequence(m.vocab(), m.vision_tokens(s.image), s.caption, m.sequence_options());
    for (auto _ : state) {
        const auto loss = train::pretrain_loss(m, std::span(&seq, 1)).total;
        benchmark::DoNotOptimize(num::backward(loss));
    }
}
BENCHMARK(BM_PretrainStepSequence)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
