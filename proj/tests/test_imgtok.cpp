#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "libra/error.hpp"
#include "libra/imgtok/tokenizer_train.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/num/ops.hpp"
#include "libra/rng.hpp"
#include "libra/seqio/sequence.hpp"
#include "libra/seqio/synth.hpp"

using namespace libra;
using namespace libra::imgtok;

namespace {

ToyImage random_image(Rng& rng, std::size_t h, std::size_t w) {
    ToyImage img(h, w);
    for (auto& v : img.pixels) v = rng.uniform();
    return img;
}

TokenizerConfig tiny_config() {
    TokenizerConfig cfg;
    cfg.d_c = 8;
    cfg.encoder_layers = 1;
    cfg.encoder_heads = 1;
    cfg.encoder_ffn = 8;
    cfg.d_b = 4;
    cfg.decoder_width = 8;
    cfg.decoder_layers = 1;
    cfg.decoder_heads = 1;
    cfg.decoder_ffn = 8;
    return cfg;
}

}  // namespace

TEST(Encode, SixteenPatchesFor16x16) {
    LfqTokenizer tok(TokenizerConfig{}, 1);
    Rng rng(3);
    const auto e_c = tok.encode_image(random_image(rng, 16, 16));
    EXPECT_EQ(e_c.rows(), 16u);
    EXPECT_EQ(e_c.cols(), 32u);
}

TEST(Encode, PaperScaleGridGives576PatchesAnd578VisionTokens) {
    auto cfg = tiny_config();
    cfg.image_height = cfg.image_width = 336;
    cfg.patch = 14;
    LfqTokenizer tok(cfg, 1);
    Rng rng(4);
    const auto img = random_image(rng, 336, 336);
    const auto vision = seqio::tokenize_image(tok, img);
    EXPECT_EQ(vision.features.rows(), 576u);
    const seqio::Vocab vocab;
    const auto seq = seqio::build_pretrain_sequence(vocab, vision, "");
    std::size_t vision_block = 0;
    for (std::size_t i = 0; i < seq.size(); ++i)
        if (seq.is_patch[i] || seq.tokens[i] == vocab.boi() || seq.tokens[i] == vocab.eoi()) ++vision_block;
    EXPECT_EQ(vision_block, 578u);
}

TEST(Encode, NonDivisibleImageIsInputError) {
    LfqTokenizer tok(TokenizerConfig{}, 1);
    EXPECT_THROW(tok.encode_image(ToyImage(15, 16)), InputError);
    EXPECT_THROW(patchify(ToyImage(16, 18), 4), InputError);
}

TEST(Encode, ZeroImageWithZeroBiasEncoderGivesIdenticalRows) {
    LfqTokenizer base(TokenizerConfig{}, 2);
    auto params = base.params();
    for (const auto& name : params.names())
        if (name == "enc.pos" || (name.rfind("enc.", 0) == 0 && name.size() > 2 && name.substr(name.size() - 2) == ".b"))
            params.set(name, std::vector<double>(params.get(name).size(), 0.0));
    LfqTokenizer tok(TokenizerConfig{}, params, true);
    const auto e_c = tok.encode_image(ToyImage(16, 16));
    for (std::size_t r = 1; r < e_c.rows(); ++r)
        for (std::size_t c = 0; c < e_c.cols(); ++c) ASSERT_EQ(e_c.at(r, c), e_c.at(0, c));
}

TEST(Lfq, ThreeBitExample) {
    const std::vector<double> z{0.7, -0.2, 0.1, -0.5, 0.3, 0.9};
    const auto code = lfq_code(z, 3);
    EXPECT_EQ(code.id1, 5u);
    EXPECT_EQ(code.id2, 6u);
}

TEST(Lfq, AllNegativeIsZeroAndZeroMapsToBitZero) {
    EXPECT_EQ(lfq_code(std::vector<double>{-1, -2, -0.1, -3}, 2), (PatchCode{0, 0}));
    EXPECT_EQ(lfq_code(std::vector<double>{0.0, 0.0}, 1), (PatchCode{0, 0}));
}

TEST(Lfq, WrongLatentWidthIsContractViolation) {
    EXPECT_THROW(lfq_code(std::vector<double>{1, 2, 3}, 2), ContractViolation);
}

class LfqSeeded : public ::testing::TestWithParam<int> {};

TEST_P(LfqSeeded, IdBitsReproduceSigns) {
    Rng rng(static_cast<std::uint64_t>(GetParam()), "lfq");
    const std::size_t b = 5;
    const auto z = rng.normal_vector(2 * b, 1.0);
    const auto code = lfq_code(z, b);
    EXPECT_LT(code.id1, 32u);
    EXPECT_LT(code.id2, 32u);
    for (std::size_t i = 0; i < b; ++i) {
        EXPECT_EQ(((code.id1 >> i) & 1U) == 1U, z[i] > 0.0);
        EXPECT_EQ(((code.id2 >> i) & 1U) == 1U, z[b + i] > 0.0);
    }
    const auto signs = code_signs(code, b);
    for (std::size_t i = 0; i < 2 * b; ++i) EXPECT_EQ(signs[i], z[i] > 0.0 ? 1.0 : -1.0);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LfqSeeded, ::testing::Range(0, 20));

TEST(EmbedDiscrete, WidthIsTwiceBankWidth) {
    auto cfg = tiny_config();
    LfqTokenizer tok(cfg, 5);
    const std::vector<PatchCode> codes{{1, 2}, {3, 4}, {1, 2}};
    const auto e_d = tok.embed_discrete(codes);
    EXPECT_EQ(e_d.cols(), 8u);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(e_d.at(0, c), e_d.at(2, c));
}

TEST(EmbedDiscrete, BankOneRowChangeTouchesFirstHalfOnly) {
    auto cfg = tiny_config();
    LfqTokenizer tok(cfg, 6);
    const std::vector<PatchCode> codes{{5, 9}};
    const auto before = tok.embed_discrete(codes);
    auto params = tok.params();
    auto bank = std::vector<double>(params.get("bank1").data().begin(), params.get("bank1").data().end());
    for (std::size_t c = 0; c < cfg.d_b; ++c) bank[5 * cfg.d_b + c] += 1.0;
    params.set("bank1", bank);
    const auto after = LfqTokenizer(cfg, params, true).embed_discrete(codes);
    for (std::size_t c = 0; c < cfg.d_b; ++c) EXPECT_NE(after.at(0, c), before.at(0, c));
    for (std::size_t c = cfg.d_b; c < 2 * cfg.d_b; ++c) EXPECT_EQ(after.at(0, c), before.at(0, c));
}

TEST(EmbedDiscrete, OutOfRangeIdIsContractViolation) {
    LfqTokenizer tok(tiny_config(), 7);
    const std::vector<PatchCode> codes{{32, 0}};
    EXPECT_THROW(tok.embed_discrete(codes), ContractViolation);
}

TEST(Hybrid, PreProjectionWidthLaw) {
    TokenizerConfig cfg;
    cfg.d_c = 8;
    cfg.d_b = 4;
    EXPECT_EQ(cfg.hybrid_width(), 16u);
    Rng rng(8);
    const auto e_c = num::Tensor::matrix(3, 8, rng.normal_vector(24, 1));
    const auto e_d = num::Tensor::matrix(3, 8, rng.normal_vector(24, 1));
    const auto w = num::Tensor::matrix(16, 5, rng.normal_vector(80, 1));
    const auto b = num::Tensor::matrix(1, 5, rng.normal_vector(5, 1));
    const auto x = assemble_hybrid(e_c, e_d, false, w, b);
    EXPECT_EQ(x.rows(), 3u);
    EXPECT_EQ(x.cols(), 5u);
    EXPECT_THROW(assemble_hybrid(num::Tensor::matrix(2, 8, rng.normal_vector(16, 1)), e_d, false, w, b),
                 ContractViolation);
}

TEST(Hybrid, DisabledContiguousIgnoresPixels) {
    LfqTokenizer tok(TokenizerConfig{}, 9);
    Rng rng(10);
    const auto w = num::Tensor::matrix(48, 6, rng.normal_vector(48 * 6, 1));
    const auto b = num::Tensor::matrix(1, 6, rng.normal_vector(6, 1));
    const auto img1 = random_image(rng, 16, 16), img2 = random_image(rng, 16, 16);
    const auto codes = tok.tokenize(img1);
    const auto e_d = tok.embed_discrete(codes);
    const auto x1 = assemble_hybrid(tok.encode_image(img1), e_d, true, w, b);
    const auto x2 = assemble_hybrid(tok.encode_image(img2), e_d, true, w, b);
    for (std::size_t i = 0; i < x1.size(); ++i) ASSERT_EQ(x1[i], x2[i]);
    const auto on = assemble_hybrid(tok.encode_image(img1), e_d, false, w, b);
    double diff = 0.0;
    for (std::size_t i = 0; i < on.size(); ++i) diff += std::abs(on[i] - x1[i]);
    EXPECT_GT(diff, 0.0);
}

TEST(Decode, UntrainedDecoderIsShapeValidInUnitRange) {
    LfqTokenizer tok(TokenizerConfig{}, 11);
    Rng rng(12);
    const auto img = tok.decode_tokens(tok.tokenize(random_image(rng, 16, 16)));
    EXPECT_EQ(img.height, 16u);
    EXPECT_EQ(img.width, 16u);
    for (double v : img.pixels) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    const std::vector<PatchCode> few(3);
    EXPECT_THROW(tok.decode_tokens(few), ContractViolation);
}

TEST(Tokenize, DeterministicAcrossCalls) {
    LfqTokenizer tok(TokenizerConfig{}, 13);
    Rng rng(14);
    const auto img = random_image(rng, 16, 16);
    EXPECT_EQ(tok.tokenize(img), tok.tokenize(img));
}

TEST(Train, StraightThroughGradientReachesQuantizer) {
    const auto cfg = tiny_config();
    LfqTokenizer tok(cfg, 15);
    Rng rng(16);
    const std::vector<ToyImage> batch{random_image(rng, 16, 16), random_image(rng, 16, 16)};
    TokenizerTrainConfig tc;
    tc.entropy_bonus = false;
    const auto loss = tokenizer_loss(cfg, tok.params(), batch, tc);
    const auto grads = num::backward(loss);
    double norm = 0.0;
    for (double g : grads.of(tok.params().get("quant.w"))) norm += g * g;
    EXPECT_GT(norm, 0.0);
    double enc = 0.0;
    for (double g : grads.of(tok.params().get("enc.patch.w"))) enc += g * g;
    EXPECT_GT(enc, 0.0);
}

TEST(Train, EmptyDatasetIsInputError) {
    EXPECT_THROW(train_tokenizer({}, TokenizerConfig{}, TokenizerTrainConfig{}), InputError);
}

TEST(Train, ConstantColorCorpusReconstructsClosely) {
    const auto train = seqio::solid_images(1, 60);
    const auto held = seqio::solid_images(2, 12);
    TokenizerTrainConfig tc;
    tc.steps = 400;
    tc.warmup_steps = 20;
    const auto tok = train_tokenizer(train, TokenizerConfig{}, tc);
    EXPECT_LT(reconstruction_mse(tok, held), 1e-3);
    EXPECT_TRUE(tok.frozen());
    auto copy = tok;
    EXPECT_THROW(copy.mutable_params(), ContractViolation);
}

TEST(Ppm, RoundTripAndErrors) {
    const auto dir = std::filesystem::temp_directory_path() / "libra_test_ppm";
    std::filesystem::create_directories(dir);
    Rng rng(17);
    ToyImage img(4, 6);
    for (auto& v : img.pixels) v = static_cast<double>(rng.index(256)) / 255.0;
    write_ppm(dir / "a.ppm", img);
    const auto back = read_ppm(dir / "a.ppm");
    ASSERT_EQ(back.height, 4u);
    ASSERT_EQ(back.width, 6u);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-12);
    std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
    EXPECT_THROW(read_ppm(dir / "bad.ppm"), InputError);
    std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n2 2\n255\nabc";
    EXPECT_THROW(read_ppm(dir / "short.ppm"), InputError);
    EXPECT_THROW(read_ppm(dir / "missing.ppm"), InputError);
    std::filesystem::remove_all(dir);
}
