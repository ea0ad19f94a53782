#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "libra/error.hpp"
#include "libra/seqio/sequence.hpp"
#include "libra/seqio/synth.hpp"

using namespace libra;
using namespace libra::seqio;

namespace {

VisionTokens fake_vision(std::size_t patches, std::size_t d_c = 4) {
    VisionTokens v;
    for (std::size_t i = 0; i < patches; ++i)
        v.codes.push_back({static_cast<std::uint32_t>(i % 32), static_cast<std::uint32_t>((3 * i) % 32)});
    v.features = num::Tensor::matrix(patches, d_c, std::vector<double>(patches * d_c, 0.5));
    return v;
}

}  // namespace

TEST(Vocab, SpecialsAreDistinctAndOutsideCharRange) {
    const Vocab v;
    const std::set<int> specials{v.pad(), v.boi(), v.eoi(), v.newline(), v.eos()};
    EXPECT_EQ(specials.size(), 5u);
    for (int id : specials) {
        EXPECT_GE(id, v.char_count());
        EXPECT_TRUE(v.is_special(id));
    }
    EXPECT_EQ(v.size(), v.char_count() + 5);
}

TEST(Vocab, EmptyTextAndOrder) {
    const Vocab v;
    EXPECT_TRUE(v.encode("").empty());
    const auto ab = v.encode("ab");
    ASSERT_EQ(ab.size(), 2u);
    EXPECT_LT(ab[0], ab[1]);
    EXPECT_EQ(v.decode(ab), "ab");
}

TEST(Vocab, OutOfAlphabetIsInputError) {
    const Vocab v;
    EXPECT_THROW(v.encode("caf\xc3\xa9"), InputError);
    EXPECT_THROW(v.encode("a~b"), InputError);
}

TEST(Vocab, RoundTripsGeneratedText) {
    const Vocab v;
    for (const auto& s : synth_dataset(3, 50)) EXPECT_EQ(v.decode(v.encode(s.caption)), s.caption);
    for (const auto& s : synth_sft_dataset(3, 50)) {
        EXPECT_EQ(v.decode(v.encode(s.instruction)), s.instruction);
        EXPECT_EQ(v.decode(v.encode(s.answer)), s.answer);
    }
    EXPECT_EQ(v.decode(v.encode(kSystemMessage)), kSystemMessage);
}

TEST(Pretrain, LengthAndLayout) {
    const Vocab v;
    const auto seq = build_pretrain_sequence(v, fake_vision(16), "0123456789");
    ASSERT_EQ(seq.size(), 30u);
    seq.validate();
    EXPECT_EQ(seq.tokens[0], v.boi());
    EXPECT_EQ(seq.image_start, 1u);
    EXPECT_EQ(seq.patch_count, 16u);
    EXPECT_EQ(seq.tokens[17], v.eoi());
    EXPECT_EQ(seq.tokens[18], v.newline());
    EXPECT_EQ(seq.tokens[29], v.eos());
    // BOI position supervises the first patch.
    EXPECT_TRUE(seq.supervised[0]);
    EXPECT_TRUE(seq.is_patch[1]);
    // Exactly one interior target is excluded: the newline, predicted from <EOI>.
    std::size_t excluded = 0;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        if (!seq.supervised[i]) {
            ++excluded;
            EXPECT_EQ(seq.tokens[i + 1], v.newline());
        }
    EXPECT_EQ(excluded, 1u);
    EXPECT_FALSE(seq.supervised.back());
}

TEST(Pretrain, ModalityRoutingOfSpecials) {
    const Vocab v;
    const auto routed = build_pretrain_sequence(v, fake_vision(4), "ab", {.route_specials = true});
    const auto plain = build_pretrain_sequence(v, fake_vision(4), "ab", {.route_specials = false});
    EXPECT_EQ(routed.modality[0], Modality::vision);
    EXPECT_EQ(routed.modality[5], Modality::vision);
    EXPECT_EQ(plain.modality[0], Modality::language);
    EXPECT_EQ(plain.modality[5], Modality::language);
    for (std::size_t i = 1; i <= 4; ++i) {
        EXPECT_EQ(routed.modality[i], Modality::vision);
        EXPECT_EQ(plain.modality[i], Modality::vision);
    }
    for (std::size_t i = 6; i < routed.size(); ++i) EXPECT_EQ(routed.modality[i], Modality::language);
}

TEST(Sft, OnlyAnswerAndEosSupervised) {
    const Vocab v;
    const auto seq = build_sft_sequence(v, fake_vision(16), "What color is the shape?", "green");
    seq.validate();
    EXPECT_EQ(seq.supervised_count(), 6u);
    std::string targets;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        if (seq.supervised[i]) targets += v.token_string(seq.tokens[i + 1]);
    EXPECT_EQ(targets, "green<eos>");
    const std::string text = v.decode(std::vector<int>(seq.tokens.begin() + 19, seq.tokens.end()));
    EXPECT_EQ(text, std::string(kSystemMessage) + "\n[USER]: What color is the shape?\n[ASSISTANT]: green<eos>");
}

TEST(Sft, EmptyAnswerIsInputError) {
    const Vocab v;
    EXPECT_THROW(build_sft_sequence(v, fake_vision(4), "q", ""), InputError);
}

TEST(Sequence, ImagePrefixAndAppend) {
    const Vocab v;
    auto seq = build_image_prefix(v, fake_vision(16), 8);
    EXPECT_EQ(seq.size(), 9u);
    EXPECT_TRUE(seq.disable_contiguous);
    append_patch(seq, {1, 2});
    EXPECT_EQ(seq.patch_count, 9u);
    seq.validate();
    append_text(seq, v.eoi());
    EXPECT_THROW(append_patch(seq, {0, 0}), ContractViolation);
    EXPECT_THROW(build_image_prefix(v, fake_vision(4), 5), InputError);
}

TEST(Sequence, TextOnlyIsAllLanguage) {
    const Vocab v;
    const auto seq = build_text_sequence(v, "a red square");
    seq.validate();
    EXPECT_EQ(seq.size(), 14u);
    for (auto m : seq.modality) EXPECT_EQ(m, Modality::language);
    EXPECT_EQ(seq.supervised_count(), 13u);
}

TEST(Synth, DeterministicForSeed) {
    const auto a = synth_dataset(5, 40), b = synth_dataset(5, 40);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].caption, b[i].caption);
    }
}

TEST(Synth, CoversEveryColorShapeCombination) {
    std::set<std::pair<std::size_t, int>> seen;
    for (const auto& s : synth_dataset(11, 1000)) seen.insert({s.scene.fg, static_cast<int>(s.scene.shape)});
    EXPECT_EQ(seen.size(), kColors.size() * kShapeNames.size());
}

TEST(Synth, CaptionsMatchRenderedPixels) {
    // Audit: the named colors are the colors actually painted where the scene says.
    for (const auto& s : synth_dataset(12, 20)) {
        const auto& sc = s.scene;
        EXPECT_NE(sc.fg, sc.bg);
        EXPECT_EQ(s.caption, caption_for(sc));
        EXPECT_NE(s.caption.find(kColors[sc.fg].name), std::string::npos);
        EXPECT_NE(s.caption.find(kShapeNames[static_cast<std::size_t>(sc.shape)]), std::string::npos);
        std::size_t fg = 0, bg = 0;
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                const auto& want = kColors[covers(sc, y, x) ? sc.fg : sc.bg].rgb;
                for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(s.image.at(y, x, c), want[c]);
                (covers(sc, y, x) ? fg : bg) += 1;
            }
        EXPECT_GT(fg, 0u);
        EXPECT_GT(bg, 0u);
    }
}

TEST(Synth, CorpusRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "libra_test_corpus";
    std::filesystem::remove_all(dir);
    const auto data = synth_dataset(13, 5);
    write_corpus(dir, data);
    const auto back = read_corpus(dir);
    ASSERT_EQ(back.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(back[i].caption, data[i].caption);
        EXPECT_EQ(caption_for(back[i].scene), data[i].caption);
        for (std::size_t p = 0; p < data[i].image.pixels.size(); ++p)
            EXPECT_NEAR(back[i].image.pixels[p], data[i].image.pixels[p], 0.5 / 255.0 + 1e-12);
    }
    const auto sft = synth_sft_dataset(13, 4);
    write_sft_corpus(dir / "sft", sft);
    const auto sback = read_sft_corpus(dir / "sft");
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(sback[i].answer, sft[i].answer);
    EXPECT_THROW(read_corpus(dir / "missing"), InputError);
    std::filesystem::remove_all(dir);
}
