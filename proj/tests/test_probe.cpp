#include <gtest/gtest.h>

#include <sstream>

#include "libra/error.hpp"
#include "libra/probe/probe.hpp"
#include "libra/seqio/synth.hpp"

using namespace libra;
using namespace libra::probe;

namespace {

AttentionMap row(std::vector<double> v) { return {1, v.size(), std::move(v)}; }

model::LibraModel tiny_model() {
    model::ModelConfig c;
    c.routed.d_model = 16;
    c.routed.heads = 2;
    c.routed.ffn_hidden = 16;
    c.routed.bridge_rank = 4;
    c.layers = 2;
    c.tokenizer.d_c = 8;
    c.tokenizer.encoder_layers = 1;
    c.tokenizer.encoder_heads = 1;
    c.tokenizer.encoder_ffn = 8;
    c.tokenizer.d_b = 4;
    c.tokenizer.decoder_width = 8;
    c.tokenizer.decoder_layers = 1;
    c.tokenizer.decoder_heads = 1;
    c.tokenizer.decoder_ffn = 8;
    imgtok::LfqTokenizer tok(c.tokenizer, 3);
    return model::LibraModel(c, tok, 4);
}

}  // namespace

TEST(CrossLayer, HandComputedTwoLayers) {
    AttentionRecord r;
    r.maps = {{row({0.2, 0.8})}, {row({0.6, 0.4})}};
    const auto d = cross_layer_diff(r);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_NEAR(d[0], 0.2, 1e-15);
    EXPECT_NEAR(d[1], 0.2, 1e-15);
}

TEST(CrossLayer, SingleLayerAndIdenticalLayersAreZero) {
    AttentionRecord one;
    one.maps = {{row({0.3, 0.7}), row({0.9, 0.1})}};
    EXPECT_EQ(cross_layer_diff(one), std::vector<double>{0.0});
    AttentionRecord same;
    same.maps = {{row({0.3, 0.7})}, {row({0.3, 0.7})}, {row({0.3, 0.7})}};
    for (double v : cross_layer_diff(same)) EXPECT_EQ(v, 0.0);
}

TEST(InnerLayer, HandComputedTwoHeads) {
    AttentionRecord r;
    r.maps = {{row({1.0, 0.0}), row({0.0, 1.0})}};
    const auto d = inner_layer_diff(r);
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d[0], (std::vector<double>{0.5, 0.5}));
}

TEST(InnerLayer, IdenticalHeadsAreZeroAndRelabelingPermutes) {
    AttentionRecord r;
    r.maps = {{row({0.1, 0.9}), row({0.1, 0.9})}, {row({0.5, 0.2}), row({0.1, 0.3}), }};
    const auto d = inner_layer_diff(r);
    EXPECT_EQ(d[0], (std::vector<double>{0.0, 0.0}));
    AttentionRecord swapped;
    swapped.maps = {r.maps[1], r.maps[0]};
    const auto s = inner_layer_diff(swapped);
    EXPECT_EQ(s[0], d[1]);
    EXPECT_EQ(s[1], d[0]);
    const auto c = cross_layer_diff(r), cs = cross_layer_diff(swapped);
    EXPECT_EQ(c[0], cs[1]);
    EXPECT_EQ(c[1], cs[0]);
    for (double v : c) EXPECT_GE(v, 0.0);
}

TEST(EmptyRecord, IsInputError) {
    EXPECT_THROW(cross_layer_diff(AttentionRecord{}), InputError);
    EXPECT_THROW(inner_layer_diff(AttentionRecord{}), InputError);
}

TEST(ActivationMap, UniformAndOneHot) {
    AttentionRecord u;
    u.maps = {{row(std::vector<double>(16, 1.0 / 16))}};
    for (const auto& r : activation_map(u, 0, 4, 4))
        for (double v : r) EXPECT_EQ(v, 1.0 / 16);
    std::vector<double> hot(16, 0.0);
    hot[7] = 1.0;
    AttentionRecord h;
    h.maps = {{row(hot), row(hot)}};
    const auto g = activation_map(h, 0, 4, 4);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(g[y][x], (y == 1 && x == 3) ? 1.0 : 0.0);
}

TEST(ActivationMap, RejectsNonGridAndMultiQuery) {
    AttentionRecord r;
    r.maps = {{row(std::vector<double>(15, 0.0))}};
    EXPECT_THROW(activation_map(r, 0, 4, 4), InputError);
    EXPECT_THROW(activation_map(r, 1, 3, 5), InputError);
    AttentionRecord two;
    two.maps = {{AttentionMap{2, 16, std::vector<double>(32, 0.0)}}};
    EXPECT_THROW(activation_map(two, 0, 4, 4), InputError);
}

TEST(Record, ShapesRowSumsAndObservationOnly) {
    const auto m = tiny_model();
    const auto s = seqio::synth_sft_dataset(5, 1)[0];
    const auto p = answer_probe(m, s.image, s.instruction, s.answer);
    EXPECT_EQ(p.seq.tokens[p.answer.begin], m.vocab().encode(s.answer)[0]);
    const auto rec = record_attention(m, p.seq, p.answer, p.patches);
    ASSERT_EQ(rec.layers(), 2u);
    ASSERT_EQ(rec.heads(), 2u);
    EXPECT_EQ(rec.maps[0][0].rows, 1u);
    EXPECT_EQ(rec.maps[0][0].cols, 16u);

    const auto full = record_attention(m, p.seq, p.answer, {0, p.answer.end});
    for (const auto& layer : full.maps)
        for (const auto& h : layer) {
            double sum = 0.0;
            for (double v : h.values) sum += v;
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    for (const auto& layer : rec.maps)
        for (const auto& h : layer) {
            double sum = 0.0;
            for (double v : h.values) sum += v;
            EXPECT_LE(sum, 1.0 + 1e-12);
        }

    model::ModelCapture cap;
    const auto with = m.forward(p.seq, &cap);
    const auto without = m.forward(p.seq);
    const auto a = with.lang.data(), b = without.lang.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    EXPECT_THROW(record_attention(m, p.seq, {3, 3}, p.patches), InputError);
    EXPECT_THROW(record_attention(m, p.seq, {0, 1000}, p.patches), InputError);
}

TEST(Csv, RowsPerLayerAndHead) {
    std::ostringstream out;
    write_diff_csv_header(out);
    write_diff_csv_rows(out, "s0", {0.25, 0.5}, {{0.0, 1.0}, {0.125, 0.5}});
    EXPECT_EQ(out.str(),
              "sample_id,kind,layer,head,diff\n"
              "s0,cross,0,mean,0.25\ns0,cross,1,mean,0.5\n"
              "s0,inner,0,0,0\ns0,inner,0,1,1\ns0,inner,1,0,0.125\ns0,inner,1,1,0.5\n");
}
