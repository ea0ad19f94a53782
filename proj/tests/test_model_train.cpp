#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "libra/error.hpp"
#include "libra/model/model.hpp"
#include "libra/num/autodiff.hpp"
#include "libra/seqio/synth.hpp"
#include "libra/train/eval.hpp"
#include "libra/train/loss.hpp"
#include "libra/train/trainer.hpp"

using namespace libra;
using model::LibraModel;
using model::ModelConfig;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.routed.d_model = 16;
    c.routed.heads = 2;
    c.routed.ffn_hidden = 24;
    c.routed.bridge_rank = 4;
    c.layers = 2;
    c.max_seq = 256;
    auto& t = c.tokenizer;
    t.d_c = 8;
    t.encoder_layers = 1;
    t.encoder_heads = 1;
    t.encoder_ffn = 8;
    t.d_b = 4;
    t.decoder_width = 8;
    t.decoder_layers = 1;
    t.decoder_heads = 1;
    t.decoder_ffn = 8;
    return c;
}

LibraModel small_model(std::uint64_t seed = 1) {
    const auto c = small_config();
    imgtok::LfqTokenizer tok(c.tokenizer, seed + 100);
    tok.freeze();
    return LibraModel(c, tok, seed);
}

/// Fills every vision tensor with noise so experts and bridges are active.
void randomize_vision(LibraModel& m, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (const auto& name : m.params().names()) {
        if (name.rfind("vis.", 0) != 0) continue;
        std::vector<double> v(m.params().get(name).size());
        for (double& x : v) x = scale * rng.normal();
        m.mutable_params().set(name, std::move(v));
    }
}

seqio::MultimodalSequence pretrain_seq(const LibraModel& m, const seqio::SyntheticSample& s) {
    return seqio::build_pretrain_sequence(m.vocab(), m.vision_tokens(s.image), s.caption, m.sequence_options());
}

seqio::MultimodalSequence sft_seq(const LibraModel& m, const seqio::SftSample& s) {
    return seqio::build_sft_sequence(m.vocab(), m.vision_tokens(s.image), s.instruction, s.answer,
                                     seqio::kSystemMessage, m.sequence_options());
}

std::vector<double> values(const num::Tensor& t) {
    const auto d = t.data();
    return {d.begin(), d.end()};
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("libra_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(Model, ForwardShapes) {
    const auto m = small_model();
    const auto s = seqio::synth_dataset(1, 1)[0];
    const auto seq = pretrain_seq(m, s);
    const auto out = m.forward(seq);
    const std::size_t L = seq.tokens.size();
    EXPECT_EQ(out.lang.shape(), (num::Shape{L, static_cast<std::size_t>(m.vocab().size())}));
    EXPECT_EQ(out.vis1.shape(), (num::Shape{L, 32}));
    EXPECT_EQ(out.vis2.shape(), (num::Shape{L, 32}));
}

TEST(Model, TextOnlyMatchesBackboneForRandomVisionSide) {
    auto m = small_model(2);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        randomize_vision(m, seed + 10);
        const auto seq = seqio::build_text_sequence(m.vocab(), "a red circle on blue background");
        const auto full = values(m.forward(seq).lang);
        const auto back = values(m.backbone_logits(seq.tokens));
        ASSERT_EQ(full.size(), back.size());
        for (std::size_t i = 0; i < full.size(); ++i) ASSERT_EQ(full[i], back[i]) << i;
    }
}

TEST(Model, PrefixStability) {
    auto m = small_model(3);
    randomize_vision(m, 4);
    const auto seq = pretrain_seq(m, seqio::synth_dataset(2, 1)[0]);
    const auto full = m.forward(seq);
    auto prefix = seq;
    const std::size_t k = seq.tokens.size() - 5;
    prefix.tokens.resize(k);
    prefix.codes.resize(k);
    prefix.is_patch.resize(k);
    prefix.modality.resize(k);
    prefix.supervised.resize(k);
    prefix.supervised.back() = false;
    const auto part = m.forward(prefix);
    const auto a = values(full.lang), b = values(part.lang);
    for (std::size_t i = 0; i < b.size(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Model, VisionTrainablesAreDisjointFromBackbone) {
    const auto m = small_model();
    const auto pre = m.trainable_params(model::Stage::pretrain);
    const auto sft = m.trainable_params(model::Stage::sft);
    for (const auto& n : pre) {
        EXPECT_EQ(n.rfind("vis.", 0), 0u) << n;
        EXPECT_NE(std::find(sft.begin(), sft.end(), n), sft.end()) << n;
    }
    EXPECT_GT(sft.size(), pre.size());
    EXPECT_THROW(model::parse_stage("finetune"), ConfigError);
}

TEST(Generate, StopsAtEosAndRespectsBudget) {
    auto m = small_model(4);
    const auto vis = m.vision_tokens(seqio::synth_dataset(3, 1)[0].image);
    const auto prefix = seqio::build_prefix(m.vocab(), vis, "", m.sequence_options());
    const auto out = model::generate_text(m, prefix, 7);
    EXPECT_LE(out.size(), 7u);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) EXPECT_NE(out[i], m.vocab().eos());

    if (out.size() < 7u) EXPECT_EQ(out.back(), m.vocab().eos());
    EXPECT_TRUE(model::generate_text(m, prefix, 0).empty());
}

TEST(CompleteImage, EmitsRemainingPatchesWithIdsInRange) {
    auto m = small_model(5);
    randomize_vision(m, 6);
    const auto vis = m.vision_tokens(seqio::synth_dataset(4, 1)[0].image);
    const std::size_t P = vis.codes.size();
    for (std::size_t k : {std::size_t{1}, P / 2, P - 1}) {
        const auto c = model::complete_image(m, seqio::build_image_prefix(m.vocab(), vis, k, m.sequence_options()));
        ASSERT_EQ(c.codes.size(), P - k);
        for (const auto& code : c.codes) {
            EXPECT_LT(code.id1, 32u);
            EXPECT_LT(code.id2, 32u);
        }
    }
    EXPECT_THROW(model::complete_image(m, seqio::build_image_prefix(m.vocab(), vis, P, m.sequence_options())),
                 InputError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto m = small_model(6);
    randomize_vision(m, 7);
    m.set_flag("stage", "pretrain");
    const auto dir = temp_dir("ckpt");
    m.save(dir / "m.ckpt");
    const auto back = LibraModel::load(dir / "m.ckpt");
    EXPECT_EQ(back.flag("stage").value_or(""), "pretrain");
    EXPECT_EQ(back.tokenizer().encoder_checksum(), m.tokenizer().encoder_checksum());
    for (const auto& s : seqio::synth_dataset(5, 5)) {
        const auto seq = pretrain_seq(m, s);
        EXPECT_EQ(values(m.forward(seq).lang), values(back.forward(seq).lang));
        EXPECT_EQ(values(m.forward(seq).vis2), values(back.forward(seq).vis2));
    }
}

TEST(Checkpoint, HeaderListsEachArrayOnce) {
    const auto m = small_model(7);
    const auto dir = temp_dir("ckpt_header");
    m.save(dir / "m.ckpt");
    const auto header = nlohmann::json::parse(model::checkpoint_header(dir / "m.ckpt"));
    std::set<std::string> seen;
    for (const auto& a : header["arrays"]) EXPECT_TRUE(seen.insert(a["name"].get<std::string>()).second);
    for (const auto& n : m.params().names()) EXPECT_TRUE(seen.count(n)) << n;
}

TEST(Checkpoint, MismatchedWidthIsConfigError) {
    const auto m = small_model(8);
    const auto dir = temp_dir("ckpt_bad");
    m.save(dir / "m.ckpt");
    auto ck = model::load_checkpoint(dir / "m.ckpt");
    ck.config["d_model"] = "32";
    model::save_checkpoint(dir / "bad.ckpt", ck);
    EXPECT_THROW(LibraModel::load(dir / "bad.ckpt"), ConfigError);
}

TEST(Loss, UniformHeadsGiveLogVocabAndLogCodebook) {
    auto m = small_model(9);
    m.mutable_params().set("lm.head", std::vector<double>(m.params().get("lm.head").size(), 0.0));
    std::vector<seqio::MultimodalSequence> batch;
    for (const auto& s : seqio::synth_dataset(6, 3)) batch.push_back(pretrain_seq(m, s));
    const auto parts = train::pretrain_loss(m, batch);
    const double lv = std::log(static_cast<double>(m.vocab().size())), lc = std::log(32.0);
    EXPECT_NEAR(parts.text_ce, lv, 1e-12);
    EXPECT_NEAR(parts.vision_ce1, lc, 1e-12);
    EXPECT_NEAR(parts.vision_ce2, lc, 1e-12);
    const double n = static_cast<double>(parts.text_targets + parts.vision_targets);
    EXPECT_NEAR(parts.total.item(), (parts.text_targets * lv + parts.vision_targets * 2 * lc) / n, 1e-12);
}

TEST(Loss, NewlineTargetLabelIsIgnored) {
    auto m = small_model(10);
    randomize_vision(m, 11);
    const auto seq = pretrain_seq(m, seqio::synth_dataset(7, 1)[0]);
    const auto f = m.forward(seq);
    const auto labels = train::next_token_labels(seq);
    const double base = train::masked_loss(f, seq, labels, 1.0, true).total.item();
    EXPECT_EQ(base, train::pretrain_loss(m, std::span(&seq, 1)).total.item() * seq.supervised_count());
    const std::size_t nl = seq.image_start + seq.patch_count;  // position whose target is the newline
    ASSERT_EQ(labels[nl], m.vocab().newline());
    ASSERT_FALSE(seq.supervised[nl]);
    for (int label : {0, 5, m.vocab().eos(), 1 << 20}) {
        auto p = labels;
        p[nl] = label;
        EXPECT_EQ(train::masked_loss(f, seq, p, 1.0, true).total.item(), base);
    }
    auto p = labels;
    p[nl + 1] = (p[nl + 1] + 1) % m.vocab().char_count();
    EXPECT_NE(train::masked_loss(f, seq, p, 1.0, true).total.item(), base);
}

TEST(Loss, InstructionLabelsIgnoredAndVisionHeadsGetNoSftGradient) {
    auto m = small_model(11);
    randomize_vision(m, 12);
    const auto seq = sft_seq(m, seqio::synth_sft_dataset(8, 1)[0]);
    const auto f = m.forward(seq);
    const auto labels = train::next_token_labels(seq);
    const double base = train::masked_loss(f, seq, labels, 1.0, false).total.item();
    std::size_t perturbed = 0;
    for (std::size_t l = 0; l + 1 < seq.size(); ++l) {
        if (seq.supervised[l]) continue;
        auto p = labels;
        p[l] = (p[l] + 1) % m.vocab().char_count();
        ASSERT_EQ(train::masked_loss(f, seq, p, 1.0, false).total.item(), base) << l;
        ++perturbed;
    }
    EXPECT_GT(perturbed, 100u);
    const auto g = num::backward(train::sft_loss(m, std::span(&seq, 1)).total);
    for (const char* head : {"vis.head1", "vis.head2"})
        for (double v : g.dense(m.params().get(head))) ASSERT_EQ(v, 0.0);
}

TEST(Loss, EmptySupervisionIsInputError) {
    const auto m = small_model(12);
    auto seq = pretrain_seq(m, seqio::synth_dataset(9, 1)[0]);
    std::fill(seq.supervised.begin(), seq.supervised.end(), false);
    EXPECT_THROW(train::pretrain_loss(m, std::span(&seq, 1)), InputError);
}

TEST(Schedule, WarmupPeakAndCosineFloor) {
    train::OptimizerConfig c;
    c.lr = 1e-3;
    c.warmup_steps = 10;
    c.total_steps = 100;
    EXPECT_EQ(train::lr_at(c, 0), 0.0);
    EXPECT_DOUBLE_EQ(train::lr_at(c, 10), 1e-3);
    EXPECT_NEAR(train::lr_at(c, 9), train::lr_at(c, 11), 2e-4);
    EXPECT_LT(train::lr_at(c, 99), 1e-6);
    c.warmup_steps = 100;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, PretrainLeavesBackboneAndTokenizerUntouched) {
    auto m = small_model(13);
    std::vector<seqio::MultimodalSequence> data;
    for (const auto& s : seqio::synth_dataset(10, 8)) data.push_back(pretrain_seq(m, s));
    const auto before = m.backbone_checksum();
    const auto vis_before = values(m.params().get("vis.proj.w"));
    train::TrainConfig tc;
    tc.opt.total_steps = 3;
    tc.opt.warmup_steps = 1;
    tc.opt.lr = 1e-2;
    tc.batch = 4;
    train::train_stage(m, model::Stage::pretrain, data, tc);
    EXPECT_EQ(m.backbone_checksum(), before);
    EXPECT_NE(values(m.params().get("vis.proj.w")), vis_before);
}

TEST(Train, SftKeepsNewlineEmbeddingFixed) {
    auto m = small_model(14);
    std::vector<seqio::MultimodalSequence> data;
    for (const auto& s : seqio::synth_sft_dataset(11, 6)) data.push_back(sft_seq(m, s));
    const auto embed = values(m.params().get("lm.embed"));
    train::TrainConfig tc;
    tc.opt.total_steps = 3;
    tc.opt.warmup_steps = 1;
    tc.opt.lr = 1e-2;
    tc.batch = 3;
    train::train_stage(m, model::Stage::sft, data, tc);
    const auto after = values(m.params().get("lm.embed"));
    const std::size_t d = m.config().routed.d_model, nl = static_cast<std::size_t>(m.vocab().newline());
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(after[nl * d + j], embed[nl * d + j]);
    EXPECT_NE(after, embed);
    EXPECT_NE(m.backbone_checksum(), small_model(14).backbone_checksum());
}

TEST(Train, DeterministicAcrossRunsAndThreadCounts) {
    std::vector<std::string> files;
    for (std::size_t threads : {1u, 1u, 3u}) {
        auto m = small_model(15);
        std::vector<seqio::MultimodalSequence> data;
        for (const auto& s : seqio::synth_dataset(12, 8)) data.push_back(pretrain_seq(m, s));
        const auto dir = temp_dir("det" + std::to_string(files.size()));
        train::TrainConfig tc;
        tc.opt.total_steps = 4;
        tc.opt.warmup_steps = 1;
        tc.batch = 4;
        tc.seed = 9;
        tc.threads = threads;
        tc.out_dir = dir;
        train::train_stage(m, model::Stage::pretrain, data, tc);
        std::ifstream in(dir / "metrics.jsonl");
        files.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    EXPECT_FALSE(files[0].empty());
    EXPECT_EQ(files[0], files[1]);
    EXPECT_EQ(files[0], files[2]);
    std::istringstream lines(files[0]);
    std::string line;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* k : {"loss", "text_ce", "vision_ce1", "vision_ce2", "grad_norm", "lr"})
            EXPECT_TRUE(std::isfinite(j.at(k).get<double>())) << k;
    }
}

TEST(Train, NonFiniteLossWritesDiagnostic) {
    auto m = small_model(16);
    std::vector<double> bad(m.params().get("vis.head1").size(), std::nan(""));
    m.mutable_params().set("vis.head1", bad);
    std::vector<seqio::MultimodalSequence> data{pretrain_seq(m, seqio::synth_dataset(13, 1)[0])};
    const auto dir = temp_dir("diag");
    train::TrainConfig tc;
    tc.opt.total_steps = 2;
    tc.opt.warmup_steps = 1;
    tc.batch = 1;
    tc.out_dir = dir;
    EXPECT_THROW(train::train_stage(m, model::Stage::pretrain, data, tc), NumericError);
    EXPECT_TRUE(std::filesystem::exists(dir / "diagnostic.json"));
}

TEST(Train, PeriodicCheckpointsAreWritten) {
    auto m = small_model(17);
    std::vector<seqio::MultimodalSequence> data{pretrain_seq(m, seqio::synth_dataset(14, 1)[0])};
    const auto dir = temp_dir("periodic");
    train::TrainConfig tc;
    tc.opt.total_steps = 4;
    tc.opt.warmup_steps = 1;
    tc.batch = 1;
    tc.out_dir = dir;
    tc.checkpoint_every = 2;
    train::train_stage(m, model::Stage::pretrain, data, tc);
    EXPECT_TRUE(std::filesystem::exists(dir / "pretrain_step2.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "pretrain_step4.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "summary.csv"));
}

TEST(Eval, UnigramModeAndCaptionStatistics) {
    const auto m = small_model(18);
    const std::vector<std::string> caps{"aab", "ab"};
    EXPECT_EQ(train::caption_unigram_mode(m.vocab(), caps), m.vocab().encode("a")[0]);
    std::vector<train::CaptionExample> ex;
    for (const auto& s : seqio::synth_dataset(15, 3)) ex.push_back({s.image, s.caption});
    const auto e1 = train::evaluate_captions(m, ex, m.vocab().eos(), 1);
    const auto e2 = train::evaluate_captions(m, ex, m.vocab().eos(), 2);
    EXPECT_EQ(e1.conditioned_ce, e2.conditioned_ce);
    EXPECT_EQ(e1.caption_targets, e2.caption_targets);
    // One <EOS> target per caption.
    EXPECT_DOUBLE_EQ(e1.unigram_accuracy, 3.0 / static_cast<double>(e1.caption_targets));
    EXPECT_NEAR(e1.vision_ce1, std::log(32.0), 1e-12);
}
