#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "libra/error.hpp"
#include "libra/imgtok/tokenizer_train.hpp"
#include "libra/model/model.hpp"
#include "libra/probe/probe.hpp"
#include "libra/seqio/synth.hpp"
#include "libra/train/eval.hpp"
#include "libra/train/trainer.hpp"
#include "libra/verify/suites.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace libra;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string ckpt;
    std::string data;
    std::string image;
    std::string prompt;
    std::string stage = "pretrain";
    std::optional<std::size_t> keep;
    bool disable_contiguous = false;
    std::optional<bool> route_specials, route_output_proj, route_norms;
};

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::uint64_t run_seed(const cli::RunConfig& rc) { return static_cast<std::uint64_t>(rc.size("seed")); }

fs::path require_out(const Options& o) {
    if (o.out.empty()) throw InputError("--out DIR is required");
    fs::create_directories(o.out);
    return o.out;
}

fs::path require_file(const std::string& path, const char* flag) {
    if (path.empty()) throw InputError(std::string(flag) + " PATH is required");
    if (!fs::is_regular_file(path)) throw InputError(std::string(flag) + ": no such file '" + path + "'");
    return path;
}

fs::path require_dir(const fs::path& dir, const char* what) {
    if (!fs::is_directory(dir)) throw InputError(std::string(what) + ": no such directory '" + dir.string() + "'");
    return dir;
}

void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

void fresh_metrics(const fs::path& out) {
    fs::remove(out / "metrics.jsonl");
    fs::remove(out / "summary.csv");
}

train::TrainConfig stage_config(const cli::RunConfig& rc, const std::string& prefix, const fs::path& out) {
    train::TrainConfig tc;
    tc.opt.lr = rc.real(prefix + "_lr");
    tc.opt.total_steps = rc.size(prefix + "_steps");
    tc.opt.warmup_steps = rc.size(prefix + "_warmup");
    tc.batch = rc.size(prefix + "_batch");
    tc.seed = derive_seed(run_seed(rc), prefix);
    tc.out_dir = out;
    tc.threads = train::threads_from_env();
    tc.contiguous_dropout = rc.real("contiguous_dropout");
    tc.checkpoint_every = rc.size("checkpoint_every");
    return tc;
}

/// Loads a model checkpoint and rejects routing flags that contradict it.
model::LibraModel load_model(const Options& o) {
    auto m = model::LibraModel::load(require_file(o.ckpt, "--ckpt"));
    const auto& c = m.config();
    auto check = [](const std::optional<bool>& want, bool have, const char* name) {
        if (want && *want != have)
            throw ConfigError(std::string("--") + name + " conflicts with the checkpoint (stored: " +
                              (have ? "on" : "off") + ")");
    };
    check(o.route_specials, c.route_specials, "route-specials");
    check(o.route_output_proj, c.routed.route_output_proj, "route-output-proj");
    check(o.route_norms, c.routed.route_norms, "route-norms");
    return m;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const cli::RunConfig& rc, const Options& o) {
    const auto out = require_out(o);
    const auto seed = run_seed(rc);
    const auto pre = seqio::synth_dataset(derive_seed(seed, "data.pretrain"), rc.size("n_pretrain"));
    const auto held = seqio::synth_dataset(derive_seed(seed, "data.heldout"), rc.size("n_heldout"));
    const auto sft = seqio::synth_sft_dataset(derive_seed(seed, "data.sft"), rc.size("n_sft"));
    const auto solid = seqio::solid_images(derive_seed(seed, "data.solid"), rc.size("n_solid"));
    seqio::write_corpus(out / "pretrain", pre);
    seqio::write_corpus(out / "heldout", held);
    seqio::write_sft_corpus(out / "sft", sft);
    fs::create_directories(out / "solid");
    for (std::size_t i = 0; i < solid.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.ppm", i);
        imgtok::write_ppm(out / "solid" / name, solid[i]);
    }
    std::cout << "pretrain=" << pre.size() << " heldout=" << held.size() << " sft=" << sft.size()
              << " solid=" << solid.size() << '\n';
    return 0;
}

int cmd_train_tokenizer(const cli::RunConfig& rc, const Options& o) {
    const auto out = require_out(o);
    const fs::path data = require_dir(o.data, "--data");
    std::vector<imgtok::ToyImage> images;
    for (const auto& s : seqio::read_corpus(data / "pretrain")) images.push_back(s.image);
    imgtok::TokenizerTrainConfig tc;
    tc.steps = rc.size("tok_steps");
    tc.batch = rc.size("tok_batch");
    tc.lr = rc.real("tok_lr");
    tc.warmup_steps = rc.size("tok_warmup");
    tc.entropy_weight = rc.real("tok_entropy_weight");
    tc.entropy_bonus = tc.entropy_weight > 0.0;
    tc.seed = derive_seed(run_seed(rc), "tokenizer");
    std::ofstream metrics(out / "tokenizer_metrics.jsonl");
    const auto tok = imgtok::train_tokenizer(images, rc.model_config().tokenizer, tc, [&](const imgtok::TokenizerStep& s) {
        metrics << json{{"step", s.step}, {"loss", s.loss}, {"mse", s.mse}}.dump() << '\n';
    });
    model::save_tokenizer(out / "tokenizer.ckpt", tok);
    json summary{{"train_images", images.size()}};
    if (fs::is_directory(data / "heldout")) {
        std::vector<imgtok::ToyImage> held;
        for (const auto& s : seqio::read_corpus(data / "heldout")) held.push_back(s.image);
        const auto usage = imgtok::code_usage(tok, held);
        summary["heldout_mse"] = imgtok::reconstruction_mse(tok, held);
        summary["code_usage"] = {usage.codebook1, usage.codebook2};
    }
    write_json(out / "tokenizer_eval.json", summary);
    std::cout << summary.dump() << '\n';
    return 0;
}

std::vector<train::CaptionExample> caption_examples(const fs::path& dir) {
    std::vector<train::CaptionExample> out;
    for (const auto& s : seqio::read_corpus(dir)) out.push_back({s.image, s.caption});
    return out;
}

int cmd_pretrain(const cli::RunConfig& rc, const Options& o) {
    const auto out = require_out(o);
    const fs::path data = require_dir(o.data, "--data");
    const auto corpus = seqio::read_corpus(data / "pretrain");
    fresh_metrics(out);
    const auto ckpt = require_file(o.ckpt, "--ckpt");

    std::optional<model::LibraModel> m;
    if (model::is_model_checkpoint(ckpt)) {
        m.emplace(load_model(o));
    } else {
        auto cfg = rc.model_config();
        auto tok = model::load_tokenizer(ckpt);
        cfg.tokenizer = tok.config();
        m.emplace(cfg, std::move(tok), derive_seed(run_seed(rc), "model.init"));
    }
    if (m->flag("backbone_trained").value_or("") != "true") {
        std::vector<std::vector<int>> texts;
        for (const auto& s : corpus) texts.push_back(train::caption_text_tokens(m->vocab(), s.caption));
        train::train_backbone(*m, texts, stage_config(rc, "backbone", out));
        m->reinit_vision(derive_seed(run_seed(rc), "model.vision"));
        m->set_flag("backbone_trained", "true");
        m->save(out / "backbone.ckpt");
    }

    std::vector<seqio::MultimodalSequence> seqs;
    std::vector<std::string> captions;
    for (const auto& s : corpus) {
        seqs.push_back(seqio::build_pretrain_sequence(m->vocab(), m->vision_tokens(s.image), s.caption,
                                                      m->sequence_options()));
        captions.push_back(s.caption);
    }
    const auto history = train::train_stage(*m, model::Stage::pretrain, seqs, stage_config(rc, "pretrain", out));
    m->set_flag("stage", "pretrain");
    m->save(out / "pretrain.ckpt");

    json summary{{"initial_loss", history.front().loss}, {"final_loss", history.back().loss}};
    if (fs::is_directory(data / "heldout")) {
        const auto held = caption_examples(data / "heldout");
        const auto e = train::evaluate_captions(*m, held, train::caption_unigram_mode(m->vocab(), captions),
                                                train::threads_from_env());
        summary["caption_accuracy"] = e.accuracy;
        summary["unigram_accuracy"] = e.unigram_accuracy;
        summary["conditioned_caption_ce"] = e.conditioned_ce;
        summary["backbone_caption_ce"] = e.backbone_ce;
        summary["vision_ce"] = {e.vision_ce1, e.vision_ce2};
    }
    write_json(out / "pretrain_eval.json", summary);
    std::cout << summary.dump() << '\n';
    return 0;
}

int cmd_sft(const cli::RunConfig& rc, const Options& o) {
    const auto out = require_out(o);
    const fs::path data = require_dir(o.data, "--data");
    fresh_metrics(out);
    auto m = load_model(o);
    std::vector<seqio::MultimodalSequence> seqs;
    for (const auto& s : seqio::read_sft_corpus(data / "sft"))
        seqs.push_back(seqio::build_sft_sequence(m.vocab(), m.vision_tokens(s.image), s.instruction, s.answer,
                                                 seqio::kSystemMessage, m.sequence_options()));
    const auto history = train::train_stage(m, model::Stage::sft, seqs, stage_config(rc, "sft", out));
    m.set_flag("stage", "sft");
    m.save(out / "sft.ckpt");
    json summary{{"initial_loss", history.front().loss}, {"final_loss", history.back().loss}};
    write_json(out / "sft_eval.json", summary);
    std::cout << summary.dump() << '\n';
    return 0;
}

int cmd_generate(const cli::RunConfig& rc, const Options& o) {
    const auto m = load_model(o);
    const auto image = imgtok::read_ppm(require_file(o.image, "--image"));
    const auto vision = m.vision_tokens(image);
    const std::string text = o.prompt.empty() ? std::string() : seqio::sft_prompt(o.prompt);
    auto prefix = seqio::build_prefix(m.vocab(), vision, text, m.sequence_options());
    prefix.disable_contiguous = o.disable_contiguous;
    const auto ids = model::generate_text(m, prefix, rc.size("max_new"));
    std::cout << m.vocab().decode(ids) << '\n';
    return 0;
}

int cmd_complete_image(const cli::RunConfig&, const Options& o) {
    const auto out = require_out(o);
    const auto m = load_model(o);
    const auto image = imgtok::read_ppm(require_file(o.image, "--image"));
    json j;
    if (o.keep) {
        const auto vision = m.vision_tokens(image);
        auto codes = vision.codes;
        codes.resize(std::min(*o.keep, codes.size()));
        const auto done = model::complete_image(m, seqio::build_image_prefix(m.vocab(), vision, *o.keep, m.sequence_options()));
        codes.insert(codes.end(), done.codes.begin(), done.codes.end());
        imgtok::write_ppm(out / "completed.ppm", m.tokenizer().decode_tokens(codes));
        j = {{"kept_patches", *o.keep}, {"completed_patches", done.codes.size()}, {"eoi_predicted", done.eoi_predicted}};
    } else {
        const auto r = train::complete_bottom_half(m, image);
        imgtok::write_ppm(out / "completed.ppm", r.decoded);
        j = {{"visible_mean", r.visible_mean},
             {"completed_mean", r.completed_mean},
             {"max_channel_error", r.max_channel_error},
             {"eoi_predicted", r.eoi_predicted}};
    }
    write_json(out / "completion.json", j);
    std::cout << j.dump() << '\n';
    return 0;
}

int cmd_probe_attn(const cli::RunConfig& rc, const Options& o) {
    const auto out = require_out(o);
    const auto m = load_model(o);
    const fs::path data = require_dir(o.data, "--data");
    const auto samples = seqio::read_sft_corpus(data / "sft");
    const std::size_t want = rc.size("probe_samples");
    const auto& tc = m.config().tokenizer;

    std::ofstream csv(out / "attn_diffs.csv");
    probe::write_diff_csv_header(csv);
    json grids = json::array();
    std::size_t used = 0;
    for (std::size_t i = 0; i < samples.size() && used < want; ++i) {
        const auto& s = samples[i];
        if (s.answer.find(' ') != std::string::npos) continue;  // single-word answers only
        const auto p = probe::answer_probe(m, s.image, s.instruction, s.answer);
        const auto rec = probe::record_attention(m, p.seq, p.answer, p.patches);
        const std::string id = "sample" + std::to_string(i);
        probe::write_diff_csv_rows(csv, id, probe::cross_layer_diff(rec), probe::inner_layer_diff(rec));
        json layers = json::array();
        for (std::size_t l = 0; l < rec.layers(); ++l) layers.push_back(probe::activation_map(rec, l, tc.grid_h(), tc.grid_w()));
        grids.push_back({{"sample_id", id}, {"question", s.instruction}, {"answer", s.answer}, {"layers", layers}});
        ++used;
    }
    if (used == 0) throw InputError("probe-attn: no single-word answers in '" + (data / "sft").string() + "'");
    std::ofstream(out / "activation_grids.json") << grids.dump() << '\n';
    std::cout << "probed " << used << " samples\n";
    return 0;
}

int cmd_verify(const cli::RunConfig& rc, const Options& o) {
    const auto results = verify::run_all_suites(run_seed(rc));
    std::size_t pass = 0;
    json j = json::array();
    for (const auto& r : results) {
        pass += r.passed ? 1 : 0;
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " checks=" << r.checks << ' ' << r.detail << '\n';
        j.push_back({{"suite", r.name}, {"passed", r.passed}, {"checks", r.checks}, {"worst", num(r.worst)},
                     {"detail", r.detail}});
    }
    std::cout << "PASS " << pass << '/' << results.size() << '\n';
    if (!o.out.empty()) write_json(require_out(o) / "verify.json", j);
    return pass == results.size() ? 0 : 1;
}

const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const InputError*>(&e)) return "input";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const ContractViolation*>(&e)) return "contract";
    if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return "io";
    return "internal";
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale decoupled vision-language toy: data, training, inference, probes and checks."};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "JSON object of config overrides");
    app.add_option("--seed", o.seed, "Run seed");
    app.add_option("--out", o.out, "Output directory");
    app.add_option("--ckpt", o.ckpt, "Checkpoint to read");
    app.add_option("--stage", o.stage, "Stage for training commands")->check(CLI::IsMember({"pretrain", "sft"}));
    app.add_flag("--disable-contiguous", o.disable_contiguous, "Zero the contiguous image features");
    app.add_flag("--route-specials,!--no-route-specials", o.route_specials, "Route <BOI>/<EOI> as vision tokens");
    app.add_flag("--route-output-proj,!--no-route-output-proj", o.route_output_proj, "Per-modality output projection");
    app.add_flag("--route-norms,!--no-route-norms", o.route_norms, "Per-modality norm gains");

    auto* gen = app.add_subcommand("gen-data", "Write synthetic pretrain/held-out/SFT corpora and solid images");
    auto* tok = app.add_subcommand("train-tokenizer", "Train the LFQ image tokenizer");
    auto* pre = app.add_subcommand("pretrain", "Train the backbone if needed, then the vision side");
    auto* sft = app.add_subcommand("sft", "Instruction-tune the whole model");
    auto* gen_text = app.add_subcommand("generate", "Greedy caption or answer for an image");
    auto* comp = app.add_subcommand("complete-image", "Complete the bottom half of an image");
    auto* probe_cmd = app.add_subcommand("probe-attn", "Attention-difference probes on answer tokens");
    auto* ver = app.add_subcommand("verify", "Run the oracle and invariant suites");
    for (auto* sub : {tok, pre, sft, probe_cmd}) sub->add_option("--data", o.data, "Corpus directory from gen-data");
    for (auto* sub : {gen_text, comp}) sub->add_option("--image", o.image, "Input PPM image");
    gen_text->add_option("--prompt", o.prompt, "Question; omitted for plain captioning");
    comp->add_option("--keep", o.keep, "Visible patches (default: top half)");
    (void)gen;
    (void)ver;

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n' << app.help();
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        cli::RunConfig rc;
        if (!o.config.empty()) rc.merge_file(require_file(o.config, "--config"));
        if (o.seed) rc.set("seed", std::to_string(*o.seed));
        if (o.route_specials) rc.set("route_specials", *o.route_specials ? "true" : "false");
        if (o.route_output_proj) rc.set("route_output_proj", *o.route_output_proj ? "true" : "false");
        if (o.route_norms) rc.set("route_norms", *o.route_norms ? "true" : "false");
        if (!o.out.empty()) rc.write_snapshot(o.out, command);

        if (command == "gen-data") return cmd_gen_data(rc, o);
        if (command == "train-tokenizer") return cmd_train_tokenizer(rc, o);
        if (command == "pretrain") return o.stage == "sft" ? cmd_sft(rc, o) : cmd_pretrain(rc, o);
        if (command == "sft") return cmd_sft(rc, o);
        if (command == "generate") return cmd_generate(rc, o);
        if (command == "complete-image") return cmd_complete_image(rc, o);
        if (command == "probe-attn") return cmd_probe_attn(rc, o);
        return cmd_verify(rc, o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << error_kind(e) << ": " << one_line(e.what()) << '\n';
        return 1;
    }
}
