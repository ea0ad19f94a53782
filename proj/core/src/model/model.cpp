#include "libra/model/model.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>

#include "libra/error.hpp"
#include "libra/num/ops.hpp"

namespace libra::model {

using num::Tensor;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::size_t get_size(const ConfigMap& m, const std::string& key, std::size_t fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    std::size_t v = 0;
    const auto& s = it->second;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
}

bool get_bool(const ConfigMap& m, const std::string& key, bool fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + it->second + "'");
}

double get_double(const ConfigMap& m, const std::string& key, double fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(it->second);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + it->second + "'");
    }
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

std::unique_ptr<bool[]> vision_mask(const seqio::MultimodalSequence& seq) {
    std::unique_ptr<bool[]> m(new bool[seq.size()]);
    for (std::size_t i = 0; i < seq.size(); ++i) m[i] = seq.modality[i] == seqio::Modality::vision;
    return m;
}

}  // namespace

ConfigMap ModelConfig::to_map() const {
    const auto& t = tokenizer;
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {{"d_model", std::to_string(routed.d_model)},
            {"heads", std::to_string(routed.heads)},
            {"ffn_hidden", std::to_string(routed.ffn_hidden)},
            {"expert_rank", std::to_string(routed.rank())},
            {"bridge_rank", std::to_string(routed.bridge_rank)},
            {"route_output_proj", b(routed.route_output_proj)},
            {"route_norms", b(routed.route_norms)},
            {"rope_theta", fmt(routed.rope_theta)},
            {"layers", std::to_string(layers)},
            {"max_seq", std::to_string(max_seq)},
            {"route_specials", b(route_specials)},
            {"tok.image_height", std::to_string(t.image_height)},
            {"tok.image_width", std::to_string(t.image_width)},
            {"tok.patch", std::to_string(t.patch)},
            {"tok.d_c", std::to_string(t.d_c)},
            {"tok.encoder_layers", std::to_string(t.encoder_layers)},
            {"tok.encoder_heads", std::to_string(t.encoder_heads)},
            {"tok.encoder_ffn", std::to_string(t.encoder_ffn)},
            {"tok.codebook_bits", std::to_string(t.codebook_bits)},
            {"tok.d_b", std::to_string(t.d_b)},
            {"tok.decoder_width", std::to_string(t.decoder_width)},
            {"tok.decoder_layers", std::to_string(t.decoder_layers)},
            {"tok.decoder_heads", std::to_string(t.decoder_heads)},
            {"tok.decoder_ffn", std::to_string(t.decoder_ffn)}};
}

ModelConfig ModelConfig::from_map(const ConfigMap& m) {
    ModelConfig c;
    auto& r = c.routed;
    r.d_model = get_size(m, "d_model", r.d_model);
    r.heads = get_size(m, "heads", r.heads);
    r.ffn_hidden = get_size(m, "ffn_hidden", r.ffn_hidden);
    r.expert_rank = get_size(m, "expert_rank", r.expert_rank);
    r.bridge_rank = get_size(m, "bridge_rank", r.bridge_rank);
    r.route_output_proj = get_bool(m, "route_output_proj", r.route_output_proj);
    r.route_norms = get_bool(m, "route_norms", r.route_norms);
    r.rope_theta = get_double(m, "rope_theta", r.rope_theta);
    c.layers = get_size(m, "layers", c.layers);
    c.max_seq = get_size(m, "max_seq", c.max_seq);
    c.route_specials = get_bool(m, "route_specials", c.route_specials);
    auto& t = c.tokenizer;
    t.image_height = get_size(m, "tok.image_height", t.image_height);
    t.image_width = get_size(m, "tok.image_width", t.image_width);
    t.patch = get_size(m, "tok.patch", t.patch);
    t.d_c = get_size(m, "tok.d_c", t.d_c);
    t.encoder_layers = get_size(m, "tok.encoder_layers", t.encoder_layers);
    t.encoder_heads = get_size(m, "tok.encoder_heads", t.encoder_heads);
    t.encoder_ffn = get_size(m, "tok.encoder_ffn", t.encoder_ffn);
    t.codebook_bits = get_size(m, "tok.codebook_bits", t.codebook_bits);
    t.d_b = get_size(m, "tok.d_b", t.d_b);
    t.decoder_width = get_size(m, "tok.decoder_width", t.decoder_width);
    t.decoder_layers = get_size(m, "tok.decoder_layers", t.decoder_layers);
    t.decoder_heads = get_size(m, "tok.decoder_heads", t.decoder_heads);
    t.decoder_ffn = get_size(m, "tok.decoder_ffn", t.decoder_ffn);
    return c;
}

void ModelConfig::validate() const {
    routed.validate();
    tokenizer.validate();
    if (layers == 0) throw ConfigError("model: at least one layer required");
    if (max_seq == 0) throw ConfigError("model: max_seq must be positive");
}

Stage parse_stage(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "sft") return Stage::sft;
    throw ConfigError("unknown stage '" + s + "' (expected pretrain or sft)");
}

const char* stage_name(Stage s) { return s == Stage::pretrain ? "pretrain" : "sft"; }

LibraModel::LibraModel(ModelConfig cfg, imgtok::LfqTokenizer tokenizer, std::uint64_t seed)
    : cfg_(std::move(cfg)), tokenizer_(std::move(tokenizer)) {
    cfg_.validate();
    if (tokenizer_.config().patches() != cfg_.tokenizer.patches() || tokenizer_.config().d_c != cfg_.tokenizer.d_c ||
        tokenizer_.config().codebook_bits != cfg_.tokenizer.codebook_bits || tokenizer_.config().d_b != cfg_.tokenizer.d_b)
        throw ConfigError("model: tokenizer does not match the configured tokenizer shape");
    tokenizer_.freeze();
    Rng rng(seed, "model.backbone");
    init_backbone(rng);
    reinit_vision(seed);
}

LibraModel::LibraModel(ModelConfig cfg, imgtok::LfqTokenizer tokenizer, num::ParamStore params, ConfigMap extra)
    : cfg_(std::move(cfg)), tokenizer_(std::move(tokenizer)), params_(std::move(params)), extra_(std::move(extra)) {}

void LibraModel::init_backbone(Rng& rng) {
    const std::size_t D = cfg_.routed.d_model, V = static_cast<std::size_t>(vocab_.size());
    params_.add("lm.embed", {V, D}, rng.normal_vector(V * D, 1.0));
    for (std::size_t l = 0; l < cfg_.layers; ++l) routed::init_language_layer(params_, l, cfg_.routed, rng);
    params_.add("lm.final_norm", {1, D}, std::vector<double>(D, 1.0));
    params_.add("lm.head", {D, V}, rng.normal_vector(D * V, 1.0 / std::sqrt(static_cast<double>(D))));
}

void LibraModel::reinit_vision(std::uint64_t seed) {
    num::ParamStore fresh;
    for (const auto& [name, t] : params_.items())
        if (starts_with(name, "lm.")) fresh.add(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    Rng rng(seed, "model.vision");
    const auto& tc = cfg_.tokenizer;
    const std::size_t D = cfg_.routed.d_model, K = tc.codebook_size(), in = tc.hybrid_width();
    for (std::size_t l = 0; l < cfg_.layers; ++l) routed::init_vision_layer(fresh, l, cfg_.routed, rng);
    if (cfg_.routed.route_norms) {
        const auto& g = fresh.get("lm.final_norm");
        fresh.add("vis.final_norm", g.shape(), std::vector<double>(g.data().begin(), g.data().end()));
    }
    fresh.add("vis.head1", {D, K}, std::vector<double>(D * K, 0.0));
    fresh.add("vis.head2", {D, K}, std::vector<double>(D * K, 0.0));
    fresh.add("vis.proj.w", {in, D}, rng.normal_vector(in * D, 1.0 / std::sqrt(static_cast<double>(in))));
    fresh.add("vis.proj.b", {1, D}, std::vector<double>(D, 0.0));
    for (const char* bank : {"bank1", "bank2"}) {
        const auto& b = tokenizer_.params().get(bank);
        fresh.add(std::string("vis.") + bank, b.shape(), std::vector<double>(b.data().begin(), b.data().end()));
    }
    fresh.add("vis.delim", {2, D}, rng.normal_vector(2 * D, 1.0));
    params_ = std::move(fresh);
}

seqio::VisionTokens LibraModel::vision_tokens(const imgtok::ToyImage& image) const {
    return seqio::tokenize_image(tokenizer_, image);
}

ForwardResult LibraModel::forward(const seqio::MultimodalSequence& seq, ModelCapture* capture) const {
    const std::size_t L = seq.size();
    if (L == 0) throw InputError("forward: empty sequence");
    if (L > cfg_.max_seq)
        throw InputError("forward: sequence of " + std::to_string(L) + " exceeds max_seq " + std::to_string(cfg_.max_seq));
    seq.validate();
    const int V = vocab_.size();
    const std::size_t P = seq.patch_count, start = seq.image_start;

    const auto table = num::concat_rows({params_.get("lm.embed"), params_.get("vis.delim")});
    auto rows_of = [&](std::size_t from, std::size_t to) {
        std::vector<std::size_t> ids;
        for (std::size_t i = from; i < to; ++i) {
            const int t = seq.tokens[i];
            if (t < 0 || t >= V) throw ContractViolation("forward: token id " + std::to_string(t) + " out of range");
            ids.push_back(t == vocab_.boi() ? static_cast<std::size_t>(V)
                          : t == vocab_.eoi() ? static_cast<std::size_t>(V) + 1
                                              : static_cast<std::size_t>(t));
        }
        return num::gather_rows(table, ids);
    };

    Tensor x;
    if (P == 0) {
        x = rows_of(0, L);
    } else {
        const std::span<const imgtok::PatchCode> codes(seq.codes.data() + start, P);
        const auto e_d = imgtok::embed_discrete(params_.get("vis.bank1"), params_.get("vis.bank2"), codes);
        Tensor e_c;
        if (seq.disable_contiguous) {
            e_c = Tensor::zeros({P, cfg_.tokenizer.d_c});
        } else {
            if (seq.features.rows() != P || seq.features.cols() != cfg_.tokenizer.d_c)
                throw ContractViolation("forward: contiguous features of shape " + num::to_string(seq.features.shape()) +
                                        " for " + std::to_string(P) + " patches");
            e_c = seq.features;
        }
        const auto xi = imgtok::assemble_hybrid(e_c, e_d, seq.disable_contiguous, params_.get("vis.proj.w"),
                                                params_.get("vis.proj.b"));
        std::vector<Tensor> parts;
        if (start > 0) parts.push_back(rows_of(0, start));
        parts.push_back(xi);
        if (start + P < L) parts.push_back(rows_of(start + P, L));
        x = parts.size() == 1 ? parts[0] : num::concat_rows(parts);
    }

    const auto mask_storage = vision_mask(seq);
    const std::span<const bool> mask(mask_storage.get(), L);
    if (capture) capture->assign(cfg_.layers, {});
    for (std::size_t l = 0; l < cfg_.layers; ++l)
        x = routed::routed_layer(x, mask, routed::layer_view(params_, l, cfg_.routed), cfg_.routed,
                                 capture ? &(*capture)[l] : nullptr);
    const Tensor vis_norm = cfg_.routed.route_norms ? params_.get("vis.final_norm") : Tensor();
    x = routed::routed_norm(x, mask, params_.get("lm.final_norm"), vis_norm, cfg_.routed);
    return {num::matmul(x, params_.get("lm.head")), num::matmul(x, params_.get("vis.head1")),
            num::matmul(x, params_.get("vis.head2"))};
}

Tensor LibraModel::backbone_logits(std::span<const int> tokens) const {
    if (tokens.empty()) throw InputError("backbone: empty sequence");
    if (tokens.size() > cfg_.max_seq) throw InputError("backbone: sequence exceeds max_seq");
    std::vector<std::size_t> ids;
    for (int t : tokens) {
        if (t < 0 || t >= vocab_.size()) throw ContractViolation("backbone: token id " + std::to_string(t) + " out of range");
        ids.push_back(static_cast<std::size_t>(t));
    }
    auto x = num::gather_rows(params_.get("lm.embed"), ids);
    for (std::size_t l = 0; l < cfg_.layers; ++l)
        x = routed::plain_layer(x, routed::language_layer_view(params_, l), cfg_.routed);
    return num::matmul(num::rms_norm(x, params_.get("lm.final_norm")), params_.get("lm.head"));
}

std::uint64_t LibraModel::backbone_checksum() const {
    return params_.checksum([](const std::string& n) { return starts_with(n, "lm."); });
}

std::vector<std::string> LibraModel::trainable_params(Stage stage) const {
    std::vector<std::string> out;
    for (const auto& name : params_.names())
        if (stage == Stage::sft || starts_with(name, "vis.")) out.push_back(name);
    return out;
}

std::optional<std::string> LibraModel::flag(const std::string& key) const {
    auto it = extra_.find(key);
    if (it == extra_.end()) return std::nullopt;
    return it->second;
}

void LibraModel::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.config = cfg_.to_map();
    for (const auto& [k, v] : extra_) ck.config["run." + k] = v;
    for (const auto& [name, t] : params_.items())
        ck.arrays.add(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    for (const auto& [name, t] : tokenizer_.params().items())
        ck.arrays.add("tok." + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    save_checkpoint(path, ck);
}

LibraModel LibraModel::load(const std::filesystem::path& path) {
    auto ck = load_checkpoint(path);
    const auto cfg = ModelConfig::from_map(ck.config);
    cfg.validate();
    ConfigMap extra;
    for (const auto& [k, v] : ck.config)
        if (starts_with(k, "run.")) extra[k.substr(4)] = v;
    num::ParamStore model_params, tok_params;
    for (const auto& [name, t] : ck.arrays.items()) {
        auto data = std::vector<double>(t.data().begin(), t.data().end());
        if (starts_with(name, "tok."))
            tok_params.add(name.substr(4), t.shape(), std::move(data));
        else
            model_params.add(name, t.shape(), std::move(data));
    }
    imgtok::LfqTokenizer tok(cfg.tokenizer, std::move(tok_params), true);
    const LibraModel reference(cfg, tok, 0);
    for (const auto& [name, t] : reference.params().items()) {
        if (!model_params.contains(name)) throw ConfigError("checkpoint lacks array '" + name + "'");
        if (model_params.get(name).shape() != t.shape())
            throw ConfigError("checkpoint array '" + name + "' has shape " + num::to_string(model_params.get(name).shape()) +
                              " but the stored config implies " + num::to_string(t.shape()));
    }
    if (model_params.size() != reference.params().size())
        throw ConfigError("checkpoint has arrays not described by its config");
    return LibraModel(cfg, std::move(tok), std::move(model_params), std::move(extra));
}

void save_tokenizer(const std::filesystem::path& path, const imgtok::LfqTokenizer& tok) {
    Checkpoint ck;
    ModelConfig cfg;
    cfg.tokenizer = tok.config();
    for (const auto& [k, v] : cfg.to_map())
        if (starts_with(k, "tok.")) ck.config[k] = v;
    ck.config["kind"] = "tokenizer";
    for (const auto& [name, t] : tok.params().items())
        ck.arrays.add("tok." + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    save_checkpoint(path, ck);
}

imgtok::LfqTokenizer load_tokenizer(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    const auto cfg = ModelConfig::from_map(ck.config).tokenizer;
    cfg.validate();
    num::ParamStore params;
    for (const auto& [name, t] : ck.arrays.items())
        if (starts_with(name, "tok."))
            params.add(name.substr(4), t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    return imgtok::LfqTokenizer(cfg, std::move(params), true);
}

bool is_model_checkpoint(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    for (const auto& name : ck.arrays.names())
        if (!starts_with(name, "tok.")) return true;
    return false;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t n = logits.cols();
    const auto r = logits.data().subspan(row * n, n);
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (r[i] > r[best]) best = i;
    return best;
}

std::vector<int> generate_text(const LibraModel& model, seqio::MultimodalSequence prefix, std::size_t max_new) {
    num::NoGradGuard guard;
    std::vector<int> out;
    const int eos = model.vocab().eos();
    for (std::size_t i = 0; i < max_new; ++i) {
        const auto f = model.forward(prefix);
        const int next = static_cast<int>(argmax_row(f.lang, prefix.size() - 1));
        if (next == eos) break;
        out.push_back(next);
        seqio::append_text(prefix, next);
    }
    return out;
}

Completion complete_image(const LibraModel& model, seqio::MultimodalSequence prefix) {
    const std::size_t P = model.config().tokenizer.patches();
    if (prefix.image_start == 0 || prefix.size() != prefix.image_start + prefix.patch_count)
        throw InputError("complete_image: prefix must end inside an open image block");
    if (prefix.patch_count >= P) throw InputError("complete_image: prefix already holds all " + std::to_string(P) + " patches");
    prefix.disable_contiguous = true;
    num::NoGradGuard guard;
    Completion c;
    while (prefix.patch_count < P) {
        const auto f = model.forward(prefix);
        const std::size_t last = prefix.size() - 1;
        const imgtok::PatchCode code{static_cast<std::uint32_t>(argmax_row(f.vis1, last)),
                                     static_cast<std::uint32_t>(argmax_row(f.vis2, last))};
        c.codes.push_back(code);
        seqio::append_patch(prefix, code);
    }
    const auto f = model.forward(prefix);
    c.eoi_predicted = static_cast<int>(argmax_row(f.lang, prefix.size() - 1)) == model.vocab().eoi();
    return c;
}

}  // namespace libra::model
