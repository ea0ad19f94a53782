#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "libra/imgtok/tokenizer.hpp"
#include "libra/model/checkpoint.hpp"
#include "libra/routed/routed.hpp"
#include "libra/seqio/sequence.hpp"

namespace libra::model {

struct ModelConfig {
    routed::RoutedConfig routed;
    std::size_t layers = 4;
    std::size_t max_seq = 256;
    bool route_specials = true;
    imgtok::TokenizerConfig tokenizer;

    ConfigMap to_map() const;
    /// Unknown keys are ignored; malformed values raise ConfigError.
    static ModelConfig from_map(const ConfigMap& m);
    void validate() const;
};

struct ForwardResult {
    num::Tensor lang;  // L x |V_text|
    num::Tensor vis1;  // L x 2^b
    num::Tensor vis2;  // L x 2^b
};

/// Per layer, per head L x L attention probabilities.
using ModelCapture = std::vector<routed::AttentionCapture>;

enum class Stage { pretrain, sft };
Stage parse_stage(const std::string& s);
const char* stage_name(Stage s);

/// Frozen tokenizer, causal language backbone ("lm.*") and the vision side
/// ("vis.*": routed experts, bridge, hybrid input projection, embedding banks,
/// delimiter embeddings, vision norms and the two vision heads).
class LibraModel {
public:
    LibraModel(ModelConfig cfg, imgtok::LfqTokenizer tokenizer, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const seqio::Vocab& vocab() const { return vocab_; }
    const imgtok::LfqTokenizer& tokenizer() const { return tokenizer_; }
    const num::ParamStore& params() const { return params_; }
    num::ParamStore& mutable_params() { return params_; }
    seqio::SequenceOptions sequence_options() const { return {cfg_.route_specials}; }

    /// Rebuilds every vision-side tensor from the current backbone (FFN_I and
    /// vision norms copied from the language layers).
    void reinit_vision(std::uint64_t seed);

    seqio::VisionTokens vision_tokens(const imgtok::ToyImage& image) const;

    ForwardResult forward(const seqio::MultimodalSequence& seq, ModelCapture* capture = nullptr) const;
    /// Standalone backbone on text ids: plain causal layers, no routing.
    num::Tensor backbone_logits(std::span<const int> tokens) const;

    std::uint64_t backbone_checksum() const;
    std::vector<std::string> trainable_params(Stage stage) const;

    void save(const std::filesystem::path& path) const;
    /// Throws ConfigError when arrays disagree with the stored config.
    static LibraModel load(const std::filesystem::path& path);

    void set_flag(const std::string& key, const std::string& value) { extra_[key] = value; }
    std::optional<std::string> flag(const std::string& key) const;

private:
    LibraModel(ModelConfig cfg, imgtok::LfqTokenizer tokenizer, num::ParamStore params, ConfigMap extra);
    void init_backbone(Rng& rng);

    ModelConfig cfg_;
    seqio::Vocab vocab_;
    imgtok::LfqTokenizer tokenizer_;
    num::ParamStore params_;
    ConfigMap extra_;  // stage bookkeeping carried through checkpoints
};

/// Greedy decoding with the language head; stops at <EOS> or after `max_new`.
std::vector<int> generate_text(const LibraModel& model, seqio::MultimodalSequence prefix, std::size_t max_new);

struct Completion {
    std::vector<imgtok::PatchCode> codes;  // newly emitted patches
    bool eoi_predicted = false;            // language-head argmax after the last patch
};
/// Greedy image continuation with the contiguous signal disabled.
Completion complete_image(const LibraModel& model, seqio::MultimodalSequence prefix);

/// Tokenizer-only checkpoint ("tok.*" arrays and config keys).
void save_tokenizer(const std::filesystem::path& path, const imgtok::LfqTokenizer& tok);
/// Reads the tokenizer from a tokenizer-only or a full model checkpoint.
imgtok::LfqTokenizer load_tokenizer(const std::filesystem::path& path);
/// True when the file holds model arrays beyond the tokenizer.
bool is_model_checkpoint(const std::filesystem::path& path);

std::size_t argmax_row(const num::Tensor& logits, std::size_t row);

}  // namespace libra::model
